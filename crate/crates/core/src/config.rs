//! Pipeline configuration and the named ablation presets.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::personas::{alternative_panel, default_panel, random_panel, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStage {
    Investigation,
    SelfReview,
    PeerReview,
}

impl PipelineStage {
    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Investigation => "INVESTIGATION",
            PipelineStage::SelfReview => "SELF_REVIEW",
            PipelineStage::PeerReview => "PEER_REVIEW",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroIterations(&'static str),
    #[error("a panel of {0} agents needs the PEER_REVIEW stage")]
    PanelWithoutPeerReview(usize),
    #[error("unknown preset {name:?}; valid presets: {}", PRESET_NAMES.join(", "))]
    UnknownPreset { name: String },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: BTreeSet<PipelineStage>,
    /// Cap on self-review refinement iterations.
    #[serde(default = "one")]
    pub t_max_self: u32,
    /// Cap on collective deliberation rounds.
    #[serde(default = "one")]
    pub t_max_panel: u32,
    pub panel: Panel,
    #[serde(default)]
    pub ordering_seed: u64,
    /// Re-asks allowed per stage when a reply does not match its format.
    #[serde(default = "one")]
    pub format_retry: u32,
}

impl PipelineConfig {
    pub fn new(stages: impl IntoIterator<Item = PipelineStage>, panel: Panel) -> Self {
        Self {
            stages: stages.into_iter().collect(),
            t_max_self: 1,
            t_max_panel: 1,
            panel,
            ordering_seed: 0,
            format_retry: 1,
        }
    }

    pub fn has(&self, stage: PipelineStage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.t_max_self == 0 {
            return Err(ConfigError::ZeroIterations("t_max_self"));
        }
        if self.t_max_panel == 0 {
            return Err(ConfigError::ZeroIterations("t_max_panel"));
        }
        if !self.has(PipelineStage::PeerReview) && self.panel.len() != 1 {
            return Err(ConfigError::PanelWithoutPeerReview(self.panel.len()));
        }
        Ok(())
    }

    /// Stable short digest over every field that affects a run.
    pub fn digest(&self) -> String {
        let mut canon = String::new();
        let stages: Vec<&str> = self.stages.iter().map(|s| s.as_str()).collect();
        let _ = write!(
            canon,
            "stages={};t_max_self={};t_max_panel={};seed={};format_retry={};panel=",
            stages.join(","),
            self.t_max_self,
            self.t_max_panel,
            self.ordering_seed,
            self.format_retry
        );
        for m in self.panel.members() {
            let _ = write!(
                canon,
                "{}:{}{}:{}",
                m.name().len(),
                m.name(),
                m.focus().len(),
                m.focus()
            );
        }
        let hash = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(16);
        for b in hash.iter().take(8) {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

/// Preset names in ablation-table order.
pub const PRESET_NAMES: [&str; 10] = [
    "vanilla",
    "vanilla+self",
    "vanilla+peer",
    "vanilla+self+peer",
    "investigation",
    "investigation+self",
    "investigation+peer",
    "paneltr",
    "paneltr-random-role",
    "paneltr-alt-role",
];

/// Builds one preset. `seed` becomes the ordering seed and, for the
/// random-role preset, the panel-sampling seed.
pub fn preset(name: &str, seed: u64) -> Result<PipelineConfig, ConfigError> {
    use PipelineStage::*;
    let scientists = default_panel();
    let single = scientists.first_only();
    let mut config = match name {
        "vanilla" => PipelineConfig::new([], single),
        "vanilla+self" => PipelineConfig::new([SelfReview], single),
        "vanilla+peer" => PipelineConfig::new([PeerReview], scientists),
        "vanilla+self+peer" => PipelineConfig::new([SelfReview, PeerReview], scientists),
        "investigation" => PipelineConfig::new([Investigation], single),
        "investigation+self" => PipelineConfig::new([Investigation, SelfReview], single),
        "investigation+peer" => PipelineConfig::new([Investigation, PeerReview], scientists),
        "paneltr" => PipelineConfig::new([Investigation, SelfReview, PeerReview], scientists),
        "paneltr-random-role" => {
            let panel = random_panel(seed, &scientists).expect("five-member pool");
            PipelineConfig::new([Investigation, SelfReview, PeerReview], panel)
        }
        "paneltr-alt-role" => {
            PipelineConfig::new([Investigation, SelfReview, PeerReview], alternative_panel())
        }
        _ => {
            return Err(ConfigError::UnknownPreset {
                name: name.to_string(),
            })
        }
    };
    config.ordering_seed = seed;
    Ok(config)
}

/// All ten presets, in declaration order.
pub fn ablation_presets_seeded(seed: u64) -> Vec<(String, PipelineConfig)> {
    PRESET_NAMES
        .iter()
        .map(|&n| (n.to_string(), preset(n, seed).expect("known preset")))
        .collect()
}

pub fn ablation_presets() -> Vec<(String, PipelineConfig)> {
    ablation_presets_seeded(0)
}
