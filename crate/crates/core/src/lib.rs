//! Multi-persona table reasoning: table model, answer normalization,
//! prompt rendering, output extraction, the deliberation engine and scoring.
//! Everything here is `no_std` with `alloc`; IO lives in the companion
//! crate.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backend;
pub mod config;
pub mod deliberation;
pub mod extraction;
pub mod metrics;
pub mod personas;
pub mod prompt;
pub mod table;

pub use backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, Role};
pub use config::{ablation_presets, preset, PipelineConfig, PipelineStage, PRESET_NAMES};
pub use deliberation::{
    consensus_check, majority_vote, DeliberationTrace, Engine, Outcome, PanelError,
    RequestSettings, Solution,
};
pub use personas::{alternative_panel, default_panel, random_panel, Panel, Persona};
pub use prompt::{TemplateSet, TemplateSlot};
pub use table::{Answer, ContextPassages, Query, Table, TaskInstance, TaskKind};
