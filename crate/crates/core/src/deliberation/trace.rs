//! The replayable record of one panel run.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::vote::{consensus_check, majority_vote};
use crate::config::PipelineStage;
use crate::extraction::{
    extract_answer_text, AnalyticalNotes, Complexity, ExtractError, Parsed, Verdict,
};
use crate::prompt::Stage;
use crate::table::{Answer, TaskKind};

/// One model call. `seq` orders calls within a run; it stands in for a
/// wall-clock timestamp so traces stay byte-identical across replays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub seq: u64,
    pub stage: Stage,
    /// 0 for the first ask, then 1.. for format re-asks.
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Parsed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub reason: String,
}

/// An agent's answer at some point of peer review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Solution {
    pub persona: String,
    pub answer: Answer,
    #[serde(default)]
    pub rationale: String,
    /// `seq` of the exchange the answer was extracted from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_seq: Option<u64>,
}

impl Solution {
    pub fn new(persona: impl Into<String>, answer: Answer) -> Self {
        Self {
            persona: persona.into(),
            answer,
            rationale: String::new(),
            source_seq: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    /// Every presented answer agreed; no deliberation rounds ran.
    UnanimousInitial,
    /// Deliberation round `round` (1-based) reached consensus.
    ConsensusRound { round: u32 },
    /// Rounds were exhausted and the answer was voted.
    MajorityVote,
    /// Peer review did not run (single agent, or one surviving agent).
    SingleAgent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceStatus {
    Complete,
    Incomplete { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub persona: String,
    pub exchanges: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<StageFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<Complexity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<AnalyticalNotes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub refinements: u32,
    /// The agent's latest answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<Solution>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliberationTrace {
    pub task_id: String,
    pub config_digest: String,
    pub stages: Vec<PipelineStage>,
    pub agents: Vec<AgentTrace>,
    #[serde(default)]
    pub presentation_order: Vec<String>,
    /// Answers after individual presentation, in presentation order.
    #[serde(default)]
    pub presentations: Vec<Solution>,
    /// Answers after each collective deliberation round.
    #[serde(default)]
    pub rounds: Vec<Vec<Solution>>,
    pub outcome: Option<Outcome>,
    pub final_answer: Option<Answer>,
    pub llm_calls: u64,
    pub status: TraceStatus,
}

impl DeliberationTrace {
    pub fn is_complete(&self) -> bool {
        self.status == TraceStatus::Complete
    }

    fn exchange(&self, persona: &str, seq: u64) -> Option<&Exchange> {
        self.agents
            .iter()
            .find(|a| a.persona == persona)?
            .exchanges
            .iter()
            .find(|e| e.seq == seq)
    }

    /// Re-extracts the deciding answers from the raw model text and applies
    /// the consensus/vote rule again, normalizing for `kind`. Returns `None`
    /// for incomplete traces.
    pub fn replay_final(&self, kind: &TaskKind) -> Option<Answer> {
        if !self.is_complete() {
            return None;
        }
        let deciding: Vec<Solution> = match (self.rounds.last(), self.presentations.is_empty()) {
            (Some(round), _) => round.clone(),
            (None, false) => self.presentations.clone(),
            (None, true) => {
                let first = self.agents.iter().find_map(|a| a.solution.clone())?;
                alloc::vec![first]
            }
        };
        let reextracted: Vec<Solution> = deciding
            .into_iter()
            .map(|mut s| {
                s.answer = match s.source_seq.and_then(|seq| self.exchange(&s.persona, seq)) {
                    Some(ex) => reextract(&ex.raw, kind),
                    None => Answer::unmapped(s.answer.raw.clone(), kind),
                };
                s
            })
            .collect();
        consensus_check(&reextracted)
            .or_else(|| majority_vote(&reextracted, &self.presentation_order))
    }
}

fn reextract(raw: &str, kind: &TaskKind) -> Answer {
    match extract_answer_text(raw) {
        Ok(text) => Answer::unmapped(text, kind),
        Err(ExtractError::Format { .. }) | Err(ExtractError::Unmappable(_)) => {
            Answer::unmapped("", kind)
        }
    }
}
