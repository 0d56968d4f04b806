//! The panel state machine: investigation, self-review and peer review with
//! consensus detection and majority-vote fallback.
//!
//! A run is strictly sequential. Agents go through investigation (or a
//! direct solve) and self-review one at a time in panel order, then present
//! in a seeded random order. Each agent keeps its own message history
//! across stages; other agents only ever see presented answers.

mod trace;
mod vote;

pub use trace::{
    AgentTrace, DeliberationTrace, Exchange, Outcome, Solution, StageFailure, TraceStatus,
};
pub use vote::{consensus_check, majority_vote};

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest, RequestError};
use crate::config::{ConfigError, PipelineConfig, PipelineStage};
use crate::extraction::{
    extract_answer_text, extract_assessment, extract_position, extract_rationale,
    extract_verdict, AnalyticalNotes, Complexity, ExtractError, Parsed, Verdict,
};
use crate::personas::Persona;
use crate::prompt::{render_prompt, task_description, Bindings, PromptError, TemplateSet, TemplateSlot};
use crate::table::{flatten_table, Answer, TaskInstance, TaskKind};

/// Model settings copied into every request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestSettings {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            model_name: "deepseek-chat".into(),
            temperature: 1.0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("{} stage failed: {}", .0.stage.as_str(), .0.reason)]
    Failed(StageFailure),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Request(#[from] RequestError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PanelError {
    #[error("invalid config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Request(#[from] RequestError),
    #[error("run aborted: {source}")]
    Aborted {
        source: BackendError,
        trace: Box<DeliberationTrace>,
    },
    #[error("no agent produced a solution")]
    NoSolution { trace: Box<DeliberationTrace> },
}

impl PanelError {
    /// The partial trace, when the run got far enough to have one.
    pub fn trace(&self) -> Option<&DeliberationTrace> {
        match self {
            PanelError::Aborted { trace, .. } | PanelError::NoSolution { trace } => Some(trace),
            _ => None,
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, PanelError::Aborted { .. })
    }
}

/// Per-agent working state for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub persona: Persona,
    /// Process memory: user/assistant messages from earlier stages.
    pub history: Vec<ChatMessage>,
    pub complexity: Option<Complexity>,
    pub notes: Option<AnalyticalNotes>,
    pub current_solution: Option<Answer>,
    pub rationale: String,
    pub solution_seq: Option<u64>,
    pub verdict: Option<Verdict>,
    pub refinements: u32,
    /// Set when a peer-review stage failed; the answer no longer changes.
    pub frozen: bool,
    pub exchanges: Vec<Exchange>,
    pub failures: Vec<StageFailure>,
}

impl AgentState {
    pub fn new(persona: Persona) -> Self {
        Self {
            persona,
            history: Vec::new(),
            complexity: None,
            notes: None,
            current_solution: None,
            rationale: String::new(),
            solution_seq: None,
            verdict: None,
            refinements: 0,
            frozen: false,
            exchanges: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn solution(&self) -> Option<Solution> {
        let answer = self.current_solution.clone()?;
        Some(Solution {
            persona: self.persona.name().to_string(),
            answer,
            rationale: self.rationale.clone(),
            source_seq: self.solution_seq,
        })
    }

    fn set_solution(&mut self, answer: Answer, rationale: String, seq: u64) {
        self.current_solution = Some(answer);
        self.rationale = rationale;
        self.solution_seq = Some(seq);
    }

    fn into_trace(self) -> AgentTrace {
        let solution = self.solution();
        AgentTrace {
            persona: self.persona.name().to_string(),
            exchanges: self.exchanges,
            failures: self.failures,
            complexity: self.complexity,
            notes: self.notes,
            verdict: self.verdict,
            refinements: self.refinements,
            solution,
            frozen: self.frozen,
        }
    }
}

/// Backend, templates and request settings shared by many runs.
pub struct Engine<'a, B: ChatBackend + ?Sized> {
    pub backend: &'a B,
    pub templates: &'a TemplateSet,
    pub settings: RequestSettings,
}

impl<'a, B: ChatBackend + ?Sized> Engine<'a, B> {
    pub fn new(backend: &'a B, templates: &'a TemplateSet) -> Self {
        Self {
            backend,
            templates,
            settings: RequestSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: RequestSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn session<'s>(&'s self, task: &'s TaskInstance, config: &'s PipelineConfig) -> Session<'s, B> {
        Session {
            backend: self.backend,
            templates: self.templates,
            settings: &self.settings,
            task,
            config,
            flattened: flatten_table(&task.table, &task.context),
            description: task_description(&task.kind),
            calls: 0,
            seq: 0,
            presentation_order: Vec::new(),
            presentations: Vec::new(),
            rounds: Vec::new(),
        }
    }

    /// Runs the configured stages for one task and returns its trace.
    pub fn run_panel(
        &self,
        task: &TaskInstance,
        config: &PipelineConfig,
    ) -> Result<DeliberationTrace, PanelError> {
        config.validate()?;
        let mut session = self.session(task, config);
        let mut agents: Vec<AgentState> = config
            .panel
            .members()
            .iter()
            .cloned()
            .map(AgentState::new)
            .collect();
        match session.drive(&mut agents) {
            Ok((outcome, answer)) => Ok(session.finish(agents, Some(outcome), Some(answer), TraceStatus::Complete)),
            Err(StepError::Backend(source)) => {
                let trace = session.finish(
                    agents,
                    None,
                    None,
                    TraceStatus::Incomplete {
                        reason: source.to_string(),
                    },
                );
                Err(PanelError::Aborted {
                    source,
                    trace: Box::new(trace),
                })
            }
            Err(StepError::Failed(_)) => {
                let trace = session.finish(
                    agents,
                    None,
                    None,
                    TraceStatus::Incomplete {
                        reason: "no agent produced a solution".into(),
                    },
                );
                Err(PanelError::NoSolution {
                    trace: Box::new(trace),
                })
            }
            Err(StepError::Prompt(e)) => Err(PanelError::Prompt(e)),
            Err(StepError::Request(e)) => Err(PanelError::Request(e)),
        }
    }
}

/// State of one task's run. Exposes the individual stages so they can be
/// driven step by step.
pub struct Session<'s, B: ChatBackend + ?Sized> {
    backend: &'s B,
    templates: &'s TemplateSet,
    settings: &'s RequestSettings,
    task: &'s TaskInstance,
    config: &'s PipelineConfig,
    flattened: String,
    description: String,
    calls: u64,
    seq: u64,
    presentation_order: Vec<String>,
    presentations: Vec<Solution>,
    rounds: Vec<Vec<Solution>>,
}

fn lower_first(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn format_notes(notes: &AnalyticalNotes) -> String {
    if notes.points.is_empty() {
        return "- (none)".into();
    }
    notes
        .points
        .iter()
        .map(|p| format!("- {p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_solutions(solutions: &[Solution], empty: &str) -> String {
    if solutions.is_empty() {
        return empty.into();
    }
    solutions
        .iter()
        .map(|s| {
            if s.rationale.is_empty() {
                format!("- {}: {}", s.persona, s.answer.raw)
            } else {
                format!("- {}: {} (rationale: {})", s.persona, s.answer.raw, s.rationale)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extracts an answer; on the final attempt an off-label fact-verification
/// answer is kept as a dissenting vote instead of failing the stage.
fn answer_or_unmapped(raw: &str, kind: &TaskKind, accept_unmapped: bool) -> Result<Answer, ExtractError> {
    let text = extract_answer_text(raw)?;
    match Answer::new(text, kind) {
        Ok(a) => Ok(a),
        Err(_) if accept_unmapped => Ok(Answer::unmapped(text, kind)),
        Err(e) => Err(e.into()),
    }
}

fn task_seed(seed: u64, task_id: &str) -> u64 {
    // FNV-1a over the task id, so each task gets its own order
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

impl<'s, B: ChatBackend + ?Sized> Session<'s, B> {
    /// Model calls issued so far, re-asks and failed calls included.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn presentation_order(&self) -> &[String] {
        &self.presentation_order
    }

    pub fn presentations(&self) -> &[Solution] {
        &self.presentations
    }

    pub fn rounds(&self) -> &[Vec<Solution>] {
        &self.rounds
    }

    fn bindings(&self, agent: &AgentState, extra: Vec<(&str, String)>) -> Bindings {
        let mut b = Bindings::new();
        b.insert("persona".into(), agent.persona.name().into());
        b.insert("focus".into(), lower_first(agent.persona.focus()));
        b.insert("task_description".into(), self.description.clone());
        b.insert("flattened_input".into(), self.flattened.clone());
        b.insert("query".into(), self.task.query.as_str().into());
        for (k, v) in extra {
            b.insert(k.into(), v);
        }
        b
    }

    /// One atomic prompt with format re-asks. `parse` gets the reply and
    /// whether this is the last attempt.
    fn exchange<T>(
        &mut self,
        agent: &mut AgentState,
        slot: TemplateSlot,
        extra: Vec<(&str, String)>,
        round: Option<u32>,
        parse: impl Fn(&str, bool) -> Result<(T, Parsed), ExtractError>,
    ) -> Result<(T, u64), StepError> {
        let stage = slot.stage();
        let bindings = self.bindings(agent, extra);
        let mut rendered = render_prompt(self.templates.get(slot), &bindings)?.into_iter();
        let system = rendered.next().expect("system message");
        let mut user = rendered.next().expect("user message");
        let attempts = self.config.format_retry + 1;
        for attempt in 0..attempts {
            let last = attempt + 1 == attempts;
            let mut messages = Vec::with_capacity(agent.history.len() + 2);
            messages.push(system.clone());
            messages.extend(agent.history.iter().cloned());
            messages.push(user.clone());
            let request = ChatRequest::new(
                messages,
                self.settings.model_name.clone(),
                self.settings.temperature,
                self.settings.max_tokens,
            )?;
            let seq = self.seq;
            self.seq += 1;
            self.calls += 1;
            let mut record = Exchange {
                seq,
                stage,
                attempt,
                round,
                raw: String::new(),
                parsed: None,
                error: None,
            };
            let reply = match self.backend.complete(&request) {
                Ok(r) => r,
                Err(e) => {
                    record.error = Some(e.to_string());
                    agent.exchanges.push(record);
                    return Err(e.into());
                }
            };
            agent.history.push(user);
            agent.history.push(ChatMessage::assistant(if reply.is_empty() {
                "(empty reply)".to_string()
            } else {
                reply.clone()
            }));
            record.raw = reply;
            match parse(&record.raw, last) {
                Ok((value, parsed)) => {
                    record.parsed = Some(parsed);
                    agent.exchanges.push(record);
                    return Ok((value, seq));
                }
                Err(e) => {
                    let reason = e.to_string();
                    record.error = Some(reason.clone());
                    agent.exchanges.push(record);
                    if last {
                        return Err(StepError::Failed(StageFailure { stage, reason }));
                    }
                    user = ChatMessage::user(format!(
                        "Your previous reply could not be parsed ({reason}). Reply again using exactly this format:\n{}",
                        stage.contract()
                    ));
                }
            }
        }
        unreachable!("format_retry + 1 >= 1 attempts")
    }

    fn solve(&mut self, agent: &mut AgentState, slot: TemplateSlot, extra: Vec<(&str, String)>) -> Result<(), StepError> {
        let kind = &self.task.kind;
        let (answer, seq) = self.exchange(agent, slot, extra, None, |raw, last| {
            let answer = answer_or_unmapped(raw, kind, last)?;
            Ok((answer.clone(), Parsed::Solution { answer }))
        })?;
        agent.set_solution(answer, String::new(), seq);
        Ok(())
    }

    /// Assessment followed by solution formulation: two calls on the happy
    /// path.
    pub fn investigate(&mut self, agent: &mut AgentState) -> Result<(), StepError> {
        let ((complexity, notes), _) =
            self.exchange(agent, TemplateSlot::Assess, Vec::new(), None, |raw, _| {
                let (c, n) = extract_assessment(raw)?;
                Ok(((c, n.clone()), Parsed::Assessment { complexity: c, notes: n }))
            })?;
        let extra = alloc::vec![
            ("complexity", complexity.as_str().to_string()),
            ("notes", format_notes(&notes)),
        ];
        agent.complexity = Some(complexity);
        agent.notes = Some(notes);
        self.solve(agent, TemplateSlot::Solve, extra)
    }

    /// A single solve prompt with no prior assessment.
    pub fn direct_solve(&mut self, agent: &mut AgentState) -> Result<(), StepError> {
        self.solve(agent, TemplateSlot::SolveDirect, Vec::new())
    }

    fn verify(&mut self, agent: &mut AgentState) -> Result<Verdict, StepError> {
        let prior = agent
            .current_solution
            .as_ref()
            .map(|a| a.raw.clone())
            .unwrap_or_default();
        let (verdict, _) = self.exchange(
            agent,
            TemplateSlot::Verify,
            alloc::vec![("prior_solution", prior)],
            None,
            |raw, _| {
                let v = extract_verdict(raw)?;
                Ok((v, Parsed::Review { verdict: v }))
            },
        )?;
        Ok(verdict)
    }

    /// Verify, and while the verdict is uncertain and refinements remain,
    /// solve again and re-verify. Stage failures keep the last good solution
    /// with an uncertain verdict; only backend errors propagate.
    pub fn self_review(&mut self, agent: &mut AgentState) -> Result<(), StepError> {
        if agent.current_solution.is_none() {
            return Ok(());
        }
        let mut stalled = false;
        let mut verdict = match self.verify(agent) {
            Ok(v) => v,
            Err(StepError::Failed(f)) => {
                agent.failures.push(f);
                stalled = true;
                Verdict::Uncertain
            }
            Err(e) => return Err(e),
        };
        while !stalled && verdict == Verdict::Uncertain && agent.refinements < self.config.t_max_self {
            agent.refinements += 1;
            // refinement always reassesses, even when the first solve was direct
            let step = self.investigate(agent).and_then(|()| self.verify(agent));
            match step {
                Ok(v) => verdict = v,
                Err(StepError::Failed(f)) => {
                    agent.failures.push(f);
                    verdict = Verdict::Uncertain;
                    stalled = true;
                }
                Err(e) => return Err(e),
            }
        }
        agent.verdict = Some(verdict);
        Ok(())
    }

    /// Individual presentation in seeded random order, then up to
    /// `t_max_panel` deliberation rounds, then a vote. Agents without a
    /// solution do not take part.
    pub fn peer_review(&mut self, agents: &mut [AgentState]) -> Result<(Outcome, Answer), StepError> {
        let kind = self.task.kind.clone();
        let mut order: Vec<usize> = (0..agents.len())
            .filter(|&i| agents[i].current_solution.is_some())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(self.config.ordering_seed, &self.task.id));
        order.shuffle(&mut rng);
        self.presentation_order = order
            .iter()
            .map(|&i| agents[i].persona.name().to_string())
            .collect();
        self.presentations.clear();
        self.rounds.clear();

        for &i in &order {
            let peers = format_solutions(&self.presentations, "(none yet; you are the first to present)");
            let agent = &mut agents[i];
            let prior = agent.current_solution.as_ref().map(|a| a.raw.clone()).unwrap_or_default();
            let result = self.exchange(
                agent,
                TemplateSlot::Present,
                alloc::vec![("prior_solution", prior), ("peer_solutions", peers)],
                None,
                |raw, last| {
                    let answer = answer_or_unmapped(raw, &kind, last)?;
                    let rationale = extract_rationale(raw);
                    Ok((
                        (answer.clone(), rationale.clone()),
                        Parsed::Presentation { answer, rationale },
                    ))
                },
            );
            match result {
                Ok(((answer, rationale), seq)) => agent.set_solution(answer, rationale, seq),
                Err(StepError::Failed(f)) => {
                    agent.failures.push(f);
                    agent.frozen = true;
                }
                Err(e) => return Err(e),
            }
            if let Some(s) = agent.solution() {
                self.presentations.push(s);
            }
        }

        if let Some(answer) = consensus_check(&self.presentations) {
            return Ok((Outcome::UnanimousInitial, answer));
        }

        for round in 1..=self.config.t_max_panel {
            let previous = self.rounds.last().unwrap_or(&self.presentations);
            let peers = format_solutions(previous, "(none)");
            let mut current = Vec::with_capacity(order.len());
            for &i in &order {
                let agent = &mut agents[i];
                if !agent.frozen {
                    let prior = agent.current_solution.as_ref().map(|a| a.raw.clone()).unwrap_or_default();
                    let result = self.exchange(
                        agent,
                        TemplateSlot::Deliberate,
                        alloc::vec![("prior_solution", prior), ("peer_solutions", peers.clone())],
                        Some(round),
                        |raw, last| {
                            let changed = extract_position(raw)?;
                            let answer = answer_or_unmapped(raw, &kind, last)?;
                            let rationale = extract_rationale(raw);
                            Ok((
                                (answer.clone(), rationale.clone()),
                                Parsed::Deliberation { answer, changed, rationale },
                            ))
                        },
                    );
                    match result {
                        Ok(((answer, rationale), seq)) => agent.set_solution(answer, rationale, seq),
                        Err(StepError::Failed(f)) => {
                            agent.failures.push(f);
                            agent.frozen = true;
                        }
                        Err(e) => {
                            self.rounds.push(current);
                            return Err(e);
                        }
                    }
                }
                if let Some(s) = agent.solution() {
                    current.push(s);
                }
            }
            self.rounds.push(current);
            if let Some(answer) = consensus_check(self.rounds.last().expect("just pushed")) {
                return Ok((Outcome::ConsensusRound { round }, answer));
            }
        }

        let last = self.rounds.last().expect("t_max_panel >= 1");
        let answer = majority_vote(last, &self.presentation_order).expect("non-empty round");
        Ok((Outcome::MajorityVote, answer))
    }

    /// Every stage of the config, in order. A `Failed` error here means no
    /// agent ended up with a solution.
    fn drive(&mut self, agents: &mut [AgentState]) -> Result<(Outcome, Answer), StepError> {
        let mut last_failure = None;
        for agent in agents.iter_mut() {
            let solved = if self.config.has(PipelineStage::Investigation) {
                self.investigate(agent)
            } else {
                self.direct_solve(agent)
            };
            match solved {
                Ok(()) => {}
                Err(StepError::Failed(f)) => {
                    agent.failures.push(f.clone());
                    last_failure = Some(f);
                    continue;
                }
                Err(e) => return Err(e),
            }
            if self.config.has(PipelineStage::SelfReview) {
                self.self_review(agent)?;
            }
        }

        let with_solution = agents.iter().filter(|a| a.current_solution.is_some()).count();
        if with_solution == 0 {
            return Err(StepError::Failed(last_failure.unwrap_or(StageFailure {
                stage: crate::prompt::Stage::Solve,
                reason: "no agent produced a solution".into(),
            })));
        }
        if self.config.has(PipelineStage::PeerReview) && with_solution >= 2 {
            return self.peer_review(agents);
        }
        let answer = agents
            .iter()
            .find_map(|a| a.current_solution.clone())
            .expect("at least one solution");
        Ok((Outcome::SingleAgent, answer))
    }

    fn finish(
        self,
        agents: Vec<AgentState>,
        outcome: Option<Outcome>,
        final_answer: Option<Answer>,
        status: TraceStatus,
    ) -> DeliberationTrace {
        DeliberationTrace {
            task_id: self.task.id.clone(),
            config_digest: self.config.digest(),
            stages: self.config.stages.iter().copied().collect(),
            agents: agents.into_iter().map(AgentState::into_trace).collect(),
            presentation_order: self.presentation_order,
            presentations: self.presentations,
            rounds: self.rounds,
            outcome,
            final_answer,
            llm_calls: self.calls,
            status,
        }
    }
}
