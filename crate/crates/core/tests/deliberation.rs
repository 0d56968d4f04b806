use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use panel_core::backend::{BackendError, ChatBackend, ChatRequest};
use panel_core::config::{preset, PipelineConfig, PipelineStage};
use panel_core::deliberation::{
    consensus_check, majority_vote, AgentState, Engine, Outcome, PanelError, Solution,
};
use panel_core::extraction::{Complexity, Verdict};
use panel_core::personas::{default_panel, Panel, Persona};
use panel_core::prompt::{Stage, TemplateSet};
use panel_core::table::{Answer, ContextPassages, Query, Table, TaskInstance, TaskKind};
use proptest::prelude::*;

/// Replies in order from a fixed list.
struct Queue {
    replies: Mutex<VecDeque<String>>,
    calls: AtomicU64,
}

impl Queue {
    fn new(replies: &[&str]) -> Self {
        Self {
            replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
            calls: AtomicU64::new(0),
        }
    }
}

impl ChatBackend for Queue {
    fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or(BackendError::ScriptExhausted)
    }

    fn count_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Replies computed from (stage, persona, request).
struct Responder<F> {
    f: F,
    calls: AtomicU64,
}

fn responder<F>(f: F) -> Responder<F>
where
    F: Fn(Stage, &str, &ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    Responder {
        f,
        calls: AtomicU64::new(0),
    }
}

fn stage_of(req: &ChatRequest) -> Stage {
    let sys = req.system_prompt();
    for s in [Stage::Deliberate, Stage::Present, Stage::Verify, Stage::Assess, Stage::Solve] {
        if sys.contains(s.contract()) {
            return s;
        }
    }
    panic!("no contract in system prompt")
}

fn persona_of(req: &ChatRequest) -> String {
    let sys = req.system_prompt();
    let rest = sys.strip_prefix("You are ").unwrap();
    rest[..rest.find(',').unwrap()].to_string()
}

impl<F> ChatBackend for Responder<F>
where
    F: Fn(Stage, &str, &ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(stage_of(req), &persona_of(req), req)
    }

    fn count_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

fn qa_task() -> TaskInstance {
    TaskInstance {
        id: "t1".into(),
        table: Table::new(
            None,
            vec!["Year".into(), "Revenue".into()],
            vec![vec!["2019".into(), "100".into()], vec!["2020".into(), "120".into()]],
        )
        .unwrap(),
        context: ContextPassages::default(),
        query: Query::new("What was revenue in 2020?").unwrap(),
        kind: TaskKind::QaFreeform,
        gold: None,
        evidence: None,
    }
}

fn verify_task() -> TaskInstance {
    TaskInstance {
        kind: TaskKind::fact_verify(["Entailed", "Refuted", "Unknown"]).unwrap(),
        query: Query::new("Revenue fell in 2020.").unwrap(),
        ..qa_task()
    }
}

fn einstein() -> Persona {
    default_panel().members()[0].clone()
}

fn single(stages: &[PipelineStage]) -> PipelineConfig {
    PipelineConfig::new(stages.iter().copied(), default_panel().first_only())
}

fn answer(s: &str) -> Answer {
    Answer::new(s, &TaskKind::QaFreeform).unwrap()
}

fn sol(p: &str, a: &str) -> Solution {
    Solution::new(p, answer(a))
}

#[test]
fn investigate_records_assessment_and_solution() {
    let backend = Queue::new(&["COMPLEXITY: intermediate\nNOTES:\n- unit standardization", "ANSWER: 120"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let task = qa_task();
    let config = single(&[PipelineStage::Investigation]);
    let mut s = engine.session(&task, &config);
    let mut agent = AgentState::new(einstein());
    s.investigate(&mut agent).unwrap();
    assert_eq!(agent.complexity, Some(Complexity::Intermediate));
    assert_eq!(agent.notes.as_ref().unwrap().points, ["unit standardization"]);
    assert_eq!(agent.current_solution.unwrap().raw, "120");
    assert_eq!(s.calls(), 2);
    // both exchanges went into process memory
    assert_eq!(agent.history.len(), 4);
}

#[test]
fn investigate_basic_label() {
    let backend = Queue::new(&["COMPLEXITY: basic\nNOTES:", "ANSWER: Refuted"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let task = verify_task();
    let config = single(&[PipelineStage::Investigation]);
    let mut s = engine.session(&task, &config);
    let mut agent = AgentState::new(einstein());
    s.investigate(&mut agent).unwrap();
    assert_eq!(agent.complexity, Some(Complexity::Basic));
    assert_eq!(agent.current_solution.unwrap().normalized, "refuted");
}

#[test]
fn investigate_garbage_fails_stage() {
    let backend = Queue::new(&["garbage", "garbage"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let task = qa_task();
    let mut config = single(&[PipelineStage::Investigation]);
    config.format_retry = 0;
    let err = engine.run_panel(&task, &config).unwrap_err();
    let PanelError::NoSolution { trace } = err else { panic!("{err:?}") };
    assert_eq!(trace.agents[0].failures[0].stage, Stage::Assess);
    assert_eq!(trace.llm_calls, 1);
    assert!(!trace.is_complete());
}

#[test]
fn direct_solve_single_call() {
    let backend = Queue::new(&["ANSWER: 42"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &single(&[])).unwrap();
    assert_eq!(trace.llm_calls, 1);
    assert_eq!(trace.final_answer.unwrap().raw, "42");
    assert_eq!(trace.outcome, Some(Outcome::SingleAgent));
}

#[test]
fn direct_solve_reasks_on_missing_marker() {
    let backend = Queue::new(&["no marker", "ANSWER: 7"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &single(&[])).unwrap();
    assert_eq!(trace.llm_calls, 2);
    assert_eq!(trace.final_answer.unwrap().raw, "7");
    let ex = &trace.agents[0].exchanges;
    assert_eq!((ex[0].attempt, ex[1].attempt), (0, 1));
    assert!(ex[0].error.is_some());
    // the re-ask restates the format
    let reasks = backend.replies.lock().unwrap().len();
    assert_eq!(reasks, 0);
}

fn self_review_run(t_max_self: u32, replies: &[&str]) -> (AgentState, u64) {
    let mut script = vec!["COMPLEXITY: basic\nNOTES:", "ANSWER: 5"];
    script.extend_from_slice(replies);
    let backend = Queue::new(&script);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let task = qa_task();
    let mut config = single(&[PipelineStage::Investigation, PipelineStage::SelfReview]);
    config.t_max_self = t_max_self;
    let mut s = engine.session(&task, &config);
    let mut agent = AgentState::new(einstein());
    s.investigate(&mut agent).unwrap();
    let before = s.calls();
    s.self_review(&mut agent).unwrap();
    let used = s.calls() - before;
    (agent, used)
}

#[test]
fn validated_stops_after_one_call() {
    let (agent, calls) = self_review_run(1, &["VERDICT: validated"]);
    assert_eq!(calls, 1);
    assert_eq!(agent.current_solution.unwrap().raw, "5");
    assert_eq!(agent.verdict, Some(Verdict::Validated));
}

#[test]
fn cap_keeps_latest_solution_when_uncertain() {
    let (agent, calls) = self_review_run(
        1,
        &["VERDICT: uncertain", "COMPLEXITY: basic\nNOTES:", "ANSWER: 7", "VERDICT: uncertain"],
    );
    assert_eq!(calls, 4);
    assert_eq!(agent.current_solution.unwrap().raw, "7");
    assert_eq!(agent.verdict, Some(Verdict::Uncertain));
    assert_eq!(agent.refinements, 1);
}

#[test]
fn refinement_stops_on_validated() {
    let (agent, calls) = self_review_run(
        2,
        &["VERDICT: uncertain", "COMPLEXITY: basic\nNOTES:", "ANSWER: 7", "VERDICT: validated"],
    );
    assert_eq!(calls, 4);
    assert_eq!(agent.refinements, 1);
    assert_eq!(agent.verdict, Some(Verdict::Validated));
}

#[test]
fn refinement_failure_keeps_last_good_solution() {
    let backend = Queue::new(&[
        "COMPLEXITY: basic\nNOTES:",
        "ANSWER: 5",
        "VERDICT: uncertain",
        "COMPLEXITY: basic\nNOTES:",
        "nonsense",
        "still nonsense",
    ]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let config = single(&[PipelineStage::Investigation, PipelineStage::SelfReview]);
    let trace = engine.run_panel(&qa_task(), &config).unwrap();
    let agent = &trace.agents[0];
    assert_eq!(agent.solution.as_ref().unwrap().answer.raw, "5");
    assert_eq!(agent.verdict, Some(Verdict::Uncertain));
    assert_eq!(agent.failures[0].stage, Stage::Solve);
    assert_eq!(trace.final_answer.unwrap().raw, "5");
}

#[test]
fn consensus_on_normalized_labels() {
    let kind = TaskKind::fact_verify(["Entailed", "Refuted", "Unknown"]).unwrap();
    let a = |s: &str| Answer::new(s, &kind).unwrap();
    let sols = vec![
        Solution::new("E", a("Refuted")),
        Solution::new("N", a("refuted")),
        Solution::new("M", a("REFUTED.")),
    ];
    assert_eq!(consensus_check(&sols).unwrap().normalized, "refuted");
    let all: Vec<_> = ["E", "N", "M", "A", "T"].iter().map(|p| sol(p, "B-1")).collect();
    assert_eq!(consensus_check(&all).unwrap().raw, "B-1");
    assert_eq!(consensus_check(&[sol("E", "5"), sol("N", "6")]), None);
}

#[test]
fn majority_vote_examples() {
    let order: Vec<String> = ["E", "N", "M", "A", "T"].iter().map(|s| s.to_string()).collect();
    let v = |answers: [&str; 5]| {
        let sols: Vec<_> = order.iter().zip(answers).map(|(p, a)| sol(p, a)).collect();
        majority_vote(&sols, &order).unwrap().raw
    };
    assert_eq!(v(["A", "A", "A", "B", "C"]), "A");
    assert_eq!(v(["A", "A", "B", "B", "C"]), "A");
    assert_eq!(v(["B", "A", "A", "B", "C"]), "B");
    assert_eq!(majority_vote(&[sol("E", "X")], &order).unwrap().raw, "X");
}

fn scripted_peer(
    presents: [&'static str; 5],
    rounds: Vec<[&'static str; 5]>,
) -> impl Fn(Stage, &str, &ChatRequest) -> Result<String, BackendError> + Send + Sync {
    let names: Vec<String> = default_panel().members().iter().map(|p| p.name().to_string()).collect();
    move |stage, persona, req| {
        let i = names.iter().position(|n| n == persona).unwrap();
        Ok(match stage {
            Stage::Assess => "COMPLEXITY: basic\nNOTES:\n- x".into(),
            Stage::Solve => format!("ANSWER: {}", presents[i]),
            Stage::Verify => "VERDICT: validated".into(),
            Stage::Present => format!("RATIONALE: r\nANSWER: {}", presents[i]),
            Stage::Deliberate => {
                // the round number is the count of earlier deliberate exchanges
                let round = req
                    .messages
                    .iter()
                    .filter(|m| m.content.contains("RATIONALE: r\nPOSITION"))
                    .count();
                let a = rounds[round.min(rounds.len() - 1)][i];
                format!("RATIONALE: r\nPOSITION: keep\nANSWER: {a}")
            }
        })
    }
}

#[test]
fn unanimous_presentations_short_circuit() {
    let backend = responder(scripted_peer(["B-1"; 5], vec![]));
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &preset("paneltr", 0).unwrap()).unwrap();
    assert_eq!(trace.outcome, Some(Outcome::UnanimousInitial));
    assert!(trace.rounds.is_empty());
    assert_eq!(trace.llm_calls, 20);
    assert_eq!(trace.llm_calls, backend.count_calls());
    let presents = trace
        .agents
        .iter()
        .flat_map(|a| &a.exchanges)
        .filter(|e| e.stage == Stage::Present)
        .count();
    assert_eq!(presents, 5);
}

#[test]
fn split_round_falls_back_to_vote() {
    // Einstein, Newton, Curie, Turing, Tesla
    let backend = responder(scripted_peer(
        ["A", "A", "B", "B", "C"],
        vec![["A", "A", "A", "B", "C"]],
    ));
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &preset("paneltr", 0).unwrap()).unwrap();
    assert_eq!(trace.rounds.len(), 1);
    assert_eq!(trace.outcome, Some(Outcome::MajorityVote));
    assert_eq!(trace.final_answer.as_ref().unwrap().raw, "A");
    assert_eq!(trace.replay_final(&TaskKind::QaFreeform), trace.final_answer);
    assert_eq!(trace.llm_calls, 25);
}

#[test]
fn consensus_in_second_round() {
    let backend = responder(scripted_peer(
        ["A", "B", "B", "B", "C"],
        vec![["A", "B", "B", "B", "B"], ["B"; 5]],
    ));
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let mut config = preset("paneltr", 0).unwrap();
    config.t_max_panel = 3;
    let trace = engine.run_panel(&qa_task(), &config).unwrap();
    assert_eq!(trace.outcome, Some(Outcome::ConsensusRound { round: 2 }));
    assert_eq!(trace.rounds.len(), 2);
    assert_eq!(trace.final_answer.unwrap().raw, "B");
}

#[test]
fn later_presenters_see_earlier_presentations() {
    let seen = Mutex::new(Vec::new());
    let backend = responder(|stage, persona, req: &ChatRequest| {
        if stage == Stage::Present {
            let peers = ["Albert Einstein:", "Isaac Newton:", "Marie Curie:", "Alan Turing:", "Nikola Tesla:"]
                .iter()
                .filter(|n| req.last_message().contains(*n))
                .count();
            seen.lock().unwrap().push((persona.to_string(), peers));
        }
        scripted_peer(["1"; 5], vec![])(stage, persona, req)
    });
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &preset("paneltr", 0).unwrap()).unwrap();
    let seen = seen.into_inner().unwrap();
    let order: Vec<&str> = seen.iter().map(|(p, _)| p.as_str()).collect();
    assert_eq!(order, trace.presentation_order);
    assert_eq!(seen.iter().map(|(_, n)| *n).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
}

#[test]
fn failed_presenter_is_frozen_but_votes() {
    let templates = TemplateSet::default();
    let backend = responder(|stage, persona, req: &ChatRequest| match (stage, persona) {
        (Stage::Present | Stage::Deliberate, "Nikola Tesla") => Ok("no markers at all".into()),
        _ => scripted_peer(["A", "B", "B", "A", "C"], vec![["A", "B", "B", "A", "C"]])(stage, persona, req),
    });
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&qa_task(), &preset("paneltr", 0).unwrap()).unwrap();
    let tesla = trace.agents.iter().find(|a| a.persona == "Nikola Tesla").unwrap();
    assert!(tesla.frozen);
    // kept its self-reviewed answer and still counted
    assert_eq!(tesla.solution.as_ref().unwrap().answer.raw, "C");
    assert_eq!(trace.rounds[0].len(), 5);
    // no deliberate exchange for the frozen agent
    assert!(tesla.exchanges.iter().all(|e| e.stage != Stage::Deliberate));
    assert_eq!(trace.outcome, Some(Outcome::MajorityVote));
}

#[test]
fn unmappable_label_becomes_dissent_after_retries() {
    let templates = TemplateSet::default();
    let backend = responder(|stage, persona, _req: &ChatRequest| {
        Ok(match stage {
            Stage::Assess => "COMPLEXITY: basic\nNOTES:".into(),
            Stage::Verify => "VERDICT: validated".into(),
            Stage::Solve | Stage::Present | Stage::Deliberate if persona == "Isaac Newton" => {
                "POSITION: keep\nANSWER: Maybe".into()
            }
            _ => "POSITION: keep\nANSWER: Refuted".into(),
        })
    });
    let engine = Engine::new(&backend, &templates);
    let trace = engine.run_panel(&verify_task(), &preset("paneltr", 0).unwrap()).unwrap();
    let newton = trace.agents.iter().find(|a| a.persona == "Isaac Newton").unwrap();
    assert!(newton.failures.is_empty());
    assert_eq!(newton.solution.as_ref().unwrap().answer.normalized, "maybe");
    assert_eq!(trace.outcome, Some(Outcome::MajorityVote));
    assert_eq!(trace.final_answer.unwrap().normalized, "refuted");
}

#[test]
fn backend_error_aborts_with_incomplete_trace() {
    let backend = Queue::new(&["COMPLEXITY: basic\nNOTES:"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let err = engine.run_panel(&qa_task(), &preset("paneltr", 0).unwrap()).unwrap_err();
    assert!(err.is_backend());
    let trace = err.trace().unwrap();
    assert!(!trace.is_complete());
    assert_eq!(trace.llm_calls, 2);
    assert_eq!(trace.final_answer, None);
}

#[test]
fn invalid_config_rejected() {
    let backend = Queue::new(&[]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let mut config = preset("vanilla", 0).unwrap();
    config.panel = default_panel();
    assert!(matches!(engine.run_panel(&qa_task(), &config), Err(PanelError::InvalidConfig(_))));
    assert_eq!(backend.count_calls(), 0);
}

#[test]
fn single_agent_panel_never_enters_peer_review() {
    let backend = Queue::new(&["COMPLEXITY: basic\nNOTES:", "ANSWER: 9", "VERDICT: validated"]);
    let templates = TemplateSet::default();
    let engine = Engine::new(&backend, &templates);
    let config = PipelineConfig::new(
        [PipelineStage::Investigation, PipelineStage::SelfReview, PipelineStage::PeerReview],
        default_panel().first_only(),
    );
    let trace = engine.run_panel(&qa_task(), &config).unwrap();
    assert_eq!(trace.outcome, Some(Outcome::SingleAgent));
    assert!(trace.presentations.is_empty() && trace.rounds.is_empty());
    assert_eq!(trace.final_answer.unwrap().raw, "9");
    assert_eq!(trace.llm_calls, 3);
}

#[test]
fn presentation_order_is_seeded() {
    let templates = TemplateSet::default();
    let run = |seed| {
        let backend = responder(scripted_peer(["A"; 5], vec![]));
        let engine = Engine::new(&backend, &templates);
        let mut config = preset("paneltr", 0).unwrap();
        config.ordering_seed = seed;
        engine.run_panel(&qa_task(), &config).unwrap().presentation_order
    };
    assert_eq!(run(3), run(3));
    let distinct: std::collections::BTreeSet<_> = (0..8).map(run).collect();
    assert!(distinct.len() > 1);
}

fn persona_panel(n: usize) -> Panel {
    Panel::new(
        (0..n)
            .map(|i| Persona::new(format!("P{i}"), "Check every cell").unwrap())
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Per-agent answer schedules over three values: caps hold, the outcome
    // matches the rounds, call accounting matches the backend, and replays
    // are byte-identical.
    #[test]
    fn engine_invariants(
        n in 2usize..=5,
        t_max in 1u32..=4,
        seed in any::<u64>(),
        schedule in prop::collection::vec(prop::collection::vec(0u8..3, 6), 5),
    ) {
        let templates = TemplateSet::default();
        let make = || {
            let schedule = schedule.clone();
            responder(move |stage, persona: &str, req: &ChatRequest| {
                let i: usize = persona[1..].parse().unwrap();
                let step = req.messages.iter().filter(|m| m.content.starts_with("POSITION")).count();
                let v = |k: usize| ["x", "y", "z"][schedule[i][k.min(5)] as usize];
                Ok(match stage {
                    Stage::Assess => "COMPLEXITY: complex\nNOTES:".into(),
                    Stage::Solve => format!("ANSWER: {}", v(0)),
                    Stage::Verify => "VERDICT: validated".into(),
                    Stage::Present => format!("ANSWER: {}", v(0)),
                    Stage::Deliberate => format!("POSITION: change\nANSWER: {}", v(step + 1)),
                })
            })
        };
        let mut config = PipelineConfig::new(
            [PipelineStage::Investigation, PipelineStage::SelfReview, PipelineStage::PeerReview],
            persona_panel(n),
        );
        config.t_max_panel = t_max;
        config.ordering_seed = seed;
        let b1 = make();
        let trace = Engine::new(&b1, &templates).run_panel(&qa_task(), &config).unwrap();
        prop_assert!(trace.rounds.len() <= t_max as usize);
        prop_assert_eq!(trace.llm_calls, b1.count_calls());
        match trace.outcome.unwrap() {
            Outcome::UnanimousInitial => {
                prop_assert!(trace.rounds.is_empty());
                prop_assert!(consensus_check(&trace.presentations).is_some());
            }
            Outcome::ConsensusRound { round } => {
                prop_assert_eq!(round as usize, trace.rounds.len());
                prop_assert!(consensus_check(trace.rounds.last().unwrap()).is_some());
            }
            Outcome::MajorityVote => {
                prop_assert_eq!(trace.rounds.len(), t_max as usize);
                prop_assert!(consensus_check(trace.rounds.last().unwrap()).is_none());
            }
            Outcome::SingleAgent => prop_assert!(false, "panel of {} skipped peer review", n),
        }
        prop_assert_eq!(trace.replay_final(&TaskKind::QaFreeform), trace.final_answer.clone());
        let b2 = make();
        let again = Engine::new(&b2, &templates).run_panel(&qa_task(), &config).unwrap();
        prop_assert_eq!(again, trace);
    }
}
