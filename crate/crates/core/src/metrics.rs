//! Benchmark scoring over normalized answers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Answer, TaskInstance, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{preds} predictions for {golds} gold answers")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("nothing to score")]
    Empty,
    #[error("task {0:?} has no evidence-correctness flag")]
    MissingEvidenceFlag(String),
    #[error("prediction/task mismatch at position {index}")]
    IdMismatch { index: usize },
    #[error("tasks of different kinds cannot be scored together")]
    MixedKinds,
    #[error("task {0:?} has no gold answer")]
    MissingGold(String),
}

pub fn exact_match(pred: &Answer, gold: &Answer) -> f64 {
    if pred.normalized == gold.normalized {
        1.0
    } else {
        0.0
    }
}

/// Token-level F1 over whitespace tokens of the normalized answers, counted
/// as multisets.
pub fn token_f1(pred: &Answer, gold: &Answer) -> f64 {
    let p: Vec<&str> = pred.normalized.split_whitespace().collect();
    let g: Vec<&str> = gold.normalized.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn split_denotation(text: &str) -> Vec<&str> {
    let mut parts: Vec<&str> = text
        .split([',', ';', '|', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    parts.sort_unstable();
    parts
}

/// Same normalized answer, or the same multiset of list items.
pub fn denotation_match(pred: &Answer, gold: &Answer) -> bool {
    pred.normalized == gold.normalized
        || split_denotation(&pred.normalized) == split_denotation(&gold.normalized)
}

pub fn denotation_accuracy(preds: &[Answer], golds: &[Answer]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| denotation_match(p, g))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), MetricError> {
    if preds != golds {
        return Err(MetricError::LengthMismatch { preds, golds });
    }
    if preds == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Micro-F1 pooled over the labels. Predictions outside the label set count
/// as a miss for the gold class only.
fn micro_f1_counts(preds: &[&str], golds: &[&str], labels: &[&str]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in preds.iter().zip(golds) {
        if !labels.contains(g) {
            return Err(MetricError::UnknownLabel((*g).into()));
        }
        if p == g {
            tp += 1;
        } else {
            fn_ += 1;
            if labels.contains(p) {
                fp += 1;
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Micro-averaged F1 over a closed label set. Every prediction must be one
/// of `labels`.
pub fn micro_f1_3way(preds: &[&str], golds: &[&str], labels: &[&str]) -> Result<f64, MetricError> {
    if let Some(p) = preds.iter().find(|p| !labels.contains(p)) {
        return Err(MetricError::UnknownLabel((*p).into()));
    }
    micro_f1_counts(preds, golds, labels)
}

/// Label accuracy and the evidence-gated score: a hit counts only when the
/// retrieved evidence also covers a gold evidence set.
pub fn feverous_score(preds: &[Prediction], golds: &[Answer]) -> Result<(f64, f64), MetricError> {
    check_lengths(preds.len(), golds.len())?;
    let mut label_hits = 0usize;
    let mut scored = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        let ev = p
            .evidence_correct
            .ok_or_else(|| MetricError::MissingEvidenceFlag(p.task_id.clone()))?;
        if p.answer.as_ref().is_some_and(|a| a.normalized == g.normalized) {
            label_hits += 1;
            if ev {
                scored += 1;
            }
        }
    }
    let n = preds.len() as f64;
    Ok((label_hits as f64 / n, scored as f64 / n))
}

/// One system answer for one task. A missing answer (failed run) scores as
/// wrong.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub task_id: String,
    pub answer: Option<Answer>,
    /// Set for tasks that carry retrieval evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_correct: Option<bool>,
}

impl Prediction {
    /// Pairs an answer with a task, taking the evidence flag from the task.
    pub fn for_task(task: &TaskInstance, answer: Option<Answer>) -> Self {
        Self {
            task_id: task.id.clone(),
            answer,
            evidence_correct: task.evidence.as_ref().map(|e| e.evidence_correct()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    /// Runs with no final answer.
    pub missing: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denotation_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feverous_score: Option<f64>,
}

/// Scores aligned predictions against their tasks. The metric set follows
/// the task kind: EM and F1 for free-form QA, denotation accuracy for SQL
/// questions, micro-F1 for fact verification, and label accuracy plus the
/// evidence-gated score when the tasks carry retrieval evidence.
pub fn score_run(tasks: &[TaskInstance], preds: &[Prediction]) -> Result<MetricReport, MetricError> {
    if tasks.len() != preds.len() {
        return Err(MetricError::IdMismatch {
            index: tasks.len().min(preds.len()),
        });
    }
    if tasks.is_empty() {
        return Err(MetricError::Empty);
    }
    for (i, (t, p)) in tasks.iter().zip(preds).enumerate() {
        if t.id != p.task_id {
            return Err(MetricError::IdMismatch { index: i });
        }
    }
    let kind = &tasks[0].kind;
    if tasks.iter().any(|t| !t.kind.same_family(kind)) {
        return Err(MetricError::MixedKinds);
    }
    let mut golds = Vec::with_capacity(tasks.len());
    for t in tasks {
        golds.push(t.gold.clone().ok_or_else(|| MetricError::MissingGold(t.id.clone()))?);
    }
    let missing = preds.iter().filter(|p| p.answer.is_none()).count();
    // an absent answer cannot match any gold text
    let empty = Answer::unmapped("", kind);
    let answers: Vec<Answer> = preds
        .iter()
        .map(|p| p.answer.clone().unwrap_or_else(|| empty.clone()))
        .collect();
    let n = tasks.len();
    let mut report = MetricReport {
        n,
        missing,
        ..MetricReport::default()
    };
    match kind {
        TaskKind::QaFreeform => {
            let em: f64 = answers.iter().zip(&golds).map(|(p, g)| exact_match(p, g)).sum();
            let f1: f64 = answers.iter().zip(&golds).map(|(p, g)| token_f1(p, g)).sum();
            report.exact_match = Some(em / n as f64);
            report.token_f1 = Some(f1 / n as f64);
        }
        TaskKind::SqlDenotation => {
            report.denotation_accuracy = Some(denotation_accuracy(&answers, &golds)?);
        }
        TaskKind::FactVerify3Way { .. } => {
            if tasks.iter().any(|t| t.evidence.is_some()) {
                let (acc, score) = feverous_score(preds, &golds)?;
                report.label_accuracy = Some(acc);
                report.feverous_score = Some(score);
            } else {
                let labels = kind.canonical_labels();
                let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();
                let p: Vec<&str> = answers.iter().map(|a| a.normalized.as_str()).collect();
                let g: Vec<&str> = golds.iter().map(|a| a.normalized.as_str()).collect();
                report.micro_f1 = Some(micro_f1_counts(&p, &g, &label_refs)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn qa(s: &str) -> Answer {
        Answer::new(s, &TaskKind::QaFreeform).unwrap()
    }

    #[test]
    fn em_ignores_formatting() {
        assert_eq!(exact_match(&qa("1,200.00"), &qa("1200")), 1.0);
        assert_eq!(exact_match(&qa("12"), &qa("13")), 0.0);
    }

    #[test]
    fn f1_partial_overlap() {
        // pred {net, income, 2019}, gold {net, income}: p=2/3, r=1
        let f = token_f1(&qa("net income 2019"), &qa("net income"));
        assert!((f - 0.8).abs() < 1e-12);
        assert_eq!(token_f1(&qa(""), &qa("")), 1.0);
        assert_eq!(token_f1(&qa(""), &qa("x")), 0.0);
        assert_eq!(token_f1(&qa("a b"), &qa("c")), 0.0);
    }

    #[test]
    fn f1_multiset_counts() {
        // pred a a, gold a: common 1, p=1/2, r=1 -> 2/3
        let f = token_f1(&qa("x x"), &qa("x"));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn denotation_lists_unordered() {
        let k = TaskKind::SqlDenotation;
        let a = Answer::new("Paris, Rome", &k).unwrap();
        let b = Answer::new("rome;paris", &k).unwrap();
        assert!(denotation_match(&a, &b));
        let c = Answer::new("Paris", &k).unwrap();
        assert!(!denotation_match(&a, &c));
        assert_eq!(denotation_accuracy(&[a.clone(), c.clone()], &[b, a]).unwrap(), 0.5);
    }

    #[test]
    fn micro_f1_known_values() {
        let labels = ["supported", "refuted", "not enough info"];
        let p = ["supported", "refuted", "refuted", "not enough info"];
        let g = ["supported", "supported", "refuted", "refuted"];
        // 2 of 4 correct; single-label micro-F1 equals accuracy
        assert!((micro_f1_3way(&p, &g, &labels).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            micro_f1_3way(&["maybe"], &["refuted"], &labels),
            Err(MetricError::UnknownLabel(_))
        ));
        assert_eq!(
            micro_f1_3way(&p[..1], &g, &labels),
            Err(MetricError::LengthMismatch { preds: 1, golds: 4 })
        );
        assert_eq!(micro_f1_3way(&[], &[], &labels), Err(MetricError::Empty));
    }

    #[test]
    fn off_label_counts_only_as_miss() {
        let labels = ["a", "b", "c"];
        // tp=1, fn=1, fp=0 -> 2/3
        let f = micro_f1_counts(&["a", "zzz"], &["a", "b"], &labels).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn feverous_gates_on_evidence() {
        let k = TaskKind::fact_verify(["supports", "refutes", "nei"]).unwrap();
        let s = Answer::new("Supports", &k).unwrap();
        let r = Answer::new("refutes", &k).unwrap();
        let pred = |a: &Answer, ev| Prediction {
            task_id: "x".into(),
            answer: Some(a.clone()),
            evidence_correct: Some(ev),
        };
        // 3 of 4 labels right, 2 of those with correct evidence
        let preds = [pred(&s, true), pred(&s, true), pred(&r, false), pred(&r, true)];
        let golds = [s.clone(), s.clone(), r.clone(), s.clone()];
        let (acc, score) = feverous_score(&preds, &golds).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
        assert!((score - 0.5).abs() < 1e-12);
        let mut unflagged = pred(&s, true);
        unflagged.evidence_correct = None;
        assert!(matches!(
            feverous_score(&[unflagged], &[s]),
            Err(MetricError::MissingEvidenceFlag(_))
        ));
    }

    #[test]
    fn score_run_checks_alignment() {
        use crate::table::{ContextPassages, Query, Table};
        let table = Table::new(None, vec!["a".into()], vec![]).unwrap();
        let task = TaskInstance {
            id: "t1".into(),
            table,
            context: ContextPassages::default(),
            query: Query::new("q").unwrap(),
            kind: TaskKind::QaFreeform,
            gold: Some(qa("12")),
            evidence: None,
        };
        let good = Prediction::for_task(&task, Some(qa("12.00")));
        let r = score_run(core::slice::from_ref(&task), &[good]).unwrap();
        assert_eq!(r.exact_match, Some(1.0));
        assert_eq!(r.token_f1, Some(1.0));
        let mut bad = Prediction::for_task(&task, None);
        bad.task_id = "t2".into();
        assert_eq!(score_run(core::slice::from_ref(&task), &[bad]), Err(MetricError::IdMismatch { index: 0 }));
        assert_eq!(score_run(&[], &[]), Err(MetricError::Empty));
        let none = Prediction::for_task(&task, None);
        let r = score_run(&[task], &[none]).unwrap();
        assert_eq!((r.missing, r.exact_match), (1, Some(0.0)));
    }
}
