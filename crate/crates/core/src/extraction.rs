//! Marker-based parsing of model replies into typed stage results.
//!
//! Every stage asks the model for a fixed reply format; the contracts below
//! are embedded verbatim in the system prompt and parsed here. Markers are
//! matched case-insensitively at the start of a line, optionally wrapped in
//! markdown bold. When a marker repeats, the last occurrence wins.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use once_cell::race::OnceBox;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Answer, NormalizeError, TaskKind};

pub const ASSESS_CONTRACT: &str = "COMPLEXITY: <basic|intermediate|complex>\nNOTES:\n- <key analytical point>\n- <key analytical point>";
pub const SOLVE_CONTRACT: &str = "ANSWER: <final answer on a single line>";
pub const VERIFY_CONTRACT: &str = "VERDICT: <uncertain|validated>";
pub const PRESENT_CONTRACT: &str =
    "RATIONALE: <one-line justification>\nANSWER: <your answer on a single line>";
pub const DELIBERATE_CONTRACT: &str = "POSITION: <keep|change>\nRATIONALE: <one-line justification>\nANSWER: <your answer on a single line>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("reply is missing a valid {expected_marker} line")]
    Format { expected_marker: &'static str },
    #[error(transparent)]
    Unmappable(#[from] NormalizeError),
}

fn format_error(expected_marker: &'static str) -> ExtractError {
    ExtractError::Format { expected_marker }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Complexity {
    Basic,
    Intermediate,
    Complex,
}

impl Complexity {
    pub const ALL: [Complexity; 3] = [Complexity::Basic, Complexity::Intermediate, Complexity::Complex];

    pub fn as_str(self) -> &'static str {
        match self {
            Complexity::Basic => "basic",
            Complexity::Intermediate => "intermediate",
            Complexity::Complex => "complex",
        }
    }

    fn parse(value: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(value))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnalyticalNotes {
    pub points: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Uncertain,
    Validated,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Uncertain => "uncertain",
            Verdict::Validated => "validated",
        }
    }
}

/// Parsed content of one model reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Parsed {
    Assessment {
        complexity: Complexity,
        notes: AnalyticalNotes,
    },
    Solution {
        answer: Answer,
    },
    Review {
        verdict: Verdict,
    },
    Presentation {
        answer: Answer,
        rationale: String,
    },
    Deliberation {
        answer: Answer,
        changed: bool,
        rationale: String,
    },
}

struct MarkerLine<'a> {
    name: &'a str,
    value: &'a str,
    /// Byte offset just past the end of the line.
    end: usize,
}

fn marker_regex() -> &'static Regex {
    static RE: OnceBox<Regex> = OnceBox::new();
    RE.get_or_init(|| {
        Box::new(
            Regex::new(
                r"(?m)^[ \t]*(?:\*\*)?([A-Za-z]+)(?:\*\*)?[ \t]*:(?:\*\*)?([^\n]*)$",
            )
            .expect("marker pattern compiles"),
        )
    })
}

const MARKERS: [&str; 6] = ["COMPLEXITY", "NOTES", "ANSWER", "VERDICT", "POSITION", "RATIONALE"];

fn marker_lines(raw: &str) -> impl Iterator<Item = MarkerLine<'_>> {
    marker_regex().captures_iter(raw).filter_map(|caps| {
        let name = caps.get(1)?.as_str();
        if !MARKERS.iter().any(|m| m.eq_ignore_ascii_case(name)) {
            return None;
        }
        let whole = caps.get(0)?;
        Some(MarkerLine {
            name,
            value: caps.get(2)?.as_str().trim(),
            end: whole.end(),
        })
    })
}

fn last_marker<'a>(raw: &'a str, marker: &str) -> Option<MarkerLine<'a>> {
    marker_lines(raw)
        .filter(|m| m.name.eq_ignore_ascii_case(marker))
        .last()
}

/// Value of the last `marker:` line with trailing bold markers and
/// sentence punctuation removed.
fn enum_value<'a>(raw: &'a str, marker: &str) -> Option<&'a str> {
    last_marker(raw, marker).map(|m| {
        m.value
            .trim_end_matches(['*', '.', '!'])
            .trim_start_matches('*')
            .trim()
    })
}

fn bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for prefix in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = t.strip_prefix(prefix) {
            return Some(rest);
        }
    }
    if t == "-" || t == "*" {
        return Some("");
    }
    // "1. item" / "1) item"
    let digits = t.bytes().take_while(|b| b.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(item) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return Some(item);
        }
    }
    None
}

pub fn extract_assessment(raw: &str) -> Result<(Complexity, AnalyticalNotes), ExtractError> {
    let complexity = enum_value(raw, "COMPLEXITY")
        .and_then(Complexity::parse)
        .ok_or(format_error("COMPLEXITY"))?;
    let notes_line = last_marker(raw, "NOTES").ok_or(format_error("NOTES"))?;

    let mut points = Vec::new();
    let inline = notes_line.value.trim_matches('*').trim();
    let inline = bullet(inline).unwrap_or(inline).trim();
    if !inline.is_empty() {
        points.push(inline.to_string());
    }
    for line in raw[notes_line.end..].lines() {
        if line.trim().is_empty() {
            continue;
        }
        match bullet(line) {
            Some(item) => {
                let item = item.trim();
                if !item.is_empty() {
                    points.push(item.to_string());
                }
            }
            None => break,
        }
    }
    Ok((complexity, AnalyticalNotes { points }))
}

/// Text after the last `ANSWER:` marker.
pub fn extract_answer_text(raw: &str) -> Result<&str, ExtractError> {
    last_marker(raw, "ANSWER")
        .map(|m| m.value)
        .filter(|v| !v.is_empty())
        .ok_or(format_error("ANSWER"))
}

pub fn extract_solution(raw: &str, kind: &TaskKind) -> Result<Answer, ExtractError> {
    let text = extract_answer_text(raw)?;
    Ok(Answer::new(text, kind)?)
}

pub fn extract_verdict(raw: &str) -> Result<Verdict, ExtractError> {
    match enum_value(raw, "VERDICT").map(|v| v.to_ascii_lowercase()) {
        Some(v) if v == "validated" => Ok(Verdict::Validated),
        Some(v) if v == "uncertain" => Ok(Verdict::Uncertain),
        _ => Err(format_error("VERDICT")),
    }
}

fn rationale(raw: &str) -> String {
    last_marker(raw, "RATIONALE")
        .map(|m| m.value.to_string())
        .unwrap_or_default()
}

/// Presentation replies carry an answer and an optional one-line rationale.
pub fn extract_presentation(raw: &str, kind: &TaskKind) -> Result<(Answer, String), ExtractError> {
    let answer = extract_solution(raw, kind)?;
    Ok((answer, rationale(raw)))
}

pub fn extract_position(raw: &str) -> Result<bool, ExtractError> {
    match enum_value(raw, "POSITION").map(|v| v.to_ascii_lowercase()) {
        Some(v) if v == "keep" => Ok(false),
        Some(v) if v == "change" => Ok(true),
        _ => Err(format_error("POSITION")),
    }
}

/// Returns the answer and whether the agent changed its position.
pub fn extract_deliberation(raw: &str, kind: &TaskKind) -> Result<(Answer, bool), ExtractError> {
    let changed = extract_position(raw)?;
    let answer = extract_solution(raw, kind)?;
    Ok((answer, changed))
}

/// Rationale line of a deliberation reply, empty when absent.
pub fn extract_rationale(raw: &str) -> String {
    rationale(raw)
}
