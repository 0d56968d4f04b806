//! Prompt templates for the five atomic stage prompts and their rendering
//! into chat messages.
//!
//! Each template is the user-message body of one stage. The system message
//! is fixed: persona identity and focus, the task description, the shared
//! working principles and the stage's reply contract.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ChatMessage;
use crate::extraction::{
    ASSESS_CONTRACT, DELIBERATE_CONTRACT, PRESENT_CONTRACT, SOLVE_CONTRACT, VERIFY_CONTRACT,
};
use crate::table::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Assess,
    Solve,
    Verify,
    Present,
    Deliberate,
}

impl Stage {
    pub fn contract(self) -> &'static str {
        match self {
            Stage::Assess => ASSESS_CONTRACT,
            Stage::Solve => SOLVE_CONTRACT,
            Stage::Verify => VERIFY_CONTRACT,
            Stage::Present => PRESENT_CONTRACT,
            Stage::Deliberate => DELIBERATE_CONTRACT,
        }
    }

    fn goal(self) -> &'static str {
        match self {
            Stage::Assess => "assess the problem's complexity and identify its key analytical points.",
            Stage::Solve => "formulate a solution to the query.",
            Stage::Verify => "review your current solution and judge whether it is validated.",
            Stage::Present => "present your solution to the panel.",
            Stage::Deliberate => "reconsider your solution in light of the panel's solutions.",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Assess => "assess",
            Stage::Solve => "solve",
            Stage::Verify => "verify",
            Stage::Present => "present",
            Stage::Deliberate => "deliberate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("no binding for placeholder {{{placeholder}}}")]
    MissingBinding { placeholder: String },
    #[error("{stage} template must reference {{{placeholder}}}")]
    MissingPlaceholder {
        stage: &'static str,
        placeholder: &'static str,
    },
}

pub type Bindings = BTreeMap<String, String>;

/// Template body for one stage. Placeholders are `{name}` with `name` made
/// of ASCII letters, digits and underscores; other braces are literal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub body: String,
}

impl PromptTemplate {
    /// Checks that `body` references every placeholder in `required`.
    pub fn new(
        stage: Stage,
        body: impl Into<String>,
        required: &[&'static str],
    ) -> Result<Self, PromptError> {
        let template = Self {
            stage,
            body: body.into(),
        };
        let used = template.placeholders();
        for &p in required {
            if !used.iter().any(|u| u == p) {
                return Err(PromptError::MissingPlaceholder {
                    stage: stage.as_str(),
                    placeholder: p,
                });
            }
        }
        Ok(template)
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        scan(&self.body, |piece| {
            if let Piece::Placeholder(name) = piece {
                if !out.iter().any(|o: &String| o == name) {
                    out.push(name.to_string());
                }
            }
        });
        out
    }
}

enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn scan<'a>(body: &'a str, mut f: impl FnMut(Piece<'a>)) {
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
            .count();
        if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
            f(Piece::Text(&rest[..open]));
            f(Piece::Placeholder(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            f(Piece::Text(&rest[..=open]));
            rest = after;
        }
    }
    f(Piece::Text(rest));
}

/// Single-pass substitution: bound values are inserted verbatim and never
/// rescanned.
pub fn substitute(body: &str, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    let mut missing = None;
    scan(body, |piece| match piece {
        Piece::Text(t) => out.push_str(t),
        Piece::Placeholder(name) => match bindings.get(name) {
            Some(v) => out.push_str(v),
            None => {
                if missing.is_none() {
                    missing = Some(name.to_string());
                }
            }
        },
    });
    match missing {
        Some(placeholder) => Err(PromptError::MissingBinding { placeholder }),
        None => Ok(out),
    }
}

const SYSTEM_FRAME: &str = "You are {persona}, a member of a scientific review panel. You should {focus}.

Task: {task_description}

Working principles:
- This message asks for exactly one step: {stage_goal}
- Maintain healthy skepticism about problem difficulty rather than defaulting to oversimplified assessments.
- You may freely modify your personal solution or maintain a dissenting view; do not force artificial consensus.

Reply format (required; these lines are parsed automatically):
{contract}";

/// Renders `[system, user]` messages for one stage. `bindings` must cover
/// `persona`, `focus` and `task_description` plus every placeholder in the
/// template body.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &Bindings,
) -> Result<Vec<ChatMessage>, PromptError> {
    let mut frame = bindings.clone();
    frame.insert("stage_goal".into(), template.stage.goal().into());
    frame.insert("contract".into(), template.stage.contract().into());
    let system = substitute(SYSTEM_FRAME, &frame)?;
    let user = substitute(&template.body, bindings)?;
    Ok(alloc::vec![ChatMessage::system(system), ChatMessage::user(user)])
}

pub const DEFAULT_ASSESS: &str = "Problem analysis. Assess how complex the query below is and list the key analytical points that need attention (units, scales, which cells or passages matter, traps). Do not answer the query yet.

Input:
{flattened_input}

Query: {query}";

pub const DEFAULT_SOLVE: &str = "Solution formulation. Based on your assessment, work out the answer to the query.

Input:
{flattened_input}

Query: {query}

Your assessment:
Complexity: {complexity}
Key analytical points:
{notes}";

pub const DEFAULT_SOLVE_DIRECT: &str = "Answer the query using the input below.

Input:
{flattened_input}

Query: {query}";

pub const DEFAULT_VERIFY: &str = "Self-review. Check your current solution against the query requirements and the evidence. Mark it validated only if it is robustly consistent with both; mark it uncertain if there are methodological gaps or inconsistencies.

Input:
{flattened_input}

Query: {query}

Your current solution: {prior_solution}";

pub const DEFAULT_PRESENT: &str = "Individual presentation. Present your solution to the panel. Presentations made before yours are listed below; you may adjust your solution in light of them or keep it.

Query: {query}

Your solution: {prior_solution}

Earlier presentations:
{peer_solutions}";

pub const DEFAULT_DELIBERATE: &str = "Collective deliberation. The panel has not reached consensus. Below are every member's solutions from the previous round. Either modify your solution based on this peer feedback or maintain your position.

Query: {query}

Your previous solution: {prior_solution}

Panel solutions:
{peer_solutions}";

/// Which template of a [`TemplateSet`] a file or override refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateSlot {
    Assess,
    Solve,
    SolveDirect,
    Verify,
    Present,
    Deliberate,
}

impl TemplateSlot {
    pub const ALL: [TemplateSlot; 6] = [
        TemplateSlot::Assess,
        TemplateSlot::Solve,
        TemplateSlot::SolveDirect,
        TemplateSlot::Verify,
        TemplateSlot::Present,
        TemplateSlot::Deliberate,
    ];

    /// File stem used for template directories.
    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateSlot::Assess => "assess",
            TemplateSlot::Solve => "solve",
            TemplateSlot::SolveDirect => "solve_direct",
            TemplateSlot::Verify => "verify",
            TemplateSlot::Present => "present",
            TemplateSlot::Deliberate => "deliberate",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            TemplateSlot::Assess => Stage::Assess,
            TemplateSlot::Solve | TemplateSlot::SolveDirect => Stage::Solve,
            TemplateSlot::Verify => Stage::Verify,
            TemplateSlot::Present => Stage::Present,
            TemplateSlot::Deliberate => Stage::Deliberate,
        }
    }

    /// Placeholders the engine binds for this slot; a template must use all
    /// of them.
    pub fn required(self) -> &'static [&'static str] {
        match self {
            TemplateSlot::Assess | TemplateSlot::SolveDirect => &["flattened_input", "query"],
            TemplateSlot::Solve => &["flattened_input", "query", "complexity", "notes"],
            TemplateSlot::Verify => &["flattened_input", "query", "prior_solution"],
            TemplateSlot::Present | TemplateSlot::Deliberate => {
                &["query", "prior_solution", "peer_solutions"]
            }
        }
    }

    fn default_body(self) -> &'static str {
        match self {
            TemplateSlot::Assess => DEFAULT_ASSESS,
            TemplateSlot::Solve => DEFAULT_SOLVE,
            TemplateSlot::SolveDirect => DEFAULT_SOLVE_DIRECT,
            TemplateSlot::Verify => DEFAULT_VERIFY,
            TemplateSlot::Present => DEFAULT_PRESENT,
            TemplateSlot::Deliberate => DEFAULT_DELIBERATE,
        }
    }
}

/// The full set of stage templates. The direct-solve template is the solve
/// prompt used when the investigation stage is disabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    slots: [PromptTemplate; 6],
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            slots: TemplateSlot::ALL.map(|slot| PromptTemplate {
                stage: slot.stage(),
                body: slot.default_body().into(),
            }),
        }
    }
}

impl TemplateSet {
    pub fn get(&self, slot: TemplateSlot) -> &PromptTemplate {
        &self.slots[slot as usize]
    }

    /// Replaces one template body after checking its placeholders.
    pub fn set(&mut self, slot: TemplateSlot, body: impl Into<String>) -> Result<(), PromptError> {
        self.slots[slot as usize] = PromptTemplate::new(slot.stage(), body, slot.required())?;
        Ok(())
    }
}

/// Default task description per task kind. Fact-verification descriptions
/// list the admissible labels.
pub fn task_description(kind: &TaskKind) -> String {
    match kind {
        TaskKind::QaFreeform => "Answer the question using the table and any accompanying passages. Give the answer itself (a number, span, or short list) without explanation on the ANSWER line.".into(),
        TaskKind::SqlDenotation => "Answer the question as if executing the corresponding SQL query over the table. Give the resulting value(s) on the ANSWER line; separate multiple values with \", \".".into(),
        TaskKind::FactVerify3Way { labels } => {
            let mut s = String::from("Decide whether the claim is supported by the table and any accompanying evidence. The ANSWER line must be exactly one of: ");
            s.push_str(&labels.join(", "));
            s.push('.');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Role;

    fn full_bindings() -> Bindings {
        [
            ("persona", "Isaac Newton"),
            ("focus", "verify numerical relationships and logical consistency"),
            ("task_description", "Answer the question."),
            ("flattened_input", "Year | Revenue\n2019 | 100"),
            ("query", "What was revenue in 2019?"),
            ("complexity", "basic"),
            ("notes", "- locate the row"),
            ("prior_solution", "100"),
            ("peer_solutions", "(none)"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    #[test]
    fn assess_renders_system_then_user() {
        let set = TemplateSet::default();
        let msgs = render_prompt(set.get(TemplateSlot::Assess), &full_bindings()).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        assert_eq!(msgs[1].role, Role::User);
        assert!(msgs[0].content.contains(ASSESS_CONTRACT));
        assert!(msgs[0].content.contains("You are Isaac Newton"));
        assert!(msgs[1].content.contains("2019 | 100"));
    }

    #[test]
    fn missing_query_is_reported() {
        let mut b = full_bindings();
        b.remove("query");
        let set = TemplateSet::default();
        assert_eq!(
            render_prompt(set.get(TemplateSlot::Assess), &b),
            Err(PromptError::MissingBinding {
                placeholder: "query".into()
            })
        );
    }

    #[test]
    fn every_slot_renders_without_residue_and_embeds_its_contract() {
        let set = TemplateSet::default();
        let b = full_bindings();
        for slot in TemplateSlot::ALL {
            let t = set.get(slot);
            let msgs = render_prompt(t, &b).unwrap();
            for m in &msgs {
                let residue = PromptTemplate {
                    stage: t.stage,
                    body: m.content.clone(),
                }
                .placeholders();
                assert!(residue.is_empty(), "{slot:?} left {residue:?}");
            }
            assert!(msgs[0].content.contains(t.stage.contract()));
            // defaults satisfy their own requirements
            PromptTemplate::new(slot.stage(), t.body.clone(), slot.required()).unwrap();
        }
    }

    #[test]
    fn substitution_is_single_pass() {
        let mut b = Bindings::new();
        b.insert("a".into(), "{b}".into());
        b.insert("b".into(), "x".into());
        assert_eq!(substitute("[{a}] {not a placeholder} {}", &b).unwrap(), "[{b}] {not a placeholder} {}");
    }

    #[test]
    fn overrides_must_keep_required_placeholders() {
        let mut set = TemplateSet::default();
        assert_eq!(
            set.set(TemplateSlot::Verify, "Check {query}"),
            Err(PromptError::MissingPlaceholder {
                stage: "verify",
                placeholder: "flattened_input"
            })
        );
        set.set(TemplateSlot::Verify, "{flattened_input} {query} {prior_solution}!")
            .unwrap();
        assert_eq!(set.get(TemplateSlot::Verify).body, "{flattened_input} {query} {prior_solution}!");
    }

    #[test]
    fn fact_verification_description_lists_labels() {
        let k = TaskKind::fact_verify(["Supports", "Refutes", "NEI"]).unwrap();
        assert!(task_description(&k).contains("Supports, Refutes, NEI"));
    }
}
