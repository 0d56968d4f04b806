//! Tables, queries, task instances and answers, plus the text rendering and
//! answer normalization every later stage depends on.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("table has no header cells")]
    NoHeaders,
    #[error("row {row} has {found} cells but the table has {expected} columns")]
    RowTooLong {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("query text is empty")]
    EmptyQuery,
    #[error("label set for fact verification is empty")]
    EmptyLabelSet,
    #[error("malformed flattened table: {0}")]
    Malformed(String),
}

/// A relational table. Every row holds exactly one cell per header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    caption: Option<String>,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawTable {
    #[serde(default)]
    caption: Option<String>,
    headers: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.caption, raw.headers, raw.rows)
    }
}

impl Table {
    /// Builds a table, padding short rows with empty cells. Rows longer than
    /// the header are rejected rather than truncated.
    pub fn new(
        caption: Option<String>,
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
    ) -> Result<Self, TableError> {
        if headers.is_empty() {
            return Err(TableError::NoHeaders);
        }
        let width = headers.len();
        let mut padded = Vec::with_capacity(rows.len());
        for (i, mut row) in rows.into_iter().enumerate() {
            if row.len() > width {
                return Err(TableError::RowTooLong {
                    row: i,
                    found: row.len(),
                    expected: width,
                });
            }
            row.resize(width, String::new());
            padded.push(row);
        }
        Ok(Self {
            caption,
            headers,
            rows: padded,
        })
    }

    pub fn caption(&self) -> Option<&str> {
        self.caption.as_deref()
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.headers.len()
    }
}

/// Free-text passages surrounding a table. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextPassages {
    pub passages: Vec<String>,
}

impl ContextPassages {
    pub fn new(passages: Vec<String>) -> Self {
        Self { passages }
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// A natural-language question or claim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Query(String);

impl Query {
    pub fn new(text: impl Into<String>) -> Result<Self, TableError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TableError::EmptyQuery);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Query {
    type Error = TableError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Query::new(value)
    }
}

impl From<Query> for String {
    fn from(q: Query) -> Self {
        q.0
    }
}

/// What kind of output the task expects. Fact verification carries its
/// admissible labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", try_from = "RawTaskKind")]
pub enum TaskKind {
    #[serde(rename = "QA_FREEFORM")]
    QaFreeform,
    #[serde(rename = "FACT_VERIFY_3WAY")]
    FactVerify3Way { labels: Vec<String> },
    #[serde(rename = "SQL_DENOTATION")]
    SqlDenotation,
}

#[derive(Deserialize)]
#[serde(tag = "kind")]
enum RawTaskKind {
    #[serde(rename = "QA_FREEFORM")]
    QaFreeform,
    #[serde(rename = "FACT_VERIFY_3WAY")]
    FactVerify3Way { labels: Vec<String> },
    #[serde(rename = "SQL_DENOTATION")]
    SqlDenotation,
}

impl TryFrom<RawTaskKind> for TaskKind {
    type Error = TableError;

    fn try_from(raw: RawTaskKind) -> Result<Self, Self::Error> {
        match raw {
            RawTaskKind::QaFreeform => Ok(TaskKind::QaFreeform),
            RawTaskKind::SqlDenotation => Ok(TaskKind::SqlDenotation),
            RawTaskKind::FactVerify3Way { labels } => TaskKind::fact_verify(labels),
        }
    }
}

impl TaskKind {
    pub fn fact_verify<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self, TableError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
            return Err(TableError::EmptyLabelSet);
        }
        Ok(TaskKind::FactVerify3Way { labels })
    }

    pub fn labels(&self) -> &[String] {
        match self {
            TaskKind::FactVerify3Way { labels } => labels,
            _ => &[],
        }
    }

    /// Canonical (normalized) forms of the label set, in declaration order.
    pub fn canonical_labels(&self) -> Vec<String> {
        self.labels()
            .iter()
            .map(|l| canonical_text(l, false))
            .collect()
    }

    pub fn same_family(&self, other: &TaskKind) -> bool {
        core::mem::discriminant(self) == core::mem::discriminant(other)
    }
}

/// Retrieved and gold evidence ids for a FEVEROUS claim.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeverousEvidence {
    pub retrieved_ids: BTreeSet<String>,
    /// Alternative gold evidence sets; any one fully retrieved counts.
    pub gold_sets: Vec<BTreeSet<String>>,
}

impl FeverousEvidence {
    /// True when the retrieved ids cover at least one gold set. Claims
    /// without gold evidence are trivially covered.
    pub fn evidence_correct(&self) -> bool {
        self.gold_sets.is_empty()
            || self
                .gold_sets
                .iter()
                .any(|set| set.is_subset(&self.retrieved_ids))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub table: Table,
    #[serde(default)]
    pub context: ContextPassages,
    pub query: Query,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<FeverousEvidence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NormalizeError {
    #[error("answer {raw:?} matches none of the labels {labels:?}")]
    UnmappableLabel { raw: String, labels: Vec<String> },
}

/// A model or gold answer with its canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub raw: String,
    pub normalized: String,
}

impl Answer {
    pub fn new(raw: impl Into<String>, kind: &TaskKind) -> Result<Self, NormalizeError> {
        let raw = raw.into();
        let normalized = normalize_answer(&raw, kind)?;
        Ok(Self { raw, normalized })
    }

    /// Keeps an answer that could not be mapped onto the label set. Its
    /// normalized form is the canonical text, which never equals a label, so
    /// it acts as a dissenting vote.
    pub fn unmapped(raw: impl Into<String>, kind: &TaskKind) -> Self {
        let raw = raw.into();
        match normalize_answer(&raw, kind) {
            Ok(normalized) => Self { raw, normalized },
            Err(_) => {
                let normalized = canonical_text(&raw, false);
                Self { raw, normalized }
            }
        }
    }

    pub fn same_as(&self, other: &Answer) -> bool {
        self.normalized == other.normalized
    }
}

/// Renders a table and its passages as pipe-delimited text.
///
/// ```text
/// Caption: <caption>
/// h1 | h2 | ... | hn
/// c1 | c2 | ... | cn
///
/// [P1] <passage>
/// ```
///
/// Pipes inside cells are written as `\|`. Line breaks inside cells are
/// replaced by spaces.
pub fn flatten_table(table: &Table, context: &ContextPassages) -> String {
    let mut out = String::new();
    if let Some(caption) = table.caption() {
        out.push_str("Caption: ");
        out.push_str(&single_line(caption));
        out.push('\n');
    }
    push_row(&mut out, table.headers());
    for row in table.rows() {
        out.push('\n');
        push_row(&mut out, row);
    }
    if !context.is_empty() {
        out.push('\n');
        for (i, passage) in context.passages.iter().enumerate() {
            out.push('\n');
            out.push_str(&alloc::format!("[P{}] ", i + 1));
            out.push_str(&single_line(passage));
        }
    }
    out
}

fn single_line(text: &str) -> String {
    text.replace(['\r', '\n'], " ")
}

fn push_row(out: &mut String, cells: &[String]) {
    for (i, cell) in cells.iter().enumerate() {
        if i > 0 {
            out.push_str(" | ");
        }
        out.push_str(&single_line(cell).replace('|', "\\|"));
    }
}

fn split_row(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut cell = String::new();
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                chars.next();
                cell.push('|');
            }
            '|' => {
                // the delimiter is " | "; drop the padding spaces around it
                if cell.ends_with(' ') {
                    cell.pop();
                }
                if chars.peek() == Some(&' ') {
                    chars.next();
                }
                cells.push(core::mem::take(&mut cell));
            }
            _ => cell.push(c),
        }
    }
    cells.push(cell);
    cells
}

/// Parses text in the flattening grammar back into a table and passages.
pub fn parse_flattened(text: &str) -> Result<(Table, ContextPassages), TableError> {
    let mut lines: Vec<&str> = text.split('\n').collect();

    // a trailing run of "[Pk] " lines after a blank line is the passage block
    let mut passages = Vec::new();
    if let Some(blank) = lines.iter().rposition(|l| l.is_empty()) {
        let tail = &lines[blank + 1..];
        let is_block = !tail.is_empty()
            && tail
                .iter()
                .enumerate()
                .all(|(i, l)| l.starts_with(&alloc::format!("[P{}] ", i + 1)));
        if is_block {
            for (i, l) in tail.iter().enumerate() {
                let prefix = alloc::format!("[P{}] ", i + 1);
                passages.push(l[prefix.len()..].to_string());
            }
            lines.truncate(blank);
        }
    }

    let mut caption = None;
    if let Some(first) = lines.first() {
        if let Some(rest) = first.strip_prefix("Caption: ") {
            caption = Some(rest.to_string());
            lines.remove(0);
        }
    }
    let header_line = lines
        .first()
        .ok_or_else(|| TableError::Malformed("missing header line".into()))?;
    let headers = split_row(header_line);
    let rows = lines[1..].iter().map(|l| split_row(l)).collect();
    Ok((
        Table::new(caption, headers, rows)?,
        ContextPassages::new(passages),
    ))
}

/// Canonical form of an answer for comparison.
///
/// Steps, in order: trim, lowercase, strip surrounding quotes, collapse
/// whitespace, drop the articles a/an/the (free-form QA only), drop
/// thousands separators and all-zero fractions from numbers, and for fact
/// verification map onto the label set case-insensitively.
pub fn normalize_answer(raw: &str, kind: &TaskKind) -> Result<String, NormalizeError> {
    let text = canonical_text(raw, matches!(kind, TaskKind::QaFreeform));
    match kind {
        TaskKind::FactVerify3Way { labels } => map_label(&text, labels),
        _ => Ok(text),
    }
}

fn canonical_text(raw: &str, drop_articles: bool) -> String {
    // iterate to a fixpoint so the result is idempotent even when one step
    // exposes work for an earlier one (e.g. `the "x"`)
    let mut current = normalize_pass(raw, drop_articles);
    for _ in 0..16 {
        let next = normalize_pass(&current, drop_articles);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

const QUOTE_PAIRS: [(char, char); 5] = [
    ('"', '"'),
    ('\'', '\''),
    ('`', '`'),
    ('\u{201c}', '\u{201d}'),
    ('\u{2018}', '\u{2019}'),
];

fn strip_quotes(mut text: &str) -> &str {
    loop {
        let trimmed = text.trim();
        let mut chars = trimmed.chars();
        let (first, last) = match (chars.next(), chars.next_back()) {
            (Some(f), Some(l)) => (f, l),
            _ => return trimmed,
        };
        if QUOTE_PAIRS.iter().any(|&(o, c)| o == first && c == last) {
            text = &trimmed[first.len_utf8()..trimmed.len() - last.len_utf8()];
        } else {
            return trimmed;
        }
    }
}

fn normalize_pass(raw: &str, drop_articles: bool) -> String {
    let lowered = raw.trim().to_lowercase();
    let unquoted = strip_quotes(&lowered);
    let mut out = String::with_capacity(unquoted.len());
    for token in unquoted.split_whitespace() {
        if drop_articles && matches!(token, "a" | "an" | "the") {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        match normalize_number(token) {
            Some(n) => out.push_str(&n),
            None => out.push_str(token),
        }
    }
    out
}

/// `1,000` -> `1000`, `5.0` -> `5`, `$1,200.00` -> `$1200`, `-3.50` stays.
fn normalize_number(token: &str) -> Option<String> {
    let mut rest = token;
    let mut prefix = String::new();
    if let Some(c) = rest.chars().next().filter(|c| matches!(c, '+' | '-')) {
        prefix.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if let Some(c) = rest.chars().next().filter(|c| matches!(c, '$' | '€' | '£' | '¥')) {
        prefix.push(c);
        rest = &rest[c.len_utf8()..];
    }
    let (body, suffix) = match rest.strip_suffix('%') {
        Some(b) => (b, "%"),
        None => (rest, ""),
    };
    let (int_part, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    if int_part.is_empty() {
        return None;
    }
    let digits = if int_part.contains(',') {
        let mut groups = int_part.split(',');
        let head = groups.next()?;
        if head.is_empty() || head.len() > 3 || !head.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let mut digits = String::from(head);
        for g in groups {
            if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            digits.push_str(g);
        }
        digits
    } else {
        if !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        String::from(int_part)
    };
    let mut out = prefix;
    out.push_str(&digits);
    if let Some(f) = frac {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if f.bytes().any(|b| b != b'0') {
            out.push('.');
            out.push_str(f);
        }
    }
    out.push_str(suffix);
    Some(out)
}

const NOT_ENOUGH_INFO: [&str; 5] = [
    "nei",
    "not enough info",
    "not enough information",
    "not enough evidence",
    "not_enough_info",
];

fn map_label(text: &str, labels: &[String]) -> Result<String, NormalizeError> {
    let candidate = text.trim_end_matches(['.', '!']).trim();
    let canonical: Vec<String> = labels.iter().map(|l| canonical_text(l, false)).collect();
    if let Some(hit) = canonical.iter().find(|l| l.as_str() == candidate) {
        return Ok(hit.clone());
    }
    if NOT_ENOUGH_INFO.contains(&candidate) {
        if let Some(hit) = canonical
            .iter()
            .find(|l| NOT_ENOUGH_INFO.contains(&l.as_str()))
        {
            return Ok(hit.clone());
        }
    }
    Err(NormalizeError::UnmappableLabel {
        raw: text.to_string(),
        labels: labels.to_vec(),
    })
}
