//! Benchmark loaders and the bundled ten-item fixtures.
//!
//! Every loader is a lazy iterator over the input file. The only state held
//! in memory besides the current record is the WikiSQL table index and, for
//! SEM-TAB-FACTS statement lists, the most recent CSV table.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Cursor, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use panel_core::table::{
    Answer, ContextPassages, FeverousEvidence, Query, Table, TaskInstance, TaskKind,
};
use quick_xml::events::{BytesStart, Event};
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    TatQa,
    SemTabFacts,
    WikiSql,
    Feverous,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::TatQa,
        DatasetKind::SemTabFacts,
        DatasetKind::WikiSql,
        DatasetKind::Feverous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TatQa => "tatqa",
            DatasetKind::SemTabFacts => "semtabfacts",
            DatasetKind::WikiSql => "wikisql",
            DatasetKind::Feverous => "feverous",
        }
    }

    /// The task kind every instance of this dataset carries.
    pub fn task_kind(self) -> TaskKind {
        match self {
            DatasetKind::TatQa => TaskKind::QaFreeform,
            DatasetKind::WikiSql => TaskKind::SqlDenotation,
            DatasetKind::SemTabFacts => {
                TaskKind::fact_verify(["entailed", "refuted", "unknown"]).expect("labels")
            }
            DatasetKind::Feverous => {
                TaskKind::fact_verify(["supports", "refutes", "nei"]).expect("labels")
            }
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| format!("unknown dataset {s:?}; expected one of tatqa, semtabfacts, wikisql, feverous"))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
}

fn parse_err(line: usize, reason: impl fmt::Display) -> DatasetError {
    DatasetError::Parse {
        line,
        reason: reason.to_string(),
    }
}

pub type TaskResult = Result<TaskInstance, DatasetError>;
pub type TaskStream = Box<dyn Iterator<Item = TaskResult> + Send>;

fn open(path: &Path) -> Result<BufReader<File>, DatasetError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// `dir/name.jsonl` -> `dir/name.<suffix>.jsonl`
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("jsonl");
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

/// Streams the instances of a dataset file in file order.
pub fn load(kind: DatasetKind, path: &Path, limit: Option<usize>) -> Result<TaskStream, DatasetError> {
    let stream: TaskStream = match kind {
        DatasetKind::TatQa => Box::new(tatqa(open(path)?)),
        DatasetKind::SemTabFacts => {
            let is_list = path.extension().is_some_and(|e| e == "jsonl");
            if is_list {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                Box::new(semtab_list(open(path)?, base))
            } else if path.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                    .map_err(|source| DatasetError::Io {
                        path: path.display().to_string(),
                        source,
                    })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "xml"))
                    .collect();
                files.sort();
                let mut readers = Vec::with_capacity(files.len());
                for f in &files {
                    readers.push(open(f)?);
                }
                Box::new(readers.into_iter().flat_map(semtab_xml))
            } else {
                Box::new(semtab_xml(open(path)?))
            }
        }
        DatasetKind::WikiSql => {
            let tables = open(&sibling(path, "tables"))?;
            Box::new(wikisql(open(path)?, tables)?)
        }
        DatasetKind::Feverous => {
            let retrieved = open(&sibling(path, "retrieved"))?;
            Box::new(feverous(open(path)?, retrieved))
        }
    };
    Ok(match limit {
        Some(n) => Box::new(stream.take(n)),
        None => stream,
    })
}

/// Reads a whole dataset, stopping at the first error.
pub fn load_all(kind: DatasetKind, path: &Path, limit: Option<usize>) -> Result<Vec<TaskInstance>, DatasetError> {
    load(kind, path, limit)?.collect()
}

const TATQA_FIXTURE: &str = include_str!("../fixtures/tatqa_mini.json");
const SEMTAB_FIXTURE: &str = include_str!("../fixtures/semtabfacts_mini.xml");
const WIKISQL_FIXTURE: &str = include_str!("../fixtures/wikisql_mini.jsonl");
const WIKISQL_TABLES_FIXTURE: &str = include_str!("../fixtures/wikisql_mini.tables.jsonl");
const FEVEROUS_FIXTURE: &str = include_str!("../fixtures/feverous_mini.jsonl");
const FEVEROUS_RETRIEVED_FIXTURE: &str = include_str!("../fixtures/feverous_mini.retrieved.jsonl");

fn reader(text: &'static str) -> Cursor<&'static [u8]> {
    Cursor::new(text.as_bytes())
}

/// The bundled ten-item fixture, parsed by the same loaders as real files.
pub fn fixture(kind: DatasetKind) -> Vec<TaskInstance> {
    let items: Result<Vec<_>, _> = match kind {
        DatasetKind::TatQa => tatqa(reader(TATQA_FIXTURE)).collect(),
        DatasetKind::SemTabFacts => semtab_xml(reader(SEMTAB_FIXTURE)).collect(),
        DatasetKind::WikiSql => wikisql(reader(WIKISQL_FIXTURE), reader(WIKISQL_TABLES_FIXTURE))
            .expect("fixture tables")
            .collect(),
        DatasetKind::Feverous => {
            feverous(reader(FEVEROUS_FIXTURE), reader(FEVEROUS_RETRIEVED_FIXTURE)).collect()
        }
    };
    items.expect("bundled fixture parses")
}

/// Writes the fixture files for `kind` into `dir` and returns the path to
/// pass to `load`.
pub fn write_fixture(kind: DatasetKind, dir: &Path) -> io::Result<PathBuf> {
    let files: &[(&str, &str)] = match kind {
        DatasetKind::TatQa => &[("tatqa_mini.json", TATQA_FIXTURE)],
        DatasetKind::SemTabFacts => &[("semtabfacts_mini.xml", SEMTAB_FIXTURE)],
        DatasetKind::WikiSql => &[
            ("wikisql_mini.jsonl", WIKISQL_FIXTURE),
            ("wikisql_mini.tables.jsonl", WIKISQL_TABLES_FIXTURE),
        ],
        DatasetKind::Feverous => &[
            ("feverous_mini.jsonl", FEVEROUS_FIXTURE),
            ("feverous_mini.retrieved.jsonl", FEVEROUS_RETRIEVED_FIXTURE),
        ],
    };
    for (name, text) in files {
        std::fs::write(dir.join(name), text)?;
    }
    Ok(dir.join(files[0].0))
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Gold answers that are lists become one comma-separated string.
fn answer_text(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(cell_text).collect::<Vec<_>>().join(", "),
        other => cell_text(other),
    }
}

fn build_table(line: usize, caption: Option<String>, headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Table, DatasetError> {
    Table::new(caption, headers, rows).map_err(|e| parse_err(line, e))
}

#[allow(clippy::too_many_arguments)]
fn task(
    line: usize,
    id: String,
    table: Table,
    context: ContextPassages,
    query: &str,
    kind: &TaskKind,
    gold: &str,
    evidence: Option<FeverousEvidence>,
) -> TaskResult {
    let query = Query::new(query).map_err(|e| parse_err(line, e))?;
    let gold = Answer::new(gold, kind).map_err(|_| DatasetError::UnknownLabel {
        line,
        label: gold.to_string(),
    })?;
    Ok(TaskInstance {
        id,
        table,
        context,
        query,
        kind: kind.clone(),
        gold: Some(gold),
        evidence,
    })
}

/// Yields the top-level elements of a JSON array one at a time, with the
/// line each element starts on.
struct JsonArrayElements<R> {
    bytes: io::Bytes<R>,
    line: usize,
    started: bool,
    done: bool,
}

impl<R: BufRead> JsonArrayElements<R> {
    fn new(reader: R) -> Self {
        Self {
            bytes: reader.bytes(),
            line: 1,
            started: false,
            done: false,
        }
    }

    fn next_byte(&mut self) -> Result<Option<u8>, DatasetError> {
        match self.bytes.next() {
            None => Ok(None),
            Some(Ok(b)) => {
                if b == b'\n' {
                    self.line += 1;
                }
                Ok(Some(b))
            }
            Some(Err(e)) => Err(parse_err(self.line, e)),
        }
    }

    fn next_element(&mut self) -> Result<Option<(usize, String)>, DatasetError> {
        if !self.started {
            loop {
                match self.next_byte()? {
                    Some(b) if b.is_ascii_whitespace() => continue,
                    Some(b'[') => break,
                    Some(_) => return Err(parse_err(self.line, "expected a JSON array")),
                    None => return Err(parse_err(self.line, "empty input")),
                }
            }
            self.started = true;
        }
        let mut buf = Vec::new();
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut start_line = self.line;
        loop {
            let Some(b) = self.next_byte()? else {
                return Err(parse_err(self.line, "unterminated JSON array"));
            };
            if in_string {
                buf.push(b);
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b if b.is_ascii_whitespace() && buf.is_empty() => {}
                b',' if depth == 0 => {
                    if buf.is_empty() {
                        return Err(parse_err(self.line, "empty array element"));
                    }
                    break;
                }
                b']' if depth == 0 => {
                    self.done = true;
                    if buf.is_empty() {
                        return Ok(None);
                    }
                    break;
                }
                _ => {
                    if buf.is_empty() {
                        start_line = self.line;
                    }
                    match b {
                        b'{' | b'[' => depth += 1,
                        b'}' | b']' => depth = depth.saturating_sub(1),
                        b'"' => in_string = true,
                        _ => {}
                    }
                    buf.push(b);
                }
            }
        }
        let text = String::from_utf8(buf).map_err(|e| parse_err(start_line, e))?;
        Ok(Some((start_line, text)))
    }
}

impl<R: BufRead> Iterator for JsonArrayElements<R> {
    type Item = Result<(usize, String), DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_element() {
            Ok(Some(x)) => Some(Ok(x)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Parses one JSON value, shifting error lines to file coordinates.
fn parse_json<T: for<'de> Deserialize<'de>>(start_line: usize, text: &str) -> Result<T, DatasetError> {
    serde_json::from_str(text).map_err(|e| parse_err(start_line + e.line().saturating_sub(1), e))
}

#[derive(Deserialize)]
struct TatDoc {
    table: TatTable,
    #[serde(default)]
    paragraphs: Vec<TatParagraph>,
    questions: Vec<TatQuestion>,
}

#[derive(Deserialize)]
struct TatTable {
    table: Vec<Vec<Value>>,
}

#[derive(Deserialize)]
struct TatParagraph {
    #[serde(default)]
    order: Option<i64>,
    text: String,
}

#[derive(Deserialize)]
struct TatQuestion {
    uid: String,
    question: String,
    answer: Value,
}

/// Documents with a table, paragraphs and questions; one task per question.
/// Stops after the first malformed document.
fn tatqa<R: BufRead + Send + 'static>(reader: R) -> impl Iterator<Item = TaskResult> + Send {
    let kind = TaskKind::QaFreeform;
    let mut docs = JsonArrayElements::new(reader);
    let mut pending: std::vec::IntoIter<TaskResult> = Vec::new().into_iter();
    let mut failed = false;
    std::iter::from_fn(move || loop {
        if let Some(t) = pending.next() {
            return Some(t);
        }
        if failed {
            return None;
        }
        let (line, text) = match docs.next()? {
            Ok(x) => x,
            Err(e) => {
                failed = true;
                return Some(Err(e));
            }
        };
        match tatqa_doc(line, &text, &kind) {
            Ok(tasks) => pending = tasks.into_iter(),
            Err(e) => {
                failed = true;
                return Some(Err(e));
            }
        }
    })
}

fn tatqa_doc(line: usize, text: &str, kind: &TaskKind) -> Result<Vec<TaskResult>, DatasetError> {
    let doc: TatDoc = parse_json(line, text)?;
    let mut grid = doc.table.table.into_iter();
    let headers: Vec<String> = grid
        .next()
        .ok_or_else(|| parse_err(line, "table has no rows"))?
        .iter()
        .map(cell_text)
        .collect();
    let rows: Vec<Vec<String>> = grid.map(|r| r.iter().map(cell_text).collect()).collect();
    let table = build_table(line, None, headers, rows)?;
    let mut paragraphs = doc.paragraphs;
    paragraphs.sort_by_key(|p| p.order.unwrap_or(i64::MAX));
    let context = ContextPassages::new(paragraphs.into_iter().map(|p| p.text).collect());
    Ok(doc
        .questions
        .into_iter()
        .map(|q| {
            task(
                line,
                q.uid,
                table.clone(),
                context.clone(),
                &q.question,
                kind,
                &answer_text(&q.answer),
                None,
            )
        })
        .collect())
}

/// Counts newlines as the XML reader consumes its input, for error lines.
struct LineCounter<R> {
    inner: R,
    line: usize,
}

impl<R: Read> Read for LineCounter<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        // the XML reader only uses fill_buf/consume
        self.inner.read(buf)
    }
}

impl<R: BufRead> BufRead for LineCounter<R> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        if let Ok(buf) = self.inner.fill_buf() {
            let n = amt.min(buf.len());
            self.line += buf[..n].iter().filter(|&&b| b == b'\n').count();
        }
        self.inner.consume(amt);
    }
}

#[derive(Default)]
struct XmlTable {
    line: usize,
    id: String,
    caption: Option<String>,
    rows: Vec<(usize, Vec<(usize, String)>)>,
    statements: Vec<(usize, String, String, String)>,
}

fn attr(e: &BytesStart<'_>, name: &str, line: usize) -> Result<Option<String>, DatasetError> {
    match e.try_get_attribute(name) {
        Ok(Some(a)) => a
            .unescape_value()
            .map(|v| Some(v.into_owned()))
            .map_err(|err| parse_err(line, err)),
        Ok(None) => Ok(None),
        Err(err) => Err(parse_err(line, err)),
    }
}

fn index_attr(e: &BytesStart<'_>, name: &str, line: usize, fallback: usize) -> Result<usize, DatasetError> {
    match attr(e, name, line)? {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad {name} index {v:?}"))),
        None => Ok(fallback),
    }
}

/// Native SEM-TAB-FACTS XML: `<table>` elements holding `<row>`/`<cell
/// text=..>` and `<statements>`/`<statement text=.. type=..>`. Yields each
/// table's statements once its closing tag has been read.
fn semtab_xml<R: BufRead + Send + 'static>(reader: R) -> impl Iterator<Item = TaskResult> + Send {
    let kind = DatasetKind::SemTabFacts.task_kind();
    let mut xml = quick_xml::Reader::from_reader(LineCounter {
        inner: reader,
        line: 1,
    });
    let mut buf = Vec::new();
    let mut current: Option<XmlTable> = None;
    let mut pending: std::vec::IntoIter<TaskResult> = Vec::new().into_iter();
    let mut done = false;
    std::iter::from_fn(move || loop {
        if let Some(t) = pending.next() {
            return Some(t);
        }
        if done {
            return None;
        }
        buf.clear();
        let event = xml.read_event_into(&mut buf);
        let line = xml.get_ref().line;
        let step: Result<(), DatasetError> = match event {
            Err(e) => Err(parse_err(line, e)),
            Ok(Event::Eof) => {
                done = true;
                if current.is_some() {
                    Err(parse_err(line, "unclosed <table>"))
                } else {
                    Ok(())
                }
            }
            Ok(Event::Start(e)) | Ok(Event::Empty(e)) => {
                semtab_open(&e, line, &mut current)
            }
            Ok(Event::End(e)) if e.name().as_ref() == b"table" => match current.take() {
                Some(t) => {
                    pending = semtab_tasks(t, &kind).into_iter();
                    Ok(())
                }
                None => Err(parse_err(line, "stray </table>")),
            },
            Ok(_) => Ok(()),
        };
        if let Err(e) = step {
            done = true;
            return Some(Err(e));
        }
    })
}

fn semtab_open(e: &BytesStart<'_>, line: usize, current: &mut Option<XmlTable>) -> Result<(), DatasetError> {
    match e.name().as_ref() {
        b"table" => {
            if current.is_some() {
                return Err(parse_err(line, "nested <table>"));
            }
            *current = Some(XmlTable {
                line,
                id: attr(e, "id", line)?.unwrap_or_default(),
                ..XmlTable::default()
            });
        }
        b"caption" => {
            if let Some(t) = current.as_mut() {
                t.caption = attr(e, "text", line)?;
            }
        }
        b"row" => {
            if let Some(t) = current.as_mut() {
                let idx = index_attr(e, "row", line, t.rows.len())?;
                t.rows.push((idx, Vec::new()));
            }
        }
        b"cell" => {
            let t = current.as_mut().ok_or_else(|| parse_err(line, "<cell> outside a table"))?;
            let (_, cells) = t.rows.last_mut().ok_or_else(|| parse_err(line, "<cell> outside a row"))?;
            let idx = index_attr(e, "col", line, cells.len())?;
            cells.push((idx, attr(e, "text", line)?.unwrap_or_default()));
        }
        b"statement" => {
            let t = current.as_mut().ok_or_else(|| parse_err(line, "<statement> outside a table"))?;
            let id = attr(e, "id", line)?.unwrap_or_else(|| format!("{}", t.statements.len() + 1));
            let text = attr(e, "text", line)?.ok_or_else(|| parse_err(line, "statement without text"))?;
            let label = attr(e, "type", line)?.ok_or_else(|| parse_err(line, "statement without type"))?;
            t.statements.push((line, id, text, label));
        }
        _ => {}
    }
    Ok(())
}

fn semtab_tasks(t: XmlTable, kind: &TaskKind) -> Vec<TaskResult> {
    let mut rows = t.rows;
    rows.sort_by_key(|(i, _)| *i);
    let mut grid = rows.into_iter().map(|(_, mut cells)| {
        cells.sort_by_key(|(i, _)| *i);
        cells.into_iter().map(|(_, c)| c).collect::<Vec<_>>()
    });
    let headers = match grid.next() {
        Some(h) => h,
        None => return vec![Err(parse_err(t.line, format!("table {:?} has no rows", t.id)))],
    };
    let table = match build_table(t.line, t.caption, headers, grid.collect()) {
        Ok(table) => table,
        Err(e) => return vec![Err(e)],
    };
    let prefix = if t.id.is_empty() { String::new() } else { format!("{}/", t.id) };
    t.statements
        .into_iter()
        .map(|(line, id, text, label)| {
            task(
                line,
                format!("{prefix}{id}"),
                table.clone(),
                ContextPassages::default(),
                &text,
                kind,
                &label,
                None,
            )
        })
        .collect()
}

#[derive(Deserialize)]
struct SemTabListItem {
    id: String,
    table: String,
    statement: String,
    label: String,
    #[serde(default)]
    caption: Option<String>,
}

fn read_csv_table(path: &Path, line: usize, caption: Option<String>) -> Result<Table, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(line, format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for r in reader.records() {
        let r = r.map_err(|e| parse_err(line, format!("{}: {e}", path.display())))?;
        records.push(r.iter().map(str::to_string).collect::<Vec<_>>());
    }
    let mut it = records.into_iter();
    let headers = it
        .next()
        .ok_or_else(|| parse_err(line, format!("{} is empty", path.display())))?;
    build_table(line, caption, headers, it.collect())
}

/// Statement list in JSON lines, each naming a CSV table file relative to
/// the list.
fn semtab_list<R: BufRead + Send + 'static>(reader: R, base: PathBuf) -> impl Iterator<Item = TaskResult> + Send {
    let kind = DatasetKind::SemTabFacts.task_kind();
    let mut cached: Option<(PathBuf, Option<String>, Table)> = None;
    json_lines(reader).map(move |item| {
        let (line, text) = item?;
        let it: SemTabListItem = parse_json(line, &text)?;
        let path = base.join(&it.table);
        let table = match &cached {
            Some((p, c, t)) if *p == path && *c == it.caption => t.clone(),
            _ => {
                let t = read_csv_table(&path, line, it.caption.clone())?;
                cached = Some((path, it.caption.clone(), t.clone()));
                t
            }
        };
        task(line, it.id, table, ContextPassages::default(), &it.statement, &kind, &it.label, None)
    })
}

/// Non-blank lines with their 1-based line numbers.
fn json_lines<R: BufRead + Send>(reader: R) -> impl Iterator<Item = Result<(usize, String), DatasetError>> + Send {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(parse_err(i + 1, e))),
        })
}

#[derive(Deserialize)]
struct WikiTable {
    id: String,
    #[serde(default)]
    page_title: Option<String>,
    header: Vec<Value>,
    rows: Vec<Vec<Value>>,
}

#[derive(Deserialize)]
struct WikiQuestion {
    #[serde(default)]
    id: Option<String>,
    question: String,
    table_id: String,
    denotation: Value,
}

/// Questions in JSON lines with a gold denotation, plus a table file keyed
/// by id.
fn wikisql<R: BufRead + Send + 'static, T: BufRead + Send>(
    reader: R,
    tables: T,
) -> Result<impl Iterator<Item = TaskResult> + Send, DatasetError> {
    let mut index: HashMap<String, Table> = HashMap::new();
    for item in json_lines(tables) {
        let (line, text) = item?;
        let t: WikiTable = parse_json(line, &text)?;
        let headers = t.header.iter().map(cell_text).collect();
        let rows = t.rows.iter().map(|r| r.iter().map(cell_text).collect()).collect();
        index.insert(t.id, build_table(line, t.page_title, headers, rows)?);
    }
    let kind = TaskKind::SqlDenotation;
    Ok(json_lines(reader).map(move |item| {
        let (line, text) = item?;
        let q: WikiQuestion = parse_json(line, &text)?;
        let table = index
            .get(&q.table_id)
            .ok_or_else(|| parse_err(line, format!("unknown table id {:?}", q.table_id)))?
            .clone();
        let id = q.id.unwrap_or_else(|| format!("wikisql-{line}"));
        task(
            line,
            id,
            table,
            ContextPassages::default(),
            &q.question,
            &kind,
            &answer_text(&q.denotation),
            None,
        )
    }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EvidenceSet {
    Ids(Vec<String>),
    Content { content: Vec<String> },
}

#[derive(Deserialize)]
struct FevClaim {
    id: Value,
    claim: String,
    label: String,
    #[serde(default)]
    evidence: Vec<EvidenceSet>,
}

#[derive(Deserialize)]
struct FevTable {
    #[serde(default)]
    caption: Option<String>,
    header: Vec<Value>,
    #[serde(default)]
    rows: Vec<Vec<Value>>,
}

#[derive(Deserialize)]
struct FevRetrieved {
    id: Value,
    #[serde(default)]
    retrieved_ids: Vec<String>,
    #[serde(default)]
    table: Option<FevTable>,
    #[serde(default)]
    passages: Vec<String>,
}

/// Claims in JSON lines plus the retriever's output in a second file with
/// the same order. Claims without a retrieved table get a one-column
/// placeholder table and carry their evidence as passages.
fn feverous<R: BufRead + Send + 'static, S: BufRead + Send + 'static>(
    claims: R,
    retrieved: S,
) -> impl Iterator<Item = TaskResult> + Send {
    let kind = DatasetKind::Feverous.task_kind();
    let mut retrieved = json_lines(retrieved);
    json_lines(claims).map(move |item| {
        let (line, text) = item?;
        let c: FevClaim = parse_json(line, &text)?;
        let id = cell_text(&c.id);
        let (rline, rtext) = retrieved
            .next()
            .ok_or_else(|| parse_err(line, format!("no retrieval record for claim {id:?}")))??;
        let r: FevRetrieved = parse_json(rline, &rtext)?;
        if cell_text(&r.id) != id {
            return Err(parse_err(
                rline,
                format!("retrieval record {:?} does not match claim {id:?}", cell_text(&r.id)),
            ));
        }
        let table = match r.table {
            Some(t) => build_table(
                rline,
                t.caption,
                t.header.iter().map(cell_text).collect(),
                t.rows.iter().map(|row| row.iter().map(cell_text).collect()).collect(),
            )?,
            None => build_table(rline, None, vec!["Evidence".into()], Vec::new())?,
        };
        let gold_sets = c
            .evidence
            .into_iter()
            .map(|e| match e {
                EvidenceSet::Ids(ids) | EvidenceSet::Content { content: ids } => {
                    ids.into_iter().collect::<BTreeSet<_>>()
                }
            })
            .filter(|s| !s.is_empty())
            .collect();
        let evidence = FeverousEvidence {
            retrieved_ids: r.retrieved_ids.into_iter().collect(),
            gold_sets,
        };
        task(
            line,
            id,
            table,
            ContextPassages::new(r.passages),
            &c.claim,
            &kind,
            &c.label,
            Some(evidence),
        )
    })
}
