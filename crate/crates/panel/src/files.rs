//! Template directories, trace files and table input files.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use panel_core::deliberation::DeliberationTrace;
use panel_core::prompt::{PromptError, TemplateSet, TemplateSlot};
use panel_core::table::{parse_flattened, ContextPassages, Table, TableError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("template {path}: {source}")]
    Template { path: String, source: PromptError },
    #[error("{path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Table { path: String, source: TableError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FileError + '_ {
    move |source| FileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Default templates, with any `<stem>.txt` found in `dir` taking over its
/// slot. Missing files keep the default.
pub fn load_templates(dir: &Path) -> Result<TemplateSet, FileError> {
    if !dir.is_dir() {
        return Err(FileError::Io {
            path: dir.display().to_string(),
            source: io::Error::new(io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut set = TemplateSet::default();
    for slot in TemplateSlot::ALL {
        let path = dir.join(format!("{}.txt", slot.file_stem()));
        if !path.exists() {
            continue;
        }
        let body = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        set.set(slot, body).map_err(|source| FileError::Template {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(set)
}

/// One trace per line.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, FileError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self::new(BufWriter::new(file)))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, trace: &DeliberationTrace) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, trace)?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn trace_line(trace: &DeliberationTrace) -> String {
    serde_json::to_string(trace).expect("traces serialize")
}

/// Reads a trace file; a malformed or truncated line is reported with its
/// number.
pub fn read_traces(path: &Path) -> Result<Vec<DeliberationTrace>, FileError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = serde_json::from_str(&line).map_err(|e| FileError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

/// A `.csv` file (first record is the header), or anything else in the
/// pipe-delimited flattened form.
pub fn read_table_file(path: &Path) -> Result<(Table, ContextPassages), FileError> {
    let shown = path.display().to_string();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| FileError::Parse {
                path: shown.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
        let mut records = Vec::new();
        for (i, r) in reader.records().enumerate() {
            let r = r.map_err(|e| FileError::Parse {
                path: shown.clone(),
                line: e.position().map_or(i + 1, |p| p.line() as usize),
                reason: e.to_string(),
            })?;
            records.push(r.iter().map(str::to_string).collect::<Vec<_>>());
        }
        let mut it = records.into_iter();
        let headers = it.next().unwrap_or_default();
        let table = Table::new(None, headers, it.collect()).map_err(|source| FileError::Table {
            path: shown,
            source,
        })?;
        return Ok((table, ContextPassages::default()));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_flattened(&text).map_err(|source| FileError::Table { path: shown, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_flattened_tables() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("t.csv");
        std::fs::write(&csv, "Year,Revenue\n2019,100\n2020,\"1,200\"\n").unwrap();
        let (t, ctx) = read_table_file(&csv).unwrap();
        assert_eq!(t.headers(), ["Year", "Revenue"]);
        assert_eq!(t.rows()[1], ["2020", "1,200"]);
        assert!(ctx.is_empty());
        let flat = dir.path().join("t.txt");
        std::fs::write(&flat, "Caption: Sales\nYear | Revenue\n2019 | 100\n\n[P1] Up.").unwrap();
        let (t, ctx) = read_table_file(&flat).unwrap();
        assert_eq!(t.caption(), Some("Sales"));
        assert_eq!(ctx.passages, ["Up."]);
    }

    #[test]
    fn template_dir_overrides_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("solve_direct.txt"), "Q: {query}\n{flattened_input}").unwrap();
        let set = load_templates(dir.path()).unwrap();
        assert_eq!(set.get(TemplateSlot::SolveDirect).body, "Q: {query}\n{flattened_input}");
        assert_eq!(set.get(TemplateSlot::Verify), TemplateSet::default().get(TemplateSlot::Verify));
        std::fs::write(dir.path().join("verify.txt"), "no placeholders").unwrap();
        assert!(matches!(load_templates(dir.path()), Err(FileError::Template { .. })));
    }

    #[test]
    fn truncated_trace_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"task_id\": \"x\"").unwrap();
        assert!(matches!(read_traces(&p), Err(FileError::Parse { line: 1, .. })));
    }

    proptest::proptest! {
        #[test]
        fn csv_tables_round_trip(
            cells in proptest::collection::vec(proptest::collection::vec("[ -~\n]{0,8}", 3), 1..6),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.csv");
            let mut w = csv::Writer::from_path(&path).unwrap();
            for row in &cells {
                w.write_record(row).unwrap();
            }
            w.flush().unwrap();
            let (t, _) = read_table_file(&path).unwrap();
            proptest::prop_assert_eq!(t.headers(), &cells[0][..]);
            proptest::prop_assert_eq!(t.rows(), &cells[1..]);
        }
    }
}
