//! Benchmark, ablation and offline scoring runs over task lists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::{DateTime, Utc};
use panel_core::backend::ChatBackend;
use panel_core::config::{preset, ConfigError, PipelineConfig, PipelineStage, PRESET_NAMES};
use panel_core::deliberation::{DeliberationTrace, Engine, PanelError, RequestSettings, TraceStatus};
use panel_core::metrics::{score_run, MetricError, MetricReport, Prediction};
use panel_core::personas::Panel;
use panel_core::prompt::TemplateSet;
use panel_core::table::TaskInstance;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DatasetError, DatasetKind};
use crate::files::{load_templates, FileError, TraceWriter};
use crate::gateway::{BackendConfig, BackendSpec, GatewayError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config file {path}: {reason}")]
    ConfigFile { path: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("all {0} tasks failed")]
    AllFailed(usize),
}

impl RunError {
    /// 2 for failures on the model side, 1 for everything the operator can
    /// fix in the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Panel(PanelError::Aborted { .. } | PanelError::NoSolution { .. })
            | RunError::AllFailed(_) => 2,
            _ => 1,
        }
    }
}

pub fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Write {
        path: path.display().to_string(),
        source,
    }
}

/// A `--config` JSON file. Pipeline fields override the base preset
/// (default `paneltr`); command-line flags override both.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub preset: Option<String>,
    pub stages: Option<BTreeSet<PipelineStage>>,
    pub t_max_self: Option<u32>,
    pub t_max_panel: Option<u32>,
    pub panel: Option<Panel>,
    pub ordering_seed: Option<u64>,
    pub format_retry: Option<u32>,
    pub backend: Option<BackendSpec>,
    /// Template directory, relative to the config file.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub t_max_panel: Option<u32>,
    pub t_max_self: Option<u32>,
    pub backend: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

/// Everything needed to run a pipeline.
pub struct RunSetup {
    pub config_name: String,
    pub config: PipelineConfig,
    pub backend: BackendSpec,
    pub templates: TemplateSet,
}

impl RunSetup {
    /// Resolves `--config <name|file>` plus overrides.
    pub fn resolve(config: &str, overrides: &Overrides) -> Result<Self, RunError> {
        let path = Path::new(config);
        let (name, file, base_dir) = if PRESET_NAMES.contains(&config) || !path.exists() {
            (config.to_string(), RunFile::default(), None)
        } else {
            let text = std::fs::read_to_string(path).map_err(|e| RunError::ConfigFile {
                path: config.into(),
                reason: e.to_string(),
            })?;
            let file: RunFile = serde_json::from_str(&text).map_err(|e| RunError::ConfigFile {
                path: config.into(),
                reason: e.to_string(),
            })?;
            (config.to_string(), file, path.parent().map(Path::to_path_buf))
        };
        let base = file.preset.as_deref().unwrap_or(if base_dir.is_some() { "paneltr" } else { name.as_str() });
        let seed = overrides.seed.or(file.ordering_seed).unwrap_or(0);
        let mut pipeline = preset(base, seed)?;
        if let Some(s) = file.stages {
            pipeline.stages = s;
        }
        if let Some(p) = file.panel {
            pipeline.panel = p;
        }
        if let Some(r) = file.format_retry {
            pipeline.format_retry = r;
        }
        if let Some(t) = overrides.t_max_self.or(file.t_max_self) {
            pipeline.t_max_self = t;
        }
        if let Some(t) = overrides.t_max_panel.or(file.t_max_panel) {
            pipeline.t_max_panel = t;
        }
        pipeline.validate()?;

        let backend = match &overrides.backend {
            Some(p) => BackendSpec::load(p)?,
            None => file
                .backend
                .unwrap_or_else(|| BackendSpec::Openai(BackendConfig::new("https://api.deepseek.com"))),
        };
        let template_dir = overrides.templates.clone().or_else(|| {
            file.templates
                .map(|t| base_dir.as_deref().map_or(t.clone(), |d| d.join(&t)))
        });
        let templates = match template_dir {
            Some(dir) => load_templates(&dir)?,
            None => TemplateSet::default(),
        };
        Ok(Self {
            config_name: name,
            config: pipeline,
            backend,
            templates,
        })
    }

    pub fn settings(&self) -> RequestSettings {
        settings_for(&self.backend)
    }
}

pub fn settings_for(backend: &BackendSpec) -> RequestSettings {
    match backend {
        BackendSpec::Openai(c) => RequestSettings {
            model_name: c.model_name.clone(),
            temperature: c.temperature,
            max_tokens: c.max_tokens,
        },
        BackendSpec::Scripted { .. } => RequestSettings::default(),
    }
}

/// One task's trace plus the error that ended it early, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub trace: DeliberationTrace,
    pub error: Option<String>,
}

fn placeholder_trace(task: &TaskInstance, config: &PipelineConfig, reason: String) -> DeliberationTrace {
    DeliberationTrace {
        task_id: task.id.clone(),
        config_digest: config.digest(),
        stages: config.stages.iter().copied().collect(),
        agents: Vec::new(),
        presentation_order: Vec::new(),
        presentations: Vec::new(),
        rounds: Vec::new(),
        outcome: None,
        final_answer: None,
        llm_calls: 0,
        status: TraceStatus::Incomplete { reason },
    }
}

fn run_one<B: ChatBackend + ?Sized>(engine: &Engine<'_, B>, task: &TaskInstance, config: &PipelineConfig) -> TaskOutcome {
    match engine.run_panel(task, config) {
        Ok(trace) => TaskOutcome { trace, error: None },
        Err(e) => {
            let reason = e.to_string();
            let trace = match e {
                PanelError::Aborted { trace, .. } | PanelError::NoSolution { trace } => *trace,
                _ => placeholder_trace(task, config, reason.clone()),
            };
            TaskOutcome {
                trace,
                error: Some(reason),
            }
        }
    }
}

/// Runs every task with up to `jobs` worker threads. Each worker runs whole
/// panels; `sink` sees the outcomes on the calling thread in task order.
pub fn run_tasks<B: ChatBackend + ?Sized>(
    tasks: &[TaskInstance],
    config: &PipelineConfig,
    engine: &Engine<'_, B>,
    jobs: usize,
    mut sink: impl FnMut(&TaskOutcome),
) -> Vec<TaskOutcome> {
    let jobs = jobs.clamp(1, tasks.len().max(1));
    let mut outcomes: Vec<Option<TaskOutcome>> = vec![None; tasks.len()];
    if jobs == 1 {
        for (i, t) in tasks.iter().enumerate() {
            let o = run_one(engine, t, config);
            sink(&o);
            outcomes[i] = Some(o);
        }
    } else {
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, TaskOutcome)>();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                let tx = tx.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(task) = tasks.get(i) else { break };
                    if tx.send((i, run_one(engine, task, config))).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut waiting = BTreeMap::new();
            let mut emitted = 0;
            for (i, o) in rx {
                waiting.insert(i, o);
                while let Some(o) = waiting.remove(&emitted) {
                    sink(&o);
                    outcomes[emitted] = Some(o);
                    emitted += 1;
                }
            }
        });
    }
    outcomes.into_iter().map(|o| o.expect("every task ran")).collect()
}

/// Scores traces against their tasks by re-extracting each final answer
/// from the recorded model text. Traces may cover a subset of the tasks, in
/// any order.
pub fn score_traces(tasks: &[TaskInstance], traces: &[DeliberationTrace]) -> Result<MetricReport, MetricError> {
    let by_id: HashMap<&str, &TaskInstance> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut aligned = Vec::with_capacity(traces.len());
    let mut preds = Vec::with_capacity(traces.len());
    for (index, trace) in traces.iter().enumerate() {
        let task = by_id
            .get(trace.task_id.as_str())
            .ok_or(MetricError::IdMismatch { index })?;
        preds.push(Prediction::for_task(task, trace.replay_final(&task.kind)));
        aligned.push((*task).clone());
    }
    score_run(&aligned, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: String,
    /// `None` for the bundled fixture.
    pub path: Option<String>,
    pub limit: Option<usize>,
}

impl DatasetInfo {
    pub fn new(kind: DatasetKind, path: Option<&Path>, limit: Option<usize>) -> Self {
        Self {
            kind: kind.as_str().into(),
            path: path.map(|p| p.display().to_string()),
            limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub model: String,
    pub base_url: Option<String>,
}

impl BackendInfo {
    pub fn of(spec: &BackendSpec) -> Self {
        let (model, base_url) = spec.describe();
        Self { model, base_url }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub tasks: usize,
    pub llm_calls: u64,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub reason: String,
}

/// What was run, on what, and how it went. Holds no credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_name: String,
    pub config_digest: String,
    pub config: PipelineConfig,
    pub dataset: DatasetInfo,
    pub backend: BackendInfo,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub totals: Totals,
    #[serde(default)]
    pub failures: Vec<TaskFailure>,
}

pub struct BenchResult {
    pub outcomes: Vec<TaskOutcome>,
    pub report: MetricReport,
    pub manifest: RunManifest,
}

impl BenchResult {
    pub fn traces(&self) -> impl Iterator<Item = &DeliberationTrace> {
        self.outcomes.iter().map(|o| &o.trace)
    }

    pub fn all_failed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.error.is_some())
    }
}

/// Where bench writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct OutputPaths {
    pub out_dir: Option<PathBuf>,
    /// Overrides `<out_dir>/traces.jsonl`.
    pub trace: Option<PathBuf>,
}

impl OutputPaths {
    fn trace_path(&self) -> Option<PathBuf> {
        self.trace
            .clone()
            .or_else(|| self.out_dir.as_ref().map(|d| d.join("traces.jsonl")))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(write_err(path))
}

/// Runs one configuration over `tasks`, writing traces as they complete
/// and, with an output directory, `report.json` and `manifest.json`.
pub fn bench(
    setup: &RunSetup,
    backend: &dyn ChatBackend,
    tasks: &[TaskInstance],
    dataset: DatasetInfo,
    jobs: usize,
    paths: &OutputPaths,
) -> Result<BenchResult, RunError> {
    let started = Utc::now();
    if let Some(dir) = &paths.out_dir {
        std::fs::create_dir_all(dir).map_err(write_err(dir))?;
    }
    let mut writer = match paths.trace_path() {
        Some(p) => Some((TraceWriter::create(&p)?, p)),
        None => None,
    };
    let mut write_error = None;
    let engine = Engine::new(backend, &setup.templates).with_settings(setup.settings());
    let outcomes = run_tasks(tasks, &setup.config, &engine, jobs, |o| {
        if let Some((w, p)) = writer.as_mut() {
            if let Err(e) = w.write(&o.trace) {
                write_error.get_or_insert((p.clone(), e));
            }
        }
        if let Some(e) = &o.error {
            log::warn!("task {} failed: {e}", o.trace.task_id);
        }
    });
    if let Some((p, e)) = write_error {
        return Err(write_err(&p)(e));
    }
    if let Some((w, p)) = writer {
        w.finish().map_err(write_err(&p))?;
    }
    let traces: Vec<DeliberationTrace> = outcomes.iter().map(|o| o.trace.clone()).collect();
    let report = score_traces(tasks, &traces)?;
    let failures: Vec<TaskFailure> = outcomes
        .iter()
        .filter_map(|o| {
            o.error.as_ref().map(|r| TaskFailure {
                task_id: o.trace.task_id.clone(),
                reason: r.clone(),
            })
        })
        .collect();
    let manifest = RunManifest {
        command: "bench".into(),
        config_name: setup.config_name.clone(),
        config_digest: setup.config.digest(),
        config: setup.config.clone(),
        dataset,
        backend: BackendInfo::of(&setup.backend),
        started,
        finished: Utc::now(),
        totals: Totals {
            tasks: outcomes.len(),
            llm_calls: outcomes.iter().map(|o| o.trace.llm_calls).sum(),
            errors: failures.len(),
        },
        failures,
    };
    if let Some(dir) = &paths.out_dir {
        write_json(&dir.join("report.json"), &report)?;
        write_json(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(BenchResult {
        outcomes,
        report,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub stages: Vec<PipelineStage>,
    pub panel_size: usize,
    pub report: MetricReport,
    pub llm_calls: u64,
    pub calls_per_task: f64,
    pub errors: usize,
}

/// Every preset in declaration order over the same tasks. Each preset gets
/// a freshly built backend, so fixed scripts replay identically per row.
pub fn ablate(
    backend: &BackendSpec,
    templates: &TemplateSet,
    tasks: &[TaskInstance],
    dataset: &DatasetInfo,
    seed: u64,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, RunError> {
    let mut rows = Vec::with_capacity(PRESET_NAMES.len());
    for name in PRESET_NAMES {
        let config = preset(name, seed)?;
        let setup = RunSetup {
            config_name: name.into(),
            config,
            backend: backend.clone(),
            templates: templates.clone(),
        };
        let live = backend.build()?;
        let paths = OutputPaths {
            out_dir: out_dir.map(|d| d.join(name)),
            trace: None,
        };
        let result = bench(&setup, live.as_ref(), tasks, dataset.clone(), jobs, &paths)?;
        let n = tasks.len().max(1) as f64;
        rows.push(AblationRow {
            preset: name.into(),
            stages: setup.config.stages.iter().copied().collect(),
            panel_size: setup.config.panel.len(),
            llm_calls: result.manifest.totals.llm_calls,
            calls_per_task: result.manifest.totals.llm_calls as f64 / n,
            errors: result.manifest.totals.errors,
            report: result.report,
        });
    }
    if let Some(dir) = out_dir {
        write_json(&dir.join("ablation.json"), &rows)?;
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", x * 100.0))
}

/// Fixed-width text table, one row per preset.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8} {:>6}",
        "config", "EM", "F1", "DenAcc", "mF1", "LAcc", "FevS", "calls/t", "errors"
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>8.2} {:>6}",
            r.preset,
            cell(m.exact_match),
            cell(m.token_f1),
            cell(m.denotation_accuracy),
            cell(m.micro_f1),
            cell(m.label_accuracy),
            cell(m.feverous_score),
            r.calls_per_task,
            r.errors
        );
    }
    out
}
