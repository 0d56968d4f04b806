use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panel_core::deliberation::Engine;
use panel_core::table::{Query, TaskInstance, TaskKind};
use panel::datasets::{self, DatasetKind};
use panel::files::{read_table_file, read_traces, TraceWriter};
use panel::runner::{
    ablate, ablation_table, bench, score_traces, write_err, write_json, DatasetInfo, OutputPaths,
    Overrides, RunError, RunSetup,
};

#[derive(Parser)]
#[command(name = "panel", version, about = "Multi-persona panel reasoning over tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question about one table.
    Ask(AskArgs),
    /// Run a configuration over a dataset and score it.
    Bench(BenchArgs),
    /// Run every ablation preset over the same tasks.
    Ablate(AblateArgs),
    /// Re-score a trace file offline.
    Score(ScoreArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Preset name or path to a JSON run file.
    #[arg(long, default_value = "paneltr")]
    config: String,
    /// Backend JSON file (openai or scripted).
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Directory of `<stage>.txt` template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on deliberation rounds.
    #[arg(long = "t-max")]
    t_max: Option<u32>,
    /// Cap on self-review refinements.
    #[arg(long = "t-max-self")]
    t_max_self: Option<u32>,
}

impl PipelineArgs {
    fn setup(&self) -> Result<RunSetup, RunError> {
        RunSetup::resolve(
            &self.config,
            &Overrides {
                seed: self.seed,
                t_max_panel: self.t_max,
                t_max_self: self.t_max_self,
                backend: self.backend.clone(),
                templates: self.templates.clone(),
            },
        )
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskChoice {
    Qa,
    Sql,
    Verify,
}

#[derive(Args)]
struct AskArgs {
    /// CSV file, or a table in the pipe-delimited flattened form.
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, value_enum, default_value = "qa")]
    task: TaskChoice,
    /// Comma-separated labels for `--task verify`.
    #[arg(long, default_value = "supported,refuted,not enough info")]
    labels: String,
    /// Write the deliberation trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    kind: DatasetKind,
    /// Dataset file; the bundled ten-item fixture when omitted.
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

impl DataArgs {
    fn tasks(&self) -> Result<Vec<TaskInstance>, RunError> {
        Ok(match &self.path {
            Some(p) => datasets::load_all(self.kind, p, self.limit)?,
            None => {
                let mut t = datasets::fixture(self.kind);
                t.truncate(self.limit.unwrap_or(usize::MAX));
                t
            }
        })
    }

    fn info(&self) -> DatasetInfo {
        DatasetInfo::new(self.kind, self.path.as_deref(), self.limit)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Concurrent panel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for traces.jsonl, report.json and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace file path, overriding `<out>/traces.jsonl`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for per-preset artifacts and ablation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trace file written by `bench` or `ask`.
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn cmd_ask(args: &AskArgs) -> Result<(), RunError> {
    let setup = args.pipeline.setup()?;
    let (table, context) = read_table_file(&args.table)?;
    let kind = match args.task {
        TaskChoice::Qa => TaskKind::QaFreeform,
        TaskChoice::Sql => TaskKind::SqlDenotation,
        TaskChoice::Verify => TaskKind::fact_verify(args.labels.split(',').map(str::trim))
            .map_err(|e| RunError::ConfigFile {
                path: "--labels".into(),
                reason: e.to_string(),
            })?,
    };
    let query = Query::new(args.query.clone()).map_err(|e| RunError::ConfigFile {
        path: "--query".into(),
        reason: e.to_string(),
    })?;
    let task = TaskInstance {
        id: "ask".into(),
        table,
        context,
        query,
        kind,
        gold: None,
        evidence: None,
    };
    let backend = setup.backend.build()?;
    let engine = Engine::new(backend.as_ref(), &setup.templates).with_settings(setup.settings());
    let result = engine.run_panel(&task, &setup.config);
    let trace = match &result {
        Ok(t) => Some(t),
        Err(e) => e.trace(),
    };
    if let (Some(path), Some(trace)) = (&args.trace, trace) {
        write_trace(path, trace)?;
    }
    let trace = result?;
    if let Some(answer) = &trace.final_answer {
        println!("{}", answer.raw);
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &panel_core::deliberation::DeliberationTrace) -> Result<(), RunError> {
    let mut w = TraceWriter::create(path)?;
    w.write(trace).map_err(write_err(path))?;
    w.finish().map_err(write_err(path))?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), RunError> {
    let setup = args.pipeline.setup()?;
    let tasks = args.data.tasks()?;
    let backend = setup.backend.build()?;
    let paths = OutputPaths {
        out_dir: args.out.clone(),
        trace: args.trace.clone(),
    };
    let result = bench(&setup, backend.as_ref(), &tasks, args.data.info(), args.jobs, &paths)?;
    print_json(&result.report);
    if result.all_failed() {
        return Err(RunError::AllFailed(result.outcomes.len()));
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), RunError> {
    let setup = RunSetup::resolve(
        "paneltr",
        &Overrides {
            seed: Some(args.seed),
            backend: args.backend.clone(),
            templates: args.templates.clone(),
            ..Overrides::default()
        },
    )?;
    let tasks = args.data.tasks()?;
    let rows = ablate(
        &setup.backend,
        &setup.templates,
        &tasks,
        &args.data.info(),
        args.seed,
        args.jobs,
        args.out.as_deref(),
    )?;
    print!("{}", ablation_table(&rows));
    if rows.iter().all(|r| r.errors == tasks.len() && !tasks.is_empty()) {
        return Err(RunError::AllFailed(tasks.len()));
    }
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<(), RunError> {
    let traces = read_traces(&args.trace)?;
    let tasks = args.data.tasks()?;
    let report = score_traces(&tasks, &traces)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ask(a) => cmd_ask(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Score(a) => cmd_score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
