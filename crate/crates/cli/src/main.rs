//! `mhop`: convert, split, check, evaluate and report on multi-hop edit cases.
//!
//! Every subcommand reads and writes files under `--output-dir`:
//!
//! | subcommand          | writes                                                         |
//! |---------------------|----------------------------------------------------------------|
//! | `convert`           | `cases.json`, `single_hop.json`, `multi_hop.json`, `conversion_report.json` |
//! | `split`             | `{cases,single_hop,multi_hop}_{train,test}.json`, `split_manifest.csv` |
//! | `oracle-check`      | `oracle_check.csv`                                              |
//! | `run`               | `outcomes_<mode>.jsonl`, `transcripts_<mode>.jsonl`             |
//! | `score`, `report`   | `report.txt`, `report.md`, `plot_data.csv`                      |
//! | `emit-train-config` | `train_config_e<epochs>.yaml`                                   |

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mhop_core::backend::{build_mock_from_records, Backend, HttpBackend, MockBackend, MockDecomposer, MockScope};
use mhop_core::datasetgen::{self, Partition, PromptTemplate};
use mhop_core::runner::{self, LogHeader, LoggedOutcome, RunOptions};
use mhop_core::scoring::{self, ReportRow, ScoreSummary};
use mhop_core::{ingest, oracle, AlpacaRecord, EvalMode, RunConfig, SourceRecord, TrainConfigSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const CASES: &str = "cases.json";
const SINGLE: &str = "single_hop.json";
const MULTI: &str = "multi_hop.json";
const CONVERSION_REPORT: &str = "conversion_report.json";
const MANIFEST: &str = "split_manifest.csv";
const ORACLE_CSV: &str = "oracle_check.csv";
const REPORT_TXT: &str = "report.txt";
const REPORT_MD: &str = "report.md";
const PLOT_CSV: &str = "plot_data.csv";

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn parse(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }
    fn empty(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }
    fn backend(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "mhop", version, about = "Multi-hop QA dataset and evaluation pipeline")]
struct Cli {
    /// TOML file supplying any of the settings below; flags win over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// -v for progress, -vv for per-case detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, clean and dedupe a source file, then write both dataset variants.
    Convert {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Seeded train/test split applied identically to cases and both variants.
    Split {
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Walk each case's chain over the fact store and compare with its answer.
    OracleCheck {
        /// Defaults to `cases.json` in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Evaluate one mode over a set of cases.
    Run(RunArgs),
    /// Score outcome logs; two logs (direct, then decomposed) give a comparison row.
    Score {
        #[arg(required = true, num_args = 1..=2)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Comparison table over several configurations.
    Report {
        /// `label=single.jsonl,multi.jsonl`; repeat for more rows.
        #[arg(long = "row", required = true)]
        rows: Vec<String>,
    },
    /// Write the LoRA training configuration as YAML.
    EmitTrainConfig {
        #[arg(long)]
        epochs: Option<u32>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    mode: EvalMode,

    /// Which cases file to evaluate; `all` uses the unsplit `cases.json`.
    #[arg(long, value_enum, default_value = "test")]
    partition: PartitionArg,

    /// Explicit cases file; overrides `--partition`.
    #[arg(long)]
    cases: Option<PathBuf>,

    /// `mock` or the base URL of a chat-completions server.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Seconds per request.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    max_hops: Option<usize>,

    /// What the mock backend knows: hop questions, or whole questions.
    #[arg(long, default_value = "hops")]
    mock_scope: MockScope,

    /// Scripted mode: replay earlier hops as conversation turns.
    #[arg(long)]
    carry_history: bool,
}

/// Settings file layout. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    input_path: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    split_ratio: Option<f64>,
    seed: Option<u64>,
    template: PromptTemplate,
    run: RunConfig,
    train: TrainConfigSpec,
}

impl PipelineConfig {
    const DEFAULT_RATIO: f64 = 0.7;
    const DEFAULT_SEED: u64 = 42;

    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Resolved settings shared by every subcommand.
struct Ctx {
    config: PipelineConfig,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_tracing(cli.verbose);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn init_tracing(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn dispatch(cli: Cli) -> Outcome {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    let out = cli
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cli.seed.or(config.seed).unwrap_or(PipelineConfig::DEFAULT_SEED);
    let ctx = Ctx { config, out, seed };

    match cli.command {
        Command::Convert { input } => convert(&ctx, input),
        Command::Split { ratio } => split(&ctx, ratio),
        Command::OracleCheck { input } => oracle_check(&ctx, input),
        Command::Run(args) => run(&ctx, args),
        Command::Score { logs, label } => score(&ctx, &logs, &label),
        Command::Report { rows } => report(&ctx, &rows),
        Command::EmitTrainConfig { epochs } => emit_train_config(&ctx, epochs),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_cases(path: &Path) -> Outcome<Vec<SourceRecord>> {
    ingest::parse_source(path).map_err(Failure::parse)
}

fn convert(ctx: &Ctx, input: Option<PathBuf>) -> Outcome {
    let input = input
        .or_else(|| ctx.config.input_path.clone())
        .ok_or_else(|| anyhow!("no input file: pass --input or set input_path"))?;
    let parsed = ingest::parse_source(&input).map_err(Failure::parse)?;
    let n_parsed = parsed.len();
    let (cleaned, invalid) = ingest::clean_with_report(parsed);
    let (deduped, dupes) = ingest::dedupe(cleaned);

    let template = &ctx.config.template;
    let mut cases = Vec::new();
    let mut single = Vec::new();
    let mut multi = Vec::new();
    let mut skipped = Vec::new();
    for r in deduped {
        match (datasetgen::to_single_hop(&r, template), datasetgen::to_multi_hop(&r, template)) {
            (Ok(s), Ok(m)) => {
                single.push(s);
                multi.push(m);
                cases.push(r);
            }
            (Err(e), _) | (_, Err(e)) => {
                tracing::warn!(case_id = %r.case_id, "skipped: {e}");
                skipped.push(serde_json::json!({"case_id": r.case_id, "reason": e.to_string()}));
            }
        }
    }

    let report = serde_json::json!({
        "input": input.display().to_string(),
        "parsed": n_parsed,
        "dropped_invalid": invalid.iter().map(|d| serde_json::json!({
            "case_id": d.case_id,
            "reasons": d.reasons.iter().map(|v| format!("{}: {} ({})", v.field, v.rule.name(), v.detail)).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "dropped_duplicates": dupes.dropped,
        "skipped": skipped,
        "written": cases.len(),
    });
    write_json(&ctx.path(CONVERSION_REPORT), &report)?;
    if cases.is_empty() {
        return Err(Failure::empty(anyhow!("no cases survived conversion of {}", input.display())));
    }
    ingest::emit_source(&cases, &ctx.path(CASES)).map_err(anyhow::Error::from)?;
    datasetgen::emit_dataset(&single, &ctx.path(SINGLE)).map_err(anyhow::Error::from)?;
    datasetgen::emit_dataset(&multi, &ctx.path(MULTI)).map_err(anyhow::Error::from)?;
    println!(
        "converted {} of {} cases ({} invalid, {} duplicates, {} skipped) into {}",
        cases.len(),
        n_parsed,
        invalid.len(),
        dupes.dropped.len(),
        skipped.len(),
        ctx.out.display()
    );
    Ok(())
}

fn partition_file(stem: &str, p: Partition) -> String {
    let suffix = match p {
        Partition::Train => "train",
        Partition::Test => "test",
    };
    format!("{stem}_{suffix}.json")
}

fn split(ctx: &Ctx, ratio: Option<f64>) -> Outcome {
    let ratio = ratio
        .or(ctx.config.split_ratio)
        .unwrap_or(PipelineConfig::DEFAULT_RATIO);
    for name in [CASES, SINGLE, MULTI] {
        if !ctx.path(name).is_file() {
            return Err(anyhow!("missing {}: run convert first", ctx.path(name).display()).into());
        }
    }
    let cases = load_cases(&ctx.path(CASES))?;
    let single = datasetgen::parse_dataset(&ctx.path(SINGLE)).map_err(Failure::parse)?;
    let multi = datasetgen::parse_dataset(&ctx.path(MULTI)).map_err(Failure::parse)?;
    if single.len() != cases.len() || multi.len() != cases.len() {
        return Err(anyhow!(
            "variant files are out of step with {CASES}: {} cases, {} single-hop, {} multi-hop",
            cases.len(),
            single.len(),
            multi.len()
        )
        .into());
    }
    let assignment = datasetgen::split(&cases, ratio, ctx.seed).map_err(anyhow::Error::from)?;

    for p in [Partition::Train, Partition::Test] {
        let keep = |id: &str| assignment.get(id) == Some(p);
        let part_cases: Vec<SourceRecord> = cases.iter().filter(|r| keep(&r.case_id)).cloned().collect();
        let pick = |variant: &[AlpacaRecord]| -> Vec<AlpacaRecord> {
            cases
                .iter()
                .zip(variant)
                .filter(|(r, _)| keep(&r.case_id))
                .map(|(_, a)| a.clone())
                .collect()
        };
        ingest::emit_source(&part_cases, &ctx.path(&partition_file("cases", p))).map_err(anyhow::Error::from)?;
        datasetgen::emit_dataset(&pick(&single), &ctx.path(&partition_file("single_hop", p)))
            .map_err(anyhow::Error::from)?;
        datasetgen::emit_dataset(&pick(&multi), &ctx.path(&partition_file("multi_hop", p)))
            .map_err(anyhow::Error::from)?;
    }
    assignment.write_manifest(&ctx.path(MANIFEST)).map_err(anyhow::Error::from)?;
    println!(
        "split {} cases: {} train, {} test (ratio {ratio}, seed {})",
        cases.len(),
        assignment.count(Partition::Train),
        assignment.count(Partition::Test),
        ctx.seed
    );
    Ok(())
}

fn oracle_check(ctx: &Ctx, input: Option<PathBuf>) -> Outcome {
    let input = input.unwrap_or_else(|| ctx.path(CASES));
    let cases = load_cases(&input)?;
    let rows = oracle::check_dataset(&cases);
    oracle::write_check_csv(&rows, &ctx.path(ORACLE_CSV)).map_err(anyhow::Error::from)?;
    print!("{}", oracle::render_check(&rows));
    Ok(())
}

fn run_config(ctx: &Ctx, args: &RunArgs) -> RunConfig {
    let base = ctx.config.run.clone();
    RunConfig {
        endpoint: args.endpoint.clone().unwrap_or(base.endpoint),
        model_name: args.model.clone().unwrap_or(base.model_name),
        parallelism: args.parallelism.unwrap_or(base.parallelism),
        timeout_seconds: args.timeout.unwrap_or(base.timeout_seconds),
        max_retries: args.retries.unwrap_or(base.max_retries),
        max_hops: args.max_hops.unwrap_or(base.max_hops),
        seed: ctx.seed,
        ..base
    }
}

fn outcomes_file(mode: EvalMode) -> String {
    format!("outcomes_{}.jsonl", mode.as_str())
}

fn transcripts_file(mode: EvalMode) -> String {
    format!("transcripts_{}.jsonl", mode.as_str())
}

fn run(ctx: &Ctx, args: RunArgs) -> Outcome {
    let config = run_config(ctx, &args);
    config.validate().map_err(anyhow::Error::from)?;
    let cases_path = args.cases.clone().unwrap_or_else(|| match args.partition {
        PartitionArg::All => ctx.path(CASES),
        PartitionArg::Train => ctx.path(&partition_file("cases", Partition::Train)),
        PartitionArg::Test => ctx.path(&partition_file("cases", Partition::Test)),
    });
    let cases = load_cases(&cases_path)?;
    if cases.is_empty() {
        return Err(Failure::empty(anyhow!("{} holds no cases", cases_path.display())));
    }

    let backend: Box<dyn Backend> = if config.is_mock() {
        let mut mock = MockBackend::new(build_mock_from_records(&cases, args.mock_scope));
        if args.mode == EvalMode::DecomposedModel {
            mock = mock.with_decomposer(MockDecomposer::from_records(&cases));
        }
        Box::new(mock)
    } else {
        Box::new(HttpBackend::new(&config).map_err(Failure::backend)?)
    };
    tracing::info!(backend = %backend.describe(), mode = %args.mode.as_str(), cases = cases.len(), "starting run");

    let options = RunOptions {
        carry_history: args.carry_history,
    };
    let chunk = 50.max(config.parallelism * 4);
    let mut outcomes = Vec::with_capacity(cases.len());
    for batch in cases.chunks(chunk) {
        let done = runner::evaluate(args.mode, batch, backend.as_ref(), &config, &ctx.config.template, &options)
            .map_err(|e| if e.is_backend() { Failure::backend(e) } else { Failure::parse(e) })?;
        outcomes.extend(done);
        tracing::info!("{}/{} cases", outcomes.len(), cases.len());
    }

    let header = LogHeader::new(args.mode, backend.as_ref(), &config);
    let logged: Vec<LoggedOutcome> = outcomes.iter().map(LoggedOutcome::from).collect();
    runner::write_outcome_log(&ctx.path(&outcomes_file(args.mode)), &header, &logged).map_err(anyhow::Error::from)?;
    runner::write_transcripts(&ctx.path(&transcripts_file(args.mode)), &outcomes).map_err(anyhow::Error::from)?;
    let summary = scoring::accuracy(&outcomes);
    print!("{}", scoring::render_summaries(&[summary]));
    Ok(())
}

fn summarize(path: &Path) -> Outcome<(EvalMode, ScoreSummary)> {
    let (header, rows) = runner::read_outcome_log(path).map_err(Failure::parse)?;
    if !header.deterministic {
        tracing::info!("{} comes from a live backend; rerunning it may give other numbers", path.display());
    }
    let label = format!("{} ({})", header.mode.as_str(), path.display());
    Ok((header.mode, scoring::accuracy_labelled(&label, rows.iter().map(|r| r.verdict))))
}

/// Orders two summaries as (single-hop, multi-hop): a direct log goes first, otherwise argument order.
fn pair(a: (EvalMode, ScoreSummary), b: (EvalMode, ScoreSummary)) -> (ScoreSummary, ScoreSummary) {
    if a.0.is_decomposed() && !b.0.is_decomposed() {
        (b.1, a.1)
    } else {
        (a.1, b.1)
    }
}

fn write_report(ctx: &Ctx, rows: &[ReportRow], summaries: &[ScoreSummary]) -> Outcome {
    let text = format!("{}\n{}", scoring::render_summaries(summaries), scoring::render_text(rows));
    std::fs::write(ctx.path(REPORT_TXT), &text).context("writing report.txt")?;
    std::fs::write(ctx.path(REPORT_MD), scoring::render_markdown(rows)).context("writing report.md")?;
    scoring::emit_plot_data(rows, &ctx.path(PLOT_CSV)).map_err(anyhow::Error::from)?;
    print!("{text}");
    Ok(())
}

fn score(ctx: &Ctx, logs: &[PathBuf], label: &str) -> Outcome {
    let mut summaries = Vec::new();
    for log in logs {
        summaries.push(summarize(log)?);
    }
    if summaries.len() == 1 {
        let only: Vec<ScoreSummary> = summaries.into_iter().map(|(_, s)| s).collect();
        let text = scoring::render_summaries(&only);
        std::fs::write(ctx.path(REPORT_TXT), &text).context("writing report.txt")?;
        print!("{text}");
        return Ok(());
    }
    let b = summaries.pop().expect("two logs");
    let a = summaries.pop().expect("two logs");
    let (single, multi) = pair(a, b);
    let row = scoring::compare_report(&single, &multi, label).map_err(Failure::empty)?;
    write_report(ctx, &[row], &[single, multi])
}

fn parse_row_spec(spec: &str) -> anyhow::Result<(&str, PathBuf, PathBuf)> {
    let (label, files) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("row {spec:?} must look like label=single.jsonl,multi.jsonl"))?;
    let (s, m) = files
        .split_once(',')
        .ok_or_else(|| anyhow!("row {spec:?} needs two logs separated by a comma"))?;
    if label.trim().is_empty() {
        bail!("row {spec:?} has an empty label");
    }
    Ok((label.trim(), PathBuf::from(s.trim()), PathBuf::from(m.trim())))
}

fn report(ctx: &Ctx, specs: &[String]) -> Outcome {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for spec in specs {
        let (label, s, m) = parse_row_spec(spec)?;
        let (single, multi) = pair(summarize(&s)?, summarize(&m)?);
        rows.push(scoring::compare_report(&single, &multi, label).map_err(Failure::empty)?);
        summaries.extend([single, multi]);
    }
    write_report(ctx, &rows, &summaries)
}

fn emit_train_config(ctx: &Ctx, epochs: Option<u32>) -> Outcome {
    let mut spec = ctx.config.train.clone();
    if let Some(e) = epochs {
        spec.num_train_epochs = e;
    }
    spec.validate().map_err(anyhow::Error::from)?;
    let path = ctx.path(&format!("train_config_e{}.yaml", spec.num_train_epochs));
    datasetgen::emit_train_config(&spec, &path).map_err(anyhow::Error::from)?;
    print!("{}", datasetgen::render_train_config(&spec));
    Ok(())
}
