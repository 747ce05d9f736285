//! `scalebench`: sequence-model scaling benchmarks, cost-curve fits,
//! representational analysis, shift detection, and report generation.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config file,
//! inconsistent options), 2 stage failure (missing inputs, measurement or
//! analysis errors, write failures). Log verbosity comes from the
//! `SCALEBENCH_LOG` environment variable (`error`, `warn`, `info`,
//! `debug`, `trace`).

use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scalebench_core::bench::{run_benchmark, BenchOptions, BYTES_PER_GIB};
use scalebench_core::corpus::write_synthetic_sessions;
use scalebench_core::model::Scale;
use scalebench_core::pipeline::{
    analyze_stage, build_manifest, fit_stage, parse_lengths, resolve_bench_corpus, run_pipeline,
    shifts_stage, write_json, AnalyzeSettings, ArchSelect, CorpusSpec, EventsDocument,
    PipelineConfig, RecordsDocument, ReprDocument, RunSettings, ShiftSettings, ShiftsDocument,
};
use scalebench_core::report::{emit_report, ratios_csv};
use scalebench_core::shift::LabelSource;
use scalebench_core::tensor::Precision;

const LOG_ENV: &str = "SCALEBENCH_LOG";

#[derive(Parser)]
#[command(
    name = "scalebench",
    version,
    about = "Benchmark and analyze attention vs state-space sequence stacks",
    after_help = "Corpus arguments accept a directory of session JSON files, \
                  `synthetic:LEN` for a seeded token stream, or \
                  `synthetic-shifts:SESSIONSxLEN` for sessions with known \
                  segment-boundary shifts."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep sequence lengths and record peak memory and latency per cell.
    Bench(BenchArgs),
    /// Fit the declared cost families to recorded cells and solve the
    /// crossover.
    Fit(FitArgs),
    /// Compute hidden-state, attention, and effective-context metrics.
    Analyze(AnalyzeArgs),
    /// Detect representational shifts between session segments.
    Shifts(ShiftsArgs),
    /// Run bench, fit, analyze, and shifts end to end from a config file.
    Pipeline(PipelineArgs),
    /// Render CSV tables and SVG plots from a pipeline output directory.
    Report(ReportArgs),
    /// Write a deterministic synthetic session corpus for trying the tool.
    GenCorpus(GenCorpusArgs),
}

fn parse_arch(s: &str) -> Result<ArchSelect, String> {
    s.parse()
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn parse_corpus(s: &str) -> Result<CorpusSpec, String> {
    s.parse()
}

fn parse_label_source(s: &str) -> Result<LabelSource, String> {
    s.parse()
}

/// Memory budget in binary GB; `none` disables the cap. (A plain
/// `Option<f64>` field would mean "flag may be absent" to clap, so the
/// parsed value needs its own type.)
#[derive(Debug, Clone, Copy)]
struct Budget(Option<f64>);

/// `16`, `0.05`, or `none` for unbounded.
fn parse_budget(s: &str) -> Result<Budget, String> {
    if s == "none" {
        return Ok(Budget(None));
    }
    let gib: f64 = s.parse().map_err(|_| format!("bad budget {s:?}"))?;
    if gib > 0.0 {
        Ok(Budget(Some(gib)))
    } else {
        Err("budget must be positive (or `none`)".to_string())
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Architectures to sweep: transformer, mamba, or both.
    #[arg(long, default_value = "both", value_parser = parse_arch)]
    arch: ArchSelect,
    /// Token source (directory, synthetic:LEN, synthetic-shifts:SxL).
    #[arg(long, value_parser = parse_corpus)]
    corpus: CorpusSpec,
    /// Comma-separated sequence lengths, strictly ascending.
    #[arg(long)]
    lengths: String,
    /// Measured repetitions per cell.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Untimed warm-up repetitions per cell.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Accounted-memory budget in binary GB, or `none`.
    #[arg(long = "budget-gb", default_value = "16", value_parser = parse_budget)]
    budget_gb: Budget,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Model size preset: full or mini.
    #[arg(long, default_value = "mini", value_parser = parse_scale)]
    config: Scale,
    /// Accounted storage width: single or double.
    #[arg(long, default_value = "single", value_parser = parse_precision)]
    precision: Precision,
    /// Where to write the record document.
    #[arg(long, default_value = "records.json")]
    out: PathBuf,
    /// Also write the protocol event log here.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Record document produced by `bench`.
    #[arg(long)]
    records: PathBuf,
    /// Directory for fits.json, crossover.json, and ratios.csv.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Architectures to analyze: transformer, mamba, or both.
    #[arg(long, default_value = "both", value_parser = parse_arch)]
    arch: ArchSelect,
    /// Token source (directory, synthetic:LEN, synthetic-shifts:SxL).
    #[arg(long, value_parser = parse_corpus)]
    corpus: CorpusSpec,
    /// Sequence length to analyze (at least 8).
    #[arg(long, default_value_t = 256)]
    length: usize,
    /// Model size preset: full or mini.
    #[arg(long, default_value = "mini", value_parser = parse_scale)]
    config: Scale,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Trailing-window length for the stability metric.
    #[arg(long = "stability-window", default_value_t = 50)]
    stability_window: usize,
    /// Attention-mass cutoff for the span metric.
    #[arg(long = "span-threshold", default_value_t = 0.01)]
    span_threshold: f64,
    /// Gradient-mass cutoff (fraction of the peak) for effective context.
    #[arg(long = "context-threshold", default_value_t = 0.1)]
    context_threshold: f64,
    /// Where to write the analysis document.
    #[arg(long, default_value = "repr.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftsArgs {
    /// Session source (directory or synthetic-shifts:SxL).
    #[arg(long, value_parser = parse_corpus)]
    corpus: CorpusSpec,
    /// Architectures to evaluate: transformer, mamba, or both.
    #[arg(long, default_value = "both", value_parser = parse_arch)]
    arch: ArchSelect,
    /// Segments per session (at least 2).
    #[arg(long, default_value_t = 4)]
    segments: usize,
    /// Ground-truth source: self-percentile, file, or synthetic.
    #[arg(long = "label-source", default_value = "self-percentile", value_parser = parse_label_source)]
    label_source: LabelSource,
    /// JSON array of 0/1 labels, one per pooled score (label-source file).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Default decision threshold on the shift score.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Model size preset: full or mini.
    #[arg(long, default_value = "mini", value_parser = parse_scale)]
    config: Scale,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Where to write the shift-detection document.
    #[arg(long, default_value = "shifts.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Run configuration file (sections [run], [bench], [analyze], [shifts]).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Pipeline output directory.
    #[arg(long = "in")]
    in_dir: PathBuf,
    /// Directory for the tables and plots.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Directory to create the session files in.
    #[arg(long)]
    out: PathBuf,
    /// Number of session files.
    #[arg(long, default_value_t = 8)]
    sessions: usize,
    /// Dialogue turns per session.
    #[arg(long, default_value_t = 12)]
    turns: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Failure classes mapped to exit codes.
enum CliError {
    /// Inconsistent or malformed input the user can correct: exit 1.
    Usage(String),
    /// A stage failed while doing the work: exit 2.
    Stage(Box<dyn Error>),
}

impl CliError {
    fn stage<E: Error + 'static>(err: E) -> CliError {
        CliError::Stage(Box::new(err))
    }
}

fn invocation() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn run_bench(args: &BenchArgs) -> Result<(), CliError> {
    let lengths = parse_lengths(&args.lengths).map_err(CliError::Usage)?;
    let corpus = resolve_bench_corpus(&args.corpus, args.config.vocab(), args.seed)
        .map_err(CliError::stage)?;
    let manifest = build_manifest(
        &RunSettings {
            seed: args.seed,
            scale: args.config,
            precision: args.precision,
        },
        &args.corpus.to_string(),
        corpus.content_hash(),
        &invocation(),
    );
    let options = BenchOptions {
        lengths,
        runs: args.runs,
        warmup: args.warmup,
        budget_bytes: args.budget_gb.0.map(|g| (g * BYTES_PER_GIB) as u64),
        seed: args.seed,
        scale: args.config,
        precision: args.precision,
    };
    let mut records = Vec::new();
    let mut events = Vec::new();
    for architecture in args.arch.list() {
        log::info!("sweeping {architecture} over {:?}", options.lengths);
        let (r, e) = run_benchmark(architecture, &corpus, &options);
        records.extend(r);
        events.extend(e);
    }
    let count = records.len();
    write_json(
        &args.out,
        &RecordsDocument {
            run_id: manifest.run_id.clone(),
            records,
        },
    )
    .map_err(CliError::stage)?;
    println!("wrote {} ({count} records, run {})", args.out.display(), manifest.run_id);
    if let Some(events_path) = &args.events {
        write_json(
            events_path,
            &EventsDocument {
                run_id: manifest.run_id.clone(),
                events,
            },
        )
        .map_err(CliError::stage)?;
        println!("wrote {}", events_path.display());
    }
    Ok(())
}

fn run_fit(args: &FitArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.records).map_err(|e| {
        CliError::Usage(format!("cannot read {}: {e}", args.records.display()))
    })?;
    let document: RecordsDocument = serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!("{} is not a record document: {e}", args.records.display()))
    })?;
    let (fits, crossover, ratios) = fit_stage(&document.records, &document.run_id);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| {
        CliError::Usage(format!("cannot create {}: {e}", args.out_dir.display()))
    })?;
    write_json(&args.out_dir.join("fits.json"), &fits).map_err(CliError::stage)?;
    write_json(&args.out_dir.join("crossover.json"), &crossover).map_err(CliError::stage)?;
    std::fs::write(args.out_dir.join("ratios.csv"), ratios_csv(&ratios))
        .map_err(|e| CliError::Stage(Box::new(e)))?;
    println!(
        "wrote fits.json, crossover.json, ratios.csv under {}",
        args.out_dir.display()
    );
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    if args.length < 8 {
        return Err(CliError::Usage(
            "--length must be at least 8 (context probes need room)".to_string(),
        ));
    }
    if args.stability_window < 2 {
        return Err(CliError::Usage(
            "--stability-window must be at least 2".to_string(),
        ));
    }
    let corpus = resolve_bench_corpus(&args.corpus, args.config.vocab(), args.seed)
        .map_err(CliError::stage)?;
    let settings = AnalyzeSettings {
        length: args.length,
        stability_window: args.stability_window,
        span_threshold: args.span_threshold,
        context_threshold: args.context_threshold,
    };
    let analyses = analyze_stage(args.arch, &corpus, &settings, args.config, args.seed)
        .map_err(CliError::stage)?;
    let manifest = build_manifest(
        &RunSettings {
            seed: args.seed,
            scale: args.config,
            precision: Precision::Double,
        },
        &args.corpus.to_string(),
        corpus.content_hash(),
        &invocation(),
    );
    write_json(
        &args.out,
        &ReprDocument {
            run_id: manifest.run_id,
            scale: args.config,
            analyses,
        },
    )
    .map_err(CliError::stage)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_shifts(args: &ShiftsArgs) -> Result<(), CliError> {
    if args.segments < 2 {
        return Err(CliError::Usage("--segments must be at least 2".to_string()));
    }
    match (args.label_source, &args.corpus) {
        (LabelSource::File, _) if args.labels.is_none() => {
            return Err(CliError::Usage(
                "--label-source file needs --labels".to_string(),
            ));
        }
        (LabelSource::Synthetic, CorpusSpec::SyntheticShifts { .. }) => {}
        (LabelSource::Synthetic, _) => {
            return Err(CliError::Usage(
                "--label-source synthetic needs a synthetic-shifts corpus".to_string(),
            ));
        }
        _ => {}
    }
    if matches!(args.corpus, CorpusSpec::SyntheticTokens { .. }) {
        return Err(CliError::Usage(
            "shifts need sessions: a directory or synthetic-shifts:SxL".to_string(),
        ));
    }
    let settings = ShiftSettings {
        corpus: args.corpus.clone(),
        segments: args.segments,
        label_source: args.label_source,
        default_threshold: args.threshold,
        labels: args.labels.clone(),
    };
    let reports =
        shifts_stage(args.arch, &settings, args.config, args.seed).map_err(CliError::stage)?;
    let manifest = build_manifest(
        &RunSettings {
            seed: args.seed,
            scale: args.config,
            precision: Precision::Double,
        },
        &args.corpus.to_string(),
        0,
        &invocation(),
    );
    write_json(
        &args.out,
        &ShiftsDocument {
            run_id: manifest.run_id,
            reports,
        },
    )
    .map_err(CliError::stage)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_pipeline_cmd(args: &PipelineArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Usage(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let config = PipelineConfig::parse(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let manifest =
        run_pipeline(&config, &invocation(), &args.out).map_err(CliError::stage)?;
    println!(
        "pipeline complete: {} (run {})",
        args.out.display(),
        manifest.run_id
    );
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    let written = emit_report(&args.in_dir, &args.out).map_err(CliError::stage)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_gen_corpus(args: &GenCorpusArgs) -> Result<(), CliError> {
    if args.sessions == 0 {
        return Err(CliError::Usage("--sessions must be positive".to_string()));
    }
    let paths = write_synthetic_sessions(&args.out, args.sessions, args.turns, args.seed)
        .map_err(CliError::stage)?;
    println!("wrote {} sessions under {}", paths.len(), args.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Fit(args) => run_fit(args),
        Command::Analyze(args) => run_analyze(args),
        Command::Shifts(args) => run_shifts(args),
        Command::Pipeline(args) => run_pipeline_cmd(args),
        Command::Report(args) => run_report(args),
        Command::GenCorpus(args) => run_gen_corpus(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
        Err(CliError::Stage(err)) => {
            eprintln!("error: {err}");
            let mut source = err.source();
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(2)
        }
    }
}
