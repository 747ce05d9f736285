//! End-to-end orchestration: run configuration, staged execution
//! (bench → fit → analyze → shifts), and the JSON artifacts each stage
//! leaves behind.
//!
//! The configuration format is a flat sectioned key-value file:
//!
//! ```text
//! [run]
//! seed = 42
//! scale = mini              # mini | full
//! precision = single        # accounted storage width for benchmarks
//!
//! [bench]
//! corpus = synthetic:8192   # or a directory of session JSON files
//! architectures = both      # transformer | mamba | both
//! lengths = 512, 1024, 2048
//! runs = 5
//! warmup = 2
//! budget_gib = 16           # "none" disables the cap
//!
//! [analyze]
//! length = 256
//! stability_window = 50
//! span_threshold = 0.01
//! context_threshold = 0.1
//!
//! [shifts]
//! corpus = synthetic-shifts:8x240   # or a session directory
//! segments = 4
//! label_source = synthetic          # self-percentile | file | synthetic
//! default_threshold = 0.5
//! # labels = labels.json            # required when label_source = file
//! ```
//!
//! Two runs whose manifests agree on everything except timestamps produce
//! bit-identical numeric artifacts; wall-clock timings are explicitly
//! outside that contract.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bench::{
    run_benchmark, BenchEvent, BenchOptions, BenchRecord, BYTES_PER_GIB,
};
use crate::corpus::{
    hash_bytes, ingest_dir, session_paths, synthetic_shift_session, synthetic_tokens,
    tokenize_file, CorpusError, TokenCorpus,
};
use crate::fit::{
    efficiency_ratio, fit_cost_curve, solve_crossover, CrossoverResult, FitKind, FitResult,
    RatioRow,
};
use crate::model::{
    forward_mamba, forward_transformer, rng_for_seed, Architecture, Collect, MambaWeights,
    Scale, TransformerWeights,
};
use crate::repr::{
    attention_report, effective_context_ssm, state_report, AttentionReport, ContextReport,
    LayerStateReport, ReprError,
};
use crate::shift::{
    evaluate_scores, label_by_percentile, segment_representations, shift_scores, LabelSource,
    SessionShifts, ShiftError, ShiftReport,
};
use crate::tape::TapeError;
use crate::tensor::Precision;

// ===== Configuration =====

/// Errors reading the run configuration.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Value {
        section: String,
        key: String,
        message: String,
    },
    #[error("missing required key {key} in [{section}]")]
    MissingKey {
        section: &'static str,
        key: &'static str,
    },
    #[error("unknown key {key} in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("unknown section [{section}]")]
    UnknownSection { section: String },
}

/// Where a stage's tokens come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusSpec {
    /// Directory of session JSON files.
    Directory(PathBuf),
    /// Seeded uniform token stream of the given length.
    SyntheticTokens { len: usize },
    /// Seeded sessions with injected segment-boundary shifts and known
    /// ground truth: `sessions` sequences of `len` tokens each.
    SyntheticShifts { sessions: usize, len: usize },
}

impl fmt::Display for CorpusSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusSpec::Directory(p) => write!(f, "{}", p.display()),
            CorpusSpec::SyntheticTokens { len } => write!(f, "synthetic:{len}"),
            CorpusSpec::SyntheticShifts { sessions, len } => {
                write!(f, "synthetic-shifts:{sessions}x{len}")
            }
        }
    }
}

impl FromStr for CorpusSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<CorpusSpec, String> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let len: usize = rest
                .parse()
                .map_err(|_| format!("bad synthetic corpus length {rest:?}"))?;
            if len == 0 {
                return Err("synthetic corpus length must be positive".to_string());
            }
            return Ok(CorpusSpec::SyntheticTokens { len });
        }
        if let Some(rest) = s.strip_prefix("synthetic-shifts:") {
            let (sessions, len) = rest
                .split_once('x')
                .ok_or_else(|| format!("expected SESSIONSxLENGTH, got {rest:?}"))?;
            let sessions: usize = sessions
                .parse()
                .map_err(|_| format!("bad session count {sessions:?}"))?;
            let len: usize = len
                .parse()
                .map_err(|_| format!("bad session length {len:?}"))?;
            if sessions == 0 || len == 0 {
                return Err("session count and length must be positive".to_string());
            }
            return Ok(CorpusSpec::SyntheticShifts { sessions, len });
        }
        if s.is_empty() {
            return Err("empty corpus spec".to_string());
        }
        Ok(CorpusSpec::Directory(PathBuf::from(s)))
    }
}

/// Which architectures a stage covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchSelect {
    Transformer,
    Mamba,
    Both,
}

impl ArchSelect {
    /// Expansion in fixed (transformer, mamba) order.
    #[must_use]
    pub fn list(self) -> Vec<Architecture> {
        match self {
            ArchSelect::Transformer => vec![Architecture::Transformer],
            ArchSelect::Mamba => vec![Architecture::Mamba],
            ArchSelect::Both => vec![Architecture::Transformer, Architecture::Mamba],
        }
    }
}

impl fmt::Display for ArchSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchSelect::Transformer => "transformer",
            ArchSelect::Mamba => "mamba",
            ArchSelect::Both => "both",
        })
    }
}

impl FromStr for ArchSelect {
    type Err = String;

    fn from_str(s: &str) -> Result<ArchSelect, String> {
        match s {
            "transformer" => Ok(ArchSelect::Transformer),
            "mamba" => Ok(ArchSelect::Mamba),
            "both" => Ok(ArchSelect::Both),
            other => Err(format!(
                "unknown architecture selection {other:?} (expected transformer, mamba, or both)"
            )),
        }
    }
}

/// Global run identity shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub scale: Scale,
    /// Accounted storage width for benchmark measurements. Analysis and
    /// shift stages always run double precision (they feed gradients).
    pub precision: Precision,
}

/// Benchmark sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub corpus: CorpusSpec,
    pub architectures: ArchSelect,
    pub lengths: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    /// `None` disables the budget.
    pub budget_gib: Option<f64>,
}

/// Representational-analysis settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSettings {
    pub length: usize,
    pub stability_window: usize,
    pub span_threshold: f64,
    pub context_threshold: f64,
}

/// Shift-detection settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSettings {
    pub corpus: CorpusSpec,
    pub segments: usize,
    pub label_source: LabelSource,
    pub default_threshold: f64,
    /// Label file, consulted only when `label_source = file`.
    pub labels: Option<PathBuf>,
}

/// Fully parsed run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub run: RunSettings,
    pub bench: BenchSettings,
    pub analyze: AnalyzeSettings,
    pub shifts: ShiftSettings,
}

fn parse_sections(
    text: &str,
) -> Result<BTreeMap<String, BTreeMap<String, String>>, ConfigError> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let name = header.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line: lineno,
                message: "unterminated section header".to_string(),
            })?;
            sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: lineno,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        let Some(section) = current.as_ref() else {
            return Err(ConfigError::Syntax {
                line: lineno,
                message: "key before any [section] header".to_string(),
            });
        };
        // Allow a trailing same-line comment after the value.
        let value = match value.find(['#', ';']) {
            Some(idx) => &value[..idx],
            None => value,
        };
        let prior = sections
            .get_mut(section)
            .expect("section inserted on header")
            .insert(key.trim().to_string(), value.trim().to_string());
        if prior.is_some() {
            return Err(ConfigError::Syntax {
                line: lineno,
                message: format!("duplicate key {:?} in [{section}]", key.trim()),
            });
        }
    }
    Ok(sections)
}

/// One section's keys, consumed as they are read so leftovers can be
/// reported as typos.
struct SectionReader {
    name: String,
    map: BTreeMap<String, String>,
}

impl SectionReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn value_err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            section: self.name.clone(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| self.value_err(key, format!("{e}"))),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some(key) = self.map.into_keys().next() {
            return Err(ConfigError::UnknownKey {
                section: self.name,
                key,
            });
        }
        Ok(())
    }
}

impl PipelineConfig {
    /// Parses the sectioned key-value format shown in the module docs.
    /// `[bench] corpus` and `[bench] lengths` are required; everything
    /// else has documented defaults.
    pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        let mut sections = parse_sections(text)?;
        for name in sections.keys() {
            if !matches!(name.as_str(), "run" | "bench" | "analyze" | "shifts") {
                return Err(ConfigError::UnknownSection {
                    section: name.clone(),
                });
            }
        }
        let mut reader = |name: &str| SectionReader {
            name: name.to_string(),
            map: sections.remove(name).unwrap_or_default(),
        };

        let mut run = reader("run");
        let seed = run.parse("seed", 42u64)?;
        let scale = run.parse("scale", Scale::Mini)?;
        let precision = run.parse("precision", Precision::Single)?;
        run.finish()?;

        let mut bench = reader("bench");
        let corpus: CorpusSpec = bench
            .take("corpus")
            .ok_or(ConfigError::MissingKey {
                section: "bench",
                key: "corpus",
            })?
            .parse()
            .map_err(|e: String| bench.value_err("corpus", e))?;
        let lengths_raw = bench.take("lengths").ok_or(ConfigError::MissingKey {
            section: "bench",
            key: "lengths",
        })?;
        let lengths = parse_lengths(&lengths_raw).map_err(|e| bench.value_err("lengths", e))?;
        let architectures = bench.parse("architectures", ArchSelect::Both)?;
        let runs = bench.parse("runs", 5usize)?;
        let warmup = bench.parse("warmup", 2usize)?;
        let budget_gib = match bench.take("budget_gib").as_deref() {
            None => Some(16.0),
            Some("none") => None,
            Some(raw) => {
                let v: f64 = raw
                    .parse()
                    .map_err(|e| bench.value_err("budget_gib", format!("{e}")))?;
                if !(v > 0.0) {
                    return Err(bench.value_err("budget_gib", "must be positive or none"));
                }
                Some(v)
            }
        };
        if runs == 0 {
            return Err(bench.value_err("runs", "need at least one measured run"));
        }
        bench.finish()?;

        let mut analyze = reader("analyze");
        let length = analyze.parse("length", 256usize)?;
        let stability_window = analyze.parse("stability_window", 50usize)?;
        let span_threshold = analyze.parse("span_threshold", 0.01f64)?;
        let context_threshold = analyze.parse("context_threshold", 0.1f64)?;
        if length < 8 {
            return Err(analyze.value_err("length", "context probing needs at least 8 tokens"));
        }
        if stability_window < 2 {
            return Err(analyze.value_err("stability_window", "window must be at least 2"));
        }
        analyze.finish()?;

        let mut shifts = reader("shifts");
        let shift_corpus: CorpusSpec = match shifts.take("corpus") {
            None => CorpusSpec::SyntheticShifts {
                sessions: 8,
                len: 240,
            },
            Some(raw) => raw
                .parse()
                .map_err(|e: String| shifts.value_err("corpus", e))?,
        };
        let segments = shifts.parse("segments", 4usize)?;
        let label_source = shifts.parse("label_source", LabelSource::Synthetic)?;
        let default_threshold = shifts.parse("default_threshold", 0.5f64)?;
        let labels = shifts.take("labels").map(PathBuf::from);
        if segments < 2 {
            return Err(shifts.value_err("segments", "need at least two segments"));
        }
        if label_source == LabelSource::File && labels.is_none() {
            return Err(ConfigError::MissingKey {
                section: "shifts",
                key: "labels",
            });
        }
        if label_source == LabelSource::Synthetic
            && !matches!(shift_corpus, CorpusSpec::SyntheticShifts { .. })
        {
            return Err(shifts.value_err(
                "label_source",
                "synthetic labels require a synthetic-shifts corpus",
            ));
        }
        if matches!(shift_corpus, CorpusSpec::SyntheticTokens { .. }) {
            return Err(shifts.value_err(
                "corpus",
                "shifts need sessions (a directory or synthetic-shifts:SxL)",
            ));
        }
        shifts.finish()?;

        Ok(PipelineConfig {
            run: RunSettings {
                seed,
                scale,
                precision,
            },
            bench: BenchSettings {
                corpus,
                architectures,
                lengths,
                runs,
                warmup,
                budget_gib,
            },
            analyze: AnalyzeSettings {
                length,
                stability_window,
                span_threshold,
                context_threshold,
            },
            shifts: ShiftSettings {
                corpus: shift_corpus,
                segments,
                label_source,
                default_threshold,
                labels,
            },
        })
    }
}

/// Parses a comma-separated list of sequence lengths; they must be
/// positive and strictly ascending.
pub fn parse_lengths(raw: &str) -> Result<Vec<usize>, String> {
    let lengths: Vec<usize> = raw
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad length {:?}", part.trim()))
        })
        .collect::<Result<_, _>>()?;
    if lengths.is_empty() {
        return Err("need at least one length".to_string());
    }
    if !lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err("lengths must be strictly ascending".to_string());
    }
    if lengths[0] == 0 {
        return Err("lengths must be positive".to_string());
    }
    Ok(lengths)
}

// ===== Artifact documents =====

/// Identity of one pipeline run. `run_id` is a stable digest of the
/// deterministic fields; `created_unix_ms` and `invocation` are
/// informational and excluded from it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub run_id: String,
    pub seed: u64,
    pub scale: Scale,
    pub precision: Precision,
    pub bench_corpus: String,
    /// FNV-1a of the benchmark token stream, hex.
    pub corpus_hash: String,
    pub invocation: String,
    pub created_unix_ms: u64,
}

impl RunManifest {
    fn derive_run_id(&mut self) {
        let canonical = format!(
            "{}|{}|{}|{}|{}|{}",
            self.version, self.seed, self.scale, self.precision, self.bench_corpus,
            self.corpus_hash
        );
        self.run_id = format!("{:016x}", hash_bytes(canonical.as_bytes()));
    }
}

/// Builds a run manifest, deriving `run_id` from the deterministic fields
/// (tool version, seed, scale, precision, corpus name, corpus hash);
/// `invocation` and the timestamp are informational only.
#[must_use]
pub fn build_manifest(
    run: &RunSettings,
    bench_corpus: &str,
    corpus_hash: u64,
    invocation: &str,
) -> RunManifest {
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        run_id: String::new(),
        seed: run.seed,
        scale: run.scale,
        precision: run.precision,
        bench_corpus: bench_corpus.to_string(),
        corpus_hash: format!("{corpus_hash:016x}"),
        invocation: invocation.to_string(),
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| u64::try_from(d.as_millis()).unwrap_or(u64::MAX))
            .unwrap_or(0),
    };
    manifest.derive_run_id();
    manifest
}

/// `records.json`: every benchmark cell.
#[derive(Debug, Serialize, Deserialize)]
pub struct RecordsDocument {
    pub run_id: String,
    pub records: Vec<BenchRecord>,
}

/// `events.json`: the benchmark protocol log proving phase ordering.
#[derive(Debug, Serialize)]
pub struct EventsDocument {
    pub run_id: String,
    pub events: Vec<BenchEvent>,
}

/// Which measurement a fit covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Memory,
    Time,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Memory => "memory",
            Measure::Time => "time",
        })
    }
}

/// One fit attempt. `fit` and `error` are mutually exclusive: a sweep too
/// short for the declared family records why instead of failing the stage.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitCell {
    pub architecture: Architecture,
    pub measure: Measure,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

/// `fits/fits.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitsDocument {
    pub run_id: String,
    pub cells: Vec<FitCell>,
}

impl FitsDocument {
    /// The successful fit for an architecture/measure pair, if any.
    #[must_use]
    pub fn fit(&self, architecture: Architecture, measure: Measure) -> Option<&FitResult> {
        self.cells
            .iter()
            .find(|c| c.architecture == architecture && c.measure == measure)
            .and_then(|c| c.fit.as_ref())
    }
}

/// `fits/crossover.json`: where the fitted curves cross, per measure.
#[derive(Debug, Serialize, Deserialize)]
pub struct CrossoverDocument {
    pub run_id: String,
    pub memory: Option<CrossoverResult>,
    pub memory_error: Option<String>,
    pub time: Option<CrossoverResult>,
    pub time_error: Option<String>,
}

/// One architecture's representational analysis at one length.
#[derive(Debug, Serialize, Deserialize)]
pub struct ArchAnalysis {
    pub architecture: Architecture,
    pub n: usize,
    /// Entry 0 is the embedding output; block outputs follow in order.
    pub state: Vec<LayerStateReport>,
    /// Attention statistics (attention stack only).
    pub attention: Option<AttentionReport>,
    /// Gradient-attribution context report (recurrent stack only).
    pub context: Option<ContextReport>,
}

/// `repr.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReprDocument {
    pub run_id: String,
    pub scale: Scale,
    pub analyses: Vec<ArchAnalysis>,
}

/// `shifts.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ShiftsDocument {
    pub run_id: String,
    pub reports: Vec<ShiftReport>,
}

// ===== Errors =====

/// Errors surfaced by the pipeline, tagged with the failing stage.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage} stage: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn stage_error<E>(stage: &'static str) -> impl FnOnce(E) -> PipelineError
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |source| PipelineError::Stage {
        stage,
        source: Box::new(source),
    }
}

/// Analysis-stage failures.
#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

/// Shift-stage failures.
#[derive(Debug, thiserror::Error)]
pub enum ShiftStageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shift(#[from] ShiftError),
    #[error("label file {path}: {message}")]
    Labels { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

// ===== Stages =====

/// Resolves the benchmark token source.
pub fn resolve_bench_corpus(
    spec: &CorpusSpec,
    vocab: usize,
    seed: u64,
) -> Result<TokenCorpus, CorpusError> {
    match spec {
        CorpusSpec::Directory(dir) => ingest_dir(dir, vocab),
        CorpusSpec::SyntheticTokens { len } => Ok(synthetic_tokens(*len, vocab, seed)),
        CorpusSpec::SyntheticShifts { sessions, len } => {
            // Usable as a bench stream too: concatenate the sessions.
            let mut rng = rng_for_seed(seed);
            let mut ids = Vec::with_capacity(sessions * len);
            for _ in 0..*sessions {
                ids.extend(synthetic_shift_session(*len, 4, vocab, &mut rng).tokens);
            }
            Ok(TokenCorpus {
                ids,
                source: spec.to_string(),
            })
        }
    }
}

/// Pure fit stage: declared-family fits per architecture and measure, the
/// crossover classification per measure, and the shared-length ratio
/// table.
#[must_use]
pub fn fit_stage(
    records: &[BenchRecord],
    run_id: &str,
) -> (FitsDocument, CrossoverDocument, Vec<RatioRow>) {
    let mut cells = Vec::new();
    for architecture in [Architecture::Transformer, Architecture::Mamba] {
        if !records.iter().any(|r| r.architecture == architecture) {
            continue;
        }
        let kind = match architecture {
            Architecture::Transformer => FitKind::Quadratic,
            Architecture::Mamba => FitKind::Linear,
        };
        for measure in [Measure::Memory, Measure::Time] {
            let points: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.architecture == architecture)
                .map(|r| {
                    (
                        r.n as f64,
                        match measure {
                            Measure::Memory => r.peak_memory_gb,
                            Measure::Time => r.mean_time_ms,
                        },
                    )
                })
                .collect();
            let (fit, error) = match fit_cost_curve(&points, kind) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            cells.push(FitCell {
                architecture,
                measure,
                fit,
                error,
            });
        }
    }
    let fits = FitsDocument {
        run_id: run_id.to_string(),
        cells,
    };

    let mut crossover = CrossoverDocument {
        run_id: run_id.to_string(),
        memory: None,
        memory_error: None,
        time: None,
        time_error: None,
    };
    for measure in [Measure::Memory, Measure::Time] {
        let quad = fits.fit(Architecture::Transformer, measure);
        let lin = fits.fit(Architecture::Mamba, measure);
        let outcome = match (quad, lin) {
            (Some(q), Some(l)) => match solve_crossover(q, l) {
                Ok(result) => (Some(result), None),
                Err(e) => (None, Some(e.to_string())),
            },
            _ => (
                None,
                Some("needs a successful fit for both architectures".to_string()),
            ),
        };
        match measure {
            Measure::Memory => (crossover.memory, crossover.memory_error) = outcome,
            Measure::Time => (crossover.time, crossover.time_error) = outcome,
        }
    }

    (fits, crossover, efficiency_ratio(records))
}

/// Analysis stage: forward both selected stacks at the configured length
/// in double precision, collecting hidden states and attention, then
/// compute the representational metrics.
pub fn analyze_stage(
    architectures: ArchSelect,
    corpus: &TokenCorpus,
    settings: &AnalyzeSettings,
    scale: Scale,
    seed: u64,
) -> Result<Vec<ArchAnalysis>, AnalyzeError> {
    let tokens = crate::corpus::prepare_sequence(corpus, settings.length);
    let mut analyses = Vec::new();
    for architecture in architectures.list() {
        let analysis = match architecture {
            Architecture::Transformer => {
                let weights = TransformerWeights::init(
                    scale.transformer(),
                    seed,
                    Precision::Double,
                    None,
                )
                .map_err(TapeError::from)?;
                let trace = forward_transformer(
                    &weights,
                    &tokens,
                    Collect::everything(),
                    None,
                    Precision::Double,
                )?;
                let attention = trace
                    .attentions
                    .as_deref()
                    .map(|a| attention_report(a, settings.span_threshold));
                ArchAnalysis {
                    architecture,
                    n: settings.length,
                    state: state_report(&trace.hidden_states, settings.stability_window)?,
                    attention,
                    context: None,
                }
            }
            Architecture::Mamba => {
                let weights =
                    MambaWeights::init(scale.mamba(), seed, Precision::Double, None)
                        .map_err(TapeError::from)?;
                let trace = forward_mamba(
                    &weights,
                    &tokens,
                    Collect::everything(),
                    None,
                    Precision::Double,
                )?;
                let context =
                    effective_context_ssm(&weights, &tokens, settings.context_threshold)?;
                ArchAnalysis {
                    architecture,
                    n: settings.length,
                    state: state_report(&trace.hidden_states, settings.stability_window)?,
                    attention: None,
                    context: Some(context),
                }
            }
        };
        analyses.push(analysis);
    }
    Ok(analyses)
}

fn shift_sessions(
    settings: &ShiftSettings,
    vocab: usize,
    seed: u64,
) -> Result<(Vec<(String, Vec<u32>)>, Option<Vec<u8>>), ShiftStageError> {
    match &settings.corpus {
        CorpusSpec::SyntheticShifts { sessions, len } => {
            let mut rng = rng_for_seed(seed);
            let mut seqs = Vec::with_capacity(*sessions);
            let mut labels = Vec::new();
            for i in 0..*sessions {
                let truth = synthetic_shift_session(*len, settings.segments, vocab, &mut rng);
                seqs.push((format!("synthetic_{i:02}"), truth.tokens));
                labels.extend(truth.boundary_shifts.iter().map(|&b| u8::from(b)));
            }
            Ok((seqs, Some(labels)))
        }
        CorpusSpec::Directory(dir) => {
            let paths = session_paths(dir)?;
            let mut seqs = Vec::with_capacity(paths.len());
            for path in &paths {
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                seqs.push((name, tokenize_file(path, vocab)?));
            }
            Ok((seqs, None))
        }
        CorpusSpec::SyntheticTokens { .. } => Err(ShiftStageError::Invalid(
            "shifts need sessions (a directory or synthetic-shifts:SxL)".to_string(),
        )),
    }
}

fn read_label_file(path: &Path, expected: usize) -> Result<Vec<u8>, ShiftStageError> {
    let labels_err = |message: String| ShiftStageError::Labels {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| labels_err(e.to_string()))?;
    let labels: Vec<u8> =
        serde_json::from_str(&text).map_err(|e| labels_err(e.to_string()))?;
    if labels.len() != expected {
        return Err(labels_err(format!(
            "expected {expected} labels (one per pooled score), got {}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(labels_err(format!("labels must be 0 or 1, found {bad}")));
    }
    Ok(labels)
}

/// Shift stage: per session, run the forward pass, segment the final
/// hidden sequence, and score consecutive segments; then pool scores,
/// attach labels from the configured source, and evaluate.
pub fn shifts_stage(
    architectures: ArchSelect,
    settings: &ShiftSettings,
    scale: Scale,
    seed: u64,
) -> Result<Vec<ShiftReport>, ShiftStageError> {
    let vocab = scale.vocab();
    let (sessions, synthetic_labels) = shift_sessions(settings, vocab, seed)?;
    if sessions.is_empty() {
        return Err(ShiftStageError::Invalid(
            "shift corpus contains no sessions".to_string(),
        ));
    }
    let collect = Collect {
        hidden: true,
        attentions: false,
    };
    let mut reports = Vec::new();
    for architecture in architectures.list() {
        let mut per_session = Vec::with_capacity(sessions.len());
        let mut pooled = Vec::new();
        for (name, tokens) in &sessions {
            let trace = match architecture {
                Architecture::Transformer => {
                    let weights = TransformerWeights::init(
                        scale.transformer(),
                        seed,
                        Precision::Double,
                        None,
                    )
                    .map_err(TapeError::from)?;
                    forward_transformer(&weights, tokens, collect, None, Precision::Double)?
                }
                Architecture::Mamba => {
                    let weights =
                        MambaWeights::init(scale.mamba(), seed, Precision::Double, None)
                            .map_err(TapeError::from)?;
                    forward_mamba(&weights, tokens, collect, None, Precision::Double)?
                }
            };
            let final_hidden = trace.hidden_states.last().ok_or_else(|| {
                ShiftStageError::Invalid("forward trace captured no hidden states".to_string())
            })?;
            let representations = segment_representations(final_hidden, settings.segments)?;
            let scores = shift_scores(&representations)?;
            pooled.extend_from_slice(&scores);
            per_session.push(SessionShifts {
                session: name.clone(),
                representations,
                scores,
            });
        }
        let labels = match settings.label_source {
            LabelSource::SelfPercentile => label_by_percentile(&pooled, 75.0),
            LabelSource::Synthetic => synthetic_labels.clone().ok_or_else(|| {
                ShiftStageError::Invalid(
                    "synthetic labels require a synthetic-shifts corpus".to_string(),
                )
            })?,
            LabelSource::File => {
                let path = settings.labels.as_ref().ok_or_else(|| {
                    ShiftStageError::Invalid(
                        "label_source = file needs a labels path".to_string(),
                    )
                })?;
                read_label_file(path, pooled.len())?
            }
        };
        let metrics = evaluate_scores(&pooled, &labels, settings.default_threshold)?;
        reports.push(ShiftReport {
            architecture,
            segments: settings.segments,
            label_source: settings.label_source,
            default_threshold: settings.default_threshold,
            sessions: per_session,
            pooled_scores: pooled,
            labels,
            metrics,
        });
    }
    Ok(reports)
}

// ===== Orchestration =====

/// Serializes a document as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string_pretty(value).expect("artifacts are serializable");
    body.push('\n');
    std::fs::write(path, body).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, body: &str) -> Result<(), PipelineError> {
    std::fs::write(path, body).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(|source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs bench → fit → analyze → shifts, writing `records.json`,
/// `events.json`, `fits/`, `repr.json`, `shifts.json`, and
/// `manifest.json` under `out_dir`. Returns the manifest.
pub fn run_pipeline(
    config: &PipelineConfig,
    invocation: &str,
    out_dir: &Path,
) -> Result<RunManifest, PipelineError> {
    create_dir(out_dir)?;
    let fits_dir = out_dir.join("fits");
    create_dir(&fits_dir)?;

    let scale = config.run.scale;
    let seed = config.run.seed;

    // Bench.
    log::info!("bench: resolving corpus {}", config.bench.corpus);
    let corpus = resolve_bench_corpus(&config.bench.corpus, scale.vocab(), seed)
        .map_err(stage_error("bench"))?;
    let manifest = build_manifest(
        &config.run,
        &config.bench.corpus.to_string(),
        corpus.content_hash(),
        invocation,
    );
    let run_id = manifest.run_id.clone();

    let options = BenchOptions {
        lengths: config.bench.lengths.clone(),
        runs: config.bench.runs,
        warmup: config.bench.warmup,
        budget_bytes: config.bench.budget_gib.map(|g| (g * BYTES_PER_GIB) as u64),
        seed,
        scale,
        precision: config.run.precision,
    };
    let mut records = Vec::new();
    let mut events = Vec::new();
    for architecture in config.bench.architectures.list() {
        log::info!("bench: sweeping {architecture}");
        let (r, e) = run_benchmark(architecture, &corpus, &options);
        records.extend(r);
        events.extend(e);
    }
    write_json(
        &out_dir.join("records.json"),
        &RecordsDocument {
            run_id: run_id.clone(),
            records: records.clone(),
        },
    )?;
    write_json(
        &out_dir.join("events.json"),
        &EventsDocument {
            run_id: run_id.clone(),
            events,
        },
    )?;

    // Fit.
    log::info!("fit: {} records", records.len());
    let (fits, crossover, ratios) = fit_stage(&records, &run_id);
    write_json(&fits_dir.join("fits.json"), &fits)?;
    write_json(&fits_dir.join("crossover.json"), &crossover)?;
    write_text(&fits_dir.join("ratios.csv"), &crate::report::ratios_csv(&ratios))?;

    // Analyze.
    log::info!("analyze: length {}", config.analyze.length);
    let analyses = analyze_stage(
        config.bench.architectures,
        &corpus,
        &config.analyze,
        scale,
        seed,
    )
    .map_err(stage_error("analyze"))?;
    write_json(
        &out_dir.join("repr.json"),
        &ReprDocument {
            run_id: run_id.clone(),
            scale,
            analyses,
        },
    )?;

    // Shifts.
    log::info!("shifts: corpus {}", config.shifts.corpus);
    let reports = shifts_stage(config.bench.architectures, &config.shifts, scale, seed)
        .map_err(stage_error("shifts"))?;
    write_json(
        &out_dir.join("shifts.json"),
        &ShiftsDocument {
            run_id: run_id.clone(),
            reports,
        },
    )?;

    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
