//! Measurement protocol: for each sequence length, build the model under a
//! budgeted meter, run discarded warm-up passes, reset the peak counter,
//! then time the measured passes. Budget exhaustion at any point becomes an
//! out-of-memory record — time and memory infinite — and the sweep
//! continues with the remaining lengths. Every step is appended to an
//! auditable event log.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{hash_ids, prepare_sequence, TokenCorpus};
use crate::meter::AllocationMeter;
use crate::model::{
    forward_mamba, forward_transformer, Architecture, Collect, ForwardTrace, MambaWeights, Scale,
    TransformerWeights,
};
use crate::tensor::Precision;

/// Bytes per binary gigabyte (2³⁰); the unit every "GB" figure uses.
pub const BYTES_PER_GIB: f64 = (1u64 << 30) as f64;

/// One measurement cell: an architecture at one sequence length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRecord {
    pub architecture: Architecture,
    pub n: usize,
    /// Per-run wall-clock; empty for out-of-memory cells.
    pub run_times_ms: Vec<f64>,
    #[serde(with = "inf_as_string")]
    pub mean_time_ms: f64,
    #[serde(with = "inf_as_string")]
    pub peak_memory_gb: f64,
    pub oom: bool,
    /// FNV-1a hash (hex) of the exact token sequence measured.
    pub seq_hash: String,
}

impl BenchRecord {
    /// The out-of-memory tri-equivalence: `oom`, infinite mean time, and
    /// infinite peak memory must agree.
    #[must_use]
    pub fn oom_consistent(&self) -> bool {
        let infs = [
            self.oom,
            self.mean_time_ms.is_infinite(),
            self.peak_memory_gb.is_infinite(),
        ];
        infs.iter().all(|&b| b == infs[0])
    }
}

/// Serializes infinity as the string `"inf"` and finite values as numbers.
mod inf_as_string {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() {
            ser.serialize_str("inf")
        } else {
            ser.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Text(s) => Err(D::Error::custom(format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

/// Audit-log entry; the emitted order proves the protocol ordering
/// (load → warm-up×W → reset-peak → measured×R).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum BenchEvent {
    Load { architecture: Architecture, n: usize },
    Warmup { architecture: Architecture, n: usize, run: usize },
    ResetPeak { architecture: Architecture, n: usize },
    Measured { architecture: Architecture, n: usize, run: usize },
    Oom { architecture: Architecture, n: usize, during: String },
}

/// Sweep parameters.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    /// `None` means unbounded.
    pub budget_bytes: Option<u64>,
    pub seed: u64,
    pub scale: Scale,
    pub precision: Precision,
}

impl BenchOptions {
    /// Protocol defaults: lengths 512–8192 doubling, 5 measured runs after
    /// 2 warm-ups, 16 GiB budget.
    #[must_use]
    pub fn defaults(scale: Scale, seed: u64) -> BenchOptions {
        BenchOptions {
            lengths: vec![512, 1024, 2048, 4096, 8192],
            runs: 5,
            warmup: 2,
            budget_bytes: Some(16 * (1u64 << 30)),
            seed,
            scale,
            precision: Precision::Single,
        }
    }
}

enum Weights {
    Transformer(TransformerWeights),
    Mamba(MambaWeights),
}

fn forward(
    weights: &Weights,
    tokens: &[u32],
    meter: &Arc<AllocationMeter>,
    precision: Precision,
) -> Result<ForwardTrace, crate::tape::TapeError> {
    match weights {
        Weights::Transformer(w) => {
            forward_transformer(w, tokens, Collect::nothing(), Some(meter), precision)
        }
        Weights::Mamba(w) => forward_mamba(w, tokens, Collect::nothing(), Some(meter), precision),
    }
}

/// Runs the full sweep for one architecture. Infallible by design: any
/// budget failure is recorded as an out-of-memory cell and the sweep moves
/// on.
pub fn run_benchmark(
    architecture: Architecture,
    corpus: &TokenCorpus,
    options: &BenchOptions,
) -> (Vec<BenchRecord>, Vec<BenchEvent>) {
    assert!(options.runs >= 1, "need at least one measured run");
    assert!(
        !options.lengths.is_empty() && options.lengths.windows(2).all(|w| w[0] < w[1]),
        "lengths must be non-empty and ascending"
    );
    let mut records = Vec::with_capacity(options.lengths.len());
    let mut events = Vec::new();
    for &n in &options.lengths {
        let tokens = prepare_sequence(corpus, n);
        let seq_hash = format!("{:016x}", hash_ids(&tokens));
        let meter = match options.budget_bytes {
            Some(b) => AllocationMeter::with_budget(b),
            None => AllocationMeter::unbounded(),
        };

        events.push(BenchEvent::Load { architecture, n });
        let oom_record = |events: &mut Vec<BenchEvent>, during: &str| {
            events.push(BenchEvent::Oom {
                architecture,
                n,
                during: during.to_string(),
            });
            BenchRecord {
                architecture,
                n,
                run_times_ms: Vec::new(),
                mean_time_ms: f64::INFINITY,
                peak_memory_gb: f64::INFINITY,
                oom: true,
                seq_hash: seq_hash.clone(),
            }
        };

        let build = match architecture {
            Architecture::Transformer => TransformerWeights::init(
                options.scale.transformer(),
                options.seed,
                options.precision,
                Some(&meter),
            )
            .map(Weights::Transformer),
            Architecture::Mamba => MambaWeights::init(
                options.scale.mamba(),
                options.seed,
                options.precision,
                Some(&meter),
            )
            .map(Weights::Mamba),
        };
        let weights = match build {
            Ok(w) => w,
            Err(_) => {
                records.push(oom_record(&mut events, "load"));
                continue;
            }
        };

        let mut failed = false;
        for run in 0..options.warmup {
            events.push(BenchEvent::Warmup {
                architecture,
                n,
                run,
            });
            if forward(&weights, &tokens, &meter, options.precision).is_err() {
                records.push(oom_record(&mut events, "warmup"));
                failed = true;
                break;
            }
        }
        if failed {
            continue;
        }

        meter.reset_peak();
        events.push(BenchEvent::ResetPeak { architecture, n });

        let mut run_times_ms = Vec::with_capacity(options.runs);
        for run in 0..options.runs {
            events.push(BenchEvent::Measured {
                architecture,
                n,
                run,
            });
            match forward(&weights, &tokens, &meter, options.precision) {
                Ok(trace) => run_times_ms.push(trace.elapsed_ms),
                Err(_) => {
                    records.push(oom_record(&mut events, "measured"));
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }

        let mean_time_ms = run_times_ms.iter().sum::<f64>() / run_times_ms.len() as f64;
        let peak_memory_gb = meter.peak_bytes() as f64 / BYTES_PER_GIB;
        records.push(BenchRecord {
            architecture,
            n,
            run_times_ms,
            mean_time_ms,
            peak_memory_gb,
            oom: false,
            seq_hash,
        });
    }
    (records, events)
}

/// Per-architecture digest of a record set.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ArchSummary {
    pub architecture: Architecture,
    pub finite_cells: usize,
    pub mean_memory_gb: f64,
    pub std_memory_gb: f64,
    pub mean_time_ms: f64,
    pub std_time_ms: f64,
    /// Largest length completed without running out of budget.
    pub max_n_completed: usize,
    /// Fraction of this architecture's cells that hit the budget.
    pub oom_fraction: f64,
    /// Set when only one finite cell exists, making the deviation
    /// meaningless.
    pub degenerate_sample: bool,
}

/// Errors summarising records.
#[derive(Debug, thiserror::Error)]
pub enum SummaryError {
    #[error("no records for any architecture")]
    Empty,
    #[error("every {architecture} record is out-of-memory")]
    AllOom { architecture: Architecture },
}

/// Mean and sample standard deviation (n−1 denominator; 0 for a single
/// point).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summarises the finite cells of each architecture present in `records`.
pub fn summarize(records: &[BenchRecord]) -> Result<Vec<ArchSummary>, SummaryError> {
    if records.is_empty() {
        return Err(SummaryError::Empty);
    }
    let mut out = Vec::new();
    for architecture in [Architecture::Transformer, Architecture::Mamba] {
        let cells: Vec<&BenchRecord> = records
            .iter()
            .filter(|r| r.architecture == architecture)
            .collect();
        if cells.is_empty() {
            continue;
        }
        let finite: Vec<&&BenchRecord> = cells.iter().filter(|r| !r.oom).collect();
        if finite.is_empty() {
            return Err(SummaryError::AllOom { architecture });
        }
        let memories: Vec<f64> = finite.iter().map(|r| r.peak_memory_gb).collect();
        let times: Vec<f64> = finite.iter().map(|r| r.mean_time_ms).collect();
        let (mean_memory_gb, std_memory_gb) = mean_std(&memories);
        let (mean_time_ms, std_time_ms) = mean_std(&times);
        out.push(ArchSummary {
            architecture,
            finite_cells: finite.len(),
            mean_memory_gb,
            std_memory_gb,
            mean_time_ms,
            std_time_ms,
            max_n_completed: finite.iter().map(|r| r.n).max().expect("non-empty"),
            oom_fraction: (cells.len() - finite.len()) as f64 / cells.len() as f64,
            degenerate_sample: finite.len() == 1,
        });
    }
    Ok(out)
}
