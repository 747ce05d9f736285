//! The two sequence stacks under comparison, built on the gradient tape:
//! an attention decoder and a selective state-space decoder, with exact
//! parameter counting, seeded initialisation, instrumented forward passes,
//! and flat binary weight snapshots.

pub mod mamba;
pub mod scan;
pub mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::meter::{AllocationMeter, OutOfBudget, Tag};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Precision, Tensor};

pub use mamba::{mamba_stack, MambaConfig, MambaLayer, MambaStackOut, MambaWeights};
pub use scan::selective_scan;
pub use transformer::{
    transformer_stack, TransformerConfig, TransformerLayer, TransformerStackOut,
    TransformerWeights,
};

/// Which stack a measurement or artifact refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transformer,
    Mamba,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Transformer => "transformer",
            Architecture::Mamba => "mamba",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Architecture, String> {
        match s {
            "transformer" => Ok(Architecture::Transformer),
            "mamba" => Ok(Architecture::Mamba),
            other => Err(format!(
                "unknown architecture {other:?} (expected transformer or mamba)"
            )),
        }
    }
}

/// Named size profile selecting matching hyperparameters for both stacks:
/// the full-scale comparison point and a reduced profile sized for
/// laptop-speed sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Mini,
}

impl Scale {
    #[must_use]
    pub fn transformer(self) -> TransformerConfig {
        match self {
            Scale::Full => TransformerConfig::full(),
            Scale::Mini => TransformerConfig::mini(),
        }
    }

    #[must_use]
    pub fn mamba(self) -> MambaConfig {
        match self {
            Scale::Full => MambaConfig::full(),
            Scale::Mini => MambaConfig::mini(),
        }
    }

    /// Vocabulary size (identical across the two stacks at a given scale).
    #[must_use]
    pub fn vocab(self) -> usize {
        self.transformer().vocab
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Mini => "mini",
        })
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Scale, String> {
        match s {
            "full" => Ok(Scale::Full),
            "mini" => Ok(Scale::Mini),
            other => Err(format!("unknown scale {other:?} (expected full or mini)")),
        }
    }
}

/// Exact scalar-parameter tally, split so the share held in embedding
/// tables is visible alongside the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub input_embedding: usize,
    pub output_projection: usize,
    /// Everything except the input embedding table.
    pub non_embedding: usize,
}

/// What a forward pass should retain beyond the logits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Collect {
    pub hidden: bool,
    pub attentions: bool,
}

impl Collect {
    #[must_use]
    pub fn everything() -> Collect {
        Collect {
            hidden: true,
            attentions: true,
        }
    }

    #[must_use]
    pub fn nothing() -> Collect {
        Collect::default()
    }
}

/// Instrumented result of one forward pass.
pub struct ForwardTrace {
    /// `N × vocab`.
    pub logits: Tensor,
    /// Empty unless hidden collection was requested; otherwise the
    /// embedding output plus each block's output (`n_layers + 1` tensors
    /// of shape `N × d_model`).
    pub hidden_states: Vec<Tensor>,
    /// `None` unless attention collection was requested (attention stack
    /// only); otherwise one `h × N × N` tensor per layer.
    pub attentions: Option<Vec<Tensor>>,
    /// Meter peak over the pass (0 when no meter was attached).
    pub peak_memory_bytes: u64,
    /// Peak of the attention-tagged component.
    pub peak_attention_bytes: u64,
    /// Peak of the recurrent-state-tagged component.
    pub peak_state_bytes: u64,
    /// Wall-clock for the compute portion of the pass.
    pub elapsed_ms: f64,
}

/// Gathers embedding rows for a token sequence. The result is a tape leaf,
/// so gradients with respect to the input embeddings are available when
/// the tape records.
pub fn embed_tokens(tape: &Tape, table: &Arc<Tensor>, tokens: &[u32]) -> Result<Var, TapeError> {
    assert!(!tokens.is_empty(), "token sequence must be non-empty");
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut out = tape.fresh(vec![tokens.len(), d], Tag::Activation)?;
    for (row, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        assert!(tok < vocab, "token id {tok} outside vocabulary of {vocab}");
        out.data_mut()[row * d..(row + 1) * d].copy_from_slice(table.row(tok));
    }
    Ok(tape.leaf(Arc::new(out)))
}

/// Final normalisation and projection to vocabulary logits.
pub fn lm_head(
    tape: &Tape,
    final_norm: &Arc<Tensor>,
    output: &Arc<Tensor>,
    last_hidden: &Var,
    eps: f64,
) -> Result<Var, TapeError> {
    let normed = tape.rmsnorm(last_hidden, &tape.leaf(Arc::clone(final_norm)), eps)?;
    tape.matmul(&normed, &tape.leaf(Arc::clone(output)))
}

/// Runs the attention stack end to end, eagerly, reporting meter peaks and
/// elapsed wall-clock. Budget exhaustion anywhere inside surfaces as an
/// error for the caller to convert into an out-of-memory record.
pub fn forward_transformer(
    weights: &TransformerWeights,
    tokens: &[u32],
    collect: Collect,
    meter: Option<&Arc<AllocationMeter>>,
    precision: Precision,
) -> Result<ForwardTrace, TapeError> {
    let start = Instant::now();
    let tape = Tape::eager(precision, meter.map(Arc::clone));
    let embedded = embed_tokens(&tape, &weights.embedding, tokens)?;
    let out = transformer_stack(&tape, weights, &embedded, collect.hidden, collect.attentions)?;
    drop(embedded);
    let logits = lm_head(
        &tape,
        &weights.final_norm,
        &weights.output,
        &out.last,
        weights.config.rmsnorm_eps,
    )?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let (peak, attn_peak, state_peak) = read_peaks(meter);
    Ok(ForwardTrace {
        logits: logits.value().unmetered_clone(),
        hidden_states: out
            .hidden
            .iter()
            .map(|v| v.value().unmetered_clone())
            .collect(),
        attentions: collect.attentions.then(|| {
            out.attentions
                .iter()
                .map(|v| v.value().unmetered_clone())
                .collect()
        }),
        peak_memory_bytes: peak,
        peak_attention_bytes: attn_peak,
        peak_state_bytes: state_peak,
        elapsed_ms,
    })
}

/// Runs the state-space stack end to end, eagerly. The per-layer recurrent
/// buffers stay alive until the peaks have been read, so the meter's
/// state-tagged component reflects the persistent recurrent footprint.
pub fn forward_mamba(
    weights: &MambaWeights,
    tokens: &[u32],
    collect: Collect,
    meter: Option<&Arc<AllocationMeter>>,
    precision: Precision,
) -> Result<ForwardTrace, TapeError> {
    let start = Instant::now();
    let tape = Tape::eager(precision, meter.map(Arc::clone));
    let embedded = embed_tokens(&tape, &weights.embedding, tokens)?;
    let out = mamba_stack(&tape, weights, &embedded, collect.hidden)?;
    drop(embedded);
    let logits = lm_head(&tape, &weights.final_norm, &weights.output, &out.last, 1e-6)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let (peak, attn_peak, state_peak) = read_peaks(meter);
    let trace = ForwardTrace {
        logits: logits.value().unmetered_clone(),
        hidden_states: out
            .hidden
            .iter()
            .map(|v| v.value().unmetered_clone())
            .collect(),
        attentions: None,
        peak_memory_bytes: peak,
        peak_attention_bytes: attn_peak,
        peak_state_bytes: state_peak,
        elapsed_ms,
    };
    drop(out); // releases the recurrent state buffers
    Ok(trace)
}

fn read_peaks(meter: Option<&Arc<AllocationMeter>>) -> (u64, u64, u64) {
    match meter {
        Some(m) => (
            m.peak_bytes(),
            m.tag_peak(Tag::Attention),
            m.tag_peak(Tag::State),
        ),
        None => (0, 0, 0),
    }
}

// ===== Shared initialisation helpers =====

pub(crate) fn rng_for_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn normal_tensor(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    precision: Precision,
    meter: Option<&Arc<AllocationMeter>>,
    tag: Tag,
) -> Result<Arc<Tensor>, OutOfBudget> {
    let dist = Normal::new(0.0, 0.02).expect("valid deviation");
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| dist.sample(rng)).collect();
    let t = Tensor::from_vec(shape, data, precision).expect("element count matches shape");
    meter_tagged(t, meter, tag)
}

pub(crate) fn gain_tensor(
    shape: Vec<usize>,
    precision: Precision,
    meter: Option<&Arc<AllocationMeter>>,
) -> Result<Arc<Tensor>, OutOfBudget> {
    let numel: usize = shape.iter().product();
    let t = Tensor::from_vec(shape, vec![1.0; numel], precision).expect("shape");
    meter_tagged(t, meter, Tag::Params)
}

pub(crate) fn zero_tensor(
    shape: Vec<usize>,
    precision: Precision,
    meter: Option<&Arc<AllocationMeter>>,
) -> Result<Arc<Tensor>, OutOfBudget> {
    let t = Tensor::zeros(shape, precision);
    meter_tagged(t, meter, Tag::Params)
}

fn meter_tagged(
    t: Tensor,
    meter: Option<&Arc<AllocationMeter>>,
    tag: Tag,
) -> Result<Arc<Tensor>, OutOfBudget> {
    Ok(Arc::new(match meter {
        Some(m) => t.metered(m, tag)?,
        None => t,
    }))
}

// ===== Weight snapshots =====

/// Errors reading or writing weight snapshots.
#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a weight snapshot (magic {found:#010x})")]
    BadMagic { found: u32 },
    #[error("unsupported snapshot version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("unknown architecture tag {found}")]
    UnknownArchitecture { found: u32 },
    #[error("snapshot ends early: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("snapshot has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
}

const SNAPSHOT_MAGIC: u32 = 0x5342_5754;
const SNAPSHOT_VERSION: u32 = 1;
const ARCH_TRANSFORMER: u32 = 1;
const ARCH_MAMBA: u32 = 2;

/// Weights recovered from a snapshot file.
pub enum Snapshot {
    Transformer(TransformerWeights),
    Mamba(MambaWeights),
}

impl TransformerWeights {
    /// Writes the flat binary snapshot: header of little-endian 32-bit
    /// integers (magic, version, architecture, config fields), then every
    /// parameter tensor in declaration order as little-endian 32-bit
    /// floats.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), SnapshotError> {
        let cfg = &self.config;
        let mut buf = Vec::new();
        for v in [
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            ARCH_TRANSFORMER,
            cfg.n_layers as u32,
            cfg.n_heads as u32,
            cfg.d_model as u32,
            cfg.d_ffn as u32,
            cfg.vocab as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_params(&mut buf, &self.tensors());
        std::fs::write(path, buf)?;
        Ok(())
    }
}

impl MambaWeights {
    /// Writes the flat binary snapshot (same layout rules as the attention
    /// stack, with this architecture's config fields).
    pub fn save_snapshot(&self, path: &Path) -> Result<(), SnapshotError> {
        let cfg = &self.config;
        let mut buf = Vec::new();
        for v in [
            SNAPSHOT_MAGIC,
            SNAPSHOT_VERSION,
            ARCH_MAMBA,
            cfg.n_layers as u32,
            cfg.d_model as u32,
            cfg.d_state as u32,
            cfg.expand as u32,
            cfg.d_conv as u32,
            cfg.vocab as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_params(&mut buf, &self.tensors());
        std::fs::write(path, buf)?;
        Ok(())
    }
}

fn write_params(buf: &mut Vec<u8>, tensors: &[&Arc<Tensor>]) {
    for t in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Reads a snapshot written by either stack's `save_snapshot`.
pub fn load_snapshot(path: &Path) -> Result<Snapshot, SnapshotError> {
    let bytes = std::fs::read(path)?;
    let mut r = SnapshotReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32()?;
    if magic != SNAPSHOT_MAGIC {
        return Err(SnapshotError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::UnsupportedVersion { found: version });
    }
    let arch = r.u32()?;
    let snapshot = match arch {
        ARCH_TRANSFORMER => {
            let config = TransformerConfig {
                n_layers: r.u32()? as usize,
                n_heads: r.u32()? as usize,
                d_model: r.u32()? as usize,
                d_ffn: r.u32()? as usize,
                vocab: r.u32()? as usize,
                rope_base: 10_000.0,
                rmsnorm_eps: 1e-6,
            };
            let d = config.d_model;
            let embedding = r.tensor(vec![config.vocab, d])?;
            let mut layers = Vec::with_capacity(config.n_layers);
            for _ in 0..config.n_layers {
                layers.push(TransformerLayer {
                    attn_norm: r.tensor(vec![d])?,
                    wq: r.tensor(vec![d, d])?,
                    wk: r.tensor(vec![d, d])?,
                    wv: r.tensor(vec![d, d])?,
                    wo: r.tensor(vec![d, d])?,
                    ffn_norm: r.tensor(vec![d])?,
                    w_gate: r.tensor(vec![d, config.d_ffn])?,
                    w_up: r.tensor(vec![d, config.d_ffn])?,
                    w_down: r.tensor(vec![config.d_ffn, d])?,
                });
            }
            let final_norm = r.tensor(vec![d])?;
            let output = r.tensor(vec![d, config.vocab])?;
            Snapshot::Transformer(TransformerWeights {
                config,
                embedding,
                layers,
                final_norm,
                output,
            })
        }
        ARCH_MAMBA => {
            let config = MambaConfig {
                n_layers: r.u32()? as usize,
                d_model: r.u32()? as usize,
                d_state: r.u32()? as usize,
                expand: r.u32()? as usize,
                d_conv: r.u32()? as usize,
                vocab: r.u32()? as usize,
            };
            let d = config.d_model;
            let di = config.d_inner();
            let ds = config.d_state;
            let dtr = config.dt_rank();
            let embedding = r.tensor(vec![config.vocab, d])?;
            let mut layers = Vec::with_capacity(config.n_layers);
            for _ in 0..config.n_layers {
                layers.push(MambaLayer {
                    norm: r.tensor(vec![d])?,
                    in_proj: r.tensor(vec![d, 2 * di])?,
                    conv_weight: r.tensor(vec![di, config.d_conv])?,
                    conv_bias: r.tensor(vec![di])?,
                    x_proj: r.tensor(vec![di, dtr + 2 * ds])?,
                    dt_weight: r.tensor(vec![dtr, di])?,
                    dt_bias: r.tensor(vec![di])?,
                    a: r.tensor(vec![di, ds])?,
                    out_proj: r.tensor(vec![di, d])?,
                });
            }
            let final_norm = r.tensor(vec![d])?;
            let output = r.tensor(vec![d, config.vocab])?;
            Snapshot::Mamba(MambaWeights {
                config,
                embedding,
                layers,
                final_norm,
                output,
            })
        }
        other => return Err(SnapshotError::UnknownArchitecture { found: other }),
    };
    if r.pos != bytes.len() {
        return Err(SnapshotError::TrailingBytes {
            extra: bytes.len() - r.pos,
        });
    }
    Ok(snapshot)
}

struct SnapshotReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl SnapshotReader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8], SnapshotError> {
        if self.pos + len > self.bytes.len() {
            return Err(SnapshotError::Truncated {
                needed: self.pos + len - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Arc<Tensor>, SnapshotError> {
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Arc::new(
            Tensor::from_vec(shape, data, Precision::Single).expect("shape"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_round_trips_through_strings() {
        for arch in [Architecture::Transformer, Architecture::Mamba] {
            assert_eq!(arch.to_string().parse::<Architecture>().unwrap(), arch);
        }
        assert!("gru".parse::<Architecture>().is_err());
    }

    #[test]
    fn embed_produces_table_rows() {
        let table = Arc::new(
            Tensor::from_vec(
                vec![3, 2],
                vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0],
                Precision::Double,
            )
            .unwrap(),
        );
        let tape = Tape::eager(Precision::Double, None);
        let v = embed_tokens(&tape, &table, &[2, 0, 2]).unwrap();
        assert_eq!(v.value().data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
    }

    #[test]
    fn snapshot_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let t_path = dir.path().join("attn.bin");
        let m_path = dir.path().join("ssm.bin");

        let tw =
            TransformerWeights::init(TransformerConfig::mini(), 11, Precision::Single, None)
                .unwrap();
        tw.save_snapshot(&t_path).unwrap();
        let Snapshot::Transformer(loaded) = load_snapshot(&t_path).unwrap() else {
            panic!("expected the attention stack");
        };
        assert_eq!(loaded.config, tw.config);
        // Second save of the loaded weights must be byte-identical: the
        // f32 narrowing is idempotent.
        let t_path2 = dir.path().join("attn2.bin");
        loaded.save_snapshot(&t_path2).unwrap();
        assert_eq!(
            std::fs::read(&t_path).unwrap(),
            std::fs::read(&t_path2).unwrap()
        );

        let mw = MambaWeights::init(MambaConfig::mini(), 11, Precision::Single, None).unwrap();
        mw.save_snapshot(&m_path).unwrap();
        let Snapshot::Mamba(mloaded) = load_snapshot(&m_path).unwrap() else {
            panic!("expected the state-space stack");
        };
        assert_eq!(mloaded.config, mw.config);
        assert_eq!(mloaded.layers[0].a.data(), mw.layers[0].a.data());
    }

    #[test]
    fn snapshot_rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
        assert!(matches!(
            load_snapshot(&path),
            Err(SnapshotError::BadMagic { .. })
        ));

        let w = MambaWeights::init(MambaConfig::mini(), 1, Precision::Single, None).unwrap();
        let full = dir.path().join("full.bin");
        w.save_snapshot(&full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_snapshot(&cut),
            Err(SnapshotError::Truncated { .. })
        ));
    }
}
