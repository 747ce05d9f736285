//! Representational metrics over forward traces.
//!
//! Hidden-state dynamics (velocity ‖h_t − h_{t−1}‖₂, drift ‖h_t − h_0‖₂,
//! trailing-window variance), attention statistics (entropy in nats,
//! expected backward distance, top-k concentration, thresholded span), and
//! a gradient-based effective-context probe for the recurrent stack.

use serde::{Deserialize, Serialize};

use crate::model::{embed_tokens, mamba_stack, MambaWeights};
use crate::tape::{Tape, TapeError};
use crate::tensor::{l2_norm, Precision, Tensor};

/// Errors computing representational metrics.
#[derive(Debug, thiserror::Error)]
pub enum ReprError {
    #[error("need at least {needed} positions, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

fn require_rows(t: &Tensor, needed: usize) -> Result<(usize, usize), ReprError> {
    let rows = t.rows();
    let cols = t.cols();
    if rows < needed {
        return Err(ReprError::TooShort { needed, got: rows });
    }
    Ok((rows, cols))
}

// ===== Hidden-state dynamics =====

/// Per-step L2 change plus aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VelocityStats {
    /// `‖h_t − h_{t−1}‖₂` for t = 1..N−1 (N−1 values).
    pub series: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Consecutive-state movement of one layer's `N × d` hidden sequence.
pub fn state_velocity(hidden: &Tensor) -> Result<VelocityStats, ReprError> {
    let (rows, cols) = require_rows(hidden, 2)?;
    let series: Vec<f64> = (1..rows)
        .map(|t| row_distance(hidden, t, t - 1, cols))
        .collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let max = series.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(VelocityStats { series, mean, max })
}

/// Cumulative departure from the first position's state.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DriftStats {
    /// `‖h_t − h_0‖₂` for t = 1..N−1 (N−1 values).
    pub series: Vec<f64>,
    pub final_drift: f64,
}

/// Drift of one layer's hidden sequence against its first state.
pub fn state_drift(hidden: &Tensor) -> Result<DriftStats, ReprError> {
    let (rows, cols) = require_rows(hidden, 2)?;
    let series: Vec<f64> = (1..rows)
        .map(|t| row_distance(hidden, t, 0, cols))
        .collect();
    let final_drift = *series.last().expect("rows >= 2");
    Ok(DriftStats {
        series,
        final_drift,
    })
}

fn row_distance(t: &Tensor, a: usize, b: usize, cols: usize) -> f64 {
    let ra = &t.data()[a * cols..(a + 1) * cols];
    let rb = &t.data()[b * cols..(b + 1) * cols];
    ra.iter()
        .zip(rb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Trailing-window local variance: at each position `p ≥ window−1`, the
/// population variance of each dimension over rows `p−window+1..=p`,
/// averaged over dimensions. Yields `N − window + 1` values.
pub fn state_stability(hidden: &Tensor, window: usize) -> Result<Vec<f64>, ReprError> {
    assert!(window >= 2, "variance needs a window of at least 2");
    let (rows, cols) = require_rows(hidden, window)?;
    let data = hidden.data();
    let mut out = Vec::with_capacity(rows - window + 1);
    for end in (window - 1)..rows {
        let start = end + 1 - window;
        let mut total = 0.0;
        for dim in 0..cols {
            let mut mean = 0.0;
            for r in start..=end {
                mean += data[r * cols + dim];
            }
            mean /= window as f64;
            let mut var = 0.0;
            for r in start..=end {
                let d = data[r * cols + dim] - mean;
                var += d * d;
            }
            total += var / window as f64;
        }
        out.push(total / cols as f64);
    }
    Ok(out)
}

/// L2 norm of the last row of an `N × d` hidden sequence.
#[must_use]
pub fn final_token_norm(hidden: &Tensor) -> f64 {
    let rows = hidden.rows();
    l2_norm(hidden.row(rows - 1))
}

/// Everything the state metrics say about one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStateReport {
    pub layer: usize,
    pub velocity: VelocityStats,
    pub drift: DriftStats,
    /// Empty when the sequence is shorter than the window.
    pub stability: Vec<f64>,
    pub final_token_norm: f64,
}

/// Per-layer state dynamics over a trace's hidden sequence list.
pub fn state_report(
    hidden_states: &[Tensor],
    window: usize,
) -> Result<Vec<LayerStateReport>, ReprError> {
    hidden_states
        .iter()
        .enumerate()
        .map(|(layer, hidden)| {
            let stability = if hidden.rows() >= window {
                state_stability(hidden, window)?
            } else {
                Vec::new()
            };
            Ok(LayerStateReport {
                layer,
                velocity: state_velocity(hidden)?,
                drift: state_drift(hidden)?,
                stability,
                final_token_norm: final_token_norm(hidden),
            })
        })
        .collect()
}

// ===== Attention statistics =====

/// A metric averaged within each layer (over heads and positions) plus the
/// across-layer mean.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerAggregate {
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

fn aggregate_rows(attentions: &[Tensor], f: impl Fn(&[f64], usize) -> f64) -> LayerAggregate {
    let per_layer: Vec<f64> = attentions
        .iter()
        .map(|layer| {
            let n = *layer.shape().last().expect("rank 3");
            let mut sum = 0.0;
            let mut count = 0usize;
            for (r, row) in layer.data().chunks_exact(n).enumerate() {
                sum += f(row, r % n);
                count += 1;
            }
            sum / count as f64
        })
        .collect();
    let overall = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
    LayerAggregate { per_layer, overall }
}

/// Shannon entropy (nats) of one attention distribution,
/// `−Σ_j a_j ln(a_j + ε)` with ε = 1e-10. A uniform distribution over k
/// tokens scores ln k; a one-hot distribution scores ≈ 0.
#[must_use]
pub fn distribution_entropy(weights: &[f64]) -> f64 {
    -weights.iter().map(|&a| a * (a + 1e-10).ln()).sum::<f64>()
}

/// Expected backward distance `Σ_{j≤i} a_j (i − j)` of one position's
/// distribution. Self-attention scores 0; uniform over positions 0..=i
/// scores i/2.
#[must_use]
pub fn expected_backward_distance(weights: &[f64], position: usize) -> f64 {
    weights
        .iter()
        .take(position + 1)
        .enumerate()
        .map(|(j, &a)| a * (position - j) as f64)
        .sum()
}

/// Per-row [`distribution_entropy`], averaged per layer and overall.
#[must_use]
pub fn attention_entropy(attentions: &[Tensor]) -> LayerAggregate {
    aggregate_rows(attentions, |row, _| distribution_entropy(row))
}

/// Per-row [`expected_backward_distance`], averaged per layer and overall.
#[must_use]
pub fn attention_distance(attentions: &[Tensor]) -> LayerAggregate {
    aggregate_rows(attentions, expected_backward_distance)
}

/// Sum of the `k` largest weights per row (every weight when a row has
/// fewer than `k` causal entries), averaged per layer and overall.
#[must_use]
pub fn attention_concentration(attentions: &[Tensor], k: usize) -> LayerAggregate {
    aggregate_rows(attentions, |row, i| {
        let mut weights: Vec<f64> = row.iter().take(i + 1).copied().collect();
        weights.sort_unstable_by(|a, b| b.total_cmp(a));
        weights.iter().take(k).sum()
    })
}

/// Distribution of thresholded attention spans across layers, heads, and
/// positions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpanStats {
    pub mean: f64,
    pub max: f64,
    /// Population standard deviation over all rows.
    pub std: f64,
    /// std/mean — 0 when the mean is 0.
    pub cov: f64,
    /// Mean over positions i ≥ 1 of span/i.
    pub mean_fraction: f64,
    /// Rows where no weight cleared the threshold (span counted as 0).
    pub flagged_rows: usize,
}

/// Span per row = distance from the position to the earliest token whose
/// attention weight exceeds `threshold`; rows with no qualifying token
/// score 0 and are counted in `flagged_rows`.
#[must_use]
pub fn effective_span_transformer(attentions: &[Tensor], threshold: f64) -> SpanStats {
    let mut spans: Vec<f64> = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    let mut flagged_rows = 0usize;
    for layer in attentions {
        let n = *layer.shape().last().expect("rank 3");
        for (r, row) in layer.data().chunks_exact(n).enumerate() {
            let i = r % n;
            let earliest = row
                .iter()
                .take(i + 1)
                .position(|&a| a > threshold);
            let span = match earliest {
                Some(j) => (i - j) as f64,
                None => {
                    flagged_rows += 1;
                    0.0
                }
            };
            spans.push(span);
            if i >= 1 {
                fractions.push(span / i as f64);
            }
        }
    }
    let count = spans.len() as f64;
    let mean = spans.iter().sum::<f64>() / count;
    let max = spans.iter().fold(0.0f64, |a, &b| a.max(b));
    let var = spans.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / count;
    let std = var.sqrt();
    let cov = if mean == 0.0 { 0.0 } else { std / mean };
    let mean_fraction = if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    };
    SpanStats {
        mean,
        max,
        std,
        cov,
        mean_fraction,
        flagged_rows,
    }
}

/// All attention statistics bundled for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionReport {
    pub entropy: LayerAggregate,
    pub distance: LayerAggregate,
    /// Top-k weight mass with k = 5.
    pub concentration: LayerAggregate,
    pub span: SpanStats,
}

/// Computes entropy, distance, top-5 concentration, and span statistics
/// over one trace's attention tensors.
#[must_use]
pub fn attention_report(attentions: &[Tensor], span_threshold: f64) -> AttentionReport {
    AttentionReport {
        entropy: attention_entropy(attentions),
        distance: attention_distance(attentions),
        concentration: attention_concentration(attentions, 5),
        span: effective_span_transformer(attentions, span_threshold),
    }
}

// ===== Gradient-based effective context =====

/// Probe positions at these fractions of the sequence (the last one is the
/// final token).
pub const PROBE_FRACTIONS: [f64; 5] = [0.25, 0.4375, 0.625, 0.8125, 1.0];

/// One probe's attribution outcome.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProbeResult {
    pub position: usize,
    /// Probe position minus the earliest token whose gradient magnitude
    /// clears the threshold.
    pub effective_range: usize,
    pub qualifying_count: usize,
}

/// Gradient-attribution summary over all probes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContextReport {
    pub probes: Vec<ProbeResult>,
    pub mean_range: f64,
    /// Mean over probes of range / probe position.
    pub fraction_of_sequence: f64,
    /// Coefficient of variation of the ranges (population std / mean).
    pub cov: f64,
}

/// Per-token influence on a probe: L2 norm, per input position, of the
/// gradient of ‖final-layer hidden state at `probe`‖₂ with respect to the
/// input embeddings. Runs the recurrent stack on the prefix up to the
/// probe under a recording tape in double precision.
pub fn gradient_magnitudes(
    weights: &MambaWeights,
    tokens: &[u32],
    probe: usize,
) -> Result<Vec<f64>, ReprError> {
    assert!(probe < tokens.len(), "probe index beyond the sequence");
    let prefix = &tokens[..=probe];
    let tape = Tape::recording(Precision::Double, None);
    let embedded = embed_tokens(&tape, &weights.embedding, prefix)?;
    let out = mamba_stack(&tape, weights, &embedded, false)?;
    let target = tape.l2_norm_row(&out.last, probe)?;
    let grads = tape.gradients(&target, &[&embedded])?;
    let grad = &grads[0];
    Ok((0..grad.rows()).map(|r| l2_norm(grad.row(r))).collect())
}

/// Runs the five-probe effective-context analysis on the recurrent stack.
/// Tokens whose gradient magnitude reaches `threshold` × the maximum
/// magnitude qualify; the effective range of a probe is the distance back
/// to the earliest qualifying token.
pub fn effective_context_ssm(
    weights: &MambaWeights,
    tokens: &[u32],
    threshold: f64,
) -> Result<ContextReport, ReprError> {
    let n = tokens.len();
    if n < 8 {
        return Err(ReprError::TooShort { needed: 8, got: n });
    }
    let mut probes = Vec::with_capacity(PROBE_FRACTIONS.len());
    for frac in PROBE_FRACTIONS {
        let position = ((frac * n as f64).round() as usize).clamp(1, n) - 1;
        let magnitudes = gradient_magnitudes(weights, tokens, position)?;
        let max = magnitudes.iter().fold(0.0f64, |a, &b| a.max(b));
        let cutoff = threshold * max;
        let qualifying: Vec<usize> = magnitudes
            .iter()
            .enumerate()
            .filter(|&(_, &m)| m >= cutoff && m > 0.0)
            .map(|(i, _)| i)
            .collect();
        let effective_range = match qualifying.first() {
            Some(&earliest) => position - earliest,
            None => 0,
        };
        probes.push(ProbeResult {
            position,
            effective_range,
            qualifying_count: qualifying.len(),
        });
    }
    let ranges: Vec<f64> = probes.iter().map(|p| p.effective_range as f64).collect();
    let mean_range = ranges.iter().sum::<f64>() / ranges.len() as f64;
    let fraction_of_sequence = probes
        .iter()
        .filter(|p| p.position > 0)
        .map(|p| p.effective_range as f64 / p.position as f64)
        .sum::<f64>()
        / probes.iter().filter(|p| p.position > 0).count().max(1) as f64;
    let var =
        ranges.iter().map(|r| (r - mean_range).powi(2)).sum::<f64>() / ranges.len() as f64;
    let cov = if mean_range == 0.0 {
        0.0
    } else {
        var.sqrt() / mean_range
    };
    Ok(ContextReport {
        probes,
        mean_range,
        fraction_of_sequence,
        cov,
    })
}
