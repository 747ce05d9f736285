//! Selective state-space stack: pre-norm blocks that project the residual
//! stream into a gated inner signal, apply a depthwise causal convolution
//! and SiLU, derive input-dependent step sizes and state projections, run
//! the diagonal selective scan, and project back down.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::meter::{AllocationMeter, OutOfBudget, Tag};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Precision, Tensor};

use super::{gain_tensor, normal_tensor, rng_for_seed, zero_tensor, ParamCount};

/// Hyperparameters of the state-space stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MambaConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub vocab: usize,
}

impl MambaConfig {
    /// Full-scale configuration used for the headline comparisons.
    #[must_use]
    pub fn full() -> MambaConfig {
        MambaConfig {
            n_layers: 8,
            d_model: 512,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            vocab: 32_000,
        }
    }

    /// Reduced configuration for fast desk-scale sweeps.
    #[must_use]
    pub fn mini() -> MambaConfig {
        MambaConfig {
            n_layers: 2,
            d_model: 64,
            d_state: 8,
            expand: 2,
            d_conv: 4,
            vocab: 256,
        }
    }

    /// Inner channel width after the expansion projection.
    #[must_use]
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Width of the low-rank step-size bottleneck: `ceil(d_model / 16)`.
    #[must_use]
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    /// Exact scalar-parameter count implied by the block wiring.
    #[must_use]
    pub fn param_count(&self) -> ParamCount {
        let d = self.d_model;
        let di = self.d_inner();
        let ds = self.d_state;
        let dtr = self.dt_rank();
        let input_embedding = self.vocab * d;
        let output_projection = self.vocab * d;
        let per_layer = d                   // pre-norm gain
            + 2 * d * di                    // input projection (signal ‖ gate)
            + di * self.d_conv + di         // depthwise conv weight + bias
            + di * (dtr + 2 * ds)           // step/state projection
            + dtr * di + di                 // step up-projection + bias
            + di * ds                       // state transition A
            + di * d; // output projection
        let mut body = self.n_layers * per_layer;
        if self.n_layers > 0 {
            body += d; // final norm gain
        }
        ParamCount {
            total: input_embedding + body + output_projection,
            input_embedding,
            output_projection,
            non_embedding: body + output_projection,
        }
    }
}

/// One pre-norm block's parameters.
pub struct MambaLayer {
    pub norm: Arc<Tensor>,        // d
    pub in_proj: Arc<Tensor>,     // d × 2·d_inner
    pub conv_weight: Arc<Tensor>, // d_inner × d_conv
    pub conv_bias: Arc<Tensor>,   // d_inner
    pub x_proj: Arc<Tensor>,      // d_inner × (dt_rank + 2·d_state)
    pub dt_weight: Arc<Tensor>,   // dt_rank × d_inner
    pub dt_bias: Arc<Tensor>,     // d_inner
    pub a: Arc<Tensor>,           // d_inner × d_state
    pub out_proj: Arc<Tensor>,    // d_inner × d
}

/// Full weight set. Projections and embeddings are seeded N(0, 0.02²),
/// gains start at 1, biases at 0, and each row of the state transition is
/// `−(1, 2, …, d_state)` so every mode decays.
pub struct MambaWeights {
    pub config: MambaConfig,
    pub embedding: Arc<Tensor>, // vocab × d
    pub layers: Vec<MambaLayer>,
    pub final_norm: Arc<Tensor>, // d
    pub output: Arc<Tensor>,     // d × vocab
}

impl MambaWeights {
    /// Builds and initialises the weights, charging `meter` (when present)
    /// for every parameter tensor.
    pub fn init(
        config: MambaConfig,
        seed: u64,
        precision: Precision,
        meter: Option<&Arc<AllocationMeter>>,
    ) -> Result<MambaWeights, OutOfBudget> {
        let mut rng: ChaCha8Rng = rng_for_seed(seed);
        let d = config.d_model;
        let di = config.d_inner();
        let ds = config.d_state;
        let dtr = config.dt_rank();
        let mut normal =
            |shape: Vec<usize>| normal_tensor(&mut rng, shape, precision, meter, Tag::Params);
        let embedding = normal(vec![config.vocab, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let norm = gain_tensor(vec![d], precision, meter)?;
            let in_proj = normal(vec![d, 2 * di])?;
            let conv_weight = normal(vec![di, config.d_conv])?;
            let conv_bias = zero_tensor(vec![di], precision, meter)?;
            let x_proj = normal(vec![di, dtr + 2 * ds])?;
            let dt_weight = normal(vec![dtr, di])?;
            let dt_bias = zero_tensor(vec![di], precision, meter)?;
            let a = decay_transition(di, ds, precision, meter)?;
            let out_proj = normal(vec![di, d])?;
            layers.push(MambaLayer {
                norm,
                in_proj,
                conv_weight,
                conv_bias,
                x_proj,
                dt_weight,
                dt_bias,
                a,
                out_proj,
            });
        }
        let final_norm = gain_tensor(vec![d], precision, meter)?;
        let output = normal(vec![d, config.vocab])?;
        Ok(MambaWeights {
            config,
            embedding,
            layers,
            final_norm,
            output,
        })
    }

    /// Parameter tensors in declaration order (the snapshot order).
    pub(crate) fn tensors(&self) -> Vec<&Arc<Tensor>> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend([
                &l.norm,
                &l.in_proj,
                &l.conv_weight,
                &l.conv_bias,
                &l.x_proj,
                &l.dt_weight,
                &l.dt_bias,
                &l.a,
                &l.out_proj,
            ]);
        }
        v.push(&self.final_norm);
        v.push(&self.output);
        v
    }
}

fn decay_transition(
    di: usize,
    ds: usize,
    precision: Precision,
    meter: Option<&Arc<AllocationMeter>>,
) -> Result<Arc<Tensor>, OutOfBudget> {
    let mut data = Vec::with_capacity(di * ds);
    for _ in 0..di {
        for j in 0..ds {
            data.push(-((j + 1) as f64));
        }
    }
    let t = Tensor::from_vec(vec![di, ds], data, precision).expect("transition shape");
    Ok(Arc::new(match meter {
        Some(m) => t.metered(m, Tag::Params)?,
        None => t,
    }))
}

/// Residual stream produced by the stack, plus the carried recurrent-state
/// buffers (eager mode only). The buffers stay allocated until dropped, so
/// holding this struct for the duration of a pass makes the meter report
/// the persistent recurrent footprint: one `d_inner × d_state` buffer per
/// layer, independent of sequence length.
pub struct MambaStackOut {
    /// Final residual-stream state (pre final-norm), `N × d_model`.
    pub last: Var,
    /// When hidden collection is on: embedding output plus each block's
    /// output — `n_layers + 1` entries.
    pub hidden: Vec<Var>,
    /// Carried recurrent state per layer (empty when the tape records).
    pub state_buffers: Vec<Tensor>,
}

/// Runs the block stack over an already-embedded sequence.
pub fn mamba_stack(
    tape: &Tape,
    weights: &MambaWeights,
    embedded: &Var,
    collect_hidden: bool,
) -> Result<MambaStackOut, TapeError> {
    let cfg = &weights.config;
    let di = cfg.d_inner();
    let ds = cfg.d_state;
    let dtr = cfg.dt_rank();
    let eps = 1e-6;
    let mut hidden = Vec::new();
    let mut state_buffers = Vec::new();
    let mut x = embedded.clone();
    if collect_hidden {
        hidden.push(x.clone());
    }
    for layer in &weights.layers {
        let normed = tape.rmsnorm(&x, &tape.leaf(Arc::clone(&layer.norm)), eps)?;
        let both = tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.in_proj)))?;
        drop(normed);
        let signal = tape.slice_cols(&both, 0, di)?;
        let gate = tape.slice_cols(&both, di, di)?;
        drop(both);
        let conv = tape.conv1d_causal(
            &signal,
            &tape.leaf(Arc::clone(&layer.conv_weight)),
            &tape.leaf(Arc::clone(&layer.conv_bias)),
        )?;
        drop(signal);
        let u = tape.silu(&conv)?;
        drop(conv);
        let proj = tape.matmul(&u, &tape.leaf(Arc::clone(&layer.x_proj)))?;
        let dt_low = tape.slice_cols(&proj, 0, dtr)?;
        let b_seq = tape.slice_cols(&proj, dtr, ds)?;
        let c_seq = tape.slice_cols(&proj, dtr + ds, ds)?;
        drop(proj);
        let dt_lin = tape.add_bias(
            &tape.matmul(&dt_low, &tape.leaf(Arc::clone(&layer.dt_weight)))?,
            &tape.leaf(Arc::clone(&layer.dt_bias)),
        )?;
        drop(dt_low);
        let dt = tape.softplus(&dt_lin)?;
        drop(dt_lin);
        let a = tape.leaf(Arc::clone(&layer.a));
        let (y, carried) = tape.scan(&dt, &a, &b_seq, &c_seq, &u)?;
        drop((dt, a, b_seq, c_seq, u));
        if let Some(buffer) = carried {
            state_buffers.push(buffer);
        }
        let gated = tape.mul(&y, &tape.silu(&gate)?)?;
        drop((y, gate));
        let out = tape.matmul(&gated, &tape.leaf(Arc::clone(&layer.out_proj)))?;
        drop(gated);
        x = tape.add(&x, &out)?;
        if collect_hidden {
            hidden.push(x.clone());
        }
    }
    Ok(MambaStackOut {
        last: x,
        hidden,
        state_buffers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parameter_count() {
        let count = MambaConfig::full().param_count();
        assert_eq!(count.total, 46_322_176);
        assert!((40_000_000..=60_000_000).contains(&count.total));
    }

    #[test]
    fn mini_config_parameter_count() {
        assert_eq!(MambaConfig::mini().param_count().total, 91_840);
    }

    #[test]
    fn full_counts_of_both_stacks_differ_by_less_than_a_quarter() {
        let t = super::super::TransformerConfig::full().param_count().total as f64;
        let m = MambaConfig::full().param_count().total as f64;
        let rel = (t - m).abs() / t.max(m);
        assert!(rel < 0.25, "relative difference {rel}");
    }

    #[test]
    fn zero_layer_config_is_embeddings_only() {
        let mut cfg = MambaConfig::mini();
        cfg.n_layers = 0;
        let count = cfg.param_count();
        assert_eq!(count.input_embedding, cfg.vocab * cfg.d_model);
        assert_eq!(count.total, 2 * cfg.vocab * cfg.d_model);
    }

    #[test]
    fn derived_widths() {
        let cfg = MambaConfig::full();
        assert_eq!(cfg.d_inner(), 1024);
        assert_eq!(cfg.dt_rank(), 32);
        assert_eq!(MambaConfig::mini().dt_rank(), 4);
    }

    #[test]
    fn transition_rows_decay_with_state_index() {
        let w = MambaWeights::init(MambaConfig::mini(), 5, Precision::Double, None).unwrap();
        let a = &w.layers[0].a;
        let ds = w.config.d_state;
        for i in 0..w.config.d_inner() {
            for j in 0..ds {
                assert_eq!(a.data()[i * ds + j], -((j + 1) as f64));
            }
        }
        assert!(w.layers[0].conv_bias.data().iter().all(|&b| b == 0.0));
        assert!(w.layers[0].dt_bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn stack_keeps_one_state_buffer_per_layer_in_eager_mode() {
        let w = MambaWeights::init(MambaConfig::mini(), 2, Precision::Double, None).unwrap();
        let tape = Tape::eager(Precision::Double, None);
        let embedded = super::super::embed_tokens(&tape, &w.embedding, &[9, 8, 7]).unwrap();
        let out = mamba_stack(&tape, &w, &embedded, true).unwrap();
        assert_eq!(out.state_buffers.len(), w.config.n_layers);
        assert_eq!(
            out.state_buffers[0].shape(),
            &[w.config.d_inner(), w.config.d_state]
        );
        assert_eq!(out.hidden.len(), w.config.n_layers + 1);
    }
}
