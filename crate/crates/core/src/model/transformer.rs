//! Decoder-only attention stack: pre-norm blocks of rotary multi-head
//! causal attention and a SwiGLU feed-forward, with a final normalisation
//! and an untied output projection.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::meter::{AllocationMeter, OutOfBudget, Tag};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Precision, Tensor};

use super::{gain_tensor, normal_tensor, rng_for_seed, ParamCount};

/// Hyperparameters of the attention stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
}

impl TransformerConfig {
    /// Full-scale configuration used for the headline comparisons.
    #[must_use]
    pub fn full() -> TransformerConfig {
        TransformerConfig {
            n_layers: 8,
            n_heads: 8,
            d_model: 512,
            d_ffn: 1024,
            vocab: 32_000,
            rope_base: 10_000.0,
            rmsnorm_eps: 1e-6,
        }
    }

    /// Reduced configuration sized so a full benchmark sweep completes in
    /// minutes on a laptop CPU.
    #[must_use]
    pub fn mini() -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ffn: 128,
            vocab: 256,
            rope_base: 10_000.0,
            rmsnorm_eps: 1e-6,
        }
    }

    #[must_use]
    pub fn head_dim(&self) -> usize {
        assert!(
            self.n_heads > 0 && self.d_model % self.n_heads == 0,
            "d_model {} must divide into {} heads",
            self.d_model,
            self.n_heads
        );
        self.d_model / self.n_heads
    }

    /// Exact scalar-parameter count implied by the block wiring.
    #[must_use]
    pub fn param_count(&self) -> ParamCount {
        let d = self.d_model;
        let input_embedding = self.vocab * d;
        let output_projection = self.vocab * d;
        let per_layer = 4 * d * d          // q, k, v, o projections
            + 2 * d                         // two pre-norm gains
            + 3 * d * self.d_ffn; // gate, up, down projections
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
pub struct TransformerLayer {
    pub attn_norm: Arc<Tensor>, // d
    pub wq: Arc<Tensor>,        // d × d
    pub wk: Arc<Tensor>,        // d × d
    pub wv: Arc<Tensor>,        // d × d
    pub wo: Arc<Tensor>,        // d × d
    pub ffn_norm: Arc<Tensor>,  // d
    pub w_gate: Arc<Tensor>,    // d × d_ffn
    pub w_up: Arc<Tensor>,      // d × d_ffn
    pub w_down: Arc<Tensor>,    // d_ffn × d
}

/// Full weight set. Projection and embedding entries are drawn from a
/// seeded N(0, 0.02²); normalisation gains start at 1.
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub embedding: Arc<Tensor>, // vocab × d
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Arc<Tensor>, // d
    pub output: Arc<Tensor>,     // d × vocab
}

impl TransformerWeights {
    /// Builds and initialises the weights, charging `meter` (when present)
    /// for every parameter tensor. Runs out of budget before any compute
    /// happens if the parameters alone exceed it.
    pub fn init(
        config: TransformerConfig,
        seed: u64,
        precision: Precision,
        meter: Option<&Arc<AllocationMeter>>,
    ) -> Result<TransformerWeights, OutOfBudget> {
        let mut rng: ChaCha8Rng = rng_for_seed(seed);
        let d = config.d_model;
        let mut normal =
            |shape: Vec<usize>| normal_tensor(&mut rng, shape, precision, meter, Tag::Params);
        let embedding = normal(vec![config.vocab, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(TransformerLayer {
                attn_norm: gain_tensor(vec![d], precision, meter)?,
                wq: normal(vec![d, d])?,
                wk: normal(vec![d, d])?,
                wv: normal(vec![d, d])?,
                wo: normal(vec![d, d])?,
                ffn_norm: gain_tensor(vec![d], precision, meter)?,
                w_gate: normal(vec![d, config.d_ffn])?,
                w_up: normal(vec![d, config.d_ffn])?,
                w_down: normal(vec![config.d_ffn, d])?,
            });
        }
        let final_norm = gain_tensor(vec![d], precision, meter)?;
        let output = normal(vec![d, config.vocab])?;
        Ok(TransformerWeights {
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
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        v.push(&self.final_norm);
        v.push(&self.output);
        v
    }
}

/// Residual stream and per-layer attention tensors produced by the stack.
pub struct TransformerStackOut {
    /// Final residual-stream state (pre final-norm), `N × d_model`.
    pub last: Var,
    /// When hidden collection is on: embedding output plus each block's
    /// output — `n_layers + 1` entries.
    pub hidden: Vec<Var>,
    /// When attention collection is on: one `h × N × N` row-stochastic
    /// causal tensor per layer.
    pub attentions: Vec<Var>,
}

/// Runs the block stack over an already-embedded sequence.
pub fn transformer_stack(
    tape: &Tape,
    weights: &TransformerWeights,
    embedded: &Var,
    collect_hidden: bool,
    collect_attentions: bool,
) -> Result<TransformerStackOut, TapeError> {
    let cfg = &weights.config;
    let mut hidden = Vec::new();
    let mut attentions = Vec::new();
    let mut x = embedded.clone();
    if collect_hidden {
        hidden.push(x.clone());
    }
    for layer in &weights.layers {
        // Attention sub-block.
        let normed = tape.rmsnorm(&x, &tape.leaf(Arc::clone(&layer.attn_norm)), cfg.rmsnorm_eps)?;
        let q = tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.wq)))?;
        let k = tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.wk)))?;
        let v = tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.wv)))?;
        drop(normed);
        let q = tape.rope_heads(&q, cfg.n_heads, cfg.rope_base)?;
        let k = tape.rope_heads(&k, cfg.n_heads, cfg.rope_base)?;
        let scores = tape.attention_scores(&q, &k, cfg.n_heads)?;
        drop((q, k));
        let probs = tape.softmax_rows(scores)?;
        let mixed = tape.attention_mix(&probs, &v, cfg.n_heads)?;
        if collect_attentions {
            attentions.push(probs);
        }
        drop(v);
        let attn_out = tape.matmul(&mixed, &tape.leaf(Arc::clone(&layer.wo)))?;
        drop(mixed);
        x = tape.add(&x, &attn_out)?;
        drop(attn_out);

        // Feed-forward sub-block.
        let normed = tape.rmsnorm(&x, &tape.leaf(Arc::clone(&layer.ffn_norm)), cfg.rmsnorm_eps)?;
        let gate = tape.silu(&tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.w_gate)))?)?;
        let up = tape.matmul(&normed, &tape.leaf(Arc::clone(&layer.w_up)))?;
        drop(normed);
        let gated = tape.mul(&gate, &up)?;
        drop((gate, up));
        let ffn_out = tape.matmul(&gated, &tape.leaf(Arc::clone(&layer.w_down)))?;
        drop(gated);
        x = tape.add(&x, &ffn_out)?;

        if collect_hidden {
            hidden.push(x.clone());
        }
    }
    Ok(TransformerStackOut {
        last: x,
        hidden,
        attentions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parameter_count() {
        let count = TransformerConfig::full().param_count();
        assert_eq!(count.total, 53_748_224);
        assert_eq!(count.input_embedding, 16_384_000);
        assert_eq!(count.output_projection, 16_384_000);
        assert_eq!(
            count.non_embedding,
            count.total - count.input_embedding
        );
        assert!((40_000_000..=60_000_000).contains(&count.total));
    }

    #[test]
    fn mini_config_parameter_count() {
        assert_eq!(TransformerConfig::mini().param_count().total, 115_008);
    }

    #[test]
    fn zero_layer_config_is_embeddings_only() {
        let mut cfg = TransformerConfig::mini();
        cfg.n_layers = 0;
        let count = cfg.param_count();
        assert_eq!(count.input_embedding, cfg.vocab * cfg.d_model);
        assert_eq!(count.total, 2 * cfg.vocab * cfg.d_model);
        assert_eq!(count.non_embedding, cfg.vocab * cfg.d_model);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TransformerWeights::init(TransformerConfig::mini(), 7, Precision::Double, None)
            .unwrap();
        let b = TransformerWeights::init(TransformerConfig::mini(), 7, Precision::Double, None)
            .unwrap();
        let c = TransformerWeights::init(TransformerConfig::mini(), 8, Precision::Double, None)
            .unwrap();
        assert_eq!(a.embedding.data(), b.embedding.data());
        assert_eq!(a.layers[1].w_down.data(), b.layers[1].w_down.data());
        assert_ne!(a.embedding.data(), c.embedding.data());
    }

    #[test]
    fn gains_start_at_one_and_projections_are_small() {
        let w = TransformerWeights::init(TransformerConfig::mini(), 1, Precision::Double, None)
            .unwrap();
        assert!(w.final_norm.data().iter().all(|&g| g == 1.0));
        assert!(w.layers[0].attn_norm.data().iter().all(|&g| g == 1.0));
        // N(0, 0.02²) draws stay well inside ±0.2 (10 sigma).
        assert!(w.layers[0].wq.data().iter().all(|&v| v.abs() < 0.2));
        let mean: f64 =
            w.embedding.data().iter().sum::<f64>() / w.embedding.numel() as f64;
        assert!(mean.abs() < 0.005, "embedding mean {mean} too far from 0");
    }

    #[test]
    fn stack_output_count_matches_layers() {
        let w = TransformerWeights::init(TransformerConfig::mini(), 3, Precision::Double, None)
            .unwrap();
        let tape = Tape::eager(Precision::Double, None);
        let embedded = super::super::embed_tokens(&tape, &w.embedding, &[1, 2, 3, 4]).unwrap();
        let out = transformer_stack(&tape, &w, &embedded, true, true).unwrap();
        assert_eq!(out.hidden.len(), w.config.n_layers + 1);
        assert_eq!(out.attentions.len(), w.config.n_layers);
        assert_eq!(out.last.shape(), &[4, w.config.d_model]);
        assert_eq!(
            out.attentions[0].shape(),
            &[w.config.n_heads, 4, 4]
        );
    }
}
