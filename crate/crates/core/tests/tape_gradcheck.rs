//! Central-difference verification of every reverse-mode operation, alone
//! and composed into the two full block stacks.

mod common;

use common::{gradcheck, gradcheck_sampled, positive_wave, probed_sum, wave, GRAD_TOL};
use scalebench_core::model::{
    mamba_stack, transformer_stack, MambaConfig, MambaWeights, TransformerConfig,
    TransformerWeights,
};
use scalebench_core::tensor::Precision;

#[test]
fn add_gradients() {
    let a = wave(vec![3, 4], 1.0, 0.1);
    let b = wave(vec![3, 4], 1.0, 1.9);
    let r = gradcheck(&[a, b], &|tape, v| {
        let out = tape.add(&v[0], &v[1]).unwrap();
        probed_sum(tape, &out, 0.4)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn mul_gradients() {
    let a = wave(vec![3, 4], 1.0, 0.3);
    let b = wave(vec![3, 4], 1.0, 2.2);
    let r = gradcheck(&[a, b], &|tape, v| {
        let out = tape.mul(&v[0], &v[1]).unwrap();
        probed_sum(tape, &out, 0.8)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn scale_gradients() {
    let a = wave(vec![2, 5], 1.0, 0.6);
    let r = gradcheck(&[a], &|tape, v| {
        let out = tape.scale(&v[0], -1.7).unwrap();
        probed_sum(tape, &out, 1.1)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn add_bias_gradients() {
    let x = wave(vec![3, 4], 1.0, 0.2);
    let bias = wave(vec![4], 0.5, 2.7);
    let r = gradcheck(&[x, bias], &|tape, v| {
        let out = tape.add_bias(&v[0], &v[1]).unwrap();
        probed_sum(tape, &out, 0.9)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn matmul_gradients() {
    let a = wave(vec![3, 4], 1.0, 0.5);
    let b = wave(vec![4, 2], 1.0, 1.4);
    let r = gradcheck(&[a, b], &|tape, v| {
        let out = tape.matmul(&v[0], &v[1]).unwrap();
        probed_sum(tape, &out, 0.7)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn slice_cols_gradients() {
    let x = wave(vec![3, 6], 1.0, 0.8);
    let r = gradcheck(&[x], &|tape, v| {
        let out = tape.slice_cols(&v[0], 1, 3).unwrap();
        probed_sum(tape, &out, 1.6)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn silu_gradients() {
    let x = wave(vec![3, 4], 2.0, 0.25);
    let r = gradcheck(&[x], &|tape, v| {
        let out = tape.silu(&v[0]).unwrap();
        probed_sum(tape, &out, 2.1)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn softplus_gradients() {
    let x = wave(vec![3, 4], 3.0, 0.35);
    let r = gradcheck(&[x], &|tape, v| {
        let out = tape.softplus(&v[0]).unwrap();
        probed_sum(tape, &out, 1.2)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn square_gradients() {
    let x = wave(vec![2, 6], 1.5, 0.45);
    let r = gradcheck(&[x], &|tape, v| {
        let out = tape.square(&v[0]).unwrap();
        probed_sum(tape, &out, 0.3)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn rmsnorm_gradients() {
    let x = wave(vec![3, 4], 1.0, 0.55);
    let gain = positive_wave(vec![4], 0.5, 1.0, 1.8);
    let r = gradcheck(&[x, gain], &|tape, v| {
        let out = tape.rmsnorm(&v[0], &v[1], 1e-6).unwrap();
        probed_sum(tape, &out, 2.4)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn rope_gradients() {
    let x = wave(vec![4, 8], 1.0, 0.65);
    let r = gradcheck(&[x], &|tape, v| {
        let out = tape.rope_heads(&v[0], 2, 10_000.0).unwrap();
        probed_sum(tape, &out, 1.5)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn l2_norm_row_gradients() {
    let x = wave(vec![4, 5], 1.0, 0.75);
    let r = gradcheck(&[x], &|tape, v| tape.l2_norm_row(&v[0], 2).unwrap());
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

/// Scores, masked softmax, and value mixing checked as the composite they
/// always form; the mask keeps upper-triangle score gradients at exactly
/// zero, so the chain is where errors would actually surface.
#[test]
fn attention_composite_gradients() {
    let q = wave(vec![4, 8], 1.0, 0.15);
    let k = wave(vec![4, 8], 1.0, 1.15);
    let v = wave(vec![4, 8], 1.0, 2.15);
    let r = gradcheck(&[q, k, v], &|tape, vars| {
        let scores = tape.attention_scores(&vars[0], &vars[1], 2).unwrap();
        let probs = tape.softmax_rows(scores).unwrap();
        let mixed = tape.attention_mix(&probs, &vars[2], 2).unwrap();
        probed_sum(tape, &mixed, 0.95)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

#[test]
fn conv1d_causal_gradients() {
    let x = wave(vec![6, 3], 1.0, 0.85);
    let weight = wave(vec![3, 4], 1.0, 1.85);
    let bias = wave(vec![3], 0.5, 2.85);
    let r = gradcheck(&[x, weight, bias], &|tape, v| {
        let out = tape.conv1d_causal(&v[0], &v[1], &v[2]).unwrap();
        probed_sum(tape, &out, 1.35)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

/// Backpropagation through time over all five scan inputs.
#[test]
fn scan_gradients() {
    let delta = positive_wave(vec![5, 2], 0.2, 1.0, 0.05);
    let a = wave(vec![2, 3], 1.0, 1.05);
    let b = wave(vec![5, 3], 1.0, 2.05);
    let c = wave(vec![5, 3], 1.0, 0.45);
    let x = wave(vec![5, 2], 1.0, 1.45);
    let r = gradcheck(&[delta, a, b, c, x], &|tape, v| {
        let (y, _) = tape.scan(&v[0], &v[1], &v[2], &v[3], &v[4]).unwrap();
        probed_sum(tape, &y, 0.65)
    });
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

/// Input gradients through the whole attention stack: two blocks of
/// normalisation, rotary attention, and the gated feed-forward.
#[test]
fn transformer_stack_input_gradients() {
    let weights =
        TransformerWeights::init(TransformerConfig::mini(), 31, Precision::Double, None).unwrap();
    let embedded = wave(vec![8, weights.config.d_model], 0.1, 0.95);
    let r = gradcheck_sampled(&[embedded], 13, &|tape, v| {
        let out = transformer_stack(tape, &weights, &v[0], false, false).unwrap();
        probed_sum(tape, &out.last, 1.25)
    });
    assert!(r.entries_checked >= 30);
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

/// Input gradients through the whole recurrent stack: normalisation,
/// causal convolution, the softplus-parameterised scan, and gating.
#[test]
fn mamba_stack_input_gradients() {
    let weights = MambaWeights::init(MambaConfig::mini(), 37, Precision::Double, None).unwrap();
    let embedded = wave(vec![8, weights.config.d_model], 0.1, 1.75);
    let r = gradcheck_sampled(&[embedded], 13, &|tape, v| {
        let out = mamba_stack(tape, &weights, &v[0], false).unwrap();
        probed_sum(tape, &out.last, 0.85)
    });
    assert!(r.entries_checked >= 30);
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}

/// Weight-side gradients through a block-shaped composite. The convolved
/// activation feeds both the parameter projection and the scan input, so
/// gradient accumulation across fan-out is exercised alongside every
/// weight tensor's own backward path.
#[test]
fn recurrent_block_composite_gradients() {
    let x = wave(vec![5, 3], 1.0, 0.35);
    let conv_w = wave(vec![3, 4], 1.0, 1.35);
    let conv_b = wave(vec![3], 0.3, 2.35);
    let proj = wave(vec![3, 6], 1.0, 0.55);
    let dt_w = wave(vec![2, 3], 1.0, 1.55);
    let dt_b = wave(vec![3], 0.5, 2.55);
    let a = wave(vec![3, 2], 1.0, 0.75);
    let leaves = [x, conv_w, conv_b, proj, dt_w, dt_b, a];
    let r = gradcheck(&leaves, &|tape, v| {
        let conv = tape.conv1d_causal(&v[0], &v[1], &v[2]).unwrap();
        let u = tape.silu(&conv).unwrap();
        let p = tape.matmul(&u, &v[3]).unwrap();
        let dt_low = tape.slice_cols(&p, 0, 2).unwrap();
        let b_seq = tape.slice_cols(&p, 2, 2).unwrap();
        let c_seq = tape.slice_cols(&p, 4, 2).unwrap();
        let dt_lin = tape
            .add_bias(&tape.matmul(&dt_low, &v[4]).unwrap(), &v[5])
            .unwrap();
        let dt = tape.softplus(&dt_lin).unwrap();
        let (y, _) = tape.scan(&dt, &v[6], &b_seq, &c_seq, &u).unwrap();
        probed_sum(tape, &y, 2.55)
    });
    assert_eq!(r.entries_checked, 15 + 12 + 3 + 18 + 6 + 3 + 6);
    assert!(r.max_rel <= GRAD_TOL, "max rel err {}", r.max_rel);
}
