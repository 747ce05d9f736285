//! Shared helpers for the integration suites: deterministic tensor
//! fixtures and a central-difference gradient checker.

#![allow(dead_code)]

use std::sync::Arc;

use scalebench_core::tape::{Tape, Var};
use scalebench_core::tensor::{Precision, Tensor};

/// Finite-difference step for all gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Maximum tolerated relative error between analytic and numeric
/// gradients.
pub const GRAD_TOL: f64 = 1e-3;

/// Deterministic dense fixture: smooth sign-varying values of magnitude
/// at most `amplitude`, distinct per `phase`. Keeps the checks free of
/// RNG plumbing while still exercising every entry with a different value.
pub fn wave(shape: Vec<usize>, amplitude: f64, phase: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|i| amplitude * (phase + 0.7 * i as f64).sin())
        .collect();
    Tensor::from_vec(shape, data, Precision::Double).expect("fixture shape")
}

/// Strictly positive fixture in `[lo, lo + span]`, for step sizes and
/// other positivity-constrained inputs.
pub fn positive_wave(shape: Vec<usize>, lo: f64, span: f64, phase: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|i| lo + span * (0.5 + 0.5 * (phase + 1.3 * i as f64).sin()))
        .collect();
    Tensor::from_vec(shape, data, Precision::Double).expect("fixture shape")
}

/// Copy of `t` with one entry nudged by `delta`.
fn with_entry(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[idx] += delta;
    Tensor::from_vec(t.shape().to_vec(), data, Precision::Double).expect("fixture shape")
}

/// Outcome of one analytic-vs-numeric comparison.
pub struct GradReport {
    pub max_rel: f64,
    pub entries_checked: usize,
}

/// Checks reverse-mode gradients of the scalar-valued graph `f` against
/// central finite differences (step [`FD_STEP`]) at every `stride`-th
/// entry of every leaf.
///
/// Analytic gradients come from one recording double-precision tape;
/// each numeric entry re-evaluates `f` on a fresh eager tape with that
/// input entry nudged up and down. The relative-error divisor is floored
/// at one-thousandth of the leaf gradient's largest magnitude (and at
/// 1e-8 absolutely) so entries with vanishing true gradient don't
/// amplify finite-difference round-off into false alarms.
pub fn gradcheck_sampled(
    leaves: &[Tensor],
    stride: usize,
    f: &dyn Fn(&Tape, &[Var]) -> Var,
) -> GradReport {
    assert!(stride >= 1, "stride must be at least 1");
    let tape = Tape::recording(Precision::Double, None);
    let vars: Vec<Var> = leaves
        .iter()
        .map(|t| tape.leaf(Arc::new(t.unmetered_clone())))
        .collect();
    let out = f(&tape, &vars);
    assert_eq!(out.value().numel(), 1, "gradcheck target must be scalar");
    let refs: Vec<&Var> = vars.iter().collect();
    let grads = tape.gradients(&out, &refs).expect("reverse sweep");

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::eager(Precision::Double, None);
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(Arc::new(t.unmetered_clone())))
            .collect();
        f(&tape, &vars).value().data()[0]
    };

    let mut max_rel = 0.0f64;
    let mut entries_checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads[li].data();
        let inf_norm = analytic.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        let floor = (1e-3 * inf_norm).max(1e-8);
        for idx in (0..leaf.numel()).step_by(stride) {
            let rebuild = |delta: f64| -> Vec<Tensor> {
                leaves
                    .iter()
                    .enumerate()
                    .map(|(lj, t)| {
                        if lj == li {
                            with_entry(t, idx, delta)
                        } else {
                            t.unmetered_clone()
                        }
                    })
                    .collect()
            };
            let plus = eval(&rebuild(FD_STEP));
            let minus = eval(&rebuild(-FD_STEP));
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            entries_checked += 1;
        }
    }
    GradReport {
        max_rel,
        entries_checked,
    }
}

/// Exhaustive variant: every entry of every leaf.
pub fn gradcheck(leaves: &[Tensor], f: &dyn Fn(&Tape, &[Var]) -> Var) -> GradReport {
    gradcheck_sampled(leaves, 1, f)
}

/// Contracts `v` against a fixed probe pattern so the gradcheck target
/// sees a different upstream gradient at every output entry (a plain sum
/// would hide errors that cancel across entries).
pub fn probed_sum(tape: &Tape, v: &Var, phase: f64) -> Var {
    let probe = wave(v.shape().to_vec(), 1.0, phase);
    let weighted = tape
        .mul(v, &tape.leaf(Arc::new(probe)))
        .expect("probe shapes match");
    tape.sum_all(&weighted).expect("scalar reduction")
}
