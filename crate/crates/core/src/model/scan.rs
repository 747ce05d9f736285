//! Standalone selective scan: the diagonal input-dependent state-space
//! recurrence
//!
//! ```text
//! h_t = exp(Δ_t ⊙ A) ⊙ h_{t−1} + (Δ_t ⊙ B_t) x_t
//! y_t = ⟨C_t, h_t⟩
//! ```
//!
//! evaluated left to right from `h_{-1} = 0` (or a caller-supplied carried
//! state). Returns both the output sequence and the full state history so
//! callers can inspect or resume the recurrence.

use crate::tape::{scan_forward, StateSink};
use crate::tensor::{Precision, Tensor, TensorError};

/// Runs the recurrence over `N` steps.
///
/// Shapes: `delta`, `x` are `N × d_inner`; `b`, `c` are `N × d_state`;
/// `a` is `d_inner × d_state`; `initial_state`, when given, is
/// `d_inner × d_state`.
///
/// Every `delta` entry must be strictly positive — a zero or negative step
/// size is rejected with [`TensorError::NonPositiveDelta`] before any work
/// is done.
///
/// Returns `(y, states)` with `y: N × d_inner` and
/// `states: N × d_inner × d_state`; `states[t]` is the post-update state at
/// step `t`, so resuming a scan from `states[t]` reproduces the remaining
/// steps bit-identically (the per-element arithmetic sequence is unchanged
/// by the split).
pub fn selective_scan(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    x: &Tensor,
    initial_state: Option<&Tensor>,
) -> Result<(Tensor, Tensor), TensorError> {
    let (n, di) = matrix_dims(x, "x")?;
    let (di_a, ds) = matrix_dims(a, "a")?;
    if di_a != di {
        return Err(TensorError::DimensionMismatch(format!(
            "transition matrix has {di_a} channels, input has {di}"
        )));
    }
    expect_shape(delta, &[n, di], "delta")?;
    expect_shape(b, &[n, ds], "b")?;
    expect_shape(c, &[n, ds], "c")?;
    if let Some(h0) = initial_state {
        expect_shape(h0, &[di, ds], "initial state")?;
    }
    for (index, &value) in delta.data().iter().enumerate() {
        if !(value > 0.0) {
            return Err(TensorError::NonPositiveDelta { index, value });
        }
    }

    let mut y = Tensor::zeros(vec![n, di], Precision::Double);
    let mut states = Tensor::zeros(vec![n, di, ds], Precision::Double);
    scan_forward(
        delta.data(),
        a.data(),
        b.data(),
        c.data(),
        x.data(),
        initial_state.map(Tensor::data),
        n,
        di,
        ds,
        y.data_mut(),
        StateSink::All(states.data_mut()),
    );
    Ok((y, states))
}

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::DimensionMismatch(format!(
            "{name} must be rank 2, got shape {other:?}"
        ))),
    }
}

fn expect_shape(t: &Tensor, want: &[usize], name: &str) -> Result<(), TensorError> {
    if t.shape() != want {
        return Err(TensorError::DimensionMismatch(format!(
            "{name} must have shape {want:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}
