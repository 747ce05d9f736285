//! Dense row-major tensors and the shared numeric kernels.
//!
//! Arithmetic is carried out in `f64` throughout so that gradient
//! verification against central finite differences is meaningful. The
//! [`Precision`] attached to a tensor controls its *accounted* footprint
//! (4 bytes per element in single precision, 8 in double) and the on-disk
//! snapshot encoding; it models the storage width of the deployment being
//! measured rather than the arithmetic width of this implementation.
//!
//! Tensors are immutable once built (the only exception is the in-place
//! row softmax used to turn a score matrix into the attention matrix it
//! becomes, which consumes its input). A tensor may carry an
//! [`AllocGuard`](crate::meter::AllocGuard) so the allocation meter sees
//! exactly the buffers the model code decides to account for.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::meter::{AllocGuard, AllocationMeter, OutOfBudget, Tag};

/// Logical storage width used for memory accounting and snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[must_use]
    pub fn word_bytes(self) -> u64 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Precision, String> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(format!(
                "unknown precision {other:?} (expected single or double)"
            )),
        }
    }
}

/// Errors produced by tensor constructors and kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match {expected} data elements (got {got})")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("softmax row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("selective scan requires strictly positive step sizes (found {value} at index {index})")]
    NonPositiveDelta { index: usize, value: f64 },
    #[error(transparent)]
    OutOfBudget(#[from] OutOfBudget),
}

/// Dense row-major tensor of `f64` values.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
    guard: Option<AllocGuard>,
}

impl Tensor {
    /// Builds a tensor from raw data; the element count must match the shape.
    pub fn from_vec(
        shape: Vec<usize>,
        data: Vec<f64>,
        precision: Precision,
    ) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            precision,
            guard: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            precision,
            guard: None,
        }
    }

    /// Registers this tensor's logical bytes with `meter` under `tag`.
    /// On budget exhaustion the tensor is dropped and the meter is left
    /// unchanged.
    pub fn metered(
        mut self,
        meter: &Arc<AllocationMeter>,
        tag: Tag,
    ) -> Result<Tensor, OutOfBudget> {
        debug_assert!(self.guard.is_none(), "tensor is already metered");
        let guard = meter.guarded_alloc(self.logical_bytes(), tag)?;
        self.guard = Some(guard);
        Ok(self)
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[must_use]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[must_use]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accounted size: element count times the precision word width.
    #[must_use]
    pub fn logical_bytes(&self) -> u64 {
        self.data.len() as u64 * self.precision.word_bytes()
    }

    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (product of all leading dims).
    #[must_use]
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the trailing dimension.
    #[must_use]
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Borrow row `r` of the matrix view.
    #[must_use]
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Deep copy carrying the same shape and precision but no meter guard;
    /// the copy is unaccounted until explicitly registered.
    #[must_use]
    pub fn unmetered_clone(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            precision: self.precision,
            guard: None,
        }
    }
}

/// Row-wise softmax, `(-inf)`-aware. A `-inf` entry marks a masked cell and
/// maps to exactly `0.0`; finite entries are exponentiated relative to the
/// row maximum for stability. A row with no finite entry is an error.
pub fn softmax_rows(input: &Tensor) -> Result<Tensor, TensorError> {
    let mut out = Tensor::zeros(input.shape().to_vec(), input.precision());
    softmax_rows_into(input.data(), out.data_mut(), input.cols())?;
    Ok(out)
}

/// In-place variant used on score matrices that become attention matrices,
/// so the meter sees a single buffer for the whole transformation.
pub fn softmax_rows_in_place(t: &mut Tensor) -> Result<(), TensorError> {
    let cols = t.cols();
    let data = t.data_mut();
    let copy = data.to_vec();
    softmax_rows_into(&copy, data, cols)
}

fn softmax_rows_into(input: &[f64], out: &mut [f64], cols: usize) -> Result<(), TensorError> {
    assert!(cols > 0, "softmax over empty rows");
    for (r, (row_in, row_out)) in input
        .chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .enumerate()
    {
        let mut max = f64::NEG_INFINITY;
        for &v in row_in {
            debug_assert!(!v.is_nan(), "softmax input contains NaN");
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(TensorError::AllMasked { row: r });
        }
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            let e = if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            };
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(())
}

/// `1 - cos(u, v)`; zero for parallel vectors, one for orthogonal, up to two
/// for opposed. Errors when either vector has zero norm.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, TensorError> {
    assert_eq!(u.len(), v.len(), "cosine distance over unequal lengths");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(TensorError::ZeroVector);
    }
    Ok(1.0 - dot / (nu.sqrt() * nv.sqrt()))
}

/// Euclidean norm of a slice.
#[must_use]
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ===== Plain matrix kernels (shared by the tape's forward and backward) =====

/// `a (m×k) · b (k×n)` into a fresh `m×n` buffer.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×k) · b^T (n×k)` into `m×n`.
pub(crate) fn matmul_tb_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `a^T (k×m) · b (k×n)` into `m×n`; accumulates into `out`.
pub(crate) fn matmul_ta_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data, Precision::Double).unwrap()
    }

    #[test]
    fn softmax_symmetric_row() {
        let t = mat(vec![1, 2], vec![3.0, 3.0]);
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_ln2_row() {
        let t = mat(vec![1, 2], vec![(2.0f64).ln(), 0.0]);
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let t = mat(vec![1, 3], vec![1.0, f64::NEG_INFINITY, 2.0]);
        let s = softmax_rows(&t).unwrap();
        assert_eq!(s.data()[1], 0.0);
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let t = mat(vec![1, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]);
        match softmax_rows(&t) {
            Err(TensorError::AllMasked { row: 0 }) => {}
            other => panic!("expected AllMasked, got {other:?}"),
        }
    }

    #[test]
    fn softmax_large_values_are_stable() {
        let t = mat(vec![1, 3], vec![1000.0, 1000.0, 999.0]);
        let s = softmax_rows(&t).unwrap();
        let sum: f64 = s.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cosine_distance_reference_values() {
        assert!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_zero_vector_errors() {
        match cosine_distance(&[0.0, 0.0], &[1.0, 0.0]) {
            Err(TensorError::ZeroVector) => {}
            other => panic!("expected ZeroVector, got {other:?}"),
        }
    }

    #[test]
    fn matmul_reference() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_into(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);

        // a * b^T where b rows are the columns of the matrix above.
        let bt = [5.0, 7.0, 6.0, 8.0];
        let mut out2 = [0.0; 4];
        matmul_tb_into(&a, &bt, 2, 2, 2, &mut out2);
        assert_eq!(out2, [19.0, 22.0, 43.0, 50.0]);

        // a^T * b accumulation.
        let mut out3 = [0.0; 4];
        matmul_ta_accum(&a, &b, 2, 2, 2, &mut out3);
        assert_eq!(out3, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn metered_tensor_charges_and_releases() {
        let meter = AllocationMeter::unbounded();
        {
            let t = Tensor::zeros(vec![4, 8], Precision::Single)
                .metered(&meter, Tag::Activation)
                .unwrap();
            assert_eq!(t.logical_bytes(), 4 * 8 * 4);
            assert_eq!(meter.current_bytes(), 128);
        }
        assert_eq!(meter.current_bytes(), 0);
        assert_eq!(meter.peak_bytes(), 128);
    }

    #[test]
    fn shape_mismatch_rejected() {
        match Tensor::from_vec(vec![2, 3], vec![0.0; 5], Precision::Double) {
            Err(TensorError::ShapeMismatch { expected: 6, got: 5, .. }) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }
}
