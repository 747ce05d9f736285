//! Reverse-mode gradient tape over tensor operations.
//!
//! A [`Tape`] is the execution context for model forward passes. Every
//! operation computes its result eagerly; when the tape is recording it
//! additionally appends a node holding the closure that maps the output
//! gradient to input-gradient contributions. With recording off the node
//! list stays empty and intermediate buffers are freed as soon as the last
//! [`Var`] referring to them goes out of scope — which is exactly the
//! allocation behaviour the benchmark meter is meant to observe.
//!
//! Gradients are accumulated in `f64`. The backward rules here are checked
//! against central finite differences in the integration tests, operation
//! by operation and through the full model stacks.
//!
//! The tape is single-threaded by design; a recording must not be shared
//! across threads (a `RefCell` guards the node list).

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::meter::{AllocationMeter, OutOfBudget, Tag};
use crate::tensor::{
    matmul_into, matmul_ta_accum, matmul_tb_into, softmax_rows_in_place, Precision, Tensor,
    TensorError,
};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Errors produced by tape operations and gradient extraction.
#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    OutOfBudget(#[from] OutOfBudget),
    #[error("variable was not recorded on this tape")]
    UnrecordedInput,
    #[error("gradient source must be a scalar, got {numel} elements")]
    NotScalarOutput { numel: usize },
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    /// `None` marks a leaf.
    backward: Option<BackwardFn>,
    shape: Vec<usize>,
}

struct TapeInner {
    nodes: Vec<Node>,
}

/// Execution context: precision and meter for allocations, plus an optional
/// recording used for reverse-mode gradients.
pub struct Tape {
    id: u64,
    recording: bool,
    precision: Precision,
    meter: Option<Arc<AllocationMeter>>,
    inner: RefCell<TapeInner>,
}

/// Handle to a tensor produced under a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape_id: u64,
    node: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    #[must_use]
    pub fn value(&self) -> &Arc<Tensor> {
        &self.value
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl Tape {
    /// A recording tape: operations append backward nodes.
    pub fn recording(precision: Precision, meter: Option<Arc<AllocationMeter>>) -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
            precision,
            meter,
            inner: RefCell::new(TapeInner { nodes: Vec::new() }),
        }
    }

    /// An eager tape: operations compute values only.
    pub fn eager(precision: Precision, meter: Option<Arc<AllocationMeter>>) -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording: false,
            precision,
            meter,
            inner: RefCell::new(TapeInner { nodes: Vec::new() }),
        }
    }

    #[must_use]
    pub fn is_recording(&self) -> bool {
        self.recording
    }

    #[must_use]
    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[must_use]
    pub fn meter(&self) -> Option<&Arc<AllocationMeter>> {
        self.meter.as_ref()
    }

    /// Allocates a zeroed output buffer, charging the meter when present.
    pub(crate) fn fresh(&self, shape: Vec<usize>, tag: Tag) -> Result<Tensor, TapeError> {
        let t = Tensor::zeros(shape, self.precision);
        match &self.meter {
            Some(m) => Ok(t.metered(m, tag)?),
            None => Ok(t),
        }
    }

    fn push(&self, shape: Vec<usize>, backward: Option<BackwardFn>) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { backward, shape });
        Some(inner.nodes.len() - 1)
    }

    fn wrap(&self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        let node = self.push(value.shape().to_vec(), backward);
        Var {
            tape_id: self.id,
            node,
            value: Arc::new(value),
        }
    }

    /// Introduces a tensor (parameter or input) as a leaf variable.
    pub fn leaf(&self, value: Arc<Tensor>) -> Var {
        let node = self.push(value.shape().to_vec(), None);
        Var {
            tape_id: self.id,
            node,
            value,
        }
    }

    // ===== Elementwise and linear operations =====

    /// Elementwise sum of two same-shape variables.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var, TapeError> {
        self.check_same_shape(a, b)?;
        let mut out = self.fresh(a.shape().to_vec(), Tag::Activation)?;
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(a.value.data())
            .zip(b.value.data())
        {
            *o = x + y;
        }
        let (pa, pb) = (a.node, b.node);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut contribs = Vec::new();
                if let Some(pa) = pa {
                    contribs.push((pa, g.to_vec()));
                }
                if let Some(pb) = pb {
                    contribs.push((pb, g.to_vec()));
                }
                contribs
            }),
        ))
    }

    /// Elementwise product of two same-shape variables.
    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var, TapeError> {
        self.check_same_shape(a, b)?;
        let mut out = self.fresh(a.shape().to_vec(), Tag::Activation)?;
        for ((o, &x), &y) in out
            .data_mut()
            .iter_mut()
            .zip(a.value.data())
            .zip(b.value.data())
        {
            *o = x * y;
        }
        let (pa, pb) = (a.node, b.node);
        let (va, vb) = (Arc::clone(&a.value), Arc::clone(&b.value));
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut contribs = Vec::new();
                if let Some(pa) = pa {
                    contribs.push((pa, g.iter().zip(vb.data()).map(|(gi, y)| gi * y).collect()));
                }
                if let Some(pb) = pb {
                    contribs.push((pb, g.iter().zip(va.data()).map(|(gi, x)| gi * x).collect()));
                }
                contribs
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, a: &Var, c: f64) -> Result<Var, TapeError> {
        let mut out = self.fresh(a.shape().to_vec(), Tag::Activation)?;
        for (o, &x) in out.data_mut().iter_mut().zip(a.value.data()) {
            *o = c * x;
        }
        let pa = a.node;
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match pa {
                Some(pa) => vec![(pa, g.iter().map(|gi| gi * c).collect())],
                None => Vec::new(),
            }),
        ))
    }

    /// Adds a length-`C` bias row to every row of an `R × C` matrix.
    pub fn add_bias(&self, x: &Var, bias: &Var) -> Result<Var, TapeError> {
        let cols = x.value.cols();
        if bias.value.numel() != cols {
            return Err(TensorError::DimensionMismatch(format!(
                "bias length {} does not match row width {cols}",
                bias.value.numel()
            ))
            .into());
        }
        let mut out = self.fresh(x.shape().to_vec(), Tag::Activation)?;
        for (orow, xrow) in out
            .data_mut()
            .chunks_exact_mut(cols)
            .zip(x.value.data().chunks_exact(cols))
        {
            for ((o, &xv), &bv) in orow.iter_mut().zip(xrow).zip(bias.value.data()) {
                *o = xv + bv;
            }
        }
        let (px, pb) = (x.node, bias.node);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut contribs = Vec::new();
                if let Some(px) = px {
                    contribs.push((px, g.to_vec()));
                }
                if let Some(pb) = pb {
                    let mut db = vec![0.0; cols];
                    for grow in g.chunks_exact(cols) {
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    contribs.push((pb, db));
                }
                contribs
            }),
        ))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var, TapeError> {
        let (m, k) = as_matrix(&a.value)?;
        let (k2, n) = as_matrix(&b.value)?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch(format!(
                "matmul inner dims {k} vs {k2}"
            ))
            .into());
        }
        let mut out = self.fresh(vec![m, n], Tag::Activation)?;
        matmul_into(a.value.data(), b.value.data(), m, k, n, out.data_mut());
        let (pa, pb) = (a.node, b.node);
        let (va, vb) = (Arc::clone(&a.value), Arc::clone(&b.value));
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut contribs = Vec::new();
                if let Some(pa) = pa {
                    // dA = g · B^T
                    let mut da = vec![0.0; m * k];
                    matmul_tb_into(g, vb.data(), m, n, k, &mut da);
                    contribs.push((pa, da));
                }
                if let Some(pb) = pb {
                    // dB = A^T · g
                    let mut db = vec![0.0; k * n];
                    matmul_ta_accum(va.data(), g, k, m, n, &mut db);
                    contribs.push((pb, db));
                }
                contribs
            }),
        ))
    }

    /// Extracts columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&self, x: &Var, start: usize, width: usize) -> Result<Var, TapeError> {
        let (rows, cols) = as_matrix(&x.value)?;
        if start + width > cols {
            return Err(TensorError::DimensionMismatch(format!(
                "column slice {start}..{} out of width {cols}",
                start + width
            ))
            .into());
        }
        let mut out = self.fresh(vec![rows, width], Tag::Activation)?;
        for (orow, xrow) in out
            .data_mut()
            .chunks_exact_mut(width)
            .zip(x.value.data().chunks_exact(cols))
        {
            orow.copy_from_slice(&xrow[start..start + width]);
        }
        let px = x.node;
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let mut dx = vec![0.0; rows * cols];
                    for (drow, grow) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(width)) {
                        drow[start..start + width].copy_from_slice(grow);
                    }
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        ))
    }

    // ===== Nonlinearities =====

    /// `x * sigmoid(x)`.
    pub fn silu(&self, x: &Var) -> Result<Var, TapeError> {
        let mut out = self.fresh(x.shape().to_vec(), Tag::Activation)?;
        for (o, &v) in out.data_mut().iter_mut().zip(x.value.data()) {
            *o = v * sigmoid(v);
        }
        let px = x.node;
        let vx = Arc::clone(&x.value);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let dx = g
                        .iter()
                        .zip(vx.data())
                        .map(|(gi, &v)| {
                            let s = sigmoid(v);
                            gi * (s * (1.0 + v * (1.0 - s)))
                        })
                        .collect();
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        ))
    }

    /// `ln(1 + e^x)`, numerically stable at both tails.
    pub fn softplus(&self, x: &Var) -> Result<Var, TapeError> {
        let mut out = self.fresh(x.shape().to_vec(), Tag::Activation)?;
        for (o, &v) in out.data_mut().iter_mut().zip(x.value.data()) {
            *o = softplus(v);
        }
        let px = x.node;
        let vx = Arc::clone(&x.value);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let dx = g
                        .iter()
                        .zip(vx.data())
                        .map(|(gi, &v)| gi * sigmoid(v))
                        .collect();
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        ))
    }

    /// RMS normalisation with learned gain, applied per row.
    pub fn rmsnorm(&self, x: &Var, gain: &Var, eps: f64) -> Result<Var, TapeError> {
        let (rows, cols) = as_matrix(&x.value)?;
        if gain.value.numel() != cols {
            return Err(TensorError::DimensionMismatch(format!(
                "rmsnorm gain length {} does not match width {cols}",
                gain.value.numel()
            ))
            .into());
        }
        let mut out = self.fresh(vec![rows, cols], Tag::Activation)?;
        for (orow, xrow) in out
            .data_mut()
            .chunks_exact_mut(cols)
            .zip(x.value.data().chunks_exact(cols))
        {
            let ms = xrow.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &xv), &gv) in orow.iter_mut().zip(xrow).zip(gain.value.data()) {
                *o = xv * inv * gv;
            }
        }
        let (px, pg) = (x.node, gain.node);
        let vx = Arc::clone(&x.value);
        let vg = Arc::clone(&gain.value);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    let xrow = &vx.data()[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let ms = xrow.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let rms = (ms + eps).sqrt();
                    let inv = 1.0 / rms;
                    // s = sum_k g_k * gain_k * x_k
                    let mut s = 0.0;
                    for ((&gv, &gnv), &xv) in grow.iter().zip(vg.data()).zip(xrow) {
                        s += gv * gnv * xv;
                    }
                    let scale = s / (cols as f64 * rms * rms * rms);
                    let drow = &mut dx[r * cols..(r + 1) * cols];
                    for (k, ((&gv, &gnv), &xv)) in
                        grow.iter().zip(vg.data()).zip(xrow).enumerate()
                    {
                        drow[k] = gv * gnv * inv - xv * scale;
                        dg[k] += gv * xv * inv;
                    }
                }
                let mut contribs = Vec::new();
                if let Some(px) = px {
                    contribs.push((px, dx));
                }
                if let Some(pg) = pg {
                    contribs.push((pg, dg));
                }
                contribs
            }),
        ))
    }

    // ===== Attention building blocks =====

    /// Rotary position encoding applied independently to each head slice of
    /// an `N × d_model` matrix. Row `t` is rotated by angles
    /// `t * base^(-2m/d_head)` over consecutive element pairs.
    pub fn rope_heads(&self, x: &Var, n_heads: usize, base: f64) -> Result<Var, TapeError> {
        let (rows, cols) = as_matrix(&x.value)?;
        let dh = head_dim(cols, n_heads)?;
        let mut out = self.fresh(vec![rows, cols], Tag::Activation)?;
        let table = RopeTable::new(rows, dh, base);
        table.apply(x.value.data(), out.data_mut(), cols, n_heads, false);
        let px = x.node;
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let mut dx = vec![0.0; rows * cols];
                    let table = RopeTable::new(rows, dh, base);
                    // The rotation is orthogonal; its transpose is the
                    // rotation by the negated angle.
                    table.apply(g, &mut dx, cols, n_heads, true);
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        ))
    }

    /// Causal attention scores: an `h × N × N` tensor with
    /// `out[h,i,j] = q_h[i]·k_h[j] / sqrt(d_head)` for `j <= i` and `-inf`
    /// above the diagonal. This materialises the full square score matrix
    /// for every head; the buffer is tagged [`Tag::Attention`].
    pub fn attention_scores(&self, q: &Var, k: &Var, n_heads: usize) -> Result<Var, TapeError> {
        let (n, cols) = as_matrix(&q.value)?;
        self.check_same_shape(q, k)?;
        let dh = head_dim(cols, n_heads)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = self.fresh(vec![n_heads, n, n], Tag::Attention)?;
        {
            let data = out.data_mut();
            let qd = q.value.data();
            let kd = k.value.data();
            for h in 0..n_heads {
                let off = h * dh;
                let plane = &mut data[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let qrow = &qd[i * cols + off..i * cols + off + dh];
                    let srow = &mut plane[i * n..(i + 1) * n];
                    for (j, s) in srow.iter_mut().enumerate() {
                        if j <= i {
                            let krow = &kd[j * cols + off..j * cols + off + dh];
                            let mut acc = 0.0;
                            for (&a, &b) in qrow.iter().zip(krow) {
                                acc += a * b;
                            }
                            *s = acc * scale;
                        } else {
                            *s = f64::NEG_INFINITY;
                        }
                    }
                }
            }
        }
        let (pq, pk) = (q.node, k.node);
        let (vq, vk) = (Arc::clone(&q.value), Arc::clone(&k.value));
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut dq = vec![0.0; n * cols];
                let mut dk = vec![0.0; n * cols];
                let qd = vq.data();
                let kd = vk.data();
                for h in 0..n_heads {
                    let off = h * dh;
                    let plane = &g[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        for j in 0..=i {
                            let gv = plane[i * n + j] * scale;
                            if gv == 0.0 {
                                continue;
                            }
                            for d in 0..dh {
                                dq[i * cols + off + d] += gv * kd[j * cols + off + d];
                                dk[j * cols + off + d] += gv * qd[i * cols + off + d];
                            }
                        }
                    }
                }
                let mut contribs = Vec::new();
                if let Some(pq) = pq {
                    contribs.push((pq, dq));
                }
                if let Some(pk) = pk {
                    contribs.push((pk, dk));
                }
                contribs
            }),
        ))
    }

    /// Row softmax over the trailing dimension, `-inf`-aware. Consumes its
    /// input so an uncontended score buffer is normalised in place and the
    /// meter keeps seeing one attention-sized allocation per layer.
    pub fn softmax_rows(&self, x: Var) -> Result<Var, TapeError> {
        let px = x.node;
        let Var { value, .. } = x;
        let mut t = match Arc::try_unwrap(value) {
            Ok(t) => t,
            Err(shared) => {
                let copy = shared.unmetered_clone();
                match &self.meter {
                    Some(m) => copy.metered(m, Tag::Activation)?,
                    None => copy,
                }
            }
        };
        softmax_rows_in_place(&mut t)?;
        let out = Arc::new(t);
        let vy = Arc::clone(&out);
        let cols = vy.cols();
        let node = self.push(
            vy.shape().to_vec(),
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let mut dx = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(vy.data().chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = yi * (gi - dot);
                        }
                    }
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        );
        Ok(Var {
            tape_id: self.id,
            node,
            value: out,
        })
    }

    /// Mixes values with attention weights: `probs` is `h × N × N`
    /// (zero above the diagonal), `v` is `N × d_model`; the heads' outputs
    /// are written back into their column slices of an `N × d_model` result.
    pub fn attention_mix(&self, probs: &Var, v: &Var, n_heads: usize) -> Result<Var, TapeError> {
        let (n, cols) = as_matrix(&v.value)?;
        let dh = head_dim(cols, n_heads)?;
        if probs.shape() != [n_heads, n, n] {
            return Err(TensorError::DimensionMismatch(format!(
                "attention tensor shape {:?} does not match {n_heads}×{n}×{n}",
                probs.shape()
            ))
            .into());
        }
        let mut out = self.fresh(vec![n, cols], Tag::Activation)?;
        {
            let data = out.data_mut();
            let pd = probs.value.data();
            let vd = v.value.data();
            for h in 0..n_heads {
                let off = h * dh;
                let plane = &pd[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let prow = &plane[i * n..(i + 1) * n];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[j * cols + off..j * cols + off + dh];
                        let orow = &mut data[i * cols + off..i * cols + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let (pp, pv) = (probs.node, v.node);
        let (vp, vv) = (Arc::clone(&probs.value), Arc::clone(&v.value));
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let mut dp = vec![0.0; n_heads * n * n];
                let mut dv = vec![0.0; n * cols];
                let pd = vp.data();
                let vd = vv.data();
                for h in 0..n_heads {
                    let off = h * dh;
                    let plane = &pd[h * n * n..(h + 1) * n * n];
                    let dplane = &mut dp[h * n * n..(h + 1) * n * n];
                    for i in 0..n {
                        let grow = &g[i * cols + off..i * cols + off + dh];
                        for j in 0..=i {
                            let vrow = &vd[j * cols + off..j * cols + off + dh];
                            let mut acc = 0.0;
                            for (&gv, &vvv) in grow.iter().zip(vrow) {
                                acc += gv * vvv;
                            }
                            dplane[i * n + j] = acc;
                            let p = plane[i * n + j];
                            if p != 0.0 {
                                let dvrow = &mut dv[j * cols + off..j * cols + off + dh];
                                for (d, &gv) in dvrow.iter_mut().zip(grow) {
                                    *d += p * gv;
                                }
                            }
                        }
                    }
                }
                let mut contribs = Vec::new();
                if let Some(pp) = pp {
                    contribs.push((pp, dp));
                }
                if let Some(pv) = pv {
                    contribs.push((pv, dv));
                }
                contribs
            }),
        ))
    }

    // ===== Convolution and selective scan =====

    /// Depthwise causal 1-D convolution along the row (time) axis of an
    /// `N × C` matrix: `out[t,c] = bias[c] + sum_k w[c,k] · x[t-(K-1)+k, c]`
    /// with implicit zero left-padding.
    pub fn conv1d_causal(&self, x: &Var, weight: &Var, bias: &Var) -> Result<Var, TapeError> {
        let (n, c) = as_matrix(&x.value)?;
        let (cw, kw) = as_matrix(&weight.value)?;
        if cw != c || bias.value.numel() != c {
            return Err(TensorError::DimensionMismatch(format!(
                "conv weight {cw}×{kw} / bias {} against {c} channels",
                bias.value.numel()
            ))
            .into());
        }
        let mut out = self.fresh(vec![n, c], Tag::Activation)?;
        {
            let data = out.data_mut();
            let xd = x.value.data();
            let wd = weight.value.data();
            let bd = bias.value.data();
            for t in 0..n {
                let orow = &mut data[t * c..(t + 1) * c];
                for ch in 0..c {
                    let mut acc = bd[ch];
                    for k in 0..kw {
                        let src = t as isize - (kw as isize - 1) + k as isize;
                        if src >= 0 {
                            acc += wd[ch * kw + k] * xd[src as usize * c + ch];
                        }
                    }
                    orow[ch] = acc;
                }
            }
        }
        let (px, pw, pb) = (x.node, weight.node, bias.node);
        let (vx, vw) = (Arc::clone(&x.value), Arc::clone(&weight.value));
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| {
                let xd = vx.data();
                let wd = vw.data();
                let mut dx = vec![0.0; n * c];
                let mut dw = vec![0.0; c * kw];
                let mut db = vec![0.0; c];
                for t in 0..n {
                    let grow = &g[t * c..(t + 1) * c];
                    for ch in 0..c {
                        let gv = grow[ch];
                        if gv == 0.0 {
                            continue;
                        }
                        db[ch] += gv;
                        for k in 0..kw {
                            let src = t as isize - (kw as isize - 1) + k as isize;
                            if src >= 0 {
                                let s = src as usize;
                                dx[s * c + ch] += gv * wd[ch * kw + k];
                                dw[ch * kw + k] += gv * xd[s * c + ch];
                            }
                        }
                    }
                }
                let mut contribs = Vec::new();
                if let Some(px) = px {
                    contribs.push((px, dx));
                }
                if let Some(pw) = pw {
                    contribs.push((pw, dw));
                }
                if let Some(pb) = pb {
                    contribs.push((pb, db));
                }
                contribs
            }),
        ))
    }

    /// Selective scan: diagonal state-space recurrence with input-dependent
    /// step sizes. For each timestep `t`, channel `i`, state dim `j`:
    ///
    /// ```text
    /// abar[t,i,j] = exp(delta[t,i] * a[i,j])
    /// h[t,i,j]    = abar[t,i,j] * h[t-1,i,j] + delta[t,i] * b[t,j] * x[t,i]
    /// y[t,i]      = sum_j c[t,j] * h[t,i,j]
    /// ```
    ///
    /// with `h[-1] = 0`. Recording mode retains the state sequence for the
    /// backward pass; eager mode carries a single `d_inner × d_state`
    /// buffer whose accounting is returned to the caller so it can keep
    /// the recurrent storage alive for the duration of a forward pass.
    pub fn scan(
        &self,
        delta: &Var,
        a: &Var,
        b: &Var,
        c: &Var,
        x: &Var,
    ) -> Result<(Var, Option<Tensor>), TapeError> {
        let (n, di) = as_matrix(&x.value)?;
        let (dia, ds) = as_matrix(&a.value)?;
        if dia != di {
            return Err(TensorError::DimensionMismatch(format!(
                "scan transition matrix {dia}×{ds} against {di} channels"
            ))
            .into());
        }
        check_shape(&delta.value, &[n, di])?;
        check_shape(&b.value, &[n, ds])?;
        check_shape(&c.value, &[n, ds])?;

        let mut y = self.fresh(vec![n, di], Tag::Activation)?;
        if self.recording {
            // Retain every state for backpropagation through time.
            let mut states = self.fresh(vec![n, di, ds], Tag::Activation)?;
            scan_forward(
                delta.value.data(),
                a.value.data(),
                b.value.data(),
                c.value.data(),
                x.value.data(),
                None,
                n,
                di,
                ds,
                y.data_mut(),
                StateSink::All(states.data_mut()),
            );
            let parents = [delta.node, a.node, b.node, c.node, x.node];
            let (vd, va, vb, vc, vx) = (
                Arc::clone(&delta.value),
                Arc::clone(&a.value),
                Arc::clone(&b.value),
                Arc::clone(&c.value),
                Arc::clone(&x.value),
            );
            let states = Arc::new(states);
            let out = self.wrap(
                y,
                self.backward_fn(move |g| {
                    scan_backward(
                        g,
                        vd.data(),
                        va.data(),
                        vb.data(),
                        vc.data(),
                        vx.data(),
                        states.data(),
                        n,
                        di,
                        ds,
                        &parents,
                    )
                }),
            );
            Ok((out, None))
        } else {
            let mut carried = self.fresh(vec![di, ds], Tag::State)?;
            scan_forward(
                delta.value.data(),
                a.value.data(),
                b.value.data(),
                c.value.data(),
                x.value.data(),
                None,
                n,
                di,
                ds,
                y.data_mut(),
                StateSink::Rolling(carried.data_mut()),
            );
            Ok((self.wrap(y, None), Some(carried)))
        }
    }

    // ===== Reductions =====

    /// Sum of every element (scalar output).
    pub fn sum_all(&self, x: &Var) -> Result<Var, TapeError> {
        let mut out = self.fresh(vec![1], Tag::Activation)?;
        out.data_mut()[0] = x.value.data().iter().sum();
        let px = x.node;
        let numel = x.value.numel();
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => vec![(px, vec![g[0]; numel])],
                None => Vec::new(),
            }),
        ))
    }

    /// Elementwise square.
    pub fn square(&self, x: &Var) -> Result<Var, TapeError> {
        let mut out = self.fresh(x.shape().to_vec(), Tag::Activation)?;
        for (o, &v) in out.data_mut().iter_mut().zip(x.value.data()) {
            *o = v * v;
        }
        let px = x.node;
        let vx = Arc::clone(&x.value);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => vec![(
                    px,
                    g.iter().zip(vx.data()).map(|(gi, &v)| 2.0 * v * gi).collect(),
                )],
                None => Vec::new(),
            }),
        ))
    }

    /// Euclidean norm of one row of a matrix (scalar output).
    pub fn l2_norm_row(&self, x: &Var, row: usize) -> Result<Var, TapeError> {
        let (rows, cols) = as_matrix(&x.value)?;
        assert!(row < rows, "row {row} out of {rows}");
        let norm = crate::tensor::l2_norm(x.value.row(row));
        let mut out = self.fresh(vec![1], Tag::Activation)?;
        out.data_mut()[0] = norm;
        let px = x.node;
        let vx = Arc::clone(&x.value);
        Ok(self.wrap(
            out,
            self.backward_fn(move |g| match px {
                Some(px) => {
                    let mut dx = vec![0.0; rows * cols];
                    if norm > 0.0 {
                        let scale = g[0] / norm;
                        for (d, &v) in dx[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(vx.row(row))
                        {
                            *d = v * scale;
                        }
                    }
                    vec![(px, dx)]
                }
                None => Vec::new(),
            }),
        ))
    }

    // ===== Gradient extraction =====

    /// Reverse sweep from a scalar `output`; returns one gradient tensor per
    /// watched variable, in order. A watched variable the output does not
    /// depend on gets a zero gradient of its own shape.
    pub fn gradients(&self, output: &Var, watched: &[&Var]) -> Result<Vec<Tensor>, TapeError> {
        if output.value.numel() != 1 {
            return Err(TapeError::NotScalarOutput {
                numel: output.value.numel(),
            });
        }
        let out_node = match output.node {
            Some(id) if output.tape_id == self.id => id,
            _ => return Err(TapeError::UnrecordedInput),
        };
        let mut watched_ids = Vec::with_capacity(watched.len());
        for w in watched {
            match w.node {
                Some(id) if w.tape_id == self.id => watched_ids.push(id),
                _ => return Err(TapeError::UnrecordedInput),
            }
        }

        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[out_node] = Some(vec![1.0]);
        for id in (0..=out_node).rev() {
            let Some(backward) = inner.nodes[id].backward.as_ref() else {
                continue; // leaf: keep any accumulated gradient
            };
            let Some(g) = grads[id].take() else {
                continue; // not on a path from the output
            };
            for (parent, contrib) in backward(&g) {
                debug_assert!(parent < id, "tape edges must point backwards");
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }

        let mut result = Vec::with_capacity(watched.len());
        for (w, &id) in watched.iter().zip(&watched_ids) {
            let shape = inner.nodes[id].shape.clone();
            let data = grads[id]
                .take()
                .unwrap_or_else(|| vec![0.0; w.value.numel()]);
            result.push(Tensor::from_vec(shape, data, Precision::Double).expect("gradient shape"));
        }
        Ok(result)
    }

    fn backward_fn<F>(&self, f: F) -> Option<BackwardFn>
    where
        F: Fn(&[f64]) -> Vec<(usize, Vec<f64>)> + 'static,
    {
        if self.recording {
            Some(Box::new(f))
        } else {
            None
        }
    }

    fn check_same_shape(&self, a: &Var, b: &Var) -> Result<(), TapeError> {
        if a.shape() != b.shape() {
            return Err(TensorError::DimensionMismatch(format!(
                "shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            ))
            .into());
        }
        Ok(())
    }
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::DimensionMismatch(format!(
            "expected a rank-2 tensor, got shape {other:?}"
        ))),
    }
}

fn check_shape(t: &Tensor, expected: &[usize]) -> Result<(), TensorError> {
    if t.shape() != expected {
        return Err(TensorError::DimensionMismatch(format!(
            "expected shape {expected:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn head_dim(cols: usize, n_heads: usize) -> Result<usize, TensorError> {
    if n_heads == 0 || cols % n_heads != 0 || (cols / n_heads) % 2 != 0 {
        return Err(TensorError::DimensionMismatch(format!(
            "width {cols} does not divide into {n_heads} even-sized heads"
        )));
    }
    Ok(cols / n_heads)
}

#[must_use]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[must_use]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct RopeTable {
    cos: Vec<f64>,
    sin: Vec<f64>,
    half: usize,
}

impl RopeTable {
    fn new(rows: usize, dh: usize, base: f64) -> RopeTable {
        let half = dh / 2;
        let mut cos = vec![0.0; rows * half];
        let mut sin = vec![0.0; rows * half];
        for t in 0..rows {
            for m in 0..half {
                let theta = t as f64 * base.powf(-2.0 * m as f64 / dh as f64);
                cos[t * half + m] = theta.cos();
                sin[t * half + m] = theta.sin();
            }
        }
        RopeTable { cos, sin, half }
    }

    fn apply(&self, input: &[f64], out: &mut [f64], cols: usize, n_heads: usize, inverse: bool) {
        let dh = self.half * 2;
        let rows = input.len() / cols;
        for t in 0..rows {
            for h in 0..n_heads {
                let off = t * cols + h * dh;
                for m in 0..self.half {
                    let c = self.cos[t * self.half + m];
                    let s = if inverse {
                        -self.sin[t * self.half + m]
                    } else {
                        self.sin[t * self.half + m]
                    };
                    let x1 = input[off + 2 * m];
                    let x2 = input[off + 2 * m + 1];
                    out[off + 2 * m] = x1 * c - x2 * s;
                    out[off + 2 * m + 1] = x1 * s + x2 * c;
                }
            }
        }
    }
}

pub(crate) enum StateSink<'a> {
    /// Store each timestep's state (recording mode).
    All(&'a mut [f64]),
    /// Keep only the running state (eager mode).
    Rolling(&'a mut [f64]),
}

/// Shared forward recurrence. `h0`, when given, seeds the carried state —
/// this is what makes split scans bit-identical to a single full scan: the
/// arithmetic sequence per element is exactly the same.
pub(crate) fn scan_forward(
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    h0: Option<&[f64]>,
    n: usize,
    di: usize,
    ds: usize,
    y: &mut [f64],
    sink: StateSink<'_>,
) {
    let mut rolling = vec![0.0; di * ds];
    if let Some(h0) = h0 {
        rolling.copy_from_slice(h0);
    }
    let mut sink = sink;
    for t in 0..n {
        let brow = &b[t * ds..(t + 1) * ds];
        let crow = &c[t * ds..(t + 1) * ds];
        for i in 0..di {
            let dt = delta[t * di + i];
            let xv = x[t * di + i];
            let arow = &a[i * ds..(i + 1) * ds];
            let hrow = &mut rolling[i * ds..(i + 1) * ds];
            let mut acc = 0.0;
            for j in 0..ds {
                let abar = (dt * arow[j]).exp();
                let h = abar * hrow[j] + dt * brow[j] * xv;
                hrow[j] = h;
                acc += crow[j] * h;
            }
            y[t * di + i] = acc;
        }
        if let StateSink::All(buf) = &mut sink {
            buf[t * di * ds..(t + 1) * di * ds].copy_from_slice(&rolling);
        }
    }
    if let StateSink::Rolling(buf) = sink {
        buf.copy_from_slice(&rolling);
    }
}

/// Backpropagation through time for the scan. Gradients flow to all five
/// inputs; `abar` is recomputed from `delta` and `a` rather than stored.
#[allow(clippy::too_many_arguments)]
fn scan_backward(
    gy: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    x: &[f64],
    states: &[f64],
    n: usize,
    di: usize,
    ds: usize,
    parents: &[Option<usize>; 5],
) -> Vec<(usize, Vec<f64>)> {
    let mut ddelta = vec![0.0; n * di];
    let mut da = vec![0.0; di * ds];
    let mut db = vec![0.0; n * ds];
    let mut dc = vec![0.0; n * ds];
    let mut dx = vec![0.0; n * di];
    // dh carried backwards: gradient of the loss wrt h[t] for the current t.
    let mut dh = vec![0.0; di * ds];
    for t in (0..n).rev() {
        let brow = &b[t * ds..(t + 1) * ds];
        let crow = &c[t * ds..(t + 1) * ds];
        let hplane = &states[t * di * ds..(t + 1) * di * ds];
        for i in 0..di {
            let dt = delta[t * di + i];
            let xv = x[t * di + i];
            let gyv = gy[t * di + i];
            let arow = &a[i * ds..(i + 1) * ds];
            let hrow = &hplane[i * ds..(i + 1) * ds];
            let dhrow = &mut dh[i * ds..(i + 1) * ds];
            let mut ddt = 0.0;
            let mut dxv = 0.0;
            for j in 0..ds {
                // y[t,i] contributes c[t,j] * h[t,i,j].
                let g = dhrow[j] + gyv * crow[j];
                dc[t * ds + j] += gyv * hrow[j];
                let abar = (dt * arow[j]).exp();
                let hprev = if t == 0 {
                    0.0
                } else {
                    states[(t - 1) * di * ds + i * ds + j]
                };
                // h = abar * hprev + dt * b * x
                let dabar = g * hprev;
                ddt += dabar * arow[j] * abar + g * brow[j] * xv;
                da[i * ds + j] += dabar * dt * abar;
                db[t * ds + j] += g * dt * xv;
                dxv += g * dt * brow[j];
                // Propagate to h[t-1].
                dhrow[j] = g * abar;
            }
            ddelta[t * di + i] = ddt;
            dx[t * di + i] += dxv;
        }
    }
    let grads = [ddelta, da, db, dc, dx];
    parents
        .iter()
        .zip(grads)
        .filter_map(|(p, g)| p.map(|p| (p, g)))
        .collect()
}
