//! Operation recording and the reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of executed differentiable operations.
///
/// Execution order is a topological order of the dataflow, so the backward
/// sweep is a single reverse pass that visits each node exactly once. A graph
/// is owned by one training step; dropping or [`clear`](GradGraph::clear)ing
/// it frees intermediates while leaving leaf tensors (parameters) intact.
pub struct GradGraph<E: Element> {
    id: u64,
    nodes: Vec<Node<E>>,
    recording: bool,
}

struct Node<E: Element> {
    out: Tensor<E>,
    op: Op<E>,
}

enum Op<E: Element> {
    Add { a: Tensor<E>, b: Tensor<E> },
    Sub { a: Tensor<E>, b: Tensor<E> },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Scale { a: Tensor<E>, c: E },
    AddRow { a: Tensor<E>, row: Tensor<E> },
    Matmul { a: Tensor<E>, b: Tensor<E> },
    Transpose { a: Tensor<E> },
    Softmax { a: Tensor<E>, axis: usize },
    LogSoftmax { a: Tensor<E>, axis: usize },
    LayerNorm { a: Tensor<E>, gain: Tensor<E>, bias: Tensor<E>, mean: Vec<E>, inv_std: Vec<E> },
    Gelu { a: Tensor<E> },
    SumAll { a: Tensor<E> },
    MeanAll { a: Tensor<E> },
    SelectRows { a: Tensor<E>, indices: Vec<usize> },
    ConcatRows { parts: Vec<Tensor<E>> },
    SliceCols { a: Tensor<E>, start: usize, len: usize },
    ConcatCols { parts: Vec<Tensor<E>> },
    RepeatRow { a: Tensor<E>, count: usize },
}

/// Row-major C[m,n] = A[m,k] · B[k,n].
pub fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]ᵀ  (sums over the shared trailing axis).
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = E::zero();
            for j in 0..n {
                s = s + arow[j] * brow[j];
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

/// Decomposes `shape` around `axis` into (outer, len, inner) so that lane
/// elements sit at `o*len*inner + k*inner + i`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn gelu_value<E: Element>(x: E) -> E {
    // Exact form x·Φ(x) with Φ via erf; no tanh approximation.
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (E::one() + (x * inv_sqrt2).erf())
}

fn gelu_derivative<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let phi_cdf = half * (E::one() + (x * inv_sqrt2).erf());
    let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}

impl<E: Element> GradGraph<E> {
    pub fn new() -> Self {
        GradGraph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that computes values but records nothing (inference mode).
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.recording = false;
        g
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drops all recorded operations. Leaf tensors keep their values.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        inputs: &[&Tensor<E>],
        op: impl FnOnce() -> Op<E>,
    ) -> Tensor<E> {
        let track = self.recording && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::from_raw(data, shape, track);
        if track {
            out.set_node(self.id, self.nodes.len());
            self.nodes.push(Node { out: out.clone(), op: op() });
        }
        out
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        ensure_same_shape("add", a, b)?;
        let data = zip_map(a, b, |x, y| x + y);
        Ok(self.push(data, a.shape().to_vec(), &[a, b], || Op::Add { a: a.clone(), b: b.clone() }))
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        ensure_same_shape("sub", a, b)?;
        let data = zip_map(a, b, |x, y| x - y);
        Ok(self.push(data, a.shape().to_vec(), &[a, b], || Op::Sub { a: a.clone(), b: b.clone() }))
    }

    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        ensure_same_shape("mul", a, b)?;
        let data = zip_map(a, b, |x, y| x * y);
        Ok(self.push(data, a.shape().to_vec(), &[a, b], || Op::Mul { a: a.clone(), b: b.clone() }))
    }

    pub fn scale(&mut self, a: &Tensor<E>, c: E) -> Tensor<E> {
        let data = a.data().iter().map(|&x| x * c).collect();
        self.push(data, a.shape().to_vec(), &[a], || Op::Scale { a: a.clone(), c })
    }

    /// Matrix plus a row vector broadcast over every row (bias add).
    pub fn add_row(&mut self, a: &Tensor<E>, row: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape().len() != 2 || row.numel() != a.cols() {
            return Err(Error::shape(
                "add_row",
                format!("matrix {:?} vs row {:?}", a.shape(), row.shape()),
            ));
        }
        let (r, c) = (a.rows(), a.cols());
        let data = {
            let ad = a.data();
            let rd = row.data();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(ad[i * c + j] + rd[j]);
                }
            }
            data
        };
        Ok(self.push(data, vec![r, c], &[a, row], || Op::AddRow { a: a.clone(), row: row.clone() }))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = matmul_raw(&a.data(), &b.data(), m, k, n);
        Ok(self.push(data, vec![m, n], &[a, b], || Op::Matmul { a: a.clone(), b: b.clone() }))
    }

    pub fn transpose(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("need 2-D, got {:?}", a.shape())));
        }
        let (r, c) = (a.rows(), a.cols());
        let data = {
            let ad = a.data();
            let mut data = vec![E::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ad[i * c + j];
                }
            }
            data
        };
        Ok(self.push(data, vec![c, r], &[a], || Op::Transpose { a: a.clone() }))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= a.shape().len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", a.shape()),
            ));
        }
        let shape = a.shape().to_vec();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let data = {
            let ad = a.data();
            let mut data = vec![E::zero(); ad.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = ad[base];
                    for k in 1..len {
                        let v = ad[base + k * inner];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = E::zero();
                    for k in 0..len {
                        let e = (ad[base + k * inner] - max).exp();
                        data[base + k * inner] = e;
                        sum = sum + e;
                    }
                    for k in 0..len {
                        data[base + k * inner] = data[base + k * inner] / sum;
                    }
                }
            }
            data
        };
        Ok(self.push(data, shape, &[a], || Op::Softmax { a: a.clone(), axis }))
    }

    /// Stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if axis >= a.shape().len() {
            return Err(Error::invalid(
                "log_softmax",
                format!("axis {axis} out of range for shape {:?}", a.shape()),
            ));
        }
        let shape = a.shape().to_vec();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let data = {
            let ad = a.data();
            let mut data = vec![E::zero(); ad.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = ad[base];
                    for k in 1..len {
                        let v = ad[base + k * inner];
                        if v > max {
                            max = v;
                        }
                    }
                    let mut sum = E::zero();
                    for k in 0..len {
                        sum = sum + (ad[base + k * inner] - max).exp();
                    }
                    let log_z = max + sum.ln();
                    for k in 0..len {
                        data[base + k * inner] = ad[base + k * inner] - log_z;
                    }
                }
            }
            data
        };
        Ok(self.push(data, shape, &[a], || Op::LogSoftmax { a: a.clone(), axis }))
    }

    /// Layer normalization over the last axis, then affine gain/bias.
    /// Uses the biased variance and an epsilon guard inside the square root.
    pub fn layer_norm(
        &mut self,
        a: &Tensor<E>,
        gain: &Tensor<E>,
        bias: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let shape = a.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input".to_string()))?;
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs last axis {c}", gain.shape(), bias.shape()),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let rows = a.numel() / c;
        let inv_c = E::from_f64(1.0 / c as f64);
        let epsv = E::from_f64(eps);
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let data = {
            let ad = a.data();
            let gd = gain.data();
            let bd = bias.data();
            let mut data = vec![E::zero(); ad.len()];
            for r in 0..rows {
                let xs = &ad[r * c..(r + 1) * c];
                let mut mean = E::zero();
                for &x in xs {
                    mean = mean + x;
                }
                mean = mean * inv_c;
                let mut var = E::zero();
                for &x in xs {
                    let d = x - mean;
                    var = var + d * d;
                }
                var = var * inv_c;
                let inv_std = (var + epsv).sqrt().recip();
                for j in 0..c {
                    let xh = (xs[j] - mean) * inv_std;
                    data[r * c + j] = xh * gd[j] + bd[j];
                }
                means.push(mean);
                inv_stds.push(inv_std);
            }
            data
        };
        Ok(self.push(data, shape, &[a, gain, bias], || Op::LayerNorm {
            a: a.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            mean: means,
            inv_std: inv_stds,
        }))
    }

    /// Exact GELU, x·Φ(x) with Φ the standard normal CDF.
    pub fn gelu(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let data = a.data().iter().map(|&x| gelu_value(x)).collect();
        self.push(data, a.shape().to_vec(), &[a], || Op::Gelu { a: a.clone() })
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements; scalar output (shape `[]`).
    pub fn sum_all(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let mut s = E::zero();
        for &x in a.data().iter() {
            s = s + x;
        }
        self.push(vec![s], Vec::new(), &[a], || Op::SumAll { a: a.clone() })
    }

    /// Mean of all elements; scalar output.
    pub fn mean_all(&mut self, a: &Tensor<E>) -> Tensor<E> {
        let n = a.numel();
        let mut s = E::zero();
        for &x in a.data().iter() {
            s = s + x;
        }
        let mean = s * E::from_f64(1.0 / n as f64);
        self.push(vec![mean], Vec::new(), &[a], || Op::MeanAll { a: a.clone() })
    }

    // ── row/column assembly ─────────────────────────────────────────────

    /// Gathers rows of a 2-D tensor by index; indices may repeat.
    pub fn select_rows(&mut self, a: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
        if a.shape().len() != 2 {
            return Err(Error::shape("select_rows", format!("need 2-D, got {:?}", a.shape())));
        }
        let (r, c) = (a.rows(), a.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "select_rows",
                format!("row index {bad} out of range for {r} rows"),
            ));
        }
        let data = {
            let ad = a.data();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                data.extend_from_slice(&ad[i * c..(i + 1) * c]);
            }
            data
        };
        Ok(self.push(data, vec![indices.len(), c], &[a], || Op::SelectRows {
            a: a.clone(),
            indices: indices.to_vec(),
        }))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts".to_string()));
        }
        let c = parts[0].shape().last().copied().unwrap_or(0);
        if parts.iter().any(|p| p.shape().len() != 2 || p.cols() != c) {
            return Err(Error::shape(
                "concat_rows",
                format!(
                    "column counts differ: {:?}",
                    parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        Ok(self.push(data, vec![rows, c], parts, || Op::ConcatRows {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        }))
    }

    /// Contiguous column slice `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        if a.shape().len() != 2 || start + len > a.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("slice {start}..{} of {:?}", start + len, a.shape()),
            ));
        }
        let (r, c) = (a.rows(), a.cols());
        let data = {
            let ad = a.data();
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&ad[i * c + start..i * c + start + len]);
            }
            data
        };
        Ok(self.push(data, vec![r, len], &[a], || Op::SliceCols { a: a.clone(), start, len }))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts".to_string()));
        }
        let r = parts[0].shape().first().copied().unwrap_or(0);
        if parts.iter().any(|p| p.shape().len() != 2 || p.rows() != r) {
            return Err(Error::shape(
                "concat_cols",
                format!(
                    "row counts differ: {:?}",
                    parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                ),
            ));
        }
        let total_c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(data, vec![r, total_c], parts, || Op::ConcatCols {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        }))
    }

    /// Repeats a 1×c row tensor `count` times.
    pub fn repeat_row(&mut self, a: &Tensor<E>, count: usize) -> Result<Tensor<E>> {
        if a.shape().len() != 2 || a.rows() != 1 {
            return Err(Error::shape("repeat_row", format!("need 1×c, got {:?}", a.shape())));
        }
        let c = a.cols();
        let data = {
            let ad = a.data();
            let mut data = Vec::with_capacity(count * c);
            for _ in 0..count {
                data.extend_from_slice(&ad);
            }
            data
        };
        Ok(self.push(data, vec![count, c], &[a], || Op::RepeatRow { a: a.clone(), count }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates `d loss / d t` into the
    /// grad buffer of every tensor with `requires_grad` reachable from the
    /// loss; repeated calls without `zero_grad` accumulate further.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Vec<E>>> = Vec::new();
        adjoints.resize_with(n, || None);

        match loss.node_in(self.id) {
            Some(idx) => adjoints[idx] = Some(vec![E::one()]),
            None => {
                // A leaf scalar: its gradient with respect to itself is one.
                if loss.requires_grad() {
                    loss.accumulate_grad(&[E::one()]);
                }
                return Ok(());
            }
        }

        for i in (0..n).rev() {
            let Some(dout) = adjoints[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.out, &dout, &mut adjoints);
            node.out.accumulate_grad(&dout);
        }
        Ok(())
    }

    /// Routes an adjoint into either a pending node slot (intermediate) or,
    /// for leaves, directly into the tensor's grad buffer.
    fn send(&self, t: &Tensor<E>, adjoints: &mut [Option<Vec<E>>], make: impl FnOnce() -> Vec<E>) {
        match t.node_in(self.id) {
            Some(idx) => {
                let delta = make();
                match adjoints[idx].as_mut() {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a = *a + *d;
                        }
                    }
                    None => adjoints[idx] = Some(delta),
                }
            }
            None => {
                if t.requires_grad() {
                    t.accumulate_grad(&make());
                }
            }
        }
    }

    fn wants_grad(&self, t: &Tensor<E>) -> bool {
        t.requires_grad() || t.node_in(self.id).is_some()
    }

    fn propagate(&self, op: &Op<E>, out: &Tensor<E>, d: &[E], adj: &mut [Option<Vec<E>>]) {
        match op {
            Op::Add { a, b } => {
                if self.wants_grad(a) {
                    self.send(a, adj, || d.to_vec());
                }
                if self.wants_grad(b) {
                    self.send(b, adj, || d.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants_grad(a) {
                    self.send(a, adj, || d.to_vec());
                }
                if self.wants_grad(b) {
                    self.send(b, adj, || d.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    let bd = b.data();
                    self.send(a, adj, || d.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect());
                }
                if self.wants_grad(b) {
                    let ad = a.data();
                    self.send(b, adj, || d.iter().zip(ad.iter()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { a, c } => {
                if self.wants_grad(a) {
                    self.send(a, adj, || d.iter().map(|&x| x * *c).collect());
                }
            }
            Op::AddRow { a, row } => {
                if self.wants_grad(a) {
                    self.send(a, adj, || d.to_vec());
                }
                if self.wants_grad(row) {
                    let c = row.numel();
                    self.send(row, adj, || {
                        let mut g = vec![E::zero(); c];
                        for (i, &x) in d.iter().enumerate() {
                            g[i % c] = g[i % c] + x;
                        }
                        g
                    });
                }
            }
            Op::Matmul { a, b } => {
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if self.wants_grad(a) {
                    let bd = b.data();
                    self.send(a, adj, || matmul_nt(d, &bd, m, n, k));
                }
                if self.wants_grad(b) {
                    let ad = a.data();
                    self.send(b, adj, || matmul_tn(&ad, d, m, k, n));
                }
            }
            Op::Transpose { a } => {
                if self.wants_grad(a) {
                    let (r, c) = (a.rows(), a.cols());
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); r * c];
                        for i in 0..c {
                            for j in 0..r {
                                g[j * c + i] = d[i * r + j];
                            }
                        }
                        g
                    });
                }
            }
            Op::Softmax { a, axis } => {
                if self.wants_grad(a) {
                    let y = out.data();
                    let shape = a.shape().to_vec();
                    let (outer, len, inner) = lane_dims(&shape, *axis);
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); y.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = E::zero();
                                for k in 0..len {
                                    let p = base + k * inner;
                                    dot = dot + y[p] * d[p];
                                }
                                for k in 0..len {
                                    let p = base + k * inner;
                                    g[p] = y[p] * (d[p] - dot);
                                }
                            }
                        }
                        g
                    });
                }
            }
            Op::LogSoftmax { a, axis } => {
                if self.wants_grad(a) {
                    let y = out.data();
                    let shape = a.shape().to_vec();
                    let (outer, len, inner) = lane_dims(&shape, *axis);
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); y.len()];
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dsum = E::zero();
                                for k in 0..len {
                                    dsum = dsum + d[base + k * inner];
                                }
                                for k in 0..len {
                                    let p = base + k * inner;
                                    g[p] = d[p] - y[p].exp() * dsum;
                                }
                            }
                        }
                        g
                    });
                }
            }
            Op::LayerNorm { a, gain, bias, mean, inv_std } => {
                let c = gain.numel();
                let rows = a.numel() / c;
                if self.wants_grad(a) {
                    let ad = a.data();
                    let gd = gain.data();
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); ad.len()];
                        let inv_c = E::from_f64(1.0 / c as f64);
                        for r in 0..rows {
                            let istd = inv_std[r];
                            let mu = mean[r];
                            let xs = &ad[r * c..(r + 1) * c];
                            let ds = &d[r * c..(r + 1) * c];
                            let mut m1 = E::zero();
                            let mut m2 = E::zero();
                            for j in 0..c {
                                let xh = (xs[j] - mu) * istd;
                                let dxh = ds[j] * gd[j];
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * xh;
                            }
                            m1 = m1 * inv_c;
                            m2 = m2 * inv_c;
                            for j in 0..c {
                                let xh = (xs[j] - mu) * istd;
                                let dxh = ds[j] * gd[j];
                                g[r * c + j] = istd * (dxh - m1 - xh * m2);
                            }
                        }
                        g
                    });
                }
                if self.wants_grad(gain) {
                    let ad = a.data();
                    self.send(gain, adj, || {
                        let mut g = vec![E::zero(); c];
                        for r in 0..rows {
                            let istd = inv_std[r];
                            let mu = mean[r];
                            for j in 0..c {
                                let xh = (ad[r * c + j] - mu) * istd;
                                g[j] = g[j] + d[r * c + j] * xh;
                            }
                        }
                        g
                    });
                }
                if self.wants_grad(bias) {
                    self.send(bias, adj, || {
                        let mut g = vec![E::zero(); c];
                        for r in 0..rows {
                            for j in 0..c {
                                g[j] = g[j] + d[r * c + j];
                            }
                        }
                        g
                    });
                }
            }
            Op::Gelu { a } => {
                if self.wants_grad(a) {
                    let ad = a.data();
                    self.send(a, adj, || {
                        ad.iter().zip(d).map(|(&x, &dx)| dx * gelu_derivative(x)).collect()
                    });
                }
            }
            Op::SumAll { a } => {
                if self.wants_grad(a) {
                    let n = a.numel();
                    self.send(a, adj, || vec![d[0]; n]);
                }
            }
            Op::MeanAll { a } => {
                if self.wants_grad(a) {
                    let n = a.numel();
                    let scale = E::from_f64(1.0 / n as f64);
                    self.send(a, adj, || vec![d[0] * scale; n]);
                }
            }
            Op::SelectRows { a, indices } => {
                if self.wants_grad(a) {
                    let (r, c) = (a.rows(), a.cols());
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); r * c];
                        for (t, &src) in indices.iter().enumerate() {
                            for j in 0..c {
                                g[src * c + j] = g[src * c + j] + d[t * c + j];
                            }
                        }
                        g
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = p.numel();
                    if self.wants_grad(p) {
                        self.send(p, adj, || d[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.wants_grad(a) {
                    let (r, c) = (a.rows(), a.cols());
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); r * c];
                        for i in 0..r {
                            for j in 0..*len {
                                g[i * c + start + j] = d[i * len + j];
                            }
                        }
                        g
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let r = parts[0].rows();
                let total_c: usize = parts.iter().map(|p| p.cols()).sum();
                let mut col_offset = 0;
                for p in parts {
                    let c = p.cols();
                    if self.wants_grad(p) {
                        let off = col_offset;
                        self.send(p, adj, || {
                            let mut g = vec![E::zero(); r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    g[i * c + j] = d[i * total_c + off + j];
                                }
                            }
                            g
                        });
                    }
                    col_offset += c;
                }
            }
            Op::RepeatRow { a, count } => {
                if self.wants_grad(a) {
                    let c = a.cols();
                    self.send(a, adj, || {
                        let mut g = vec![E::zero(); c];
                        for t in 0..*count {
                            for j in 0..c {
                                g[j] = g[j] + d[t * c + j];
                            }
                        }
                        g
                    });
                }
            }
        }
    }
}

impl<E: Element> Default for GradGraph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Vec<E> {
    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect()
}
