//! Tape-based reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Ops
//! append entries to a Wengert list; [`Tape::backward`] sweeps it in
//! reverse and *accumulates* into each tensor's `grad` buffer (running
//! backward twice doubles the gradients — callers reset between steps).
//!
//! Gradients flow to every slot with `requires_grad = true`, including
//! interior activations, which is what the attribution code relies on.

mod conv;

pub use conv::ConvDims;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar element type. f32 is the training type; f64 exists so finite-
/// difference checks can run at a tolerance where FD truncation error is
/// visible instead of float rounding.
pub trait Element:
    Float + Sum + Send + Sync + Debug + Display + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Row-major `c = alpha * a(m,k) . b(k,n) + beta * c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
    fn conv_forward(dims: &ConvDims, x: &[Self], w: &[Self], out: &mut [Self]);
    fn conv_backward_weight(dims: &ConvDims, x: &[Self], g: &[Self], gw: &mut [Self]);
    fn conv_backward_input(dims: &ConvDims, w: &[Self], g: &[Self], gx: &mut [Self]);
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    fn conv_forward(dims: &ConvDims, x: &[Self], w: &[Self], out: &mut [Self]) {
        conv::conv3d_forward_f32(dims, x, w, out);
    }
    fn conv_backward_weight(dims: &ConvDims, x: &[Self], g: &[Self], gw: &mut [Self]) {
        conv::conv3d_backward_weight_f32(dims, x, g, gw);
    }
    fn conv_backward_input(dims: &ConvDims, w: &[Self], g: &[Self], gx: &mut [Self]) {
        conv::conv3d_backward_input_f32(dims, w, g, gx);
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    fn conv_forward(dims: &ConvDims, x: &[Self], w: &[Self], out: &mut [Self]) {
        conv::conv3d_direct(dims, x, w, out);
    }
    fn conv_backward_weight(dims: &ConvDims, x: &[Self], g: &[Self], gw: &mut [Self]) {
        conv::conv3d_backward_weight_direct(dims, x, g, gw);
    }
    fn conv_backward_input(dims: &ConvDims, w: &[Self], g: &[Self], gx: &mut [Self]) {
        conv::conv3d_backward_input_direct(dims, w, g, gx);
    }
}

/// Train/eval switch; decides batch-norm statistics and dropout behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle into a [`Tape`]'s slot arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One dense tensor: shape, row-major values, and (if tracked) its gradient.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Batch statistics produced by a training-mode batch-norm application,
/// handed back so the caller can fold them into running estimates.
#[derive(Debug, Clone)]
pub struct BnBatchStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

#[derive(Debug)]
enum Op<E> {
    MatMul { m: usize, k: usize, n: usize },
    Add,
    Sub,
    Mul,
    Scale(E),
    /// y[r, c] = x[r, c] + b[c]
    AddRowBias { rows: usize, cols: usize },
    /// y[c, s] = x[c, s] + b[c] over `spatial` trailing elements per channel
    AddChanBias { spatial: usize },
    Sum,
    Mean,
    Pick { index: usize },
    StackRows { cols: usize },
    ConcatCols { rows: usize, widths: Vec<usize> },
    SliceRow { row: usize, cols: usize },
    SliceCols { lo: usize, hi: usize, rows: usize, cols: usize },
    Reshape,
    Transpose { rows: usize, cols: usize },
    Relu,
    Sigmoid,
    Tanh,
    Softmax { lane: usize, inner: usize },
    LayerNorm { feat: usize, mean: Vec<E>, invstd: Vec<E> },
    BatchNormTrain { spatial: usize, mean: Vec<E>, invstd: Vec<E> },
    BatchNormEval { spatial: usize, mean: Vec<E>, invstd: Vec<E> },
    Dropout { mask: Vec<bool>, scale: E },
    Conv3d(ConvDims),
    Gap3d { spatial: usize },
    /// Flat input index of each output's maximum.
    MaxPool3d { argmax: Vec<usize>, in_len: usize },
    CrossEntropy { labels: Vec<usize>, probs: Vec<E> },
}

#[derive(Debug)]
struct Entry<E> {
    inputs: Vec<TensorId>,
    output: TensorId,
    op: Op<E>,
}

/// Arena of tensors plus the op list recorded while building a forward pass.
#[derive(Debug)]
pub struct Tape<E> {
    slots: Vec<Tensor<E>>,
    entries: Vec<Entry<E>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), entries: Vec::new(), grad_enabled: true }
    }

    /// A tape that records no entries; outputs never require grad.
    pub fn inference() -> Self {
        Tape { slots: Vec::new(), entries: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> TensorId {
        let requires_grad = requires_grad && self.grad_enabled;
        self.slots.push(Tensor { shape, data, requires_grad, grad: None });
        TensorId(self.slots.len() - 1)
    }

    fn record(&mut self, inputs: Vec<TensorId>, output: TensorId, op: Op<E>) {
        if self.grad_enabled && self.slots[output.0].requires_grad {
            self.entries.push(Entry { inputs, output, op });
        }
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.slots[id.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if shape_len(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf: shape {:?} implies {} elements, got {}",
                shape,
                shape_len(shape),
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn zeros(&mut self, shape: &[usize], requires_grad: bool) -> TensorId {
        let n = shape_len(shape);
        self.push(shape.to_vec(), vec![E::zero(); n], requires_grad)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<E> {
        &self.slots[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.slots[id.0].grad.as_deref()
    }

    pub fn set_data(&mut self, id: TensorId, data: Vec<E>) -> Result<()> {
        if data.len() != self.slots[id.0].data.len() {
            return Err(Error::ShapeMismatch(format!(
                "set_data: expected {} elements, got {}",
                self.slots[id.0].data.len(),
                data.len()
            )));
        }
        self.slots[id.0].data = data;
        Ok(())
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.slots[id.0].grad = None;
    }

    /// Error if any stored value of `id` is non-finite.
    pub fn check_finite(&self, id: TensorId, what: &str) -> Result<()> {
        if let Some(pos) = self.slots[id.0].data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{what}: non-finite value at flat index {pos}"
            )));
        }
        Ok(())
    }

    // ── binary / unary elementwise ──────────────────────────────────

    fn same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a, b], out, Op::Add);
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a, b], out, Op::Sub);
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a, b], out, Op::Mul);
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, s: E) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x * s).collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a], out, Op::Scale(s));
        out
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a], out, Op::Relu);
        out
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let one = E::one();
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| {
                // Split on sign so exp never overflows.
                if x >= E::zero() {
                    one / (one + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (one + e)
                }
            })
            .collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a], out, Op::Sigmoid);
        out
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a], out, Op::Tanh);
        out
    }

    // ── matmul & linear-algebra helpers ─────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch(format!("matmul: {sa:?} . {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::zero(); m * n];
        E::gemm(m, k, n, E::one(), self.data(a), self.data(b), E::zero(), &mut data);
        let rg = self.any_grad(&[a, b]);
        let out = self.push(vec![m, n], data, rg);
        self.record(vec![a, b], out, Op::MatMul { m, k, n });
        Ok(out)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose: expected 2-d, got {sa:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let x = self.data(a);
        let mut data = vec![E::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![cols, rows], data, rg);
        self.record(vec![a], out, Op::Transpose { rows, cols });
        Ok(out)
    }

    pub fn add_row_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::ShapeMismatch(format!("add_row_bias: {sa:?} + {sb:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let bias = self.data(b).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] + bias[c];
            }
        }
        let rg = self.any_grad(&[a, b]);
        let out = self.push(sa, data, rg);
        self.record(vec![a, b], out, Op::AddRowBias { rows, cols });
        Ok(out)
    }

    /// Channel bias over a [C, *spatial] tensor: adds b[c] across all
    /// trailing positions of channel c.
    pub fn add_chan_bias(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.is_empty() || sb.len() != 1 || sb[0] != sa[0] {
            return Err(Error::ShapeMismatch(format!("add_chan_bias: {sa:?} + {sb:?}")));
        }
        let channels = sa[0];
        let spatial = shape_len(&sa[1..]);
        let bias = self.data(b).to_vec();
        let mut data = self.data(a).to_vec();
        for c in 0..channels {
            let bv = bias[c];
            for v in &mut data[c * spatial..(c + 1) * spatial] {
                *v = *v + bv;
            }
        }
        let rg = self.any_grad(&[a, b]);
        let out = self.push(sa, data, rg);
        self.record(vec![a, b], out, Op::AddChanBias { spatial });
        Ok(out)
    }

    // ── shape plumbing ─────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape_len(shape) != self.data(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.any_grad(&[a]);
        let out = self.push(shape.to_vec(), data, rg);
        self.record(vec![a], out, Op::Reshape);
        Ok(out)
    }

    /// Stack n same-length vectors (or flat tensors) as rows of an [n, cols] matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("stack_rows: empty input".into()));
        }
        let cols = self.data(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if self.data(r).len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "stack_rows: row length {} != {}",
                    self.data(r).len(),
                    cols
                )));
            }
            data.extend_from_slice(self.data(r));
        }
        let rg = self.any_grad(rows);
        let out = self.push(vec![rows.len(), cols], data, rg);
        self.record(rows.to_vec(), out, Op::StackRows { cols });
        Ok(out)
    }

    /// Concatenate 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat_cols: empty input".into()));
        }
        let rows = self.shape(parts[0]).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols: expected [{} x _], got {:?}",
                    rows, sp
                )));
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![E::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_grad(parts);
        let out = self.push(vec![rows, total], data, rg);
        self.record(parts.to_vec(), out, Op::ConcatCols { rows, widths });
        Ok(out)
    }

    /// Extract row `row` of a 2-d tensor as a [cols] vector.
    pub fn slice_row(&mut self, a: TensorId, row: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 || row >= sa[0] {
            return Err(Error::ShapeMismatch(format!("slice_row: row {row} of {sa:?}")));
        }
        let cols = sa[1];
        let data = self.data(a)[row * cols..(row + 1) * cols].to_vec();
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![cols], data, rg);
        self.record(vec![a], out, Op::SliceRow { row, cols });
        Ok(out)
    }

    /// Columns [lo, hi) of a 2-d tensor.
    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 || lo >= hi || hi > sa[1] {
            return Err(Error::ShapeMismatch(format!("slice_cols: [{lo},{hi}) of {sa:?}")));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let src = self.data(a);
        let w = hi - lo;
        let mut data = vec![E::zero(); rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&src[r * cols + lo..r * cols + hi]);
        }
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![rows, w], data, rg);
        self.record(vec![a], out, Op::SliceCols { lo, hi, rows, cols });
        Ok(out)
    }

    /// Single element by flat index, as a scalar ([1]).
    pub fn pick(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        if index >= self.data(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "pick: index {index} out of {}",
                self.data(a).len()
            )));
        }
        let v = self.data(a)[index];
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![1], vec![v], rg);
        self.record(vec![a], out, Op::Pick { index });
        Ok(out)
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: E = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![1], vec![s], rg);
        self.record(vec![a], out, Op::Sum);
        out
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = E::from_f64(self.data(a).len() as f64);
        let s: E = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![1], vec![s / n], rg);
        self.record(vec![a], out, Op::Mean);
        out
    }

    /// Global average pool: [C, *spatial] -> [C].
    pub fn global_avg_pool3d(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::ShapeMismatch(format!("global_avg_pool3d: {sa:?}")));
        }
        let channels = sa[0];
        let spatial = shape_len(&sa[1..]);
        if spatial == 0 {
            return Err(Error::Dimension("global_avg_pool3d: empty spatial extent".into()));
        }
        let inv = E::one() / E::from_f64(spatial as f64);
        let x = self.data(a);
        let data: Vec<E> = (0..channels)
            .map(|c| x[c * spatial..(c + 1) * spatial].iter().copied().sum::<E>() * inv)
            .collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(vec![channels], data, rg);
        self.record(vec![a], out, Op::Gap3d { spatial });
        Ok(out)
    }

    /// Strided max pool over the three trailing spatial axes of a
    /// [C, D, H, W] tensor. Padding cells never win the max.
    pub fn maxpool3d(&mut self, a: TensorId, kernel: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(Error::ShapeMismatch(format!("maxpool3d: expected [C,D,H,W], got {sa:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Dimension("maxpool3d: kernel and stride must be positive".into()));
        }
        let (c, d, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let out_dim = |n: usize| -> Result<usize> {
            (n + 2 * pad)
                .checked_sub(kernel)
                .map(|v| v / stride + 1)
                .ok_or_else(|| Error::Dimension(format!("maxpool3d: kernel {kernel} over extent {n} with pad {pad}")))
        };
        let (od, oh, ow) = (out_dim(d)?, out_dim(h)?, out_dim(w)?);
        let x = self.data(a);
        let mut data = vec![E::zero(); c * od * oh * ow];
        let mut argmax = vec![0usize; data.len()];
        let mut o = 0;
        for ci in 0..c {
            let base = ci * d * h * w;
            for odi in 0..od {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_i = usize::MAX;
                        for kd in 0..kernel {
                            let di = (odi * stride + kd) as isize - pad as isize;
                            if di < 0 || di >= d as isize {
                                continue;
                            }
                            for kh in 0..kernel {
                                let hi = (ohi * stride + kh) as isize - pad as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for kw in 0..kernel {
                                    let wi = (owi * stride + kw) as isize - pad as isize;
                                    if wi < 0 || wi >= w as isize {
                                        continue;
                                    }
                                    let idx = base + (di as usize * h + hi as usize) * w + wi as usize;
                                    if best_i == usize::MAX || x[idx] > best {
                                        best = x[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        if best_i == usize::MAX {
                            return Err(Error::Dimension(
                                "maxpool3d: a window covers only padding".into(),
                            ));
                        }
                        data[o] = best;
                        argmax[o] = best_i;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let in_len = x.len();
        let out = self.push(vec![c, od, oh, ow], data, rg);
        self.record(vec![a], out, Op::MaxPool3d { argmax, in_len });
        Ok(out)
    }

    // ── normalization / regularization ──────────────────────────────

    /// Numerically-safe softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dimension(format!("softmax: axis {axis} of {sa:?}")));
        }
        let lane = sa[axis];
        let inner = shape_len(&sa[axis + 1..]);
        let outer = shape_len(&sa[..axis]);
        let x = self.data(a);
        let mut data = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = E::neg_infinity();
                for l in 0..lane {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut z = E::zero();
                for l in 0..lane {
                    let e = (x[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    z = z + e;
                }
                for l in 0..lane {
                    data[base + l * inner] = data[base + l * inner] / z;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        let out = self.push(sa, data, rg);
        self.record(vec![a], out, Op::Softmax { lane, inner });
        Ok(out)
    }

    /// Row-wise layer norm of an [S, feat] tensor with per-feature affine.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: E) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch(format!("layer_norm: expected 2-d, got {sa:?}")));
        }
        let (rows, feat) = (sa[0], sa[1]);
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: affine shapes {:?}/{:?} for feat {feat}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let x = self.data(a);
        let g = self.data(gamma);
        let b = self.data(beta);
        let nf = E::from_f64(feat as f64);
        let mut data = vec![E::zero(); x.len()];
        let mut means = vec![E::zero(); rows];
        let mut invstds = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &x[r * feat..(r + 1) * feat];
            let mean = row.iter().copied().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let invstd = E::one() / (var + eps).sqrt();
            means[r] = mean;
            invstds[r] = invstd;
            for c in 0..feat {
                data[r * feat + c] = (row[c] - mean) * invstd * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[a, gamma, beta]);
        let out = self.push(sa, data, rg);
        self.record(
            vec![a, gamma, beta],
            out,
            Op::LayerNorm { feat, mean: means, invstd: invstds },
        );
        Ok(out)
    }

    /// Batch norm over a [C, *spatial] tensor using the tensor's own
    /// statistics (training mode). Returns the batch stats so callers can
    /// update running estimates.
    pub fn batch_norm_train(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
    ) -> Result<(TensorId, BnBatchStats<E>)> {
        let sa = self.shape(a).to_vec();
        let channels = *sa.first().ok_or_else(|| Error::ShapeMismatch("batch_norm: 0-d input".into()))?;
        let spatial = shape_len(&sa[1..]);
        if spatial == 0 {
            return Err(Error::Dimension("batch_norm: empty spatial extent".into()));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::ShapeMismatch("batch_norm: affine shape".into()));
        }
        let x = self.data(a);
        let g = self.data(gamma);
        let b = self.data(beta);
        let ns = E::from_f64(spatial as f64);
        let mut data = vec![E::zero(); x.len()];
        let mut mean = vec![E::zero(); channels];
        let mut var = vec![E::zero(); channels];
        let mut invstd = vec![E::zero(); channels];
        for c in 0..channels {
            let xc = &x[c * spatial..(c + 1) * spatial];
            let m = xc.iter().copied().sum::<E>() / ns;
            let v = xc.iter().map(|&u| (u - m) * (u - m)).sum::<E>() / ns;
            let is = E::one() / (v + eps).sqrt();
            mean[c] = m;
            var[c] = v;
            invstd[c] = is;
            for (i, &u) in xc.iter().enumerate() {
                data[c * spatial + i] = (u - m) * is * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[a, gamma, beta]);
        let out = self.push(sa, data, rg);
        let stats = BnBatchStats { mean: mean.clone(), var: var.clone() };
        self.record(
            vec![a, gamma, beta],
            out,
            Op::BatchNormTrain { spatial, mean, invstd },
        );
        Ok((out, stats))
    }

    /// Batch norm with fixed running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let channels = *sa.first().ok_or_else(|| Error::ShapeMismatch("batch_norm: 0-d input".into()))?;
        let spatial = shape_len(&sa[1..]);
        if self.shape(gamma) != [channels]
            || self.shape(beta) != [channels]
            || running_mean.len() != channels
            || running_var.len() != channels
        {
            return Err(Error::ShapeMismatch("batch_norm_eval: stat shapes".into()));
        }
        let x = self.data(a);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut data = vec![E::zero(); x.len()];
        let mut invstd = vec![E::zero(); channels];
        for c in 0..channels {
            let is = E::one() / (running_var[c] + eps).sqrt();
            invstd[c] = is;
            let (m, gc, bc) = (running_mean[c], g[c], b[c]);
            for i in 0..spatial {
                data[c * spatial + i] = (x[c * spatial + i] - m) * is * gc + bc;
            }
        }
        let rg = self.any_grad(&[a, gamma, beta]);
        let out = self.push(sa, data, rg);
        self.record(
            vec![a, gamma, beta],
            out,
            Op::BatchNormEval { spatial, mean: running_mean.to_vec(), invstd },
        );
        Ok(out)
    }

    /// Inverted dropout. Eval mode or rate 0 is the identity.
    pub fn dropout(&mut self, a: TensorId, rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let scale = E::from_f64(1.0 / keep);
        let mask: Vec<bool> = (0..self.data(a).len()).map(|_| rng.gen::<f64>() < keep).collect();
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { x * scale } else { E::zero() })
            .collect();
        let rg = self.any_grad(&[a]);
        let out = self.push(self.shape(a).to_vec(), data, rg);
        self.record(vec![a], out, Op::Dropout { mask, scale });
        Ok(out)
    }

    // ── conv / loss ────────────────────────────────────────────────

    /// 3D cross-correlation of x[ci, D, H, W] with w[co, ci, kd, kh, kw].
    pub fn conv3d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let dims = ConvDims::resolve(self.shape(x), self.shape(w), stride, pad).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "conv3d: input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                self.shape(x),
                self.shape(w)
            ))
        })?;
        let mut data = vec![E::zero(); dims.out_len()];
        E::conv_forward(&dims, self.data(x), self.data(w), &mut data);
        let rg = self.any_grad(&[x, w]);
        let out = self.push(vec![dims.co, dims.od, dims.oh, dims.ow], data, rg);
        self.record(vec![x, w], out, Op::Conv3d(dims));
        Ok(out)
    }

    /// Mean cross-entropy between logits ([B, C] or [C]) and class labels.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        let (batch, classes) = match sl.as_slice() {
            [c] => (1usize, *c),
            [b, c] => (*b, *c),
            _ => return Err(Error::ShapeMismatch(format!("cross_entropy: logits {sl:?}"))),
        };
        if labels.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} labels for batch {batch}",
                labels.len()
            )));
        }
        for &y in labels {
            if y >= classes {
                return Err(Error::Label { label: y, classes });
            }
        }
        let x = self.data(logits);
        let mut probs = vec![E::zero(); batch * classes];
        let mut total = E::zero();
        for (bi, &y) in labels.iter().enumerate() {
            let row = &x[bi * classes..(bi + 1) * classes];
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for c in 0..classes {
                let e = (row[c] - mx).exp();
                probs[bi * classes + c] = e;
                z = z + e;
            }
            for c in 0..classes {
                probs[bi * classes + c] = probs[bi * classes + c] / z;
            }
            total = total + (z.ln() - (row[y] - mx));
        }
        let loss = total / E::from_f64(batch as f64);
        let rg = self.any_grad(&[logits]);
        let out = self.push(vec![1], vec![loss], rg);
        self.record(vec![logits], out, Op::CrossEntropy { labels: labels.to_vec(), probs });
        Ok(out)
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar. Accumulates into `grad` buffers of all
    /// `requires_grad` slots reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward: expected scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.slots[loss.0].requires_grad {
            return Err(Error::Contract("backward: loss does not require grad".into()));
        }
        let n = self.slots.len();
        let mut scratch: Vec<Option<Vec<E>>> = vec![None; n];
        scratch[loss.0] = Some(vec![E::one()]);

        // Borrow-splitting: move entries out during the sweep.
        let entries = std::mem::take(&mut self.entries);
        for entry in entries.iter().rev() {
            let Some(gout) = scratch[entry.output.0].take() else {
                continue;
            };
            self.backprop_entry(entry, &gout, &mut scratch)?;
            // Keep the output grad available for interior inspection.
            scratch[entry.output.0] = Some(gout);
        }
        self.entries = entries;

        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !slot.requires_grad {
                continue;
            }
            let Some(g) = scratch[i].take() else { continue };
            match &mut slot.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                None => slot.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Vec<E>>], id: TensorId, len: usize, f: impl FnOnce(&mut [E])) {
        let buf = scratch[id.0].get_or_insert_with(|| vec![E::zero(); len]);
        f(buf);
    }

    fn backprop_entry(&self, entry: &Entry<E>, gout: &[E], scratch: &mut [Option<Vec<E>>]) -> Result<()> {
        let needs: Vec<bool> = entry
            .inputs
            .iter()
            .map(|id| self.slots[id.0].requires_grad)
            .collect();
        let in_len = |i: usize| self.slots[entry.inputs[i].0].data.len();
        match &entry.op {
            Op::MatMul { m, k, n } => {
                let a = &self.slots[entry.inputs[0].0].data;
                let b = &self.slots[entry.inputs[1].0].data;
                if needs[0] {
                    // ga += gout . b^T  — use gemm with b transposed via strides
                    Self::accumulate(scratch, entry.inputs[0], m * k, |ga| {
                        gemm_nt(*m, *n, *k, gout, b, ga);
                    });
                }
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], k * n, |gb| {
                        gemm_tn(*k, *m, *n, a, gout, gb);
                    });
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if needs[i] {
                        Self::accumulate(scratch, entry.inputs[i], in_len(i), |g| {
                            for (gi, &go) in g.iter_mut().zip(gout) {
                                *gi = *gi + go;
                            }
                        });
                    }
                }
            }
            Op::Sub => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go;
                        }
                    });
                }
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], in_len(1), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi - go;
                        }
                    });
                }
            }
            Op::Mul => {
                let a = &self.slots[entry.inputs[0].0].data;
                let b = &self.slots[entry.inputs[1].0].data;
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], a.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * b[i];
                        }
                    });
                }
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], b.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * a[i];
                        }
                    });
                }
            }
            Op::Scale(s) => {
                if needs[0] {
                    let s = *s;
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go * s;
                        }
                    });
                }
            }
            Op::AddRowBias { rows, cols } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], rows * cols, |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go;
                        }
                    });
                }
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], *cols, |g| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[c] = g[c] + gout[r * cols + c];
                            }
                        }
                    });
                }
            }
            Op::AddChanBias { spatial } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go;
                        }
                    });
                }
                if needs[1] {
                    let channels = in_len(1);
                    Self::accumulate(scratch, entry.inputs[1], channels, |g| {
                        for c in 0..channels {
                            let s: E = gout[c * spatial..(c + 1) * spatial].iter().copied().sum();
                            g[c] = g[c] + s;
                        }
                    });
                }
            }
            Op::Sum => {
                if needs[0] {
                    let go = gout[0];
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for gi in g.iter_mut() {
                            *gi = *gi + go;
                        }
                    });
                }
            }
            Op::Mean => {
                if needs[0] {
                    let len = in_len(0);
                    let go = gout[0] / E::from_f64(len as f64);
                    Self::accumulate(scratch, entry.inputs[0], len, |g| {
                        for gi in g.iter_mut() {
                            *gi = *gi + go;
                        }
                    });
                }
            }
            Op::Pick { index } => {
                if needs[0] {
                    let go = gout[0];
                    let idx = *index;
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        g[idx] = g[idx] + go;
                    });
                }
            }
            Op::StackRows { cols } => {
                for (i, &inp) in entry.inputs.iter().enumerate() {
                    if needs[i] {
                        Self::accumulate(scratch, inp, *cols, |g| {
                            for (gi, &go) in g.iter_mut().zip(&gout[i * cols..(i + 1) * cols]) {
                                *gi = *gi + go;
                            }
                        });
                    }
                }
            }
            Op::ConcatCols { rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (i, &w) in widths.iter().enumerate() {
                    if needs[i] {
                        Self::accumulate(scratch, entry.inputs[i], rows * w, |g| {
                            for r in 0..*rows {
                                for c in 0..w {
                                    g[r * w + c] = g[r * w + c] + gout[r * total + off + c];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::SliceRow { row, cols } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for c in 0..*cols {
                            g[row * cols + c] = g[row * cols + c] + gout[c];
                        }
                    });
                }
            }
            Op::SliceCols { lo, hi, rows, cols } => {
                if needs[0] {
                    let w = hi - lo;
                    Self::accumulate(scratch, entry.inputs[0], rows * cols, |g| {
                        for r in 0..*rows {
                            for c in 0..w {
                                g[r * cols + lo + c] = g[r * cols + lo + c] + gout[r * w + c];
                            }
                        }
                    });
                }
            }
            Op::Reshape => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], in_len(0), |g| {
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi = *gi + go;
                        }
                    });
                }
            }
            Op::Transpose { rows, cols } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], rows * cols, |g| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                g[r * cols + c] = g[r * cols + c] + gout[c * rows + r];
                            }
                        }
                    });
                }
            }
            Op::Relu => {
                if needs[0] {
                    let x = &self.slots[entry.inputs[0].0].data;
                    Self::accumulate(scratch, entry.inputs[0], x.len(), |g| {
                        for i in 0..g.len() {
                            if x[i] > E::zero() {
                                g[i] = g[i] + gout[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid => {
                if needs[0] {
                    let y = &self.slots[entry.output.0].data;
                    Self::accumulate(scratch, entry.inputs[0], y.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * y[i] * (E::one() - y[i]);
                        }
                    });
                }
            }
            Op::Tanh => {
                if needs[0] {
                    let y = &self.slots[entry.output.0].data;
                    Self::accumulate(scratch, entry.inputs[0], y.len(), |g| {
                        for i in 0..g.len() {
                            g[i] = g[i] + gout[i] * (E::one() - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Softmax { lane, inner } => {
                if needs[0] {
                    let y = &self.slots[entry.output.0].data;
                    let (lane, inner) = (*lane, *inner);
                    let outer = y.len() / (lane * inner);
                    Self::accumulate(scratch, entry.inputs[0], y.len(), |g| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = E::zero();
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    dot = dot + gout[idx] * y[idx];
                                }
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    g[idx] = g[idx] + y[idx] * (gout[idx] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { feat, mean, invstd } => {
                let x = &self.slots[entry.inputs[0].0].data;
                let gamma = &self.slots[entry.inputs[1].0].data;
                let rows = x.len() / feat;
                let nf = E::from_f64(*feat as f64);
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], x.len(), |g| {
                        for r in 0..rows {
                            let (m, is) = (mean[r], invstd[r]);
                            let mut sum_dxh = E::zero();
                            let mut sum_dxh_xh = E::zero();
                            for c in 0..*feat {
                                let idx = r * feat + c;
                                let xh = (x[idx] - m) * is;
                                let dxh = gout[idx] * gamma[c];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                            for c in 0..*feat {
                                let idx = r * feat + c;
                                let xh = (x[idx] - m) * is;
                                let dxh = gout[idx] * gamma[c];
                                g[idx] = g[idx] + is * (dxh - sum_dxh / nf - xh * sum_dxh_xh / nf);
                            }
                        }
                    });
                }
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], *feat, |g| {
                        for r in 0..rows {
                            let (m, is) = (mean[r], invstd[r]);
                            for c in 0..*feat {
                                let idx = r * feat + c;
                                g[c] = g[c] + gout[idx] * (x[idx] - m) * is;
                            }
                        }
                    });
                }
                if needs[2] {
                    Self::accumulate(scratch, entry.inputs[2], *feat, |g| {
                        for r in 0..rows {
                            for c in 0..*feat {
                                g[c] = g[c] + gout[r * feat + c];
                            }
                        }
                    });
                }
            }
            Op::BatchNormTrain { spatial, mean, invstd } => {
                let x = &self.slots[entry.inputs[0].0].data;
                let gamma = &self.slots[entry.inputs[1].0].data;
                let channels = gamma.len();
                let ns = E::from_f64(*spatial as f64);
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], x.len(), |g| {
                        for c in 0..channels {
                            let (m, is, gc) = (mean[c], invstd[c], gamma[c]);
                            let mut sum_dxh = E::zero();
                            let mut sum_dxh_xh = E::zero();
                            for i in 0..*spatial {
                                let idx = c * spatial + i;
                                let xh = (x[idx] - m) * is;
                                let dxh = gout[idx] * gc;
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                            for i in 0..*spatial {
                                let idx = c * spatial + i;
                                let xh = (x[idx] - m) * is;
                                let dxh = gout[idx] * gc;
                                g[idx] = g[idx] + is * (dxh - sum_dxh / ns - xh * sum_dxh_xh / ns);
                            }
                        }
                    });
                }
                self.bn_affine_grads(entry, gout, scratch, &needs, x, mean, invstd, *spatial, channels);
            }
            Op::BatchNormEval { spatial, mean, invstd } => {
                let x = &self.slots[entry.inputs[0].0].data;
                let gamma = &self.slots[entry.inputs[1].0].data;
                let channels = gamma.len();
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], x.len(), |g| {
                        for c in 0..channels {
                            let scale = gamma[c] * invstd[c];
                            for i in 0..*spatial {
                                let idx = c * spatial + i;
                                g[idx] = g[idx] + gout[idx] * scale;
                            }
                        }
                    });
                }
                self.bn_affine_grads(entry, gout, scratch, &needs, x, mean, invstd, *spatial, channels);
            }
            Op::Dropout { mask, scale } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], mask.len(), |g| {
                        for i in 0..g.len() {
                            if mask[i] {
                                g[i] = g[i] + gout[i] * *scale;
                            }
                        }
                    });
                }
            }
            Op::Conv3d(dims) => {
                let x = &self.slots[entry.inputs[0].0].data;
                let w = &self.slots[entry.inputs[1].0].data;
                if needs[1] {
                    Self::accumulate(scratch, entry.inputs[1], w.len(), |gw| {
                        E::conv_backward_weight(dims, x, gout, gw);
                    });
                }
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], x.len(), |gx| {
                        E::conv_backward_input(dims, w, gout, gx);
                    });
                }
            }
            Op::Gap3d { spatial } => {
                if needs[0] {
                    let channels = gout.len();
                    let inv = E::one() / E::from_f64(*spatial as f64);
                    Self::accumulate(scratch, entry.inputs[0], channels * spatial, |g| {
                        for c in 0..channels {
                            let go = gout[c] * inv;
                            for i in 0..*spatial {
                                g[c * spatial + i] = g[c * spatial + i] + go;
                            }
                        }
                    });
                }
            }
            Op::MaxPool3d { argmax, in_len } => {
                if needs[0] {
                    Self::accumulate(scratch, entry.inputs[0], *in_len, |g| {
                        for (o, &i) in argmax.iter().enumerate() {
                            g[i] = g[i] + gout[o];
                        }
                    });
                }
            }
            Op::CrossEntropy { labels, probs } => {
                if needs[0] {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let go = gout[0] / E::from_f64(batch as f64);
                    Self::accumulate(scratch, entry.inputs[0], probs.len(), |g| {
                        for (bi, &y) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let idx = bi * classes + c;
                                let ind = if c == y { E::one() } else { E::zero() };
                                g[idx] = g[idx] + go * (probs[idx] - ind);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_affine_grads(
        &self,
        entry: &Entry<E>,
        gout: &[E],
        scratch: &mut [Option<Vec<E>>],
        needs: &[bool],
        x: &[E],
        mean: &[E],
        invstd: &[E],
        spatial: usize,
        channels: usize,
    ) {
        if needs[1] {
            Self::accumulate(scratch, entry.inputs[1], channels, |g| {
                for c in 0..channels {
                    let (m, is) = (mean[c], invstd[c]);
                    let mut s = E::zero();
                    for i in 0..spatial {
                        let idx = c * spatial + i;
                        s = s + gout[idx] * (x[idx] - m) * is;
                    }
                    g[c] = g[c] + s;
                }
            });
        }
        if needs[2] {
            Self::accumulate(scratch, entry.inputs[2], channels, |g| {
                for c in 0..channels {
                    let s: E = gout[c * spatial..(c + 1) * spatial].iter().copied().sum();
                    g[c] = g[c] + s;
                }
            });
        }
    }
}

/// c(m,k) += a(m,n) . b(k,n)^T
fn gemm_nt<E: Element>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    gemm_strided(m, n, k, a, n as isize, 1, b, 1, n as isize, c);
}

/// c(k,n) += a(m,k)^T . b(m,n)
fn gemm_tn<E: Element>(k: usize, m: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    gemm_strided(k, m, n, a, 1, k as isize, b, n as isize, 1, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    c: &mut [E],
) {
    // Route through the typed gemm by materializing the strided views.
    // Sizes here are transformer-scale (<= a few thousand square), so the
    // copies are cheap relative to the multiply.
    let mut at = vec![E::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            at[i * k + j] = a[(i as isize * rsa + j as isize * csa) as usize];
        }
    }
    let mut bt = vec![E::zero(); k * n];
    for i in 0..k {
        for j in 0..n {
            bt[i * n + j] = b[(i as isize * rsb + j as isize * csb) as usize];
        }
    }
    E::gemm(m, k, n, E::one(), &at, &bt, E::one(), c);
}
