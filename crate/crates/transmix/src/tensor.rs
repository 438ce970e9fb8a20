//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The operation set covers exactly what the vision transformer needs:
//! matrix products, row softmax, layer norm, GELU, concatenation/slicing
//! for token bookkeeping, and a fused soft-label cross-entropy.
//!
//! Gradients are computed with a define-by-run [`Tape`]: every operation
//! records a node, and [`Tape::backward`] replays the nodes in reverse,
//! accumulating `d loss / d tensor` into each tensor's `grad` buffer.
//! A tape and its tensors form a single-threaded unit of work; the tape
//! is rebuilt on every forward pass.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type for tensors: f32 for training, f64 for gradient checking.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + std::iter::Sum + std::fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact-CDF GELU.
    fn erf(self) -> Self;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(0);

struct Storage<T> {
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
}

/// Shared handle to a dense tensor. Cloning is cheap and aliases storage.
pub struct Tensor<T: Real> {
    st: Rc<Storage<T>>,
    id: u64,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            st: Rc::clone(&self.st),
            id: self.id,
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.st.shape)
            .field("requires_grad", &self.st.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            st: Rc::new(Storage {
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
            }),
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Constant tensor (no gradient requested).
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        Self::build(shape, values, false)
    }

    /// Trainable tensor: `backward` will populate its `grad`.
    pub fn param(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        Self::build(shape, values, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::build(shape, vec![T::zero(); numel], false).expect("positive dims")
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.st.shape
    }

    pub fn numel(&self) -> usize {
        self.st.shape.iter().product()
    }

    /// Row/column view of a rank-2 tensor's shape.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.st.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "expected rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.st.requires_grad
    }

    /// Monotone creation id; later tensors have larger ids.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.st.values.borrow().clone()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.st.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.st.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.st.grad.borrow_mut() = None;
    }

    /// Overwrite values in place (optimizer updates, checkpoint restore).
    pub fn set_values(&self, values: &[T]) {
        let mut v = self.st.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length mismatch");
        v.copy_from_slice(values);
    }

    /// Add `delta` to one entry; used by finite-difference probes.
    pub fn nudge(&self, index: usize, delta: T) {
        self.st.values.borrow_mut()[index] += delta;
    }

    pub fn is_finite(&self) -> bool {
        self.st.values.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.st.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn seed_grad_ones(&self) {
        *self.st.grad.borrow_mut() = Some(vec![T::one(); self.numel()]);
    }
}

// ── kernels ──────────────────────────────────────────────────────────

/// out += a · b with a: m×k, b: k×n. The ikj order keeps the inner loop
/// over contiguous rows of `b` and `out` so it autovectorizes.
fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_it * bv;
            }
        }
    }
}

fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn softmax_rows_kernel<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        // Denominator accumulated in f64 so that rows sum to 1 well within
        // the 1e-6 contract even in single precision.
        let mut denom = 0.0f64;
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            denom += e.as_f64();
        }
        let inv = T::from_f64(1.0 / denom);
        for o in out_row.iter_mut() {
            *o *= inv;
        }
    }
    out
}

fn gelu_value<T: Real>(x: T) -> T {
    // Exact Gaussian-CDF form x·Φ(x), not the tanh approximation.
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.3989422804014326779399460599343819);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

// ── tape ─────────────────────────────────────────────────────────────

enum Node<T: Real> {
    Matmul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// out = a · bᵀ with a: m×k, b: n×k.
    MatmulBt {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    /// Matrix plus a broadcast row (bias add).
    AddRow {
        m: Tensor<T>,
        row: Tensor<T>,
        out: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
        out: Tensor<T>,
    },
    Scale {
        x: Tensor<T>,
        factor: T,
        out: Tensor<T>,
    },
    SoftmaxRows {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        out: Tensor<T>,
        inv_std: Vec<T>,
        normalized: Vec<T>,
    },
    Gelu {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    ConcatRows {
        parts: Vec<Tensor<T>>,
        out: Tensor<T>,
    },
    ConcatCols {
        parts: Vec<Tensor<T>>,
        out: Tensor<T>,
    },
    SliceRows {
        x: Tensor<T>,
        out: Tensor<T>,
        start: usize,
    },
    SumAll {
        x: Tensor<T>,
        out: Tensor<T>,
    },
    SoftCrossEntropy {
        logits: Tensor<T>,
        out: Tensor<T>,
        probs: Vec<T>,
        targets: Vec<T>,
    },
}

/// Define-by-run recorder. One tape per forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only tape: values are computed, nothing is recorded.
    /// Used by evaluation loops and finite-difference probes.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record(&mut self, node: Node<T>) {
        if self.recording {
            self.nodes.push(node);
        }
    }

    /// out[i][j] = Σ_t a[i][t]·b[t][j]
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = a.dims2()?;
        let (kb, n) = b.dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            &a.st.values.borrow(),
            &b.st.values.borrow(),
            &mut out,
            m,
            ka,
            n,
        );
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.record(Node::Matmul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// out = a · bᵀ with a: m×k, b: n×k; used for attention scores q·kᵀ.
    pub fn matmul_bt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = a.dims2()?;
        let (n, kb) = b.dims2()?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul_bt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let bt = transpose(&b.st.values.borrow(), n, ka);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(&a.st.values.borrow(), &bt, &mut out, m, ka, n);
        let out = Tensor::from_vec(vec![m, n], out)?;
        self.record(Node::MatmulBt {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "add",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let av = a.st.values.borrow();
        let bv = b.st.values.borrow();
        let out: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect();
        drop(av);
        drop(bv);
        let out = Tensor::from_vec(a.shape().to_vec(), out)?;
        self.record(Node::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Broadcast add of a length-n row vector to every row of an m×n matrix.
    pub fn add_row(&mut self, m: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = m.dims2()?;
        if row.numel() != cols {
            return Err(Error::Shape {
                op: "add_row",
                left: m.shape().to_vec(),
                right: row.shape().to_vec(),
            });
        }
        let mv = m.st.values.borrow();
        let rv = row.st.values.borrow();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = mv[r * cols + c] + rv[c];
            }
        }
        drop(mv);
        drop(rv);
        let out = Tensor::from_vec(vec![rows, cols], out)?;
        self.record(Node::AddRow {
            m: m.clone(),
            row: row.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let av = a.st.values.borrow();
        let bv = b.st.values.borrow();
        let out: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect();
        drop(av);
        drop(bv);
        let out = Tensor::from_vec(a.shape().to_vec(), out)?;
        self.record(Node::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor<T>, factor: T) -> Tensor<T> {
        let out: Vec<T> = x.st.values.borrow().iter().map(|&v| v * factor).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), out).expect("same shape");
        self.record(Node::Scale {
            x: x.clone(),
            factor,
            out: out.clone(),
        });
        out
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = x.dims2()?;
        let out = softmax_rows_kernel(&x.st.values.borrow(), rows, cols);
        let out = Tensor::from_vec(vec![rows, cols], out)?;
        self.record(Node::SoftmaxRows {
            x: x.clone(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let (rows, cols) = x.dims2()?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let xv = x.st.values.borrow();
        let gv = gamma.st.values.borrow();
        let bv = beta.st.values.borrow();
        let n = T::from_f64(cols as f64);
        let mut out = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut normalized = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().cloned().sum::<T>() / n;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for c in 0..cols {
                let nh = (row[c] - mean) * is;
                normalized[r * cols + c] = nh;
                out[r * cols + c] = gv[c] * nh + bv[c];
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        let out = Tensor::from_vec(vec![rows, cols], out)?;
        self.record(Node::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            inv_std,
            normalized,
        });
        Ok(out)
    }

    pub fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let out: Vec<T> = x.st.values.borrow().iter().map(|&v| gelu_value(v)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), out).expect("same shape");
        self.record(Node::Gelu {
            x: x.clone(),
            out: out.clone(),
        });
        out
    }

    /// Stack rank-2 tensors vertically; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, cols) = parts[0].dims2()?;
        let mut total_rows = 0;
        let mut values = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            total_rows += r;
            values.extend_from_slice(&p.st.values.borrow());
        }
        let out = Tensor::from_vec(vec![total_rows, cols], values)?;
        self.record(Node::ConcatRows {
            parts: parts.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    /// Concatenate rank-2 tensors side by side; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (rows, _) = parts[0].dims2()?;
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut values = vec![T::zero(); rows * total_cols];
        let mut col_off = 0;
        for p in parts {
            let (_, c) = p.dims2()?;
            let pv = p.st.values.borrow();
            for r in 0..rows {
                values[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let out = Tensor::from_vec(vec![rows, total_cols], values)?;
        self.record(Node::ConcatCols {
            parts: parts.to_vec(),
            out: out.clone(),
        });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, cols) = x.dims2()?;
        if start + len > rows || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of bounds for {rows} rows",
                start + len
            )));
        }
        let values = x.st.values.borrow()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(vec![len, cols], values)?;
        self.record(Node::SliceRows {
            x: x.clone(),
            out: out.clone(),
            start,
        });
        Ok(out)
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let s: T = x.st.values.borrow().iter().cloned().sum();
        let out = Tensor::scalar(s);
        self.record(Node::SumAll {
            x: x.clone(),
            out: out.clone(),
        });
        out
    }

    /// Mean over the batch of −Σ_c t_c·log softmax(logits)_c.
    /// `targets` rows are probability vectors and are treated as constants.
    pub fn soft_cross_entropy(&mut self, logits: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
        let (batch, classes) = logits.dims2()?;
        if targets.len() != batch * classes {
            return Err(Error::Shape {
                op: "soft_cross_entropy",
                left: logits.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let lv = logits.st.values.borrow();
        let mut probs = vec![T::zero(); batch * classes];
        let mut total = T::zero();
        for r in 0..batch {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            let mut row_loss = T::zero();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
                row_loss += targets[r * classes + c] * (lse - row[c]);
            }
            total += row_loss;
        }
        drop(lv);
        let loss = total / T::from_f64(batch as f64);
        let out = Tensor::scalar(loss);
        self.record(Node::SoftCrossEntropy {
            logits: logits.clone(),
            out: out.clone(),
            probs,
            targets: targets.to_vec(),
        });
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` for every tensor
    /// reachable from the loss; fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad_ones();
        for node in self.nodes.iter().rev() {
            step_backward(node);
        }
        Ok(())
    }
}

fn step_backward<T: Real>(node: &Node<T>) {
    match node {
        Node::Matmul { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, k) = a.dims2().expect("recorded");
            let (_, n) = b.dims2().expect("recorded");
            // dA = dOut · bᵀ
            let bt = transpose(&b.st.values.borrow(), k, n);
            let mut d_a = vec![T::zero(); m * k];
            matmul_acc(&d_out, &bt, &mut d_a, m, n, k);
            a.accumulate_grad(&d_a);
            // dB = aᵀ · dOut
            let at = transpose(&a.st.values.borrow(), m, k);
            let mut d_b = vec![T::zero(); k * n];
            matmul_acc(&at, &d_out, &mut d_b, k, m, n);
            b.accumulate_grad(&d_b);
        }
        Node::MatmulBt { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            let (m, k) = a.dims2().expect("recorded");
            let (n, _) = b.dims2().expect("recorded");
            // dA = dOut · B
            let mut d_a = vec![T::zero(); m * k];
            matmul_acc(&d_out, &b.st.values.borrow(), &mut d_a, m, n, k);
            a.accumulate_grad(&d_a);
            // dB = dOutᵀ · A
            let d_out_t = transpose(&d_out, m, n);
            let mut d_b = vec![T::zero(); n * k];
            matmul_acc(&d_out_t, &a.st.values.borrow(), &mut d_b, n, m, k);
            b.accumulate_grad(&d_b);
        }
        Node::Add { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            a.accumulate_grad(&d_out);
            b.accumulate_grad(&d_out);
        }
        Node::AddRow { m, row, out } => {
            let Some(d_out) = out.grad() else { return };
            let (rows, cols) = m.dims2().expect("recorded");
            m.accumulate_grad(&d_out);
            let mut d_row = vec![T::zero(); cols];
            for r in 0..rows {
                for c in 0..cols {
                    d_row[c] += d_out[r * cols + c];
                }
            }
            row.accumulate_grad(&d_row);
        }
        Node::Mul { a, b, out } => {
            let Some(d_out) = out.grad() else { return };
            let bv = b.st.values.borrow();
            let d_a: Vec<T> = d_out.iter().zip(bv.iter()).map(|(&d, &v)| d * v).collect();
            drop(bv);
            a.accumulate_grad(&d_a);
            let av = a.st.values.borrow();
            let d_b: Vec<T> = d_out.iter().zip(av.iter()).map(|(&d, &v)| d * v).collect();
            drop(av);
            b.accumulate_grad(&d_b);
        }
        Node::Scale { x, factor, out } => {
            let Some(d_out) = out.grad() else { return };
            let d_x: Vec<T> = d_out.iter().map(|&d| d * *factor).collect();
            x.accumulate_grad(&d_x);
        }
        Node::SoftmaxRows { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let (rows, cols) = x.dims2().expect("recorded");
            let y = out.st.values.borrow();
            let mut d_x = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let base = r * cols;
                let mut dot = T::zero();
                for c in 0..cols {
                    dot += d_out[base + c] * y[base + c];
                }
                for c in 0..cols {
                    d_x[base + c] = y[base + c] * (d_out[base + c] - dot);
                }
            }
            x.accumulate_grad(&d_x);
        }
        Node::LayerNorm {
            x,
            gamma,
            beta,
            out,
            inv_std,
            normalized,
        } => {
            let Some(d_out) = out.grad() else { return };
            let (rows, cols) = x.dims2().expect("recorded");
            let gv = gamma.st.values.borrow();
            let n = T::from_f64(cols as f64);
            let mut d_x = vec![T::zero(); rows * cols];
            let mut d_gamma = vec![T::zero(); cols];
            let mut d_beta = vec![T::zero(); cols];
            for r in 0..rows {
                let base = r * cols;
                let mut sum_g = T::zero();
                let mut sum_gn = T::zero();
                for c in 0..cols {
                    let g = d_out[base + c] * gv[c];
                    sum_g += g;
                    sum_gn += g * normalized[base + c];
                    d_gamma[c] += d_out[base + c] * normalized[base + c];
                    d_beta[c] += d_out[base + c];
                }
                let mean_g = sum_g / n;
                let mean_gn = sum_gn / n;
                for c in 0..cols {
                    let g = d_out[base + c] * gv[c];
                    d_x[base + c] = inv_std[r] * (g - mean_g - normalized[base + c] * mean_gn);
                }
            }
            drop(gv);
            x.accumulate_grad(&d_x);
            gamma.accumulate_grad(&d_gamma);
            beta.accumulate_grad(&d_beta);
        }
        Node::Gelu { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let xv = x.st.values.borrow();
            let d_x: Vec<T> = d_out
                .iter()
                .zip(xv.iter())
                .map(|(&d, &v)| d * gelu_derivative(v))
                .collect();
            drop(xv);
            x.accumulate_grad(&d_x);
        }
        Node::ConcatRows { parts, out } => {
            let Some(d_out) = out.grad() else { return };
            let mut offset = 0;
            for p in parts {
                let len = p.numel();
                p.accumulate_grad(&d_out[offset..offset + len]);
                offset += len;
            }
        }
        Node::ConcatCols { parts, out } => {
            let Some(d_out) = out.grad() else { return };
            let (rows, total_cols) = out.dims2().expect("recorded");
            let mut col_off = 0;
            for p in parts {
                let (_, c) = p.dims2().expect("recorded");
                let mut d_p = vec![T::zero(); rows * c];
                for r in 0..rows {
                    d_p[r * c..(r + 1) * c].copy_from_slice(
                        &d_out[r * total_cols + col_off..r * total_cols + col_off + c],
                    );
                }
                p.accumulate_grad(&d_p);
                col_off += c;
            }
        }
        Node::SliceRows { x, out, start } => {
            let Some(d_out) = out.grad() else { return };
            let (rows, cols) = x.dims2().expect("recorded");
            let (len, _) = out.dims2().expect("recorded");
            let mut d_x = vec![T::zero(); rows * cols];
            d_x[start * cols..(start + len) * cols].copy_from_slice(&d_out);
            x.accumulate_grad(&d_x);
        }
        Node::SumAll { x, out } => {
            let Some(d_out) = out.grad() else { return };
            let d_x = vec![d_out[0]; x.numel()];
            x.accumulate_grad(&d_x);
        }
        Node::SoftCrossEntropy {
            logits,
            out,
            probs,
            targets,
        } => {
            let Some(d_out) = out.grad() else { return };
            let (batch, classes) = logits.dims2().expect("recorded");
            let scale = d_out[0] / T::from_f64(batch as f64);
            let mut d_logits = vec![T::zero(); batch * classes];
            for r in 0..batch {
                let base = r * classes;
                let target_mass: T = targets[base..base + classes].iter().cloned().sum();
                for c in 0..classes {
                    d_logits[base + c] =
                        scale * (probs[base + c] * target_mass - targets[base + c]);
                }
            }
            logits.accumulate_grad(&d_logits);
        }
    }
}
