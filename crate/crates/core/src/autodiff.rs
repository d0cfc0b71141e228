//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every operation appends a node holding its value and enough of its
//! inputs to compute vector-Jacobian products. [`Tape::backward`] walks the
//! nodes in reverse, accumulating adjoints into every leaf that requires a
//! gradient.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the engine runs on: `f32` for training, `f64` for
/// verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major matrix; a scalar is `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| U::of(x.as_f64())).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MulConst(usize, Vec<T>),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    MaskedSoftmax(usize),
    ColSlice {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Gather {
        table: usize,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    PairNll {
        logits: usize,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug)]
pub struct Tape<T> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints for every node of a tape after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        let (r, c) = self.shapes[var.index];
        match &self.grads[var.index] {
            Some(g) => Tensor::new(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x);
    (value, deriv)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_into<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn matmul_bt_into<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn matmul_at_into<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.index
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[self.idx(v)]
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        assert_eq!(av.cols, bv.rows, "matmul inner dimensions");
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&mut out, &av.data, &bv.data, m, k, n);
        self.derived(Tensor::new(m, n, out), Op::MatMul(ai, bi), &[ai, bi])
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dimensions");
        let (m, k, n) = (av.rows, av.cols, bv.rows);
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(&mut out, &av.data, &bv.data, m, k, n);
        self.derived(Tensor::new(m, n, out), Op::MatMulBt(ai, bi), &[ai, bi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.rows, av.cols, data);
        self.derived(t, Op::Add(ai, bi), &[ai, bi])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ai, ri) = (self.idx(a), self.idx(row));
        let (av, rv) = (&self.nodes[ai].value, &self.nodes[ri].value);
        assert_eq!((1, av.cols), rv.shape(), "add_row shapes");
        let mut data = av.data.clone();
        for chunk in data.chunks_mut(av.cols) {
            for (x, &b) in chunk.iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let t = Tensor::new(av.rows, av.cols, data);
        self.derived(t, Op::AddRow(ai, ri), &[ai, ri])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        let t = Tensor::new(av.rows, av.cols, av.data.iter().map(|&x| x * factor).collect());
        self.derived(t, Op::Scale(ai, factor), &[ai])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, factors: Vec<T>) -> Var {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        assert_eq!(av.data.len(), factors.len(), "mul_const shapes");
        let data = av.data.iter().zip(&factors).map(|(&x, &f)| x * f).collect();
        let t = Tensor::new(av.rows, av.cols, data);
        self.derived(t, Op::MulConst(ai, factors), &[ai])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        let t = Tensor::new(av.rows, av.cols, av.data.iter().map(|&x| gelu_parts(x).0).collect());
        self.derived(t, Op::Gelu(ai), &[ai])
    }

    /// Per-row normalization followed by `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let xv = &self.nodes[xi].value;
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let n = xv.cols;
        assert_eq!(gv.shape(), (1, n), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, n), "layer_norm bias shape");
        let nf = T::of(n as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = Vec::with_capacity(xv.data.len());
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Vec::with_capacity(xv.data.len());
        for row in xv.data.chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                normalized.push(h);
                out.push(h * gv.data[j] + bv.data[j]);
            }
        }
        let t = Tensor::new(xv.rows, n, out);
        self.derived(
            t,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                normalized,
                inv_std,
            },
            &[xi, gi, bi],
        )
    }

    /// Row softmax where columns with `key_mask[j] == false` get zero mass.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Var {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        assert_eq!(av.cols, key_mask.len(), "masked_softmax mask length");
        let mut out = vec![T::zero(); av.data.len()];
        for (row, o) in av.data.chunks(av.cols).zip(out.chunks_mut(av.cols)) {
            let max = row
                .iter()
                .zip(key_mask)
                .filter(|(_, &m)| m)
                .fold(T::neg_infinity(), |a, (&v, _)| a.max(v));
            // Normaliser accumulated in f64 so long f32 rows still sum to 1.
            let mut total = 0f64;
            for ((&v, &m), slot) in row.iter().zip(key_mask).zip(o.iter_mut()) {
                if m {
                    *slot = (v - max).exp();
                    total += slot.as_f64();
                }
            }
            for slot in o.iter_mut() {
                *slot = T::of(slot.as_f64() / total);
            }
        }
        let t = Tensor::new(av.rows, av.cols, out);
        self.derived(t, Op::MaskedSoftmax(ai), &[ai])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.node(a).value.cols;
        self.masked_softmax(a, &vec![true; cols])
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ai = self.idx(a);
        let av = &self.nodes[ai].value;
        assert!(start + len <= av.cols, "col_slice out of range");
        let mut data = Vec::with_capacity(av.rows * len);
        for row in av.data.chunks(av.cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(av.rows, len, data);
        self.derived(t, Op::ColSlice { x: ai, start }, &[ai])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let rows = self.nodes[idx[0]].value.rows;
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                let v = &self.nodes[i].value;
                assert_eq!(v.rows, rows, "concat_cols row counts");
                data.extend_from_slice(v.row(r));
            }
        }
        let t = Tensor::new(rows, cols, data);
        let inputs = idx.clone();
        self.derived(t, Op::ConcatCols(idx), &inputs)
    }

    /// Rows of `table` selected by `rows`, in order.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let tv = &self.nodes[ti].value;
        let mut data = Vec::with_capacity(rows.len() * tv.cols);
        for &r in rows {
            if r >= tv.rows {
                return Err(Error::TokenOutOfRange { id: r, size: tv.rows });
            }
            data.extend_from_slice(tv.row(r));
        }
        let t = Tensor::new(rows.len(), tv.cols, data);
        Ok(self.derived(
            t,
            Op::Gather {
                table: ti,
                rows: rows.to_vec(),
            },
            &[ti],
        ))
    }

    /// Sum over rows with a target of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        assert_eq!(lv.rows, targets.len(), "cross_entropy target count");
        let mut probs = vec![T::zero(); lv.data.len()];
        let mut loss = T::zero();
        for ((row, p), t) in lv.data.chunks(lv.cols).zip(probs.chunks_mut(lv.cols)).zip(targets) {
            let Some(t) = *t else { continue };
            assert!(t < lv.cols, "cross_entropy target out of range");
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut total = T::zero();
            for (slot, &v) in p.iter_mut().zip(row) {
                *slot = (v - max).exp();
                total += *slot;
            }
            for slot in p.iter_mut() {
                *slot = *slot / total;
            }
            loss += total.ln() + max - row[t];
        }
        self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            &[li],
        )
    }

    /// Binary cross-entropy summed over rows of `n x 2` logits, with the
    /// class-1 softmax probability clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn pair_nll(&mut self, logits: Var, labels: &[u8]) -> Var {
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        assert_eq!(lv.shape(), (labels.len(), 2), "pair_nll expects n x 2 logits");
        let lo = T::of(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut probs = Vec::with_capacity(labels.len());
        let mut loss = T::zero();
        for (row, &y) in lv.data.chunks(2).zip(labels) {
            let p = two_class_probability(row[0], row[1]);
            let pc = p.max(lo).min(hi);
            loss -= if y == 1 { pc.ln() } else { (T::one() - pc).ln() };
            probs.push(p);
        }
        self.derived(
            Tensor::scalar(loss),
            Op::PairNll {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            &[li],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.nodes[ai].value.data.iter().fold(T::zero(), |acc, &v| acc + v);
        self.derived(Tensor::scalar(s), Op::Sum(ai), &[ai])
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss is not recorded on this tape".into()));
        }
        let shape = self.nodes[loss.index].value.shape();
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!("loss must be scalar, got {shape:?}")));
        }
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if output.tape != self.id || output.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("output is not recorded on this tape".into()));
        }
        if seed.shape() != self.nodes[output.index].value.shape() {
            return Err(Error::InvalidArgument("seed shape does not match output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.index] = Some(seed.data);
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if self.wants(*a) {
                    accumulate(&mut grads[*a], m * k, |ga| matmul_bt_into(ga, g, &bv.data, m, n, k));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[*b], k * n, |gb| matmul_at_into(gb, &av.data, g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.rows, av.cols, bv.rows);
                if self.wants(*a) {
                    accumulate(&mut grads[*a], m * k, |ga| matmul_into(ga, g, &bv.data, m, n, k));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[*b], n * k, |gb| matmul_at_into(gb, g, &av.data, m, n, k));
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if self.wants(x) {
                        accumulate(&mut grads[x], g.len(), |gx| {
                            gx.iter_mut().zip(g).for_each(|(s, &v)| *s += v)
                        });
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.wants(*a) {
                    accumulate(&mut grads[*a], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v));
                }
                if self.wants(*r) {
                    let n = out.cols;
                    accumulate(&mut grads[*r], n, |gr| {
                        for chunk in g.chunks(n) {
                            gr.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                        }
                    });
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    accumulate(&mut grads[*a], g.len(), |ga| ga.iter_mut().zip(g).for_each(|(s, &v)| *s += v * *f));
                }
            }
            Op::MulConst(a, factors) => {
                if self.wants(*a) {
                    accumulate(&mut grads[*a], g.len(), |ga| {
                        for ((s, &v), &f) in ga.iter_mut().zip(g).zip(factors) {
                            *s += v * f;
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let av = &self.nodes[*a].value;
                    accumulate(&mut grads[*a], g.len(), |ga| {
                        for ((s, &v), &x) in ga.iter_mut().zip(g).zip(&av.data) {
                            *s += v * gelu_parts(x).1;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = out.cols;
                let gv = &self.nodes[*gain].value.data;
                if self.wants(*x) {
                    let nf = T::of(n as f64);
                    accumulate(&mut grads[*x], g.len(), |gx| {
                        for r in 0..out.rows {
                            let gy = &g[r * n..(r + 1) * n];
                            let h = &normalized[r * n..(r + 1) * n];
                            let mut sum_d = T::zero();
                            let mut sum_dh = T::zero();
                            for j in 0..n {
                                let d = gy[j] * gv[j];
                                sum_d += d;
                                sum_dh += d * h[j];
                            }
                            let scale = inv_std[r] / nf;
                            for j in 0..n {
                                let d = gy[j] * gv[j];
                                gx[r * n + j] += scale * (nf * d - sum_d - h[j] * sum_dh);
                            }
                        }
                    });
                }
                if self.wants(*gain) {
                    accumulate(&mut grads[*gain], n, |gg| {
                        for (gy, h) in g.chunks(n).zip(normalized.chunks(n)) {
                            for j in 0..n {
                                gg[j] += gy[j] * h[j];
                            }
                        }
                    });
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[*bias], n, |gb| {
                        for gy in g.chunks(n) {
                            gb.iter_mut().zip(gy).for_each(|(s, &v)| *s += v);
                        }
                    });
                }
            }
            Op::MaskedSoftmax(a) => {
                if self.wants(*a) {
                    let n = out.cols;
                    accumulate(&mut grads[*a], g.len(), |ga| {
                        for r in 0..out.rows {
                            let y = &out.data[r * n..(r + 1) * n];
                            let gy = &g[r * n..(r + 1) * n];
                            let dot = y.iter().zip(gy).fold(T::zero(), |acc, (&p, &d)| acc + p * d);
                            for j in 0..n {
                                ga[r * n + j] += y[j] * (gy[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::ColSlice { x, start } => {
                if self.wants(*x) {
                    let xv = &self.nodes[*x].value;
                    let len = out.cols;
                    accumulate(&mut grads[*x], xv.data.len(), |gx| {
                        for r in 0..out.rows {
                            for j in 0..len {
                                gx[r * xv.cols + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    if self.wants(p) {
                        accumulate(&mut grads[p], pv.data.len(), |gp| {
                            for r in 0..out.rows {
                                for j in 0..pv.cols {
                                    gp[r * pv.cols + j] += g[r * out.cols + offset + j];
                                }
                            }
                        });
                    }
                    offset += pv.cols;
                }
            }
            Op::Gather { table, rows } => {
                if self.wants(*table) {
                    let tv = &self.nodes[*table].value;
                    let n = tv.cols;
                    accumulate(&mut grads[*table], tv.data.len(), |gt| {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..n {
                                gt[r * n + j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let n = self.nodes[*logits].value.cols;
                    let up = g[0];
                    accumulate(&mut grads[*logits], probs.len(), |gl| {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for j in 0..n {
                                gl[r * n + j] += up * probs[r * n + j];
                            }
                            gl[r * n + t] -= up;
                        }
                    });
                }
            }
            Op::PairNll { logits, labels, probs } => {
                if self.wants(*logits) {
                    let up = g[0];
                    let lo = T::of(PROB_CLAMP);
                    let hi = T::one() - lo;
                    accumulate(&mut grads[*logits], labels.len() * 2, |gl| {
                        for (r, (&y, &p)) in labels.iter().zip(probs).enumerate() {
                            if p < lo || p > hi {
                                continue;
                            }
                            let d = up * (p - T::of(y as f64));
                            gl[2 * r] -= d;
                            gl[2 * r + 1] += d;
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let len = self.nodes[*a].value.data.len();
                    accumulate(&mut grads[*a], len, |ga| ga.iter_mut().for_each(|s| *s += g[0]));
                }
            }
        }
    }
}

/// `softmax([z0, z1])[1]` in a form that stays finite for large logits.
pub fn two_class_probability<T: Real>(z0: T, z1: T) -> T {
    let d = z1 - z0;
    if d >= T::zero() {
        T::one() / (T::one() + (-d).exp())
    } else {
        let e = d.exp();
        e / (T::one() + e)
    }
}
