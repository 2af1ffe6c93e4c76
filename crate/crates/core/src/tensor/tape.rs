use std::borrow::Cow;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Additive pre-softmax surrogate for a masked logit.
pub const MASK_NEG: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ConstMul(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    NormalizeRows {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Pick {
        x: Var,
        at: Vec<(usize, usize)>,
    },
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
///
/// Every value is a row-major `rows × cols` matrix. Nodes are appended in
/// execution order, so a reverse sweep over the node list is a valid
/// topological order for backpropagation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
///
/// Only nodes that (transitively) depend on a gradient-tracking leaf
/// carry an entry.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.push(rows, cols, Cow::Owned(value), op, needs_grad)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Records a parameter without copying it. Gradients flow to the leaf
    /// iff the tensor participates in gradients.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Records a parameter as a constant regardless of its flag.
    pub fn leaf_frozen(&mut self, t: &'a Tensor) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.input(rows, cols, data, false)
    }

    /// Gradient-tracking input that is not backed by a parameter tensor.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.input(rows, cols, data, true)
    }

    fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(shape_err("input", (rows, cols), (data.len(), 1)));
        }
        Ok(self.push_owned(rows, cols, data, Op::Leaf, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (r, k), (k2, c)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * c..(p + 1) * c];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: r×k`, `b: c×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (c, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_t", (r, k), (c, k2)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * c + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::MatMulT(a, b), ng))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(op, self.dims(a), self.dims(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::Mul(a, b), ng))
    }

    /// Adds the single row `b` (1×c) to every row of `a` (r×c).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(b) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.dims(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push_owned(r, c, out, Op::AddRow(a, b), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push_owned(r, c, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Multiplies by a 0/1 pattern; masked entries receive no gradient.
    pub fn mask(&mut self, a: Var, pattern: &[f64]) -> Result<Var> {
        if pattern.iter().any(|&p| p != 0.0 && p != 1.0) {
            return Err(Error::contract("mask pattern must be 0/1"));
        }
        self.const_mul(a, pattern.to_vec())
    }

    /// Inverted dropout. A zero rate records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::contract("dropout rate must be < 1"));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let pattern = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.const_mul(a, pattern)
    }

    fn const_mul(&mut self, a: Var, pattern: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if pattern.len() != r * c {
            return Err(shape_err("mask", (r, c), (pattern.len(), 1)));
        }
        let out = self.value(a).iter().zip(&pattern).map(|(x, p)| x * p).collect();
        let ng = self.ng(a);
        Ok(self.push_owned(r, c, out, Op::ConstMul(a, pattern), ng))
    }

    /// Row-wise softmax of `a + additive_mask`.
    pub fn softmax_rows(&mut self, a: Var, additive_mask: Option<&[f64]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(m) = additive_mask {
            if m.len() != r * c {
                return Err(shape_err("softmax_rows", (r, c), (m.len(), 1)));
            }
        }
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                row[j] = av[i * c + j];
            }
            if let Some(m) = additive_mask {
                let mrow = &m[i * c..(i + 1) * c];
                if mrow.iter().all(|&x| x <= MASK_NEG) {
                    return Err(Error::DegenerateRow { row: i });
                }
                row.iter_mut().zip(mrow).for_each(|(x, mk)| *x += mk);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let ng = self.ng(a);
        Ok(self.push_owned(r, c, out, Op::Softmax(a), ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(a);
        self.push_owned(r, c, out, Op::LogSoftmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.dims(x);
        if d < 2 {
            return Err(Error::contract("layer_norm needs at least 2 features"));
        }
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(shape_err("layer_norm", (r, d), self.dims(gain)));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = gv[j] * h + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push_owned(
            r,
            d,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row gather. `None` ids produce a constant zero row.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::contract("gather needs at least one id"));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (k, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= v {
                    return Err(Error::Index { id, bound: v });
                }
                out[k * d..(k + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let ng = self.ng(table);
        Ok(self.push_owned(
            ids.len(),
            d,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(shape_err("concat_rows", (rows, c), (r, pc)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push_owned(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start, len)));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push_owned(len, c, out, Op::SliceRows(a, start), ng))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let r = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(shape_err("concat_cols", (r, total), (pr, pc)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push_owned(r, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", (r, c), (start, len)));
        }
        let av = self.value(a);
        let out = (0..r)
            .flat_map(|i| av[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push_owned(r, len, out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows * cols != r * c || rows == 0 {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push_owned(rows, cols, out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push_owned(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push_owned(1, 1, vec![s], Op::MeanAll(a), ng)
    }

    /// Sums each row: r×c → r×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push_owned(r, 1, out, Op::RowSum(a), ng)
    }

    /// Row-wise dot products of two equally shaped matrices: r×c → r×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.row_sum(m))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let av = self.value(a);
        let mut inv_norm = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateRepresentation { index: i });
            }
            let inv = 1.0 / norm;
            inv_norm.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        let ng = self.ng(a);
        Ok(self.push_owned(r, c, out, Op::NormalizeRows { x: a, inv_norm }, ng))
    }

    /// Gathers individual entries into a k×1 column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if at.is_empty() {
            return Err(Error::contract("pick of nothing"));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(shape_err("pick", (r, c), (i, j)));
            }
            out.push(av[i * c + j]);
        }
        let ng = self.ng(a);
        Ok(self.push_owned(
            at.len(),
            1,
            out,
            Op::Pick {
                x: a,
                at: at.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.ng(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let k = self.dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for p in 0..k {
                            let brow = &bv[p * cols..(p + 1) * cols];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a);
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * cols..(p + 1) * cols];
                            drow.iter_mut().zip(grow).for_each(|(d, gg)| *d += x * gg);
                        }
                    }
                }
            }
            &Op::MatMulT(a, b) => {
                let k = self.dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for r in 0..rows {
                        let drow = &mut da[r * k..(r + 1) * k];
                        for j in 0..cols {
                            let gg = g[r * cols + j];
                            if gg == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            drow.iter_mut().zip(brow).for_each(|(d, x)| *d += gg * x);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a);
                    for r in 0..rows {
                        let arow = &av[r * k..(r + 1) * k];
                        for j in 0..cols {
                            let gg = g[r * cols + j];
                            if gg == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * k..(j + 1) * k];
                            drow.iter_mut().zip(arow).for_each(|(d, x)| *d += gg * x);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv.iter()) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a);
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av.iter()) {
                        *d += x * y;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
                }
            }
            &Op::Relu(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, x), out) in da.iter_mut().zip(g).zip(y.iter()) {
                        if *out > 0.0 {
                            *d += x;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, x), s) in da.iter_mut().zip(g).zip(y.iter()) {
                        *d += x * s * (1.0 - s);
                    }
                }
            }
            &Op::Softplus(a) => {
                if let Some(da) = self.slot(grads, a) {
                    let av = self.value(a);
                    for ((d, x), z) in da.iter_mut().zip(g).zip(av.iter()) {
                        *d += x * sigmoid(*z);
                    }
                }
            }
            Op::ConstMul(a, pattern) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, x), p) in da.iter_mut().zip(g).zip(pattern) {
                        *d += x * p;
                    }
                }
            }
            &Op::Softmax(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            da[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(da) = self.slot(grads, a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            da[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = cols;
                if let Some(dg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let gv = self.value(*gain);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += scale * (d as f64 * dxhat[j] - sum - hr[j] * dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (k, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            add_into(&mut dt[id * cols..(id + 1) * cols], &g[k * cols..(k + 1) * cols]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        add_into(dp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::SliceRows(a, start) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(&mut da[start * cols..(start + rows) * cols], g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..rows {
                            add_into(
                                &mut dp[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            &Op::SliceCols(a, start) => {
                let ac = self.dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    for r in 0..rows {
                        add_into(
                            &mut da[r * ac + start..r * ac + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
            }
            &Op::SumAll(a) => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::MeanAll(a) => {
                if let Some(da) = self.slot(grads, a) {
                    let s = g[0] / da.len() as f64;
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::RowSum(a) => {
                let ac = self.dims(a).1;
                if let Some(da) = self.slot(grads, a) {
                    for r in 0..rows {
                        da[r * ac..(r + 1) * ac].iter_mut().for_each(|d| *d += g[r]);
                    }
                }
            }
            Op::NormalizeRows { x, inv_norm } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] += inv_norm[r] * (gr[j] - yr[j] * dot);
                        }
                    }
                }
            }
            Op::Pick { x, at } => {
                let xc = self.dims(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &(r, c)) in at.iter().enumerate() {
                        dx[r * xc + c] += g[k];
                    }
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first touch, or `None` when
    /// `v` does not participate in gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
