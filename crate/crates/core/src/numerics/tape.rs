//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Operations are recorded in creation order, which is a topological order of
//! the computation graph. [`Tape::backward`] walks the records in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    SegmentSum(Var, Rc<Vec<usize>>),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    RowSum(Var),
    Sum(Var),
    Select(Var, Var, Rc<Vec<bool>>),
    EdgeAggregate(Var, Var, Rc<Vec<(usize, usize)>>),
    Reshape(Var),
    LstmCell(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

/// `out[m x n] = a[m x k] * b[k x n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
fn matmul_grad_a(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
fn matmul_grad_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_segments(offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&rows) {
        return Err(Error::Shape(format!(
            "segment offsets must start at 0 and end at {rows}"
        )));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Shape("segments must be non-empty".into()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.len() != n {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &x) in row.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// Multiplies row `i` of `a` by `s[i]`, `s` being an `m x 1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        let n = av.cols();
        if sv.len() != av.rows() {
            return Err(shape_err("scale_rows", av, sv));
        }
        let mut out = av.clone();
        for (row, &f) in out.data_mut().chunks_mut(n.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleRows(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = f(*x));
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    /// Elementwise `max(x, slope * x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Softmax over all elements, shifted by the maximum for stability.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Invalid("softmax of an empty tensor".into()));
        }
        let max = av.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = av.clone();
        let mut total = 0.0;
        for x in out.data_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        out.data_mut().iter_mut().for_each(|x| *x /= total);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Softmax within contiguous segments of a column vector.
    ///
    /// `offsets` has one more entry than there are segments; segment `s`
    /// covers elements `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        check_segments(&offsets, av.len())?;
        let mut out = av.clone();
        for w in offsets.windows(2) {
            let seg = &mut out.data_mut()[w[0]..w[1]];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in seg.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            seg.iter_mut().for_each(|x| *x /= total);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSoftmax(a, offsets), rg))
    }

    /// Sums contiguous row segments: output row `s` is the sum of rows
    /// `offsets[s]..offsets[s + 1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        check_segments(&offsets, av.rows())?;
        let n = av.cols();
        let segs = offsets.len() - 1;
        let mut data = vec![0.0; segs * n];
        for (s, w) in offsets.windows(2).enumerate() {
            let out_row = &mut data[s * n..(s + 1) * n];
            for r in w[0]..w[1] {
                for (o, &x) in out_row.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
        }
        let out = Tensor::new(vec![segs, n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, offsets), rg))
    }

    /// Concatenates along `axis` (0 stacks rows, 1 joins columns).
    ///
    /// One-dimensional parts concatenated along axis 0 yield a
    /// one-dimensional result.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero parts".into()));
        }
        let first = self.value(parts[0]);
        let out = match axis {
            0 => {
                let all_1d = parts.iter().all(|&p| self.value(p).shape().len() == 1);
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if !all_1d && v.cols() != cols {
                        return Err(shape_err("concat", first, v));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                if all_1d {
                    Tensor::vector(data)
                } else {
                    Tensor::new(vec![rows, cols], data)?
                }
            }
            1 => {
                let rows = first.rows();
                let mut total = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != rows {
                        return Err(shape_err("concat", first, v));
                    }
                    total += v.cols();
                }
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
            _ => return Err(Error::Invalid(format!("concat axis {axis} unsupported"))),
        };
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::Shape(format!(
                "slice {start}..{end} out of range for shape {:?}",
                av.shape()
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    /// Row lookup, e.g. embedding tables.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices.iter() {
            if i >= av.rows() {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for {} rows",
                    av.rows()
                )));
            }
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices), rg))
    }

    /// Sums each row into an `m x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Row-wise choice: row `i` comes from `a` when `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, a: Var, b: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || mask.len() != av.rows() {
            return Err(shape_err("select_rows", av, bv));
        }
        let mut out = bv.clone();
        let n = av.cols();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[r * n..(r + 1) * n].copy_from_slice(av.row(r));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Select(a, b, mask), rg))
    }

    /// Weighted neighbour aggregation over an edge list:
    /// `out[i] = sum over edges e = (i, j) of weights[e] * x[j]`.
    ///
    /// Equivalent to a dense product `A x` where `A[i][j]` holds the weight of
    /// edge `(i, j)`. The output has as many rows as `x`.
    pub fn edge_aggregate(&mut self, weights: Var, x: Var, edges: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let (wv, xv) = (self.value(weights), self.value(x));
        if wv.len() != edges.len() {
            return Err(Error::Shape(format!(
                "edge_aggregate: {} weights for {} edges",
                wv.len(),
                edges.len()
            )));
        }
        let (rows, n) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; rows * n];
        for (&(i, j), &w) in edges.iter().zip(wv.data()) {
            if i >= rows || j >= rows {
                return Err(Error::Shape(format!("edge ({i}, {j}) outside {rows} nodes")));
            }
            let src = xv.row(j);
            for (o, &s) in data[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += w * s;
            }
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(&[weights, x]);
        Ok(self.push(out, Op::EdgeAggregate(weights, x, edges), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// One LSTM cell update from gate pre-activations.
    ///
    /// `z` is `m x 4h` with column blocks ordered input, forget, candidate,
    /// output; `c_prev` is `m x h`. Returns `m x 2h` holding the new hidden
    /// state in the first `h` columns and the new cell state in the rest.
    pub fn lstm_cell(&mut self, z: Var, c_prev: Var) -> Result<Var> {
        let (zv, cv) = (self.value(z), self.value(c_prev));
        let h = cv.cols();
        if zv.cols() != 4 * h || zv.rows() != cv.rows() {
            return Err(shape_err("lstm_cell", zv, cv));
        }
        let m = cv.rows();
        let mut data = vec![0.0; m * 2 * h];
        for r in 0..m {
            let zr = zv.row(r);
            let cr = cv.row(r);
            let out = &mut data[r * 2 * h..(r + 1) * 2 * h];
            for u in 0..h {
                let i = sigmoid(zr[u]);
                let f = sigmoid(zr[h + u]);
                let g = zr[2 * h + u].tanh();
                let o = sigmoid(zr[3 * h + u]);
                let c = f * cr[u] + i * g;
                out[u] = o * c.tanh();
                out[h + u] = c;
            }
        }
        let out = Tensor::new(vec![m, 2 * h], data)?;
        let rg = self.rg(&[z, c_prev]);
        Ok(self.push(out, Op::LstmCell(z, c_prev), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = self.acc(grads, *a) {
                    matmul_grad_a(gd, bv.data(), da, m, k, n);
                }
                if let Some(db) = self.acc(grads, *b) {
                    matmul_grad_b(av.data(), gd, db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * o;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = g.cols().max(1);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    for row in gd.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let n = g.cols().max(1);
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((drow, grow), &f) in d.chunks_mut(n).zip(gd.chunks(n)).zip(sv) {
                        drow.iter_mut().zip(grow).for_each(|(x, &y)| *x += y * f);
                    }
                }
                if let Some(d) = self.acc(grads, *s) {
                    for ((ds, grow), arow) in d.iter_mut().zip(gd.chunks(n)).zip(av.chunks(n)) {
                        *ds += grow.iter().zip(arow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y * c);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &y), &i) in d.iter_mut().zip(gd).zip(av) {
                        *x += if i > 0.0 { y } else { y * slope };
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(out) {
                        *x += y * o * (1.0 - o);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(out) {
                        *x += y * (1.0 - o * o);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let dot: f64 = gd.iter().zip(out).map(|(y, o)| y * o).sum();
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(out) {
                        *x += o * (y - dot);
                    }
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                if let Some(d) = self.acc(grads, *a) {
                    for w in offsets.windows(2) {
                        let r = w[0]..w[1];
                        let dot: f64 = gd[r.clone()].iter().zip(&out[r.clone()]).map(|(y, o)| y * o).sum();
                        for k in r {
                            d[k] += out[k] * (gd[k] - dot);
                        }
                    }
                }
            }
            Op::SegmentSum(a, offsets) => {
                let n = g.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (s, w) in offsets.windows(2).enumerate() {
                        let grow = &gd[s * n..(s + 1) * n];
                        for r in w[0]..w[1] {
                            d[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(d) = self.acc(grads, p) {
                            d.iter_mut()
                                .zip(&gd[offset..offset + len])
                                .for_each(|(x, &y)| *x += y);
                        }
                        offset += len;
                    }
                } else {
                    let total = g.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if let Some(d) = self.acc(grads, p) {
                            for (r, drow) in d.chunks_mut(w).enumerate() {
                                let src = &gd[r * total + col..r * total + col + w];
                                drow.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::SliceCols(a, start, end) => {
                let total = self.value(*a).cols();
                let w = end - start;
                if let Some(d) = self.acc(grads, *a) {
                    for (r, grow) in gd.chunks(w).enumerate() {
                        d[r * total + start..r * total + end]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let n = g.cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (k, &i) in indices.iter().enumerate() {
                        d[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&gd[k * n..(k + 1) * n])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::RowSum(a) => {
                let n = self.value(*a).cols();
                if let Some(d) = self.acc(grads, *a) {
                    for (drow, &y) in d.chunks_mut(n.max(1)).zip(gd) {
                        drow.iter_mut().for_each(|x| *x += y);
                    }
                }
            }
            Op::Sum(a) => {
                let y = gd[0];
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|x| *x += y);
                }
            }
            Op::Select(a, b, mask) => {
                let n = g.cols();
                for (v, take) in [(*a, true), (*b, false)] {
                    if let Some(d) = self.acc(grads, v) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == take {
                                d[r * n..(r + 1) * n]
                                    .iter_mut()
                                    .zip(&gd[r * n..(r + 1) * n])
                                    .for_each(|(x, &y)| *x += y);
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y);
                }
            }
            Op::LstmCell(z, c_prev) => {
                let (zv, cv) = (self.value(*z), self.value(*c_prev));
                let h = cv.cols();
                let m = cv.rows();
                let mut dz = vec![0.0; m * 4 * h];
                let mut dc = vec![0.0; m * h];
                for r in 0..m {
                    let zr = zv.row(r);
                    let cr = cv.row(r);
                    let gr = &gd[r * 2 * h..(r + 1) * 2 * h];
                    let outr = &out[r * 2 * h..(r + 1) * 2 * h];
                    for u in 0..h {
                        let i = sigmoid(zr[u]);
                        let f = sigmoid(zr[h + u]);
                        let g = zr[2 * h + u].tanh();
                        let o = sigmoid(zr[3 * h + u]);
                        let tc = outr[h + u].tanh();
                        let dh = gr[u];
                        let dct = gr[h + u] + dh * o * (1.0 - tc * tc);
                        let base = r * 4 * h;
                        dz[base + u] = dct * g * i * (1.0 - i);
                        dz[base + h + u] = dct * cr[u] * f * (1.0 - f);
                        dz[base + 2 * h + u] = dct * i * (1.0 - g * g);
                        dz[base + 3 * h + u] = dh * tc * o * (1.0 - o);
                        dc[r * h + u] = dct * f;
                    }
                }
                if let Some(d) = self.acc(grads, *z) {
                    d.iter_mut().zip(&dz).for_each(|(x, &y)| *x += y);
                }
                if let Some(d) = self.acc(grads, *c_prev) {
                    d.iter_mut().zip(&dc).for_each(|(x, &y)| *x += y);
                }
            }
            Op::EdgeAggregate(w, x, edges) => {
                let n = g.cols();
                let (wv, xv) = (self.value(*w).data(), self.value(*x));
                if let Some(dw) = self.acc(grads, *w) {
                    for (k, &(i, j)) in edges.iter().enumerate() {
                        dw[k] += gd[i * n..(i + 1) * n]
                            .iter()
                            .zip(xv.row(j))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    for (&(i, j), &wk) in edges.iter().zip(wv) {
                        let (gi, dj) = (i * n, j * n);
                        for c in 0..n {
                            dx[dj + c] += wk * gd[gi + c];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_accumulates_both_operands() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn repeated_subexpression_doubles_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.3, -0.7]));
        let f1 = t.tanh(x);
        let single = t.sum(f1);
        let g1 = t.backward(single).unwrap().get(x).unwrap().clone();

        let f2 = t.tanh(x);
        let both = t.add(f1, f2).unwrap();
        let total = t.sum(both);
        let g2 = t.backward(total).unwrap().get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 2.0, -2.0]));
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y).data(), &[0.0, 2.0, -0.02]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = t.softmax(x).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

        let c = t.constant(Tensor::vector(vec![2.5; 3]));
        let y = t.softmax(c).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let empty = t.constant(Tensor::vector(vec![]));
        assert!(t.softmax(empty).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.1, -1.3, 2.2]));
        let shifted = t.constant(Tensor::vector(vec![100.1, 98.7, 102.2]));
        let a = t.softmax(x).unwrap();
        let b = t.softmax(shifted).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    }

    #[test]
    fn concat_singleton_and_vectors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![4.0, 5.0]));
        let c = t.concat(&[x], 0).unwrap();
        assert_eq!(t.value(c), t.value(x));

        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.constant(Tensor::vector(vec![2.0]));
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).shape(), &[2]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0]);

        let m = t.constant(Tensor::zeros(&[2, 3]));
        let n = t.constant(Tensor::zeros(&[3, 3]));
        assert!(t.concat(&[m, n], 1).is_err());
    }

    #[test]
    fn edge_aggregate_matches_dense_product() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let w = t.constant(Tensor::column(vec![0.5, 2.0]));
        let y = t
            .edge_aggregate(w, x, Rc::new(vec![(0, 2), (1, 0)]))
            .unwrap();
        assert_eq!(t.value(y).data(), &[2.5, 3.0, 2.0, 4.0, 0.0, 0.0]);
    }
}
