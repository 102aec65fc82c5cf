//! Define-by-run reverse-mode automatic differentiation over row-major
//! matrices.
//!
//! Every value on a [`Tape`] is a `rows x cols` matrix (vectors are `1 x n`
//! or `n x 1`). Operations append a node holding the forward value and the
//! ids of its inputs; [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid topological order because a node can only refer to
//! nodes created before it.
//!
//! Broadcasting is limited to a row vector added to every row
//! ([`Tape::add_row`]) and a column vector applied to every column
//! ([`Tape::add_col`], [`Tape::mul_col`]). Shape mismatches inside the tape
//! are programming errors and panic; the model layers validate user input
//! before it reaches the tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ` with `x: [b, k]`, `w: [n, k]`.
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    Transpose(Var),
    RowMax(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// One gradient tensor per parameter of `store`; parameters that did not
    /// take part in the loss get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                let mut g = Tensor::zeros(store.get(id).shape());
                if let Some(&v) = self.params.get(&(store.id(), id.0)) {
                    if let Some(src) = self.wrt(v) {
                        g.data_mut().copy_from_slice(src);
                    }
                }
                g
            })
            .collect()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents match (m, k, n) and the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
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

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} node", n.rows, n.cols);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).unwrap()
    }

    /// A constant leaf of shape `rows x cols`.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant: shape/data mismatch");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, independent of any parameter store.
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "variable: shape/data mismatch");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = (t.rows(), t.cols());
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Leaf for a stored parameter. Repeated calls for the same parameter
    /// return the same node, so gradients from every use accumulate in one
    /// place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.tensor(store.get(id));
        self.params.insert(key, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.constant(r, c, val)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (b, k) = self.shape(x);
        let (n, k2) = self.shape(w);
        assert_eq!(k, k2, "matmul_t: inner dims {k} vs {k2}");
        let mut out = vec![0.0; b * n];
        gemm(
            b,
            k,
            n,
            self.value(x),
            (k as isize, 1),
            self.value(w),
            (1, k as isize),
            0.0,
            &mut out,
            n as isize,
        );
        let ng = self.ng(x) || self.ng(w);
        self.push(b, n, out, Op::MatMulT(x, w), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(r, c, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + bias` with `bias` a `1 x cols` row added to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "add_row: bias shape");
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(r, c, out, Op::AddRow(a, bias), ng)
    }

    /// `a + col` with `col` a `rows x 1` column added to every column.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "add_col: column shape");
        let cv = self.value(col);
        let mut out = self.value(a).to_vec();
        for (row, &s) in out.chunks_mut(c).zip(cv) {
            row.iter_mut().for_each(|o| *o += s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(r, c, out, Op::AddCol(a, col), ng)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col: column shape");
        let cv = self.value(col);
        let mut out = self.value(a).to_vec();
        for (row, &s) in out.chunks_mut(c).zip(cv) {
            row.iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(r, c, out, Op::MulCol(a, col), ng)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, crate::tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c)
            .for_each(crate::tensor::log_softmax_in_place);
        let ng = self.ng(a);
        self.push(r, c, out, Op::LogSoftmax(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        out.chunks_mut(c).for_each(crate::tensor::softmax_in_place);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    /// Rows `ids[i]` of `table`, one output row per id (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, e) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            assert!(i < v, "gather: id {i} out of range {v}");
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let ng = self.ng(table);
        self.push(ids.len(), e, out, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Column `ids[i]` of row `i`, as a `rows x 1` column.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(ids.len(), r, "pick: one id per row");
        let av = self.value(a);
        let out = ids
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick: column {j} out of range {c}");
                av[i * c + j]
            })
            .collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::Pick(a, ids.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c && len > 0, "slice_cols out of range");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in av.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(r, len, out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, r, "concat_cols: row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    /// Per-row sums as a `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    /// Per-row maximum as a `rows x 1` column; the gradient flows to the
    /// first maximizing entry.
    pub fn row_max(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut arg = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r);
        for row in av.chunks(c) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            out.push(row[best]);
        }
        let ng = self.ng(a);
        self.push(r, 1, out, Op::RowMax(a, arg), ng)
    }

    /// Divides every row by its L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::NormalizeRows(a, norms), ng)
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        let len = n.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (b, k) = self.shape(*x);
                let n = cols;
                let wv = self.value(*w);
                let xv = self.value(*x);
                if let Some(dx) = self.acc(grads, *x) {
                    gemm(b, n, k, g, (n as isize, 1), wv, (k as isize, 1), 1.0, dx, k as isize);
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(n, b, k, g, (1, n as isize), xv, (k as isize, 1), 1.0, dw, k as isize);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddCol(a, col) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *col) {
                    for (dc, row) in d.iter_mut().zip(g.chunks(cols)) {
                        *dc += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] += g[i * cols + j] * cv[i];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *col) {
                    for i in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += g[i * cols + j] * av[i * cols + j];
                        }
                        d[i] += s;
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        if y[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += 2.0 * av[i] * g[i];
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dr[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if let Some(d) = self.acc(grads, *table) {
                    for (row, &i) in g.chunks(cols).zip(ids) {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Pick(a, ids) => {
                let c = self.shape(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (i, &j) in ids.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (i, row) in g.chunks(cols).enumerate() {
                        d[i * c + start..i * c + start + cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(d) = self.acc(grads, p) {
                        for i in 0..rows {
                            d[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * cols + off..i * cols + off + w])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    off += w;
                }
            }
            Op::SumAll(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumRows(a) => {
                let c = self.shape(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (row, &gi) in d.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    // node is [rows x cols]; input is [cols x rows]
                    for i in 0..rows {
                        for j in 0..cols {
                            d[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::RowMax(a, arg) => {
                let c = self.shape(*a).1;
                if let Some(d) = self.acc(grads, *a) {
                    for (i, &j) in arg.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                if let Some(d) = self.acc(grads, *a) {
                    for (i, &n) in norms.iter().enumerate() {
                        let yr = &y[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            d[i * cols + j] += (gr[j] - yr[j] * dot) / n;
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
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(loss)/d(leaf) against central differences for every leaf value.
    fn check_fd(build: impl Fn(&mut Tape, &[Var]) -> Var, leaves: &[(usize, usize, Vec<f64>)]) {
        let run = |vals: &[Vec<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = leaves
                .iter()
                .zip(vals)
                .map(|((r, c, _), v)| t.variable(*r, *c, v.clone()))
                .collect();
            let l = build(&mut t, &vars);
            (t, vars, l)
        };
        let base: Vec<Vec<f64>> = leaves.iter().map(|l| l.2.clone()).collect();
        let (t, vars, l) = run(&base);
        let grads = t.backward(l).unwrap();
        let h = 1e-5;
        for (li, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; base[li].len()]);
            for k in 0..base[li].len() {
                let mut plus = base.clone();
                plus[li][k] += h;
                let mut minus = base.clone();
                minus[li][k] -= h;
                let (tp, _, lp) = run(&plus);
                let (tm, _, lm) = run(&minus);
                let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-3);
                assert!(err < 1e-4, "leaf {li}[{k}]: fd {fd} vs analytic {}", analytic[k]);
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.variable(1, 4, vec![0.3, -1.0, 2.0, 5.0]);
        let l = t.sum(w);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn dot_gradient_is_twice_w() {
        let mut t = Tape::new();
        let wv = vec![0.3, -1.0, 2.0];
        let w = t.variable(1, 3, wv.clone());
        let sq = t.mul(w, w);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        let expect: Vec<f64> = wv.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(w).unwrap(), expect.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::new();
        let w = t.variable(1, 2, vec![1.0, 2.0]);
        assert!(matches!(t.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.variable(1, 2, vec![1.0, 2.0]);
        let c = t.constant(1, 2, vec![3.0, 4.0]);
        let p = t.mul(w, c);
        let d = t.detach(p);
        let q = t.mul(d, w);
        let l = t.sum(q);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(c).is_none());
        // d is constant: dl/dw = d = w * c
        assert_eq!(g.wrt(w).unwrap(), &[3.0, 8.0]);
    }

    #[test]
    fn param_reuse_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let unused = store.add_zeros("u", &[3]);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let s = t.add(a, b);
        let l = t.sum(s);
        let g = t.backward(l).unwrap().for_store(&store);
        assert_eq!(g[0].data(), &[2.0, 2.0]);
        assert_eq!(g[unused.0].data(), &[0.0; 3]);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let leaves = vec![
            (3, 4, randv(&mut rng, 12)),
            (5, 4, randv(&mut rng, 20)),
            (1, 5, randv(&mut rng, 5)),
            (3, 1, randv(&mut rng, 3)),
        ];
        check_fd(
            |t, v| {
                let h = t.matmul_t(v[0], v[1]);
                let h = t.add_row(h, v[2]);
                let a = t.tanh(h);
                let s = t.sigmoid(h);
                let m = t.mul(a, s);
                let m = t.mul_col(m, v[3]);
                let m = t.add_col(m, v[3]);
                let ls = t.log_softmax(m);
                let p = t.pick(ls, &[0, 3, 4]);
                let sm = t.softmax(m);
                let e = t.exp(sm);
                let sq = t.square(e);
                let rs = t.sum_rows(sq);
                let sl = t.slice_cols(m, 1, 2);
                let r = t.relu(sl);
                let cat = t.concat_cols(&[p, rs, r]);
                let tr = t.transpose(cat);
                let mx = t.row_max(tr);
                let n = t.normalize_rows(m);
                let aff = t.affine(n, -2.0, 0.5);
                let s1 = t.sum(mx);
                let s2 = t.sum(aff);
                let sq2 = t.square(s2);
                let sub = t.sub(s1, sq2);
                t.scale(sub, 0.7)
            },
            &leaves,
        );
    }

    #[test]
    fn gather_gradient_scatters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![(4, 3, randv(&mut rng, 12)), (3, 3, randv(&mut rng, 9))];
        check_fd(
            |t, v| {
                let e = t.gather(v[0], &[2, 0, 2]);
                let m = t.mul(e, v[1]);
                let th = t.tanh(m);
                t.sum(th)
            },
            &leaves,
        );
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randv(&mut rng, 6);
        let w = randv(&mut rng, 12);
        let run = || {
            let mut t = Tape::new();
            let xv = t.variable(2, 3, x.clone());
            let wv = t.variable(4, 3, w.clone());
            let h = t.matmul_t(xv, wv);
            let s = t.log_softmax(h);
            let l = t.sum(s);
            let g = t.backward(l).unwrap();
            (t.scalar(l), g.wrt(wv).unwrap().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(ga.iter().zip(&gb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
