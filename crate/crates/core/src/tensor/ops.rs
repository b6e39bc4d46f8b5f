//! Differentiable operations. Each method on [`Var`] computes its forward
//! value eagerly and records an [`Op`] carrying whatever the backward rule
//! needs.

use std::rc::Rc;

use super::tape::{Node, Var};
use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize, f64),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    SumAxis(usize, usize),
    SquaredError(usize, usize),
    GatherRows(usize, Rc<[usize]>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(..) => "elu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::SquaredError(..) => "squared_error",
            Op::GatherRows(..) => "gather_rows",
        }
    }

    pub(crate) fn backward(
        &self,
        node: &Node,
        g: &[f64],
        nodes: &[Node],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (rows, cols) = (node.rows, node.cols);
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum_broadcast(adj, nodes, *a, g, rows, cols, |gv, _| gv);
                accum_broadcast(adj, nodes, *b, g, rows, cols, |gv, _| gv);
            }
            Op::Sub(a, b) => {
                accum_broadcast(adj, nodes, *a, g, rows, cols, |gv, _| gv);
                accum_broadcast(adj, nodes, *b, g, rows, cols, |gv, _| -gv);
            }
            Op::Mul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                accum_broadcast(adj, nodes, *a, g, rows, cols, |gv, (i, j)| {
                    gv * nb.value[bcast_index(nb, i, j)]
                });
                accum_broadcast(adj, nodes, *b, g, rows, cols, |gv, (i, j)| {
                    gv * na.value[bcast_index(na, i, j)]
                });
            }
            Op::Scale(a, c) => accum(adj, nodes, *a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) => accum(adj, nodes, *a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[*a], &nodes[*b]);
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                if na.requires_grad {
                    let bt = transpose_raw(&nb.value, k, n);
                    accum(adj, nodes, *a, matmul_raw(g, &bt, m, n, k));
                }
                if nb.requires_grad {
                    let at = transpose_raw(&na.value, m, k);
                    accum(adj, nodes, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => accum(adj, nodes, *a, transpose_raw(g, rows, cols)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                accum(adj, nodes, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accum(adj, nodes, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Exp(a) => accum(adj, nodes, *a, zip_map(g, &node.value, |gv, yv| gv * yv)),
            Op::Log(a) => accum(adj, nodes, *a, zip_map(g, &nodes[*a].value, |gv, x| gv / x)),
            Op::Relu(a) => accum(
                adj,
                nodes,
                *a,
                zip_map(g, &nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => accum(
                adj,
                nodes,
                *a,
                zip_map(g, &nodes[*a].value, |gv, x| if x > 0.0 { gv } else { gv * slope }),
            ),
            Op::Elu(a, alpha) => accum(
                adj,
                nodes,
                *a,
                zip_map(g, &nodes[*a].value, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        gv * alpha * x.exp()
                    }
                }),
            ),
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for_each_slice(rows, cols, *axis, |idx| {
                    let dot: f64 = idx.clone().map(|p| g[p] * y[p]).sum();
                    for p in idx {
                        dx[p] = y[p] * (g[p] - dot);
                    }
                });
                accum(adj, nodes, *a, dx);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for_each_slice(rows, cols, 1, |idx| {
                    let dot: f64 = idx.clone().map(|p| g[p] * y[p]).sum();
                    for p in idx {
                        dx[p] = y[p] * (g[p] - dot);
                    }
                });
                accum(adj, nodes, *a, dx);
            }
            Op::LogSoftmax(a, axis) => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for_each_slice(rows, cols, *axis, |idx| {
                    let gsum: f64 = idx.clone().map(|p| g[p]).sum();
                    for p in idx {
                        dx[p] = g[p] - y[p].exp() * gsum;
                    }
                });
                accum(adj, nodes, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gain_v = &nodes[*gain].value;
                let d = cols as f64;
                if nodes[*x].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let dxhat: Vec<f64> =
                            (0..cols).map(|j| g[r.start + j] * gain_v[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = (0..cols).map(|j| dxhat[j] * xhat[r.start + j]).sum();
                        for j in 0..cols {
                            dx[r.start + j] =
                                inv_std[i] / d * (d * dxhat[j] - s1 - xhat[r.start + j] * s2);
                        }
                    }
                    accum(adj, nodes, *x, dx);
                }
                if nodes[*gain].requires_grad {
                    let mut dg = vec![0.0; cols];
                    for (p, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        dg[p % cols] += gv * xh;
                    }
                    accum(adj, nodes, *gain, dg);
                }
                if nodes[*bias].requires_grad {
                    let mut db = vec![0.0; cols];
                    for (p, gv) in g.iter().enumerate() {
                        db[p % cols] += gv;
                    }
                    accum(adj, nodes, *bias, db);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &part in parts {
                    let np = &nodes[part];
                    let extent = if *axis == 0 { np.rows } else { np.cols };
                    if np.requires_grad {
                        accum(adj, nodes, part, extract(g, rows, cols, *axis, offset, extent));
                    }
                    offset += extent;
                }
            }
            Op::Slice { src, axis, start } => {
                let ns = &nodes[*src];
                let mut dx = vec![0.0; ns.value.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                        dx[si * ns.cols + sj] = g[i * cols + j];
                    }
                }
                accum(adj, nodes, *src, dx);
            }
            Op::Sum(a) => accum(adj, nodes, *a, vec![g[0]; nodes[*a].value.len()]),
            Op::SumAxis(a, axis) => {
                let na = &nodes[*a];
                let dx = (0..na.value.len())
                    .map(|p| {
                        let (i, j) = (p / na.cols, p % na.cols);
                        if *axis == 0 {
                            g[j]
                        } else {
                            g[i]
                        }
                    })
                    .collect();
                accum(adj, nodes, *a, dx);
            }
            Op::SquaredError(a, b) => {
                let diff: Vec<f64> = zip_map(&nodes[*a].value, &nodes[*b].value, |x, y| x - y);
                let s = 2.0 * g[0];
                accum(adj, nodes, *a, diff.iter().map(|d| s * d).collect());
                accum(adj, nodes, *b, diff.iter().map(|d| -s * d).collect());
            }
            Op::GatherRows(a, idx) => {
                let na = &nodes[*a];
                let mut dx = vec![0.0; na.value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[src * cols + j] += g[r * cols + j];
                    }
                }
                accum(adj, nodes, *a, dx);
            }
        }
    }
}

fn accum(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contribution: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn bcast_index(n: &Node, i: usize, j: usize) -> usize {
    let ii = if n.rows == 1 { 0 } else { i };
    let jj = if n.cols == 1 { 0 } else { j };
    ii * n.cols + jj
}

/// Reduce an output-shaped gradient onto a (possibly broadcast) input.
fn accum_broadcast(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    g: &[f64],
    rows: usize,
    cols: usize,
    f: impl Fn(f64, (usize, usize)) -> f64,
) {
    let n = &nodes[id];
    if !n.requires_grad {
        return;
    }
    let mut dx = vec![0.0; n.value.len()];
    for i in 0..rows {
        for j in 0..cols {
            dx[bcast_index(n, i, j)] += f(g[i * cols + j], (i, j));
        }
    }
    accum(adj, nodes, id, dx);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Visit each 1-D slice along `axis`: axis 1 walks rows, axis 0 walks columns.
fn for_each_slice(
    rows: usize,
    cols: usize,
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    if axis == 1 {
        for i in 0..rows {
            f((i * cols..(i + 1) * cols).step_by(1));
        }
    } else {
        for j in 0..cols {
            f((j..rows * cols).step_by(cols));
        }
    }
}

fn extract(
    src: &[f64],
    rows: usize,
    cols: usize,
    axis: usize,
    offset: usize,
    extent: usize,
) -> Vec<f64> {
    if axis == 0 {
        src[offset * cols..(offset + extent) * cols].to_vec()
    } else {
        let mut out = Vec::with_capacity(rows * extent);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + offset..i * cols + offset + extent]);
        }
        out
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::contract(format!("axis must be 0 or 1, got {axis}")));
    }
    Ok(())
}

impl<'t> Var<'t> {
    fn node_data(&self) -> (usize, usize, Vec<f64>, bool) {
        let n = &self.tape.nodes()[self.id];
        (n.rows, n.cols, n.value.clone(), n.requires_grad)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (r, c, v, rg) = self.node_data();
        let out = v.into_iter().map(f).collect();
        self.tape.push(r, c, out, op, rg)
    }

    fn broadcast(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let [r1, c1] = self.shape();
        let [r2, c2] = other.shape();
        let compatible = |x: usize, y: usize| x == y || x == 1 || y == 1;
        if !compatible(r1, r2) || !compatible(c1, c2) {
            return Err(Error::Shape {
                op: name,
                left: [r1, c1],
                right: [r2, c2],
            });
        }
        let (rows, cols) = (r1.max(r2), c1.max(c2));
        let nodes = self.tape.nodes();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(
                    na.value[bcast_index(na, i, j)],
                    nb.value[bcast_index(nb, i, j)],
                ));
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.tape.push(rows, cols, out, op, rg))
    }

    /// Elementwise sum with row/column broadcasting of size-1 dimensions.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.broadcast(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let [m, k] = self.shape();
        let [k2, n] = other.shape();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: [m, k],
                right: [k2, n],
            });
        }
        let nodes = self.tape.nodes();
        let (na, nb) = (&nodes[self.id], &nodes[other.id]);
        let out = matmul_raw(&na.value, &nb.value, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.tape.push(m, n, out, Op::MatMul(self.id, other.id), rg))
    }

    pub fn t(&self) -> Var<'t> {
        let (r, c, v, rg) = self.node_data();
        self.tape
            .push(c, r, transpose_raw(&v, r, c), Op::Transpose(self.id), rg)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu(&self) -> Var<'t> {
        const ALPHA: f64 = 1.0;
        self.unary(Op::Elu(self.id, ALPHA), |x| {
            if x > 0.0 {
                x
            } else {
                ALPHA * x.exp_m1()
            }
        })
    }

    /// Numerically stable softmax along `axis` (1: each row sums to one).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        check_axis(axis)?;
        let (r, c, mut v, rg) = self.node_data();
        for_each_slice(r, c, axis, |idx| {
            let max = idx.clone().map(|p| v[p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for p in idx.clone() {
                v[p] = (v[p] - max).exp();
                total += v[p];
            }
            for p in idx {
                v[p] /= total;
            }
        });
        Ok(self.tape.push(r, c, v, Op::Softmax(self.id, axis), rg))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        check_axis(axis)?;
        let (r, c, mut v, rg) = self.node_data();
        for_each_slice(r, c, axis, |idx| {
            let max = idx.clone().map(|p| v[p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|p| (v[p] - max).exp()).sum::<f64>().ln();
            for p in idx {
                v[p] -= lse;
            }
        });
        Ok(self.tape.push(r, c, v, Op::LogSoftmax(self.id, axis), rg))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out exactly zero. Every row needs at least one open entry.
    pub fn masked_softmax(&self, mask: Rc<[bool]>) -> Result<Var<'t>> {
        let (r, c, mut v, rg) = self.node_data();
        if mask.len() != v.len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: [r, c],
                right: [mask.len(), 1],
            });
        }
        for i in 0..r {
            let row = i * c..(i + 1) * c;
            let max = row
                .clone()
                .filter(|&p| mask[p])
                .map(|p| v[p])
                .fold(f64::NEG_INFINITY, f64::max);
            if !row.clone().any(|p| mask[p]) {
                return Err(Error::contract(format!("masked_softmax: row {i} fully masked")));
            }
            if !max.is_finite() || row.clone().any(|p| mask[p] && v[p].is_nan()) {
                return Err(Error::NonFinite(format!("masked_softmax: row {i} has non-finite scores")));
            }
            let mut total = 0.0;
            for p in row.clone() {
                v[p] = if mask[p] { (v[p] - max).exp() } else { 0.0 };
                total += v[p];
            }
            for p in row {
                v[p] /= total;
            }
        }
        Ok(self.tape.push(r, c, v, Op::MaskedSoftmax(self.id), rg))
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by an affine `gain`/`bias` (both `1 × d`).
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let [r, c] = self.shape();
        for (p, name) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            if p.shape() != [1, c] {
                return Err(Error::Shape {
                    op: name,
                    left: [r, c],
                    right: p.shape(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let nodes = self.tape.nodes();
        let (x, gv, bv) = (
            &nodes[self.id].value,
            &nodes[gain.id].value,
            &nodes[bias.id].value,
        );
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = nodes[self.id].requires_grad
            || nodes[gain.id].requires_grad
            || nodes[bias.id].requires_grad;
        drop(nodes);
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(r, c, out, op, rg))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&self) -> Var<'t> {
        let (_, _, v, rg) = self.node_data();
        self.tape.push(1, 1, vec![v.iter().sum()], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.rows() * self.cols();
        self.sum().scale(1.0 / n as f64)
    }

    /// Reduce along `axis`: 0 collapses rows (→ `1 × c`), 1 collapses columns (→ `r × 1`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        check_axis(axis)?;
        let (r, c, v, rg) = self.node_data();
        let (out_r, out_c) = if axis == 0 { (1, c) } else { (r, 1) };
        let mut out = vec![0.0; out_r * out_c];
        for i in 0..r {
            for j in 0..c {
                out[if axis == 0 { j } else { i }] += v[i * c + j];
            }
        }
        Ok(self
            .tape
            .push(out_r, out_c, out, Op::SumAxis(self.id, axis), rg))
    }

    /// `Σ (self − target)²` as a `1 × 1` tensor.
    pub fn squared_error(&self, target: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::Shape {
                op: "squared_error",
                left: self.shape(),
                right: target.shape(),
            });
        }
        let nodes = self.tape.nodes();
        let (na, nb) = (&nodes[self.id], &nodes[target.id]);
        let s = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self
            .tape
            .push(1, 1, vec![s], Op::SquaredError(self.id, target.id), rg))
    }

    /// Copy of `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        check_axis(axis)?;
        let (r, c, v, rg) = self.node_data();
        let extent = if axis == 0 { r } else { c };
        if len == 0 || start + len > extent {
            return Err(Error::contract(format!(
                "slice [{start}, {}) out of bounds for axis {axis} of {:?}",
                start + len,
                [r, c]
            )));
        }
        let out = extract(&v, r, c, axis, start, len);
        let (out_r, out_c) = if axis == 0 { (len, c) } else { (r, len) };
        Ok(self.tape.push(
            out_r,
            out_c,
            out,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Rows of `self` at `idx`, in order; indices may repeat.
    pub fn gather_rows(&self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let (r, c, v, rg) = self.node_data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self
            .tape
            .push(idx.len(), c, out, Op::GatherRows(self.id, idx), rg))
    }
}

/// Concatenate along `axis` (0 stacks rows, 1 stacks columns).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    check_axis(axis)?;
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let tape = first.tape;
    let [r0, c0] = first.shape();
    for p in &parts[1..] {
        let [r, c] = p.shape();
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
            return Err(Error::Shape {
                op: "concat",
                left: [r0, c0],
                right: [r, c],
            });
        }
    }
    let nodes = tape.nodes();
    let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
    let (rows, cols, out) = if axis == 0 {
        let rows = parts.iter().map(|p| nodes[p.id].rows).sum();
        let out = parts
            .iter()
            .flat_map(|p| nodes[p.id].value.iter().copied())
            .collect();
        (rows, c0, out)
    } else {
        let cols: usize = parts.iter().map(|p| nodes[p.id].cols).sum();
        let mut out = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for p in parts {
                let n = &nodes[p.id];
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        (r0, cols, out)
    };
    drop(nodes);
    let op = Op::Concat {
        parts: parts.iter().map(|p| p.id).collect(),
        axis,
    };
    Ok(tape.push(rows, cols, out, op, rg))
}

impl Tensor {
    /// Row-wise softmax outside of any tape (inference helpers, oracles).
    pub fn softmax_rows(&self) -> Tensor {
        let tape = super::Tape::new();
        tape.constant(self)
            .softmax(1)
            .expect("axis 1 is valid")
            .value()
    }
}
