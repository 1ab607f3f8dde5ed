//! A small reverse-mode tape over dense matrices.
//!
//! Encoders record their forward pass here; `backward` then pushes an
//! upstream gradient through the recorded ops and accumulates into a
//! [`ParamSet`] shaped like the model parameters. Item embeddings are read
//! through [`Tape::gather`] so the full embedding table is never copied.

use crate::matrix::{axpy, Matrix};
use crate::params::{ParamId, ParamSet};

const LAYER_NORM_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather {
        param: ParamId,
        indices: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    WindowConcat {
        x: Var,
        windows: Vec<Vec<Option<usize>>>,
    },
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    VerticalConv {
        x: Var,
        w: Var,
        width: usize,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Rows of parameter `param` selected by `indices`; index 0 yields a zero row.
    pub fn gather(&mut self, param: ParamId, indices: &[usize]) -> Var {
        let table = self.params.get(param);
        let mut out = Matrix::zeros(indices.len(), table.cols());
        for (r, &idx) in indices.iter().enumerate() {
            if idx != 0 {
                out.row_mut(r).copy_from_slice(table.row(idx));
            }
        }
        self.push(
            out,
            Op::Gather {
                param,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), b.cols());
        let b = b.row(0).to_vec();
        for r in 0..v.rows() {
            axpy(1.0, &b, v.row_mut(r));
        }
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut v = self.value(x).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let v = Matrix::from_vec(src.rows(), src.cols(), data);
        self.push(v, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    /// Row-wise layer normalization with `1 x c` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax over the entries where `allowed` is true; the rest are 0.
    /// A row with no allowed entry comes out all zero.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        assert_eq!(allowed.len(), rows * cols);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row(r);
            let mask = &allowed[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for c in 0..cols {
                if mask[c] {
                    o[c] = (row[c] - max).exp();
                    sum += o[c];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::MaskedSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let src = self.value(x);
        assert!(start + width <= src.cols());
        let v = Matrix::from_fn(src.rows(), width, |r, c| src.get(r, start + c));
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols);
            data.extend_from_slice(m.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let src = self.value(x);
        let mut out = Matrix::zeros(rows.len(), src.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Each output row concatenates the listed rows of `x`; `None` contributes zeros.
    /// All windows must have the same length.
    pub fn window_concat(&mut self, x: Var, windows: Vec<Vec<Option<usize>>>) -> Var {
        let src = self.value(x);
        let width = windows.first().map_or(0, Vec::len);
        let d = src.cols();
        let mut out = Matrix::zeros(windows.len(), width * d);
        for (r, w) in windows.iter().enumerate() {
            assert_eq!(w.len(), width);
            let o = out.row_mut(r);
            for (k, slot) in w.iter().enumerate() {
                if let Some(i) = slot {
                    o[k * d..(k + 1) * d].copy_from_slice(src.row(*i));
                }
            }
        }
        self.push(out, Op::WindowConcat { x, windows })
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Var {
        let src = self.value(x);
        assert!(group > 0 && src.rows() % group == 0);
        let n = src.rows() / group;
        let cols = src.cols();
        let mut out = Matrix::zeros(n, cols);
        let mut argmax = vec![0usize; n * cols];
        for g in 0..n {
            for c in 0..cols {
                let mut best = g * group;
                for r in g * group + 1..(g + 1) * group {
                    if src.get(r, c) > src.get(best, c) {
                        best = r;
                    }
                }
                out.set(g, c, src.get(best, c));
                argmax[g * cols + c] = best;
            }
        }
        self.push(out, Op::GroupMax { x, argmax })
    }

    /// Vertical convolution over stacked windows.
    ///
    /// `x` is `n x (L * width)` (each row is `L` stacked `width`-vectors) and `w`
    /// is `L x f`; the output row holds `f` weighted sums of the stacked
    /// vectors, `out[r, v*width + j] = sum_k w[k, v] * x[r, k*width + j]`.
    pub fn vertical_conv(&mut self, x: Var, w: Var, width: usize) -> Var {
        let (src, wm) = (self.value(x), self.value(w));
        let l = wm.rows();
        let f = wm.cols();
        assert_eq!(src.cols(), l * width);
        let mut out = Matrix::zeros(src.rows(), f * width);
        for r in 0..src.rows() {
            let xr = src.row(r);
            let o = out.row_mut(r);
            for k in 0..l {
                let seg = &xr[k * width..(k + 1) * width];
                for v in 0..f {
                    axpy(wm.get(k, v), seg, &mut o[v * width..(v + 1) * width]);
                }
            }
        }
        self.push(out, Op::VerticalConv { x, w, width })
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `output`) and adds the resulting parameter gradients into `grads`.
    pub fn backward(&self, output: Var, seed: Matrix, grads: &mut ParamSet) {
        assert_eq!(seed.shape(), self.value(output).shape());
        let mut adj: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Gather { param, indices } => {
                    let table = grads.get_mut(*param);
                    for (r, &idx) in indices.iter().enumerate() {
                        if idx != 0 {
                            axpy(1.0, g.row(r), table.row_mut(idx));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), gb.row_mut(0));
                    }
                    accumulate(&mut adj, *x, g);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_assign(*s);
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = zip_map(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut adj, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gi, v| if v > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gi, v| gi * gelu_grad(v));
                    accumulate(&mut adj, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma).row(0);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut ggamma = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    let mut gh = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        for c in 0..cols {
                            gh[c] = gr[c] * gam[c];
                            ggamma.data_mut()[c] += gr[c] * hr[c];
                            gbeta.data_mut()[c] += gr[c];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / cols as f64;
                        let mean_ghh =
                            gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = inv_std[r] * (gh[c] - mean_gh - hr[c] * mean_ghh);
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *gamma, ggamma);
                    accumulate(&mut adj, *beta, gbeta);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let o = gx.row_mut(r);
                        for c in 0..yr.len() {
                            o[c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        accumulate(&mut adj, *p, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut adj, *p, Matrix::from_vec(rows, cols, data));
                        offset += rows;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(1.0, g.row(i), gx.row_mut(r));
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::WindowConcat { x, windows } => {
                    let src = self.value(*x);
                    let d = src.cols();
                    let mut gx = Matrix::zeros(src.rows(), d);
                    for (r, w) in windows.iter().enumerate() {
                        let gr = g.row(r);
                        for (k, slot) in w.iter().enumerate() {
                            if let Some(i) = slot {
                                axpy(1.0, &gr[k * d..(k + 1) * d], gx.row_mut(*i));
                            }
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::GroupMax { x, argmax } => {
                    let src = self.value(*x);
                    let cols = src.cols();
                    let mut gx = Matrix::zeros(src.rows(), cols);
                    for (k, &row) in argmax.iter().enumerate() {
                        let c = k % cols;
                        let gv = g.data()[k];
                        gx.data_mut()[row * cols + c] += gv;
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::VerticalConv { x, w, width } => {
                    let (src, wm) = (self.value(*x), self.value(*w));
                    let (l, f) = wm.shape();
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    let mut gw = Matrix::zeros(l, f);
                    for r in 0..src.rows() {
                        let (xr, gr) = (src.row(r), g.row(r));
                        let gxr = gx.row_mut(r);
                        for k in 0..l {
                            let xs = &xr[k * width..(k + 1) * width];
                            for v in 0..f {
                                let gs = &gr[v * width..(v + 1) * width];
                                axpy(wm.get(k, v), gs, &mut gxr[k * width..(k + 1) * width]);
                                let contrib: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                                gw.data_mut()[k * f + v] += contrib;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *w, gw);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn random_params(shapes: &[(&str, usize, usize)], seed: u64) -> ParamSet {
        let mut rng = stream(seed, Stream::Init);
        let mut p = ParamSet::new();
        for (name, r, c) in shapes {
            p.push(*name, Matrix::from_fn(*r, *c, |_, _| rng.random_range(-1.0..1.0)));
        }
        p
    }

    /// Sum of `weights * output`, a generic scalar probe for checking backward.
    fn probe(m: &Matrix, weights: &Matrix) -> f64 {
        m.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    fn check_grad(params: &ParamSet, build: &dyn Fn(&mut Tape) -> Var) {
        let tape_out = {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            tape.value(out).clone()
        };
        let mut rng = stream(99, Stream::Sampling);
        let weights = Matrix::from_fn(tape_out.rows(), tape_out.cols(), |_, _| rng.random_range(-1.0..1.0));

        let mut grads = params.zeros_like();
        {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            tape.backward(out, weights.clone(), &mut grads);
        }

        let h = 1e-6;
        let analytic: Vec<f64> = grads.flat().collect();
        for (k, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                *p.scalar_mut(k) += delta;
                let mut tape = Tape::new(&p);
                let out = build(&mut tape);
                probe(tape.value(out), &weights)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "scalar {k}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_products() {
        let p = random_params(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2), ("bias", 1, 2)], 1);
        check_grad(&p, &|t| {
            let a = t.param(p.expect_id("a"));
            let b = t.param(p.expect_id("b"));
            let c = t.param(p.expect_id("c"));
            let bias = t.param(p.expect_id("bias"));
            let ab = t.matmul(a, b);
            let s = t.sigmoid(ab);
            let th = t.tanh(c);
            let m = t.mul(s, th);
            let d = t.sub(m, c);
            let e = t.add_row(d, bias);
            let g = t.gelu(e);
            let r = t.relu(g);
            let sc = t.scale(r, 1.7);
            t.add(sc, th)
        });
    }

    #[test]
    fn attention_pieces() {
        let p = random_params(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6), ("w", 6, 6)], 2);
        check_grad(&p, &|t| {
            let x = t.param(p.expect_id("x"));
            let g = t.param(p.expect_id("g"));
            let b = t.param(p.expect_id("b"));
            let w = t.param(p.expect_id("w"));
            let n = t.layer_norm(x, g, b);
            let q = t.matmul(n, w);
            let q0 = t.slice_cols(q, 0, 3);
            let q1 = t.slice_cols(q, 3, 3);
            let scores = t.matmul_t(q0, q1);
            let allowed: Vec<bool> = (0..16).map(|k| k % 4 <= k / 4).collect();
            let att = t.masked_softmax(scores, &allowed);
            let out = t.matmul(att, q1);
            let cat = t.concat_cols(&[out, q0]);
            let sel = t.select_rows(cat, &[3, 1, 1]);
            t.concat_rows(&[sel, cat])
        });
    }

    #[test]
    fn convolution_pieces() {
        let p = random_params(&[("emb", 6, 3), ("wh", 6, 4), ("wv", 3, 2)], 3);
        check_grad(&p, &|t| {
            let e = t.gather(p.expect_id("emb"), &[2, 0, 5, 2]);
            let wins = vec![
                vec![None, None, Some(0)],
                vec![None, Some(0), Some(1)],
                vec![Some(0), Some(1), Some(2)],
                vec![Some(1), Some(2), Some(3)],
            ];
            let stacked = t.window_concat(e, wins.clone());
            let wv = t_param(t, &p, "wv");
            let v = t.vertical_conv(stacked, wv, 3);
            let pairs: Vec<Vec<Option<usize>>> = wins
                .iter()
                .flat_map(|w| vec![vec![w[0], w[1]], vec![w[1], w[2]]])
                .collect();
            let h = t.window_concat(e, pairs);
            let wh = t.param(p.expect_id("wh"));
            let conv = t.matmul(h, wh);
            let pooled = t.group_max(conv, 2);
            t.concat_cols(&[pooled, v])
        });
    }

    fn t_param(t: &mut Tape, p: &ParamSet, name: &str) -> Var {
        t.param(p.expect_id(name))
    }

    #[test]
    fn gather_padding_row_is_zero_and_gets_no_gradient() {
        let p = random_params(&[("emb", 4, 2)], 4);
        let mut t = Tape::new(&p);
        let e = t.gather(p.expect_id("emb"), &[0, 3]);
        assert_eq!(t.value(e).row(0), &[0.0, 0.0]);
        let mut g = p.zeros_like();
        t.backward(e, Matrix::from_vec(2, 2, vec![1.0; 4]), &mut g);
        assert_eq!(g.tensors()[0].row(0), &[0.0, 0.0]);
        assert_eq!(g.tensors()[0].row(3), &[1.0, 1.0]);
    }
}
