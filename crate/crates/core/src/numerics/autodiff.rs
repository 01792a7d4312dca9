//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records one forward computation. Parameters enter through
//! [`Tape::param`] and are identified by their index in the owning
//! parameter store; [`Tape::backward`] returns the gradient for each of them.
//! Tapes are single-threaded; batch parallelism builds one tape per trial and
//! sums the resulting [`Gradients`] in a fixed order.

use std::sync::Arc;

use super::kernels::{log_softmax_in_place, normalized_centered_rows, softmax_in_place};
use super::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Tensor>),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    Ln(Var),
    CenterNormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to each parameter index.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(n: usize) -> Self {
        Gradients {
            by_param: vec![None; n],
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.by_param.get(idx).and_then(|g| g.as_ref())
    }

    /// Add `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (dst, src) in self.by_param.iter_mut().zip(other.by_param) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.add_assign(&s),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|g| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(|g| g.all_finite())
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters are recorded as constants; `backward`
    /// yields no gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Constant, false)
    }

    pub fn param(&mut self, index: usize, t: &Arc<Tensor>) -> Var {
        if self.grad_enabled {
            self.push_arc(t.clone(), Op::Param(index), true)
        } else {
            self.push_arc(t.clone(), Op::Constant, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul_t(ta, self.value(b), tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "add shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "sub shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "mul shape mismatch");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + 1·bias`, broadcasting a `1 × n` bias over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        assert_eq!(b.len(), cols, "bias width");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant tensor (masks, dropout, targets).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        assert_eq!(self.value(a).len(), c.len(), "mul_const size");
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(&[rows, d]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let dst = &mut xhat.data_mut()[r * d..(r + 1) * d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((o, gg), bb) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let c = v.cols();
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let out = Tensor::from_rows(len, c, v.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_rows(r, len, out);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            let c = v.cols();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_rows(rows, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Tensor::from_rows(rows, cols, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(&[rows, cols])
            .expect("reshape size");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Row `i` of the result is row `index[i]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_rows(index.len(), c, data);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, index.to_vec()), rg)
    }

    /// Natural log; the input must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Rows centered over columns and scaled to unit norm; constant rows
    /// become zero rows and pass no gradient.
    pub fn center_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (out, degenerate) = normalized_centered_rows(v);
        let t = v.cols();
        let norms = (0..v.rows())
            .map(|i| {
                if degenerate.binary_search(&i).is_ok() {
                    0.0
                } else {
                    let row = v.row(i);
                    let m = row.iter().sum::<f64>() / t as f64;
                    row.iter().map(|y| (y - m) * (y - m)).sum::<f64>().sqrt()
                }
            })
            .collect();
        let rg = self.rg(x);
        self.push(out, Op::CenterNormalizeRows { x, norms }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var, n_params: usize) -> Gradients {
        let mut out = Gradients::new(n_params);
        if !self.grad_enabled {
            return out;
        }
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.rg(v) {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(i) => match out.by_param[*i].as_mut() {
                Some(existing) => existing.add_assign(&g),
                None => out.by_param[*i] = Some(g),
            },
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = op(A) op(B): dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                if self.rg(*a) {
                    let ga = if *ta {
                        bv.matmul_t(*tb, &g, true)
                    } else {
                        g.matmul_t(false, bv, !*tb)
                    };
                    acc(*a, ga, grads);
                }
                if self.rg(*b) {
                    let gb = if *tb {
                        g.matmul_t(true, av, *ta)
                    } else {
                        av.matmul_t(!*ta, &g, false)
                    };
                    acc(*b, gb, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone(), grads);
                acc(*a, g, grads);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|x| -x), grads);
                acc(*a, g, grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y), grads);
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y), grads);
                }
            }
            Op::AddBias(a, bias) => {
                if self.rg(*bias) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    acc(*bias, Tensor::new(shape, gb).expect("bias shape"), grads);
                }
                acc(*a, g, grads);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s), grads),
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y), grads),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y), grads),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y)), grads),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y)), grads),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y)), grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gv = self.value(*gamma);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gbeta = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                            gbeta[j] += grow[j];
                        }
                    }
                    let gs = gv.shape().to_vec();
                    acc(*gamma, Tensor::new(gs.clone(), gg).unwrap(), grads);
                    acc(*beta, Tensor::new(gs, gbeta).unwrap(), grads);
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let xr = &xhat.data()[r * d..(r + 1) * d];
                        let mut mean_dy = 0.0;
                        let mut mean_dy_x = 0.0;
                        for j in 0..d {
                            let dy = grow[j] * gv.data()[j];
                            mean_dy += dy;
                            mean_dy_x += dy * xr[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_x /= d as f64;
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dy = grow[j] * gv.data()[j];
                            dst[j] = is * (dy - mean_dy - xr[j] * mean_dy_x);
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let c = p.cols();
                let mut gx = Tensor::zeros(p.shape());
                for r in 0..p.rows() {
                    let pr = p.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, gx, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let lp = &node.value;
                let c = lp.cols();
                let mut gx = Tensor::zeros(lp.shape());
                for r in 0..lp.rows() {
                    let lr = lp.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                acc(*a, gx, grads);
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut gx = Tensor::zeros(src.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, gx, grads);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (r, c) = (src.rows(), src.cols());
                let w = g.cols();
                let mut gx = Tensor::zeros(src.shape());
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, gx, grads);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.rg(*p) {
                        let mut part = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            part.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        }
                        acc(*p, Tensor::from_rows(rows, c, part), grads);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for p in parts {
                    let v = self.value(*p);
                    let n = v.len();
                    if self.rg(*p) {
                        let part = g.data()[off..off + n].to_vec();
                        acc(*p, Tensor::new(v.shape().to_vec(), part).unwrap(), grads);
                    }
                    off += v.rows() * c;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.reshape(&shape).unwrap(), grads);
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::full(&shape, s), grads);
            }
            Op::GatherRows(a, index) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut gx = Tensor::zeros(src.shape());
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for (d, v) in dst.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                acc(*a, gx, grads);
            }
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y), grads),
            Op::CenterNormalizeRows { x, norms } => {
                let u = &node.value;
                let t = u.cols();
                let mut gx = Tensor::zeros(u.shape());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let ur = u.row(r);
                    let gr = &g.data()[r * t..(r + 1) * t];
                    let dot: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dst = &mut gx.data_mut()[r * t..(r + 1) * t];
                    let mut mean = 0.0;
                    for j in 0..t {
                        dst[j] = (gr[j] - ur[j] * dot) / norm;
                        mean += dst[j];
                    }
                    mean /= t as f64;
                    for v in dst.iter_mut() {
                        *v -= mean;
                    }
                }
                acc(*x, gx, grads);
            }
        }
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
