//! Define-by-run reverse-mode differentiation over 2-D tensors.
//!
//! Every operation computes its value eagerly and records enough state on
//! the tape to propagate gradients. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for the trainable parameters only.

use std::borrow::Cow;

use crate::error::{NeuralError, Result};
use crate::params::{Gradients, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_into, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    Gelu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, scale: T, probs: Tensor<T> },
    Bce { p: Var, targets: Vec<T>, scale: T, eps: T },
    Sum(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Trainable parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter treated as a constant for this graph.
    pub fn frozen(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter that is trainable or frozen depending on `trainable`.
    pub fn param_or_frozen(&mut self, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(id)
        } else {
            self.frozen(id)
        }
    }

    /// Copy of `v`'s value as a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        let k = if ta { ar } else { ac };
        let kb = if tb { bc } else { br };
        if k != kb {
            return Err(NeuralError::Shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                [ar, ac],
                if ta { "^T" } else { "" },
                [br, bc],
                if tb { "^T" } else { "" }
            )));
        }
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NeuralError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [_, cols] = self.shape(x);
        if self.shape(bias) != [1, cols] {
            return Err(NeuralError::Shape(format!(
                "bias {:?} does not broadcast over {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = Tensor::from_vec(
            self.shape(a)[0],
            self.shape(a)[1],
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if self.shape(gamma) != [1, cols] || self.shape(beta) != [1, cols] {
            return Err(NeuralError::Shape("layer norm affine shape".into()));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_f64(cols as f64);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g[c] * xh[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::ONE + (c * (v + k * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::ZERO { v } else { v * slope });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is
    /// excluded and its probability is exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let [rows, cols] = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &xv.row(r)[..limit];
            let max = row.iter().copied().fold(row[0], T::max);
            let o = out.row_mut(r);
            let mut total = T::ZERO;
            for (dst, &v) in o[..limit].iter_mut().zip(row) {
                let e = (v - max).exp();
                *dst = e;
                total += e;
            }
            let inv = T::ONE / total;
            for dst in &mut o[..limit] {
                *dst *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.shape(x);
        if start + len > cols {
            return Err(NeuralError::Shape(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn(rows, len, |r, c| xv.get(r, start + c));
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(NeuralError::Shape("concat: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.shape(x)[0];
        if start + len > rows {
            return Err(NeuralError::Shape(format!(
                "row slice {start}..{} out of {rows}",
                start + len
            )));
        }
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Gathers rows of `table` by index.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(NeuralError::Argument(format!(
                "embedding index {bad} out of {}",
                tv.rows()
            )));
        }
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// `scale * sum_i -log softmax(logits_i)[target_i]` over rows whose
    /// target is `Some`. Rows with `None` contribute neither loss nor gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        scale: T,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let [rows, cols] = lv.shape();
        if targets.len() != rows {
            return Err(NeuralError::Shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut probs = Tensor::zeros(rows, cols);
        let mut total = T::ZERO;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= cols {
                return Err(NeuralError::Argument(format!("target {t} out of {cols}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            let pr = probs.row_mut(r);
            for (p, &v) in pr.iter_mut().zip(row) {
                let e = (v - max).exp();
                *p = e;
                z += e;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += z.ln() + max - row[t];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                scale,
                probs,
            },
            ng,
        ))
    }

    /// `scale * sum_i BCE(target_i, p_i)` for an `n x 1` column of
    /// probabilities, each clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, targets: &[T], scale: T, eps: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.cols() != 1 || pv.rows() != targets.len() {
            return Err(NeuralError::Shape(format!(
                "bce expects {}x1 probabilities, got {:?}",
                targets.len(),
                pv.shape()
            )));
        }
        let total = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| bce_value(t, p, eps))
            .sum::<T>();
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                scale,
                eps,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every trainable
    /// parameter that influenced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(NeuralError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.ng(a) {
                        // d op(a) = g * op(b)^T
                        let buf = self.grad_buf(&mut grads, a);
                        let bv = self.value(b);
                        if ta {
                            // a^T = g op(b)^T  =>  a = op(b) g^T
                            matmul_into(bv, tb, &g, true, T::ONE, T::ONE, buf);
                        } else {
                            matmul_into(&g, false, bv, !tb, T::ONE, T::ONE, buf);
                        }
                    }
                    if self.ng(b) {
                        let buf = self.grad_buf(&mut grads, b);
                        let av = self.value(a);
                        if tb {
                            // b^T = op(a)^T g  =>  b = g^T op(a)
                            matmul_into(&g, true, av, ta, T::ONE, T::ONE, buf);
                        } else {
                            matmul_into(av, !ta, &g, false, T::ONE, T::ONE, buf);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            self.grad_buf(&mut grads, v).add_assign(&g);
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    if self.ng(*x) {
                        self.grad_buf(&mut grads, *x).add_assign(&g);
                    }
                    if self.ng(*bias) {
                        let buf = self.grad_buf(&mut grads, *bias);
                        let acc = buf.data_mut();
                        for r in 0..g.rows() {
                            for (a, &v) in acc.iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.ng(a) {
                        let partner = self.value(b).data();
                        let buf = self.grad_buf(&mut grads, a);
                        for ((d, &gv), &pv) in buf.data_mut().iter_mut().zip(g.data()).zip(partner)
                        {
                            *d += gv * pv;
                        }
                    }
                    if self.ng(b) {
                        let partner = self.value(a).data();
                        let buf = self.grad_buf(&mut grads, b);
                        for ((d, &gv), &pv) in buf.data_mut().iter_mut().zip(g.data()).zip(partner)
                        {
                            *d += gv * pv;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    let buf = self.grad_buf(&mut grads, *x);
                    for (d, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * s;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let gam = self.value(*gamma).data().to_vec();
                    if self.ng(*gamma) {
                        let buf = self.grad_buf(&mut grads, *gamma);
                        let acc = buf.data_mut();
                        for r in 0..rows {
                            for ((a, &gv), &h) in acc.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *a += gv * h;
                            }
                        }
                    }
                    if self.ng(*beta) {
                        let buf = self.grad_buf(&mut grads, *beta);
                        let acc = buf.data_mut();
                        for r in 0..rows {
                            for (a, &gv) in acc.iter_mut().zip(g.row(r)) {
                                *a += gv;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let n = T::from_f64(cols as f64);
                        let buf = self.grad_buf(&mut grads, *x);
                        let mut dxhat = vec![T::ZERO; cols];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let hr = xhat.row(r);
                            let mut sum_d = T::ZERO;
                            let mut sum_dh = T::ZERO;
                            for c in 0..cols {
                                dxhat[c] = gr[c] * gam[c];
                                sum_d += dxhat[c];
                                sum_dh += dxhat[c] * hr[c];
                            }
                            let k = inv_std[r] / n;
                            for (c, d) in buf.row_mut(r).iter_mut().enumerate() {
                                *d += k * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_K);
                    let half = T::from_f64(0.5);
                    let three_k = T::from_f64(3.0 * GELU_K);
                    let xv = self.value(*x).data();
                    let buf = self.grad_buf(&mut grads, *x);
                    for ((d, &gv), &v) in buf.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::ONE - t * t) * c * (T::ONE + three_k * v * v);
                        *d += gv * (half * (T::ONE + t) + half * v * dt);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let slope = *slope;
                    let xv = self.value(*x).data();
                    let buf = self.grad_buf(&mut grads, *x);
                    for ((d, &gv), &v) in buf.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        *d += if v > T::ZERO { gv } else { gv * slope };
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let buf = self.grad_buf(&mut grads, *x);
                    for ((d, &gv), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(yv) {
                        *d += gv * y * (T::ONE - y);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let buf = self.grad_buf(&mut grads, *x);
                    for r in 0..g.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in buf.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let start = *start;
                    let buf = self.grad_buf(&mut grads, *x);
                    for r in 0..g.rows() {
                        for (d, &gv) in buf.row_mut(r)[start..start + g.cols()]
                            .iter_mut()
                            .zip(g.row(r))
                        {
                            *d += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.ng(p) {
                            let buf = self.grad_buf(&mut grads, p);
                            for r in 0..g.rows() {
                                for (d, &gv) in buf
                                    .row_mut(r)
                                    .iter_mut()
                                    .zip(&g.row(r)[offset..offset + w])
                                {
                                    *d += gv;
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let start = *start;
                    let buf = self.grad_buf(&mut grads, *x);
                    for r in 0..g.rows() {
                        for (d, &gv) in buf.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    let buf = self.grad_buf(&mut grads, *x);
                    for (d, &gv) in buf.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
                Op::Embed { table, ids } => {
                    let buf = self.grad_buf(&mut grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, &gv) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    scale,
                    probs,
                } => {
                    let k = g.get(0, 0) * *scale;
                    let buf = self.grad_buf(&mut grads, *logits);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for (c, (d, &p)) in buf.row_mut(r).iter_mut().zip(probs.row(r)).enumerate()
                        {
                            let onehot = if c == t { T::ONE } else { T::ZERO };
                            *d += k * (p - onehot);
                        }
                    }
                }
                Op::Bce {
                    p,
                    targets,
                    scale,
                    eps,
                } => {
                    let k = g.get(0, 0) * *scale;
                    let eps = *eps;
                    let pv = self.value(*p).data().to_vec();
                    let buf = self.grad_buf(&mut grads, *p);
                    for ((d, &pr), &t) in buf.data_mut().iter_mut().zip(&pv).zip(targets) {
                        if pr > eps && pr < T::ONE - eps {
                            *d += k * ((T::ONE - t) / (T::ONE - pr) - t / pr);
                        }
                    }
                }
                Op::Sum(x) => {
                    let s = g.get(0, 0);
                    let buf = self.grad_buf(&mut grads, *x);
                    for d in buf.data_mut() {
                        *d += s;
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        let [r, c] = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Binary cross entropy of probability `p` against a (possibly soft)
/// target, with `p` clamped to `[eps, 1 - eps]`.
#[inline]
pub fn bce_value<T: Scalar>(target: T, p: T, eps: T) -> T {
    let p = p.max(eps).min(T::ONE - eps);
    -(target * p.ln() + (T::ONE - target) * (T::ONE - p).ln())
}
