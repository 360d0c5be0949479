//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] records one forward pass. Values are computed eagerly as ops
//! are recorded; [`Graph::backward`] walks the tape in reverse and leaves a
//! gradient on every node that depends on a parameter.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x + row` with `row` broadcast over the rows of `x`.
    AddRow(Var, Var),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Tensor),
    /// `(x - shift[c]) * scale[c]` per column with constant shift/scale.
    ColumnAffine(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusNorm(Var),
    MeanSq(Var),
    BatchNorm { x: Var, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable input; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`. Zero if `v`
    /// did not influence it.
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| {
                let (r, c) = self.shape(v);
                Tensor::zeros(r, c)
            })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`; used for linear layers with weights stored `out x in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::shape(
                "matmul_nt",
                format!("({ar}, {ac}) x ({br}, {bc})^T"),
            ));
        }
        let mut out = Tensor::zeros(ar, br);
        gemm_acc(self.value(a), false, self.value(b), true, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with("mul", self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with("div", self.value(b), |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("({r}, {c}) + {:?}", self.shape(row)),
            ));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(row).as_slice().to_vec();
        for i in 0..r {
            for (v, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), ng))
    }

    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        let value = self.value(x).zip_with("mul_const", &k, |a, b| a * b)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::MulConst(x, k), ng))
    }

    /// Per-column `(x - shift) * scale` with constant parameters.
    pub fn column_affine(&mut self, x: Var, shift: &[f64], scale: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if shift.len() != c || scale.len() != c {
            return Err(Error::shape(
                "column_affine",
                format!("{c} columns, {} shifts, {} scales", shift.len(), scale.len()),
            ));
        }
        let mut value = self.value(x).clone();
        for i in 0..r {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = (*v - shift[j]) * scale[j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(value, Op::ColumnAffine(x, scale.to_vec()), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `log(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(value, Op::Mean(x), ng)
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).frobenius_norm());
        let ng = self.needs(x);
        self.push(value, Op::FrobeniusNorm(x), ng)
    }

    pub fn mean_sq(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.as_slice().iter().map(|v| v * v).sum::<f64>() / t.len() as f64);
        let ng = self.needs(x);
        self.push(value, Op::MeanSq(x), ng)
    }

    /// Train-mode batch normalization without affine parameters: each column
    /// is centred and divided by `sqrt(var + eps)` using the population
    /// variance of the batch. Returns the output and the batch statistics.
    pub(crate) fn batchnorm_train(
        &mut self,
        x: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c) = self.shape(x);
        if n < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = xv.clone();
        for i in 0..n {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let ng = self.needs(x);
        let out = self.push(value, Op::BatchNorm { x, inv_std }, ng);
        Ok((out, mean, var))
    }

    /// Backpropagate from a `1 x 1` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, gout: &Tensor) {
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            gout.zip_with("grad", a, f).expect("gradient shape")
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    let mut ga = Tensor::zeros(self.shape(a).0, self.shape(a).1);
                    gemm_acc(gout, false, self.value(b), true, &mut ga);
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let mut gb = Tensor::zeros(self.shape(b).0, self.shape(b).1);
                    gemm_acc(self.value(a), true, gout, false, &mut gb);
                    self.accumulate(b, gb);
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.needs(a) {
                    let mut ga = Tensor::zeros(self.shape(a).0, self.shape(a).1);
                    gemm_acc(gout, false, self.value(b), false, &mut ga);
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let mut gb = Tensor::zeros(self.shape(b).0, self.shape(b).1);
                    gemm_acc(gout, true, self.value(a), false, &mut gb);
                    self.accumulate(b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, gout.clone());
                self.accumulate(b, gout.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(a, gout.clone());
                self.accumulate(b, gout.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                let ga = zip(self.value(b), &|g, y| g * y);
                let gb = zip(self.value(a), &|g, x| g * x);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Div(a, b) => {
                let ga = zip(self.value(b), &|g, y| g / y);
                let out = &self.nodes[idx].value;
                let gb = gout
                    .zip_with("grad", out, |g, q| g * q)
                    .and_then(|t| t.zip_with("grad", self.value(b), |gq, y| -gq / y))
                    .expect("gradient shape");
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::AddRow(x, row) => {
                self.accumulate(x, gout.clone());
                if self.needs(row) {
                    let mut gr = vec![0.0; gout.cols()];
                    for i in 0..gout.rows() {
                        for (s, g) in gr.iter_mut().zip(gout.row(i)) {
                            *s += g;
                        }
                    }
                    self.accumulate(row, Tensor::row_vector(&gr));
                }
            }
            Op::MulConst(x, k) => {
                let x = *x;
                let g = zip(k, &|g, m| g * m);
                self.accumulate(x, g);
            }
            Op::ColumnAffine(x, scale) => {
                let x = *x;
                let mut g = gout.clone();
                for i in 0..g.rows() {
                    for (v, s) in g.row_mut(i).iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                self.accumulate(x, g);
            }
            &Op::Scale(x, s) => self.accumulate(x, gout.scale(s)),
            &Op::AddScalar(x) => self.accumulate(x, gout.clone()),
            &Op::Tanh(x) => {
                let g = zip(&self.nodes[idx].value, &|g, t| g * (1.0 - t * t));
                self.accumulate(x, g);
            }
            &Op::Softplus(x) => {
                let g = zip(self.value(x), &|g, v| g * sigmoid(v));
                self.accumulate(x, g);
            }
            &Op::Log(x) => {
                let g = zip(self.value(x), &|g, v| g / v);
                self.accumulate(x, g);
            }
            &Op::Sqrt(x) => {
                let g = zip(&self.nodes[idx].value, &|g, s| {
                    if s > 0.0 {
                        g * 0.5 / s
                    } else {
                        0.0
                    }
                });
                self.accumulate(x, g);
            }
            &Op::Square(x) => {
                let g = zip(self.value(x), &|g, v| 2.0 * g * v);
                self.accumulate(x, g);
            }
            &Op::Abs(x) => {
                let g = zip(self.value(x), &|g, v| g * sign(v));
                self.accumulate(x, g);
            }
            &Op::Sum(x) => {
                let (r, c) = self.shape(x);
                self.accumulate(x, Tensor::filled(r, c, gout.item()));
            }
            &Op::Mean(x) => {
                let (r, c) = self.shape(x);
                let n = (r * c) as f64;
                self.accumulate(x, Tensor::filled(r, c, gout.item() / n));
            }
            &Op::FrobeniusNorm(x) => {
                let norm = self.nodes[idx].value.item();
                // Subgradient 0 at the origin.
                let k = if norm > 0.0 { gout.item() / norm } else { 0.0 };
                let g = self.value(x).scale(k);
                self.accumulate(x, g);
            }
            &Op::MeanSq(x) => {
                let n = self.value(x).len() as f64;
                let g = self.value(x).scale(2.0 * gout.item() / n);
                self.accumulate(x, g);
            }
            Op::BatchNorm { x, inv_std } => {
                let x = *x;
                let xhat = &self.nodes[idx].value;
                let (n, c) = xhat.shape();
                let nf = n as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        let g = gout.get(i, j);
                        sum_g[j] += g;
                        sum_gx[j] += g * xhat.get(i, j);
                    }
                }
                let mut gx = Tensor::zeros(n, c);
                for i in 0..n {
                    for j in 0..c {
                        let v = inv_std[j] / nf
                            * (nf * gout.get(i, j) - sum_g[j] - xhat.get(i, j) * sum_gx[j]);
                        gx.set(i, j, v);
                    }
                }
                self.accumulate(x, gx);
            }
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.value(y).item(), 0.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 1.0);
    }

    #[test]
    fn frobenius_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::identity(3));
        let n = g.frobenius_norm(x);
        assert!((g.value(n).item() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn frobenius_grad_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        let n = g.frobenius_norm(x);
        g.backward(n).unwrap();
        assert_eq!(g.grad(x), Tensor::zeros(2, 2));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(2, 3));
        let b = g.param(Tensor::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        let c = g.param(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
        let r = g.param(Tensor::zeros(1, 2));
        assert!(g.add_row(a, r).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn constants_get_no_gradient_storage() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(2, 2, 1.0));
        let w = g.param(Tensor::filled(2, 2, 2.0));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x), Tensor::zeros(2, 2));
        assert_eq!(g.grad(w), Tensor::filled(2, 2, 2.0));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).item(), 7.0);
    }
}
