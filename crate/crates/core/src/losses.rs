//! Training objectives.
//!
//! Graph functions take `&mut Graph` and return a differentiable `1 x 1`
//! node; the `*_value` helpers evaluate the same expressions on plain
//! tensors. Forecasts are laid out `batch x m` (one row per forecast).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{coherency, AggregationMatrix};
use crate::numerics::{Graph, Tensor, Var};

/// Weights `W` (`m x d`) and bias `b` (length `m`) of the layer that
/// produces the forecast: `y = W z + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalLinearLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl FinalLinearLayer {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape(
                "FinalLinearLayer",
                format!("weight {:?} with bias of length {}", weight.shape(), bias.len()),
            ));
        }
        Ok(FinalLinearLayer { weight, bias })
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    /// `z W^T + b` for a `batch x d` input.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = z.matmul(&self.weight.transpose())?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// `(||W - A W||_F, ||b - A b||_2)`.
    pub fn incoherence(&self, a: &AggregationMatrix) -> Result<(f64, f64)> {
        check_dim("core_regularizer", a, self.outputs())?;
        let aw = a.entries().matmul(&self.weight)?;
        let w_term = self.weight.sub(&aw)?.frobenius_norm();
        let ab = a.apply(&self.bias)?;
        let b_term = self
            .bias
            .iter()
            .zip(&ab)
            .map(|(b, s)| (b - s) * (b - s))
            .sum::<f64>()
            .sqrt();
        Ok((w_term, b_term))
    }
}

fn check_dim(op: &'static str, a: &AggregationMatrix, m: usize) -> Result<()> {
    if a.dim() != m {
        return Err(Error::shape(
            op,
            format!("aggregation matrix is {0}x{0}, layer has {m} outputs", a.dim()),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccuracyLoss {
    #[default]
    Mse,
    Mae,
}

pub fn mse(g: &mut Graph, yhat: Var, y: Var) -> Result<Var> {
    let d = g.sub(yhat, y)?;
    Ok(g.mean_sq(d))
}

pub fn mae(g: &mut Graph, yhat: Var, y: Var) -> Result<Var> {
    let d = g.sub(yhat, y)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub fn accuracy(g: &mut Graph, kind: AccuracyLoss, yhat: Var, y: Var) -> Result<Var> {
    match kind {
        AccuracyLoss::Mse => mse(g, yhat, y),
        AccuracyLoss::Mae => mae(g, yhat, y),
    }
}

/// `||W - A W||_F + ||b - A b||_2` with `weight` an `m x d` node and `bias`
/// a `1 x m` node.
pub fn core_regularizer(
    g: &mut Graph,
    weight: Var,
    bias: Var,
    a: &AggregationMatrix,
) -> Result<Var> {
    check_dim("core_regularizer", a, g.shape(weight).0)?;
    if g.shape(bias) != (1, a.dim()) {
        return Err(Error::shape(
            "core_regularizer",
            format!("bias node {:?}, expected (1, {})", g.shape(bias), a.dim()),
        ));
    }
    let a_node = g.constant(a.entries().clone());
    let aw = g.matmul(a_node, weight)?;
    let dw = g.sub(weight, aw)?;
    let nw = g.frobenius_norm(dw);
    // Row-vector bias: (A b)^T = b^T A^T.
    let ab = g.matmul_nt(bias, a_node)?;
    let db = g.sub(bias, ab)?;
    let nb = g.frobenius_norm(db);
    g.add(nw, nb)
}

pub fn core_regularizer_value(layer: &FinalLinearLayer, a: &AggregationMatrix) -> Result<f64> {
    let (w, b) = layer.incoherence(a)?;
    Ok(w + b)
}

/// `weight * l_c + accuracy(yhat, y)`. The regularizer is omitted from the
/// graph entirely when `weight == 0`.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    g: &mut Graph,
    yhat: Var,
    y: Var,
    layer_weight: Var,
    layer_bias: Var,
    a: &AggregationMatrix,
    weight: f64,
    kind: AccuracyLoss,
) -> Result<Var> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coherency weight must be nonnegative, got {weight}"
        )));
    }
    let acc = accuracy(g, kind, yhat, y)?;
    if weight == 0.0 {
        return Ok(acc);
    }
    let reg = core_regularizer(g, layer_weight, layer_bias, a)?;
    let reg = g.scale(reg, weight);
    g.add(acc, reg)
}

/// Per-row upper bound `||z_row|| ||W - A W||_F + ||b - A b||` on the
/// coherency of `layer.forward(z)`.
pub fn coherency_bound(
    layer: &FinalLinearLayer,
    a: &AggregationMatrix,
    z: &Tensor,
) -> Result<Vec<f64>> {
    if z.cols() != layer.inputs() {
        return Err(Error::shape(
            "coherency_bound",
            format!("z has {} columns, layer expects {}", z.cols(), layer.inputs()),
        ));
    }
    let (w, b) = layer.incoherence(a)?;
    Ok((0..z.rows())
        .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() * w + b)
        .collect())
}

/// Coherency of every row of a `batch x m` tensor.
pub fn row_coherency(y: &Tensor, a: &AggregationMatrix) -> Result<Vec<f64>> {
    (0..y.rows()).map(|i| coherency(y.row(i), a)).collect()
}

/// Independent Gaussian forecast for every series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl GaussianForecast {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        let f = GaussianForecast { mean, stddev };
        f.validate()?;
        Ok(f)
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.stddev.len() {
            return Err(Error::shape(
                "GaussianForecast",
                format!("{} means, {} stddevs", self.mean.len(), self.stddev.len()),
            ));
        }
        if let Some(s) = self.stddev.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "stddev must be positive, got {s}"
            )));
        }
        Ok(())
    }
}

/// Squared moment distance between each series' Gaussian and the Gaussian
/// obtained by summing its leaves independently:
/// `sum_i (mu_i - (A mu)_i)^2 + (sigma_i - sqrt((A sigma^2)_i))^2`.
pub fn profhit_consistency(f: &GaussianForecast, a: &AggregationMatrix) -> Result<f64> {
    f.validate()?;
    check_dim("profhit_consistency", a, f.mean.len())?;
    let amu = a.apply(&f.mean)?;
    let var: Vec<f64> = f.stddev.iter().map(|s| s * s).collect();
    let avar = a.apply(&var)?;
    Ok((0..f.mean.len())
        .map(|i| (f.mean[i] - amu[i]).powi(2) + (f.stddev[i] - avar[i].sqrt()).powi(2))
        .sum())
}

/// Batch version of [`profhit_consistency`], averaged over rows. `mean` and
/// `stddev` are `batch x m` nodes.
pub fn profhit_consistency_graph(
    g: &mut Graph,
    mean: Var,
    stddev: Var,
    a: &AggregationMatrix,
) -> Result<Var> {
    let (n, m) = g.shape(mean);
    check_dim("profhit_consistency", a, m)?;
    let a_node = g.constant(a.entries().clone());
    let amu = g.matmul_nt(mean, a_node)?;
    let dmu = g.sub(mean, amu)?;
    let dmu2 = g.square(dmu);
    let var = g.square(stddev);
    let avar = g.matmul_nt(var, a_node)?;
    let asd = g.sqrt(avar);
    let dsd = g.sub(stddev, asd)?;
    let dsd2 = g.square(dsd);
    let total = g.add(dmu2, dsd2)?;
    let s = g.sum(total);
    Ok(g.scale(s, 1.0 / n as f64))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Mean negative log-likelihood of `y` under independent Gaussians.
pub fn gaussian_nll(g: &mut Graph, mean: Var, stddev: Var, y: Var) -> Result<Var> {
    let d = g.sub(y, mean)?;
    let z = g.div(d, stddev)?;
    let z2 = g.square(z);
    let half = g.scale(z2, 0.5);
    let ls = g.log(stddev);
    let per = g.add(ls, half)?;
    let per = g.add_scalar(per, HALF_LN_2PI);
    Ok(g.mean(per))
}

pub fn gaussian_nll_value(f: &GaussianForecast, y: &[f64]) -> Result<f64> {
    f.validate()?;
    if y.len() != f.mean.len() {
        return Err(Error::shape(
            "gaussian_nll",
            format!("{} targets for {} series", y.len(), f.mean.len()),
        ));
    }
    let total: f64 = (0..y.len())
        .map(|i| {
            let z = (y[i] - f.mean[i]) / f.stddev[i];
            f.stddev[i].ln() + 0.5 * z * z + HALF_LN_2PI
        })
        .sum();
    Ok(total / y.len() as f64)
}

pub fn mse_value(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    let d = yhat.sub(y)?;
    Ok(d.as_slice().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

pub fn mae_value(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    let d = yhat.sub(y)?;
    Ok(d.as_slice().iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64)
}
