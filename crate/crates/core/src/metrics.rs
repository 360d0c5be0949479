//! Evaluation metrics. Panels are `m x T` (series by timestep).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{coherency, AggregationMatrix, HierarchySpec};
use crate::numerics::Tensor;

pub const CRPS_ESTIMATOR: &str =
    "energy form: mean|x_i - y| - sum_ij |x_i - x_j| / (2 n^2), averaged over series and timesteps";
pub const COHERENCY_NORMALIZATION: &str = "mean over timesteps (or samples) of ||y - A y||_2";
pub const AVERAGE_MSE_WEIGHTING: &str = "entry-weighted mean over all series and timesteps";

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sum |yhat - y| / sum y` over all entries.
pub fn wmape(yhat: &Tensor, y: &Tensor) -> Result<f64> {
    let rows: Vec<usize> = (0..y.rows()).collect();
    wmape_rows(yhat, y, &rows)
}

/// WMAPE restricted to the given series (rows).
pub fn wmape_rows(yhat: &Tensor, y: &Tensor, rows: &[usize]) -> Result<f64> {
    check_same("wmape", yhat, y)?;
    let mut abs_err = 0.0;
    let mut volume = 0.0;
    for &r in rows {
        for (p, t) in yhat.row(r).iter().zip(y.row(r)) {
            abs_err += (p - t).abs();
            volume += t;
        }
    }
    if !(volume > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "WMAPE denominator (sum of targets) is {volume}; it must be positive"
        )));
    }
    Ok(abs_err / volume)
}

fn mse_rows(yhat: &Tensor, y: &Tensor, rows: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for &r in rows {
        for (p, t) in yhat.row(r).iter().zip(y.row(r)) {
            total += (p - t) * (p - t);
            count += 1;
        }
    }
    total / count as f64
}

/// Mean squared error for each hierarchy level.
pub fn mse_per_level(
    yhat: &Tensor,
    y: &Tensor,
    spec: &HierarchySpec,
) -> Result<BTreeMap<u32, f64>> {
    check_same("mse_per_level", yhat, y)?;
    if y.rows() != spec.len() {
        return Err(Error::shape(
            "mse_per_level",
            format!("{} rows for {} series", y.rows(), spec.len()),
        ));
    }
    if y.cols() == 0 {
        return Err(Error::InvalidArgument("mse_per_level needs T >= 1".into()));
    }
    let mut out = BTreeMap::new();
    for level in spec.levels() {
        let rows = spec.nodes_at_level(level);
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!("level {level} is empty")));
        }
        out.insert(level, mse_rows(yhat, y, &rows));
    }
    Ok(out)
}

/// Sample-based CRPS for one scalar target.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidArgument("CRPS needs at least one sample".into()));
    }
    let nf = n as f64;
    let abs_term = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    // sum_ij |x_i - x_j| = 2 sum_k gap_k k (n - k), gap_k = x_(k) - x_(k-1).
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pair: f64 = sorted
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let k = (i + 1) as f64;
            (w[1] - w[0]) * k * (nf - k)
        })
        .sum::<f64>()
        * 2.0;
    Ok((abs_term - pair / (2.0 * nf * nf)).max(0.0))
}

/// Mean CRPS over every (series, timestep) of an `m x T` target, with one
/// `m x T` tensor per sample.
pub fn crps_panel(samples: &[Tensor], y: &Tensor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("CRPS needs at least one sample".into()));
    }
    for s in samples {
        check_same("crps_panel", s, y)?;
    }
    let mut total = 0.0;
    let mut buf = vec![0.0; samples.len()];
    for k in 0..y.len() {
        for (b, s) in buf.iter_mut().zip(samples) {
            *b = s.as_slice()[k];
        }
        total += crps_empirical(&buf, y.as_slice()[k])?;
    }
    Ok(total / y.len() as f64)
}

/// Mean coherency over the rows of an `n x m` sample matrix.
pub fn coherency_of_samples(samples: &Tensor, a: &AggregationMatrix) -> Result<f64> {
    if samples.cols() != a.dim() {
        return Err(Error::shape(
            "coherency_of_samples",
            format!("{} columns for m = {}", samples.cols(), a.dim()),
        ));
    }
    if samples.rows() == 0 {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = 0.0;
    for i in 0..samples.rows() {
        total += coherency(samples.row(i), a)?;
    }
    Ok(total / samples.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse_per_level: BTreeMap<u32, f64>,
    pub wmape_per_level: BTreeMap<u32, f64>,
    pub average_mse: f64,
    pub overall_wmape: f64,
    /// Mean per-timestep coherency of the point forecast.
    pub coherency: f64,
    pub crps: Option<f64>,
    /// Mean per-sample coherency over all drawn samples.
    pub sample_coherency: Option<f64>,
    pub n_series: usize,
    pub n_timesteps: usize,
    pub n_samples: usize,
    pub config_hash: String,
    pub crps_estimator: String,
    pub coherency_normalization: String,
    pub average_mse_weighting: String,
}

impl MetricsReport {
    /// Evaluate an `m x T` point forecast and optional `m x T` samples.
    pub fn evaluate(
        yhat: &Tensor,
        y: &Tensor,
        spec: &HierarchySpec,
        a: &AggregationMatrix,
        samples: Option<&[Tensor]>,
        config_hash: &str,
    ) -> Result<Self> {
        let mse_per_level = mse_per_level(yhat, y, spec)?;
        let mut wmape_per_level = BTreeMap::new();
        for level in spec.levels() {
            wmape_per_level.insert(level, wmape_rows(yhat, y, &spec.nodes_at_level(level))?);
        }
        let all: Vec<usize> = (0..spec.len()).collect();
        let (crps, sample_coherency) = match samples {
            Some(s) if !s.is_empty() => {
                let crps = crps_panel(s, y)?;
                let mut total = 0.0;
                for sample in s {
                    total += crate::hierarchy::coherency_panel(sample, a)?;
                }
                (Some(crps), Some(total / s.len() as f64))
            }
            _ => (None, None),
        };
        let report = MetricsReport {
            mse_per_level,
            wmape_per_level,
            average_mse: mse_rows(yhat, y, &all),
            overall_wmape: wmape(yhat, y)?,
            coherency: crate::hierarchy::coherency_panel(yhat, a)?,
            crps,
            sample_coherency,
            n_series: y.rows(),
            n_timesteps: y.cols(),
            n_samples: samples.map_or(0, <[Tensor]>::len),
            config_hash: config_hash.to_string(),
            crps_estimator: CRPS_ESTIMATOR.to_string(),
            coherency_normalization: COHERENCY_NORMALIZATION.to_string(),
            average_mse_weighting: AVERAGE_MSE_WEIGHTING.to_string(),
        };
        report.check()?;
        Ok(report)
    }

    fn check(&self) -> Result<()> {
        let mut values = vec![self.average_mse, self.overall_wmape, self.coherency];
        values.extend(self.mse_per_level.values());
        values.extend(self.wmape_per_level.values());
        values.extend(self.crps);
        values.extend(self.sample_coherency);
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "metrics must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec![
            "config_hash".to_string(),
            "average_mse".into(),
            "overall_wmape".into(),
            "coherency".into(),
            "crps".into(),
            "sample_coherency".into(),
        ];
        h.extend(self.mse_per_level.keys().map(|l| format!("mse_level_{l}")));
        h.extend(self.wmape_per_level.keys().map(|l| format!("wmape_level_{l}")));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut r = vec![
            self.config_hash.clone(),
            self.average_mse.to_string(),
            self.overall_wmape.to_string(),
            self.coherency.to_string(),
            opt(self.crps),
            opt(self.sample_coherency),
        ];
        r.extend(self.mse_per_level.values().map(f64::to_string));
        r.extend(self.wmape_per_level.values().map(f64::to_string));
        r
    }
}
