use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::AggregationMatrix;
use crate::numerics::{rng_for, stream};

/// Slack on `c(y) > delta * l_c` so that exactly coherent layers do not
/// register rounding noise as violations.
const REL_SLACK: f64 = 1e-12;

pub const BOUND_DISCREPANCY_NOTE: &str = "statement bound uses 8d^2, proof bound uses 8d \
(E||z||^2 = d); only the proof bound is asserted";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    /// Width of the normalized hidden state z.
    pub d: usize,
    pub n_trials: usize,
    pub deltas: Vec<f64>,
    pub seed: u64,
    /// Draw layers with `W = A W0`, `b = A b0` so that `l_c = 0`.
    pub coherent_layers: bool,
}

impl BoundConfig {
    /// Deltas at fixed multiples of `sqrt(d)`, reaching far enough into the
    /// tail that the proof bound drops below `1e-5`.
    pub fn new(d: usize, n_trials: usize, seed: u64) -> Self {
        let root = (d as f64).sqrt();
        let deltas = [0.0, 0.5, 0.9, 1.0, 1.1, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 11.0]
            .iter()
            .map(|k| k * root)
            .collect();
        BoundConfig {
            d,
            n_trials,
            deltas,
            seed,
            coherent_layers: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub delta: f64,
    pub violations: usize,
    /// Empirical `P(c(y) > delta * l_c)`.
    pub violation_freq: f64,
    /// Empirical `P(||z|| > delta)` from the same draws.
    pub norm_tail_freq: f64,
    /// Draws that violated while `||z|| <= delta`.
    pub violations_inside_ball: usize,
    /// `min(1, 4 exp(-delta^2 / (8 d)))`.
    pub proof_bound: f64,
    /// `min(1, 4 exp(-delta^2 / (8 d^2)))`.
    pub statement_bound: f64,
    pub within_proof_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTable {
    pub d: usize,
    pub m: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub coherent_layers: bool,
    pub rows: Vec<BoundRow>,
    pub note: String,
}

impl BoundTable {
    pub fn all_within_proof_bound(&self) -> bool {
        self.rows.iter().all(|r| r.within_proof_bound)
    }

    pub fn csv_header() -> [&'static str; 10] {
        [
            "d",
            "delta",
            "violations",
            "violation_freq",
            "norm_tail_freq",
            "violations_inside_ball",
            "proof_bound_8d",
            "statement_bound_8d2",
            "within_proof_bound",
            "n_trials",
        ]
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    self.d.to_string(),
                    r.delta.to_string(),
                    r.violations.to_string(),
                    r.violation_freq.to_string(),
                    r.norm_tail_freq.to_string(),
                    r.violations_inside_ball.to_string(),
                    r.proof_bound.to_string(),
                    r.statement_bound.to_string(),
                    r.within_proof_bound.to_string(),
                    self.n_trials.to_string(),
                ]
            })
            .collect()
    }
}

pub fn proof_bound(delta: f64, d: usize) -> f64 {
    (4.0 * (-delta * delta / (8.0 * d as f64)).exp()).min(1.0)
}

pub fn statement_bound(delta: f64, d: usize) -> f64 {
    let d = d as f64;
    (4.0 * (-delta * delta / (8.0 * d * d)).exp()).min(1.0)
}

/// Monte Carlo tail table for `c(y) > delta * l_c(L)` with `y = W z + b`,
/// `z ~ N(0, I_d)` (an idealized batchnorm output) and a fresh Gaussian
/// final layer per trial.
pub fn verify_bound(cfg: &BoundConfig, a: &AggregationMatrix) -> Result<BoundTable> {
    if cfg.d == 0 {
        return Err(Error::InvalidArgument("d must be at least 1".into()));
    }
    if cfg.n_trials < 1000 {
        return Err(Error::InvalidArgument(format!(
            "n_trials must be at least 1000, got {}",
            cfg.n_trials
        )));
    }
    if let Some(bad) = cfg.deltas.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be finite and >= 0, got {bad}")));
    }
    let (m, d) = (a.dim(), cfg.d);
    let groups: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..m).filter(|&j| a.entries().get(i, j) != 0.0).collect())
        .collect();
    let mut rng = rng_for(cfg.seed, stream::BOUND_TRIALS);
    let mut violations = vec![0usize; cfg.deltas.len()];
    let mut inside = vec![0usize; cfg.deltas.len()];
    let mut tails = vec![0usize; cfg.deltas.len()];

    let mut w = vec![0.0; m * d];
    let mut b = vec![0.0; m];
    let mut z = vec![0.0; d];
    let mut y = vec![0.0; m];
    for _ in 0..cfg.n_trials {
        w.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        b.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        if cfg.coherent_layers {
            w = aggregate_rows(&groups, &w, d);
            b = aggregate_rows(&groups, &b, 1);
        }
        let aw = aggregate_rows(&groups, &w, d);
        let ab = aggregate_rows(&groups, &b, 1);
        let lc = dist(&w, &aw) + dist(&b, &ab);

        for i in 0..m {
            y[i] = b[i] + w[i * d..(i + 1) * d].iter().zip(&z).map(|(p, q)| p * q).sum::<f64>();
        }
        let c = dist(&y, &aggregate_rows(&groups, &y, 1));
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();

        for (k, &delta) in cfg.deltas.iter().enumerate() {
            let outside = z_norm > delta;
            if outside {
                tails[k] += 1;
            }
            if c > delta * lc * (1.0 + REL_SLACK) + REL_SLACK * y_norm {
                violations[k] += 1;
                if !outside {
                    inside[k] += 1;
                }
            }
        }
    }

    let n = cfg.n_trials as f64;
    let rows = cfg
        .deltas
        .iter()
        .enumerate()
        .map(|(k, &delta)| {
            let violation_freq = violations[k] as f64 / n;
            let proof = proof_bound(delta, d);
            BoundRow {
                delta,
                violations: violations[k],
                violation_freq,
                norm_tail_freq: tails[k] as f64 / n,
                violations_inside_ball: inside[k],
                proof_bound: proof,
                statement_bound: statement_bound(delta, d),
                within_proof_bound: violation_freq <= proof,
            }
        })
        .collect();
    Ok(BoundTable {
        d,
        m,
        n_trials: cfg.n_trials,
        seed: cfg.seed,
        coherent_layers: cfg.coherent_layers,
        rows,
        note: BOUND_DISCREPANCY_NOTE.into(),
    })
}

/// Rows of `A X` for a row-major `m × width` matrix `x`.
fn aggregate_rows(groups: &[Vec<usize>], x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, g) in groups.iter().enumerate() {
        let row = &mut out[i * width..(i + 1) * width];
        for &j in g {
            for (o, v) in row.iter_mut().zip(&x[j * width..(j + 1) * width]) {
                *o += v;
            }
        }
    }
    out
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{build_aggregation, example_tree};

    #[test]
    fn analytic_bounds() {
        assert_eq!(proof_bound(0.0, 8), 1.0);
        assert!((proof_bound(20.0, 8) - 4.0 * (-400.0f64 / 64.0).exp()).abs() < 1e-15);
        assert!(statement_bound(20.0, 8) >= proof_bound(20.0, 8));
        assert_eq!(statement_bound(20.0, 1), proof_bound(20.0, 1));
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = build_aggregation(&example_tree()).unwrap();
        assert!(verify_bound(&BoundConfig::new(0, 1000, 0), &a).is_err());
        assert!(verify_bound(&BoundConfig::new(4, 999, 0), &a).is_err());
    }
}
