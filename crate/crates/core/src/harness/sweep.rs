use crate::error::{Error, Result};

use super::{train, Prepared, TrainConfig, TrainOutcome};

pub const DEFAULT_WEIGHTS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

pub struct SweepOutcome {
    /// One run per weight, in the order given.
    pub runs: Vec<TrainOutcome>,
    pub best_index: usize,
}

impl SweepOutcome {
    pub fn best(&self) -> &TrainOutcome {
        &self.runs[self.best_index]
    }

    pub fn best_weight(&self) -> f64 {
        self.best().report.config.weight
    }

    /// `(weight, best validation MSE)` per run.
    pub fn validation_curve(&self) -> Vec<(f64, f64)> {
        self.runs
            .iter()
            .map(|r| (r.report.config.weight, r.report.best_val_mse))
            .collect()
    }
}

/// Train one run per weight with the same seed and pick the weight with the
/// lowest best-validation MSE (first wins on ties).
pub fn sweep_weights(config: &TrainConfig, data: &Prepared, weights: &[f64]) -> Result<SweepOutcome> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("weight sweep needs at least one weight".into()));
    }
    let mut runs = Vec::with_capacity(weights.len());
    for &w in weights {
        let cfg = TrainConfig {
            weight: w,
            ..config.clone()
        };
        runs.push(train(&cfg, data)?);
    }
    let best_index = runs
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| {
            if r.report.best_val_mse < runs[best].report.best_val_mse {
                i
            } else {
                best
            }
        });
    Ok(SweepOutcome { runs, best_index })
}
