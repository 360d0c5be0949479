use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{make_noisy, NoisyDataset, NoisyManifest, SeriesPanel};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchySpec;
use crate::models::Variant;
use crate::numerics::{derive_seed, stream};

use super::{sweep_weights, train, Prepared, TrainConfig};

/// Attempts per dataset before giving up on drawing a valid leaf subset.
const MAX_DRAWS: u64 = 100;

/// One row of the experiment table: a variant and the weights it may use
/// (several weights are swept and selected on validation MSE).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub label: String,
    pub variant: Variant,
    pub weights: Vec<f64>,
}

impl ExperimentArm {
    pub fn new(label: impl Into<String>, variant: Variant, weights: &[f64]) -> Self {
        ExperimentArm {
            label: label.into(),
            variant,
            weights: weights.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyConfig {
    pub n_datasets: usize,
    pub drop_fraction: f64,
    /// Seed for the dataset draws; model seeds come from `base.seed`.
    pub seed: u64,
    pub arms: Vec<ExperimentArm>,
    pub base: TrainConfig,
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyRun {
    pub dataset: usize,
    pub arm: String,
    pub weight: f64,
    pub best_val_mse: f64,
    pub coherency: f64,
    pub overall_wmape: f64,
    pub average_mse: f64,
    pub mse_per_level: BTreeMap<u32, f64>,
    pub wmape_per_level: BTreeMap<u32, f64>,
}

/// Mean and sample standard deviation across datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisySummary {
    pub arm: String,
    pub runs: usize,
    pub coherency: MeanStd,
    pub overall_wmape: MeanStd,
    pub average_mse: MeanStd,
    pub mse_per_level: BTreeMap<u32, MeanStd>,
    pub wmape_per_level: BTreeMap<u32, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyTable {
    pub runs: Vec<NoisyRun>,
    pub summary: Vec<NoisySummary>,
    pub manifests: Vec<NoisyManifest>,
}

impl NoisyTable {
    pub fn arm(&self, label: &str) -> Option<&NoisySummary> {
        self.summary.iter().find(|s| s.arm == label)
    }
}

/// Draw a valid noisy dataset for index `i`: the first seed in its stream
/// whose dropped set leaves every aggregate with a child.
fn draw_dataset(
    panel: &SeriesPanel,
    spec: &HierarchySpec,
    cfg: &NoisyConfig,
    i: usize,
) -> Result<NoisyDataset> {
    let stream_seed = derive_seed(derive_seed(cfg.seed, stream::NOISY_DATASET), i as u64);
    let mut last = None;
    for attempt in 0..MAX_DRAWS {
        match make_noisy(panel, spec, cfg.drop_fraction, derive_seed(stream_seed, attempt)) {
            Ok(mut d) => {
                d.manifest.source = cfg.source.clone();
                return Ok(d);
            }
            Err(e @ Error::Hierarchy(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Build `n_datasets` noisy copies of a coherent (or noisy) source and run
/// every arm on each.
pub fn noisy_experiment(
    panel: &SeriesPanel,
    spec: &HierarchySpec,
    cfg: &NoisyConfig,
) -> Result<NoisyTable> {
    if cfg.n_datasets == 0 {
        return Err(Error::InvalidArgument("n_datasets must be at least 1".into()));
    }
    if cfg.arms.is_empty() {
        return Err(Error::InvalidArgument("no experiment arms".into()));
    }
    let mut runs = Vec::new();
    let mut manifests = Vec::new();
    for i in 0..cfg.n_datasets {
        let noisy = draw_dataset(panel, spec, cfg, i)?;
        let data = Prepared::new(&noisy.panel, &noisy.spec, cfg.base.lag)?;
        for arm in &cfg.arms {
            let base = TrainConfig {
                variant: arm.variant,
                ..cfg.base.clone()
            };
            let outcome = match arm.weights.as_slice() {
                [] => train(&base, &data)?,
                [w] => train(&TrainConfig { weight: *w, ..base }, &data)?,
                ws => {
                    let sweep = sweep_weights(&base, &data, ws)?;
                    let best = sweep.best_index;
                    sweep.runs.into_iter().nth(best).expect("best index in range")
                }
            };
            let r = &outcome.report;
            runs.push(NoisyRun {
                dataset: i,
                arm: arm.label.clone(),
                weight: r.config.weight,
                best_val_mse: r.best_val_mse,
                coherency: r.test.coherency,
                overall_wmape: r.test.overall_wmape,
                average_mse: r.test.average_mse,
                mse_per_level: r.test.mse_per_level.clone(),
                wmape_per_level: r.test.wmape_per_level.clone(),
            });
        }
        manifests.push(noisy.manifest);
    }
    let summary = cfg
        .arms
        .iter()
        .map(|arm| summarize(&arm.label, &runs))
        .collect();
    Ok(NoisyTable {
        runs,
        summary,
        manifests,
    })
}

fn summarize(label: &str, runs: &[NoisyRun]) -> NoisySummary {
    let mine: Vec<&NoisyRun> = runs.iter().filter(|r| r.arm == label).collect();
    let col = |f: &dyn Fn(&NoisyRun) -> f64| MeanStd::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
    let per_level = |pick: &dyn Fn(&NoisyRun) -> &BTreeMap<u32, f64>| {
        let mut levels: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in &mine {
            for (l, v) in pick(r) {
                levels.entry(*l).or_default().push(*v);
            }
        }
        levels
            .into_iter()
            .map(|(l, v)| (l, MeanStd::of(&v)))
            .collect()
    };
    NoisySummary {
        arm: label.to_string(),
        runs: mine.len(),
        coherency: col(&|r| r.coherency),
        overall_wmape: col(&|r| r.overall_wmape),
        average_mse: col(&|r| r.average_mse),
        mse_per_level: per_level(&|r| &r.mse_per_level),
        wmape_per_level: per_level(&|r| &r.wmape_per_level),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
        assert_eq!(MeanStd::of(&[0.0, 0.0, 0.0]), MeanStd { mean: 0.0, std: 0.0 });
    }
}
