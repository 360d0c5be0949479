//! Experiment harness: training with early stopping, weight sweeps, the
//! noisy-data protocol, Monte Carlo bound verification and report output.

mod bound;
mod noisy;
mod output;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_windows, scale_global_max, split_80_10_10, SeriesPanel, Splits};
use crate::error::{Error, Result};
use crate::hierarchy::{build_aggregation, projection_matrix, AggregationMatrix, HierarchySpec};
use crate::losses::AccuracyLoss;
use crate::models::{ForecastMode, ModelConfig, Variant};
use crate::numerics::Tensor;

pub use bound::{
    proof_bound, statement_bound, verify_bound, BoundConfig, BoundRow, BoundTable,
    BOUND_DISCREPANCY_NOTE,
};
pub use noisy::{
    noisy_experiment, ExperimentArm, MeanStd, NoisyConfig, NoisyRun, NoisySummary, NoisyTable,
};
pub use output::{
    curves_csv, read_checkpoint, summary_csv, sweep_csv, write_bound_table, write_checkpoint,
    write_noisy_table, write_run, Checkpoint, CHECKPOINT_FORMAT,
};
pub use sweep::{sweep_weights, SweepOutcome, DEFAULT_WEIGHTS};
pub use train::{
    evaluate_model, train, BoundStats, DatasetInfo, EpochRecord, RunReport, TrainOutcome,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub variant: Variant,
    pub mode: ForecastMode,
    /// Coherency weight: CoRe regularizer weight, or the consistency weight
    /// of the PROFHiT-style baseline.
    pub weight: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub lag: usize,
    pub hidden: usize,
    pub seed: u64,
    pub accuracy: AccuracyLoss,
    pub n_samples: usize,
    pub dropout_rate: f64,
    pub noise_scale: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            variant: Variant::Base,
            mode: ForecastMode::Point,
            weight: 0.0,
            lr: 1e-3,
            patience: 100,
            max_epochs: 5000,
            lag: 5,
            hidden: 128,
            seed: 0,
            accuracy: AccuracyLoss::Mse,
            n_samples: 100,
            dropout_rate: 0.1,
            noise_scale: 1.0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::Config(format!(
                "weight must be finite and nonnegative, got {}",
                self.weight
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.n_samples == 0 && (self.mode.is_distributional() || self.variant == Variant::ProfhitStyle) {
            return Err(Error::Config(
                "n_samples must be at least 1 for distributional forecasts".into(),
            ));
        }
        self.model_config(1).validate()
    }

    pub fn model_config(&self, series: usize) -> ModelConfig {
        ModelConfig {
            series,
            hidden: self.hidden,
            lag: self.lag,
            variant: self.variant,
            mode: self.mode,
            dropout_rate: self.dropout_rate,
            noise_scale: self.noise_scale,
        }
    }

    /// Parse a JSON object whose fields override the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the config's JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-w{}-s{}",
            self.variant.name(),
            self.mode.name(),
            self.weight,
            self.seed
        )
    }
}

/// A scaled, windowed and split dataset with its hierarchy matrices.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub spec: HierarchySpec,
    pub aggregation: AggregationMatrix,
    pub projection: Tensor,
    pub panel: SeriesPanel,
    pub splits: Splits,
    pub lag: usize,
}

impl Prepared {
    /// Scale a raw panel by its global max, window it with lag `lag` and
    /// split 80/10/10.
    pub fn new(raw: &SeriesPanel, spec: &HierarchySpec, lag: usize) -> Result<Self> {
        if raw.node_ids.as_slice() != spec.node_ids() {
            return Err(Error::Data("panel and hierarchy node orders differ".into()));
        }
        let aggregation = build_aggregation(spec)?;
        let projection = projection_matrix(&aggregation.summing())?;
        let panel = if raw.is_scaled {
            raw.clone()
        } else {
            scale_global_max(raw)?
        };
        let windows = make_windows(&panel, lag)?;
        let splits = split_80_10_10(&windows)?;
        Ok(Prepared {
            spec: spec.clone(),
            aggregation,
            projection,
            panel,
            splits,
            lag,
        })
    }
}
