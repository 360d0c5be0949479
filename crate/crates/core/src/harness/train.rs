use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::AggregationMatrix;
use crate::losses::{coherency_bound, core_regularizer_value, mse_value, row_coherency};
use crate::metrics::MetricsReport;
use crate::models::{ForecastMode, Forecaster, Forward, Variant, WindowBatch};
use crate::numerics::{
    adam_step, rng_for, sgd_step, stream, AdamConfig, AdamState, BatchNormState, Mode, Tensor,
};

use super::{Optimizer, Prepared, TrainConfig};

/// Relative slack allowed when checking `c(y) <= bound` on a forward pass.
pub(crate) const BOUND_REL_SLACK: f64 = 1e-9;
const BOUND_ABS_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training objective before the epoch's update.
    pub train_loss: f64,
    /// CoRe regularizer of the final layer after the update.
    pub lc: f64,
    pub val_mse: f64,
    pub val_coherency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n_series: usize,
    pub levels: Vec<u32>,
    pub timesteps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub scale_factor: f64,
    pub raw_coherency: Option<f64>,
}

/// Per-forward-pass check of `c(y) <= ||z|| ||W - AW||_F + ||b - Ab||`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundStats {
    pub rows_checked: usize,
    pub violations: usize,
    /// Largest observed `c(y) / bound` (0 when every bound was 0).
    pub max_ratio: f64,
}

impl BoundStats {
    pub(crate) fn check(
        &mut self,
        fwd: &Forward,
        model: &Forecaster,
        a: &AggregationMatrix,
    ) -> Result<()> {
        let layer = model.final_layer();
        let bounds = coherency_bound(&layer, a, fwd.z())?;
        let actual = row_coherency(fwd.raw(), a)?;
        for (c, b) in actual.iter().zip(&bounds) {
            self.rows_checked += 1;
            if *c > b * (1.0 + BOUND_REL_SLACK) + BOUND_ABS_SLACK {
                self.violations += 1;
            }
            if *b > 0.0 {
                self.max_ratio = self.max_ratio.max(c / b);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: DatasetInfo,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub curves: Vec<EpochRecord>,
    pub test: MetricsReport,
    /// Final-layer CoRe regularizer of the restored model.
    pub final_lc: f64,
    pub bound: BoundStats,
    pub max_epochs_cap: usize,
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Report JSON with the wall time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Forecaster,
    pub adam: AdamState,
}

struct Snapshot {
    epoch: usize,
    val_mse: f64,
    params: Vec<Tensor>,
    batchnorm: BatchNormState,
    adam: AdamState,
}

/// Full-batch training with early stopping on validation MSE, then
/// evaluation of the best checkpoint on the test split.
pub fn train(config: &TrainConfig, data: &Prepared) -> Result<TrainOutcome> {
    config.validate()?;
    if config.lag != data.lag {
        return Err(Error::Config(format!(
            "config lag {} but dataset was windowed with {}",
            config.lag, data.lag
        )));
    }
    let splits = &data.splits;
    if splits.train.len() < 2 || splits.val.is_empty() || splits.test.is_empty() {
        return Err(Error::Data(format!(
            "split too small: {} train / {} val / {} test",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        )));
    }
    let start = Instant::now();
    let a = &data.aggregation;
    let m = data.spec.len();
    let projection = (config.variant == Variant::Projection).then(|| data.projection.clone());
    let mut init_rng = rng_for(config.seed, stream::INIT);
    let mut model = Forecaster::new(config.model_config(m), projection, &mut init_rng)?;
    let mut noise_rng = rng_for(
        config.seed,
        match config.mode {
            ForecastMode::Vae => stream::VAE_NOISE,
            _ => stream::DROPOUT,
        },
    );

    let train_batch = splits.train.batch()?;
    let val_batch = splits.val.batch()?;
    let mut adam = AdamState::new(model.params());
    let mut bound = BoundStats::default();
    let mut curves = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let mut fwd = model.forward(&train_batch, Mode::Train, true, &mut noise_rng)?;
        bound.check(&fwd, &model, a)?;
        let loss = model.loss(&mut fwd, &splits.train.targets, a, config.weight, config.accuracy)?;
        let train_loss = fwd.graph.value(loss).item();
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("training loss is {train_loss}"),
            });
        }
        fwd.graph.backward(loss)?;
        let grads = fwd.gradients();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite gradient".into(),
            });
        }
        match config.optimizer {
            Optimizer::Adam => adam_step(
                model.params_mut(),
                &grads,
                &mut adam,
                config.lr,
                AdamConfig::default(),
            )?,
            Optimizer::Sgd => sgd_step(model.params_mut(), &grads, config.lr)?,
        }

        let val_fwd = model.infer(&val_batch)?;
        bound.check(&val_fwd, &model, a)?;
        let val_mse = mse_value(val_fwd.output(), &splits.val.targets)?;
        if !val_mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation MSE is {val_mse}"),
            });
        }
        let val_coherency = mean(&row_coherency(val_fwd.output(), a)?);
        curves.push(EpochRecord {
            epoch,
            train_loss,
            lc: core_regularizer_value(&model.final_layer(), a)?,
            val_mse,
            val_coherency,
        });

        if best.as_ref().is_none_or(|b| val_mse < b.val_mse) {
            best = Some(Snapshot {
                epoch,
                val_mse,
                params: model.params().to_vec(),
                batchnorm: model.batchnorm().clone(),
                adam: adam.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best = best.expect("at least one epoch");
    model.params_mut().clone_from_slice(&best.params);
    *model.batchnorm_mut() = best.batchnorm;

    let test = evaluate_model(&model, config, data, &config.hash())?;
    let test_fwd = model.infer(&splits.test.batch()?)?;
    bound.check(&test_fwd, &model, a)?;

    let report = RunReport {
        run_id: config.run_id(),
        config: config.clone(),
        config_hash: config.hash(),
        dataset: DatasetInfo {
            n_series: m,
            levels: data.spec.levels(),
            timesteps: data.panel.timesteps(),
            n_train: splits.train.len(),
            n_val: splits.val.len(),
            n_test: splits.test.len(),
            scale_factor: data.panel.scale_factor,
            raw_coherency: data.panel.raw_coherency,
        },
        best_epoch: best.epoch,
        best_val_mse: best.val_mse,
        epochs_run: curves.len(),
        stopped_early,
        curves,
        test,
        final_lc: core_regularizer_value(&model.final_layer(), a)?,
        bound,
        max_epochs_cap: config.max_epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        report,
        model,
        adam: best.adam,
    })
}

/// Test-split metrics. Distributional models (and the PROFHiT-style
/// Gaussian heads) are scored on the mean of `n_samples` samples, with CRPS
/// and per-sample coherency from the samples.
pub fn evaluate_model(
    model: &Forecaster,
    config: &TrainConfig,
    data: &Prepared,
    config_hash: &str,
) -> Result<MetricsReport> {
    let test = &data.splits.test;
    let batch: WindowBatch = test.batch()?;
    let distributional =
        config.mode.is_distributional() || config.variant == Variant::ProfhitStyle;
    let (point, samples) = if distributional {
        let mut rng = rng_for(config.seed, stream::EVAL_SAMPLING);
        let samples = model.sample(&batch, config.n_samples, &mut rng)?;
        let point = if config.variant == Variant::ProfhitStyle {
            model.predict(&batch)?
        } else {
            let mut acc = Tensor::zeros(batch.batch(), data.spec.len());
            for s in &samples {
                acc = acc.add(s)?;
            }
            acc.scale(1.0 / samples.len() as f64)
        };
        let samples: Vec<Tensor> = samples.iter().map(Tensor::transpose).collect();
        (point, Some(samples))
    } else {
        (model.predict(&batch)?, None)
    };
    MetricsReport::evaluate(
        &point.transpose(),
        &test.targets.transpose(),
        &data.spec,
        &data.aggregation,
        samples.as_deref(),
        config_hash,
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
