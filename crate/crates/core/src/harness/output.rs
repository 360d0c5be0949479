//! On-disk artifacts. Layout under an output directory:
//!
//! ```text
//! runs/<id>/report.json   full RunReport
//! runs/<id>/checkpoint    JSON Checkpoint (best model + optimizer state)
//! summary.csv             one row per run
//! curves.csv              per-epoch training curves
//! bound_table.csv         tail-probability tables
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Forecaster;
use crate::numerics::AdamState;

use super::bound::BoundTable;
use super::noisy::NoisyTable;
use super::sweep::SweepOutcome;
use super::train::{RunReport, TrainOutcome};
use super::TrainConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: Forecaster,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            config_hash: outcome.report.config_hash.clone(),
            config: outcome.report.config.clone(),
            epoch: outcome.report.best_epoch,
            model: outcome.model.clone(),
            adam: outcome.adam.clone(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    write_json(path.as_ref(), checkpoint)
}

/// Load a checkpoint, rejecting unknown formats and mismatched config hashes.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cp: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if cp.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
            cp.format_version
        )));
    }
    if cp.config.hash() != cp.config_hash {
        return Err(Error::Checkpoint(format!(
            "config hash {} does not match stored config ({})",
            cp.config_hash,
            cp.config.hash()
        )));
    }
    if cp.model.config() != &cp.config.model_config(cp.model.config().series) {
        return Err(Error::Checkpoint("model does not match stored config".into()));
    }
    Ok(cp)
}

/// Write `runs/<id>/report.json` and `runs/<id>/checkpoint`; returns the
/// run directory.
pub fn write_run(out_dir: impl AsRef<Path>, outcome: &TrainOutcome) -> Result<PathBuf> {
    let dir = out_dir.as_ref().join("runs").join(&outcome.report.run_id);
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_checkpoint(dir.join("checkpoint"), &Checkpoint::from_outcome(outcome))?;
    Ok(dir)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    csv::Writer::from_path(path).map_err(Error::from)
}

pub fn summary_csv(path: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    let Some(first) = reports.first() else {
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        return Ok(());
    };
    let mut header: Vec<String> = [
        "run_id",
        "variant",
        "mode",
        "weight",
        "seed",
        "best_epoch",
        "best_val_mse",
        "epochs_run",
        "stopped_early",
        "final_lc",
        "bound_rows_checked",
        "bound_violations",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(first.test.csv_header());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.run_id.clone(),
            r.config.variant.name().to_string(),
            r.config.mode.name().to_string(),
            r.config.weight.to_string(),
            r.config.seed.to_string(),
            r.best_epoch.to_string(),
            r.best_val_mse.to_string(),
            r.epochs_run.to_string(),
            r.stopped_early.to_string(),
            r.final_lc.to_string(),
            r.bound.rows_checked.to_string(),
            r.bound.violations.to_string(),
        ];
        row.extend(r.test.csv_row());
        if row.len() != header.len() {
            return Err(Error::Data(format!(
                "run {} has a different level set from {}",
                r.run_id, first.run_id
            )));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn curves_csv(path: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["run_id", "weight", "epoch", "train_loss", "lc", "val_mse", "val_coherency"])?;
    for r in reports {
        for c in &r.curves {
            w.write_record([
                r.run_id.clone(),
                r.config.weight.to_string(),
                c.epoch.to_string(),
                c.train_loss.to_string(),
                c.lc.to_string(),
                c.val_mse.to_string(),
                c.val_coherency.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Validation score against weight, one row per swept run.
pub fn sweep_csv(path: impl AsRef<Path>, sweep: &SweepOutcome) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(["run_id", "weight", "best_val_mse", "final_lc", "selected"])?;
    for (i, run) in sweep.runs.iter().enumerate() {
        let r = &run.report;
        w.write_record([
            r.run_id.clone(),
            r.config.weight.to_string(),
            r.best_val_mse.to_string(),
            r.final_lc.to_string(),
            (i == sweep.best_index).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_bound_table(path: impl AsRef<Path>, tables: &[BoundTable]) -> Result<()> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(BoundTable::csv_header())?;
    for t in tables {
        for row in t.csv_rows() {
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// `noisy_runs.csv`, `noisy_summary.csv` (mean and std columns per metric)
/// and `noisy_manifests.json` under `out_dir`.
pub fn write_noisy_table(out_dir: impl AsRef<Path>, table: &NoisyTable) -> Result<()> {
    let dir = out_dir.as_ref();
    create_dir(dir)?;
    let levels: Vec<u32> = table
        .runs
        .first()
        .map(|r| r.mse_per_level.keys().copied().collect())
        .unwrap_or_default();

    let path = dir.join("noisy_runs.csv");
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = [
        "dataset",
        "arm",
        "weight",
        "best_val_mse",
        "coherency",
        "overall_wmape",
        "average_mse",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(levels.iter().map(|l| format!("mse_level_{l}")));
    header.extend(levels.iter().map(|l| format!("wmape_level_{l}")));
    w.write_record(&header)?;
    for r in &table.runs {
        let mut row = vec![
            r.dataset.to_string(),
            r.arm.clone(),
            r.weight.to_string(),
            r.best_val_mse.to_string(),
            r.coherency.to_string(),
            r.overall_wmape.to_string(),
            r.average_mse.to_string(),
        ];
        let at = |m: &std::collections::BTreeMap<u32, f64>, l: &u32| {
            m.get(l).map_or(String::new(), f64::to_string)
        };
        row.extend(levels.iter().map(|l| at(&r.mse_per_level, l)));
        row.extend(levels.iter().map(|l| at(&r.wmape_per_level, l)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("noisy_summary.csv");
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = vec!["arm".into(), "runs".into()];
    let mut metrics: Vec<String> = vec!["coherency".into(), "overall_wmape".into(), "average_mse".into()];
    metrics.extend(levels.iter().map(|l| format!("mse_level_{l}")));
    metrics.extend(levels.iter().map(|l| format!("wmape_level_{l}")));
    for m in &metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for s in &table.summary {
        let mut cells = vec![s.coherency, s.overall_wmape, s.average_mse];
        cells.extend(levels.iter().filter_map(|l| s.mse_per_level.get(l).copied()));
        cells.extend(levels.iter().filter_map(|l| s.wmape_per_level.get(l).copied()));
        let mut row = vec![s.arm.clone(), s.runs.to_string()];
        for c in cells {
            row.push(c.mean.to_string());
            row.push(c.std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(&dir.join("noisy_manifests.json"), &table.manifests)
}
