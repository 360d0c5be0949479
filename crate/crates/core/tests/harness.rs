mod common;

use std::collections::BTreeSet;

use coreg::data::{generate_synthetic, SeriesPanel, SyntheticConfig};
use coreg::hierarchy::{build_aggregation, example_tree, HierarchySpec};
use coreg::harness::{
    evaluate_model, noisy_experiment, read_checkpoint, sweep_csv, sweep_weights, train,
    verify_bound, write_run, BoundConfig, Checkpoint, ExperimentArm, NoisyConfig, Prepared,
    TrainConfig,
};
use coreg::models::{ForecastMode, Variant};

fn dataset() -> (SeriesPanel, HierarchySpec) {
    generate_synthetic(&SyntheticConfig {
        leaves: 6,
        depth: 3,
        timesteps: 90,
        noise: 0.5,
        seed: 3,
    })
    .unwrap()
}

fn small(variant: Variant, weight: f64) -> TrainConfig {
    TrainConfig {
        variant,
        weight,
        hidden: 8,
        max_epochs: 80,
        patience: 15,
        n_samples: 10,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn prepared() -> Prepared {
    let (panel, spec) = dataset();
    Prepared::new(&panel, &spec, 5).unwrap()
}

#[test]
fn same_seed_same_report() {
    let data = prepared();
    for mode in [ForecastMode::Point, ForecastMode::Vae, ForecastMode::Dropout] {
        let cfg = TrainConfig {
            mode,
            ..small(Variant::Core, 0.01)
        };
        let a = train(&cfg, &data).unwrap().report.without_timing();
        let b = train(&cfg, &data).unwrap().report.without_timing();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}

#[test]
fn zero_weight_core_is_base() {
    let data = prepared();
    let base = train(&small(Variant::Base, 0.0), &data).unwrap();
    let core = train(&small(Variant::Core, 0.0), &data).unwrap();
    assert_eq!(base.report.curves, core.report.curves);
    assert_eq!(base.model.params(), core.model.params());
    assert_eq!(base.report.test.average_mse, core.report.test.average_mse);
}

#[test]
fn restored_checkpoint_is_the_validation_minimum() {
    let data = prepared();
    for variant in [Variant::Base, Variant::Core, Variant::Projection, Variant::ProfhitStyle] {
        let out = train(&small(variant, 0.01), &data).unwrap();
        let r = &out.report;
        let min = r.curves.iter().map(|c| c.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_val_mse, min);
        assert_eq!(r.curves[r.best_epoch - 1].val_mse, min);
        assert!(r.epochs_run <= r.max_epochs_cap);
        if r.stopped_early {
            assert_eq!(r.epochs_run - r.best_epoch, 15);
        }
        // The restored model reproduces the recorded validation score.
        let val = out.model.predict(&data.splits.val.batch().unwrap()).unwrap();
        let mse = coreg::losses::mse_value(&val, &data.splits.val.targets).unwrap();
        assert_eq!(mse, min);
        assert_eq!(r.bound.violations, 0);
        assert!(r.bound.rows_checked > 0);
    }
}

#[test]
fn early_stopping_triggers_with_short_patience() {
    let data = prepared();
    let cfg = TrainConfig {
        patience: 1,
        max_epochs: 500,
        ..small(Variant::Base, 0.0)
    };
    let r = train(&cfg, &data).unwrap().report;
    assert!(r.stopped_early);
    assert_eq!(r.epochs_run, r.best_epoch + 1);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = prepared();
    let dir = tempfile::tempdir().unwrap();
    for mode in [ForecastMode::Point, ForecastMode::Vae] {
        let cfg = TrainConfig {
            mode,
            ..small(Variant::Core, 0.001)
        };
        let out = train(&cfg, &data).unwrap();
        let run_dir = write_run(dir.path(), &out).unwrap();
        assert!(run_dir.join("report.json").exists());
        let cp = read_checkpoint(run_dir.join("checkpoint")).unwrap();
        assert_eq!(cp, Checkpoint::from_outcome(&out));
        assert_eq!(cp.epoch, out.report.best_epoch);
        let again = evaluate_model(&cp.model, &cp.config, &data, &cp.config_hash).unwrap();
        assert_eq!(again, out.report.test);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let data = prepared();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(Variant::Base, 0.0), &data).unwrap();
    let run_dir = write_run(dir.path(), &out).unwrap();
    let path = run_dir.join("checkpoint");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"seed\": 5", "\"seed\": 6")).unwrap();
    assert!(read_checkpoint(&path).is_err());
    std::fs::write(&path, "{").unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn sweep_selects_the_validation_argmin() {
    let data = prepared();
    let single = sweep_weights(&small(Variant::Core, 0.0), &data, &[0.01]).unwrap();
    assert_eq!(single.best_weight(), 0.01);

    let weights = [0.0, 1e-4, 1e-2, 1e-1];
    let sweep = sweep_weights(&small(Variant::Core, 0.0), &data, &weights).unwrap();
    let curve = sweep.validation_curve();
    let min = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let first_min = curve.iter().position(|c| c.1 == min).unwrap();
    assert_eq!(sweep.best_index, first_min);
    for (run, (w, v)) in sweep.runs.iter().zip(&curve) {
        assert_eq!(run.report.config.weight, *w);
        assert_eq!(run.report.best_val_mse, *v);
    }

    // The emitted CSV matches the per-run reports exactly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    sweep_csv(&path, &sweep).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), weights.len());
    for (row, (w, v)) in rows.iter().zip(&curve) {
        assert_eq!(row[1].parse::<f64>().unwrap(), *w);
        assert_eq!(row[2].parse::<f64>().unwrap(), *v);
    }
    assert!(sweep_weights(&small(Variant::Core, 0.0), &data, &[]).is_err());
}

#[test]
fn noisy_table_aggregates_per_run_values() {
    let (panel, spec) = dataset();
    let cfg = NoisyConfig {
        n_datasets: 3,
        drop_fraction: 0.34,
        seed: 1,
        arms: vec![
            ExperimentArm::new("base", Variant::Base, &[0.0]),
            ExperimentArm::new("core", Variant::Core, &[1e-3, 1e-2]),
            ExperimentArm::new("projection", Variant::Projection, &[0.0]),
        ],
        base: TrainConfig {
            max_epochs: 40,
            ..small(Variant::Base, 0.0)
        },
        source: None,
    };
    let table = noisy_experiment(&panel, &spec, &cfg).unwrap();
    assert_eq!(table.runs.len(), 9);
    assert_eq!(table.manifests.len(), 3);
    let dropped: BTreeSet<_> = table.manifests.iter().map(|m| m.dropped.clone()).collect();
    assert_eq!(dropped.len(), 3);
    for m in &table.manifests {
        assert_eq!(m.dropped.len(), 2);
        assert!(m.raw_coherency > 0.0);
    }
    for s in &table.summary {
        let vals: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.arm == s.arm)
            .map(|r| r.coherency)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((s.coherency.mean - mean).abs() <= 1e-15 * mean.max(1.0));
        assert!((s.coherency.std - var.sqrt()).abs() <= 1e-12);
        assert_eq!(s.runs, 3);
    }
    let proj = table.arm("projection").unwrap();
    assert!(proj.coherency.mean <= 1e-10 && proj.coherency.std <= 1e-10);
    for r in table.runs.iter().filter(|r| r.arm == "core") {
        assert!([1e-3, 1e-2].contains(&r.weight));
    }
}

#[test]
fn bound_table_properties() {
    let a = build_aggregation(&example_tree()).unwrap();
    let mut cfg = BoundConfig::new(8, 2000, 3);
    let table = verify_bound(&cfg, &a).unwrap();
    assert!(table.all_within_proof_bound());
    let root = 8f64.sqrt();
    for r in &table.rows {
        assert!(r.statement_bound >= r.proof_bound);
        if r.delta >= 1.0 {
            // c <= ||z|| l_c, so a violation needs ||z|| > delta.
            assert_eq!(r.violations_inside_ball, 0);
            assert!(r.violation_freq <= r.norm_tail_freq);
        }
        if r.proof_bound < 1.0 / 2000.0 {
            assert_eq!(r.violations, 0);
        }
    }
    assert!(table.rows.iter().any(|r| r.delta >= 10.0 * root));

    cfg.coherent_layers = true;
    let coherent = verify_bound(&cfg, &a).unwrap();
    assert!(coherent.rows.iter().all(|r| r.violations == 0));
}
