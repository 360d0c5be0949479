use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coreg::data::{generate_synthetic, load_panel, make_noisy, SeriesPanel, SyntheticConfig};
use coreg::harness::{
    curves_csv, evaluate_model, noisy_experiment, read_checkpoint, summary_csv, sweep_csv,
    sweep_weights, train, verify_bound, write_bound_table, write_noisy_table, write_run,
    BoundConfig, ExperimentArm, NoisyConfig, Prepared, TrainConfig, DEFAULT_WEIGHTS,
};
use coreg::hierarchy::{build_aggregation, example_tree, HierarchySpec};
use coreg::models::{ForecastMode, Variant};

/// Coherency-regularized hierarchical forecasting experiments.
#[derive(Parser)]
#[command(name = "coreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Train one model per coherency weight and select on validation MSE.
    Sweep {
        #[command(flatten)]
        run: TrainArgs,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_WEIGHTS.to_vec())]
        weights: Vec<f64>,
    },
    /// Repeat training on noisy copies of a dataset (leaves dropped).
    Noisy {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long, default_value_t = 20)]
        n_datasets: usize,
        #[arg(long, default_value_t = 0.2)]
        drop: f64,
        /// Variants to compare; `core` and `profhit_style` sweep `--weights`.
        #[arg(long, value_delimiter = ',', default_value = "base,core,projection")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_WEIGHTS.to_vec())]
        weights: Vec<f64>,
    },
    /// Monte Carlo check of the coherency tail bound.
    VerifyBound {
        /// Hidden widths (repeat or comma-separate).
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 32, 128])]
        d: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hierarchy for the random layers (defaults to the 8-node example tree).
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        /// Use exactly coherent layers (l_c = 0).
        #[arg(long)]
        coherent: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-evaluate a saved checkpoint on a dataset's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop a random fraction of leaves while keeping the aggregates.
    MakeNoisy {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.2)]
        drop: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a coherent synthetic hierarchy and panel.
    GenSynthetic {
        #[arg(long, default_value_t = 24)]
        leaves: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 300)]
        timesteps: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Wide CSV: one column per series, one row per timestep.
    #[arg(long)]
    values: PathBuf,
    /// CSV with header `child,parent` (empty parent for the root).
    #[arg(long)]
    hierarchy: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON object overriding the default training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    mode: Option<ForecastMode>,
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl TrainArgs {
    /// Defaults, then the `--config` file, then individual flags.
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                TrainConfig::from_json(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(w) = self.weight {
            cfg.weight = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.max_epochs {
            cfg.max_epochs = n;
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(data: &DataArgs) -> Result<(SeriesPanel, HierarchySpec)> {
    Ok(load_panel(&data.values, &data.hierarchy)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let (panel, spec) = load(&args.data)?;
    let data = Prepared::new(&panel, &spec, cfg.lag)?;
    let outcome = train(&cfg, &data)?;
    let dir = write_run(&args.out_dir, &outcome)?;
    let reports = [outcome.report];
    summary_csv(args.out_dir.join("summary.csv"), &reports)?;
    curves_csv(args.out_dir.join("curves.csv"), &reports)?;
    let r = &reports[0];
    println!(
        "{}: best epoch {} of {}, val MSE {:.6e}, test MSE {:.6e}, WMAPE {:.4}, coherency {:.6e} -> {}",
        r.run_id,
        r.best_epoch,
        r.epochs_run,
        r.best_val_mse,
        r.test.average_mse,
        r.test.overall_wmape,
        r.test.coherency,
        dir.display()
    );
    Ok(())
}

fn run_sweep(args: &TrainArgs, weights: &[f64]) -> Result<()> {
    let cfg = args.config()?;
    let (panel, spec) = load(&args.data)?;
    let data = Prepared::new(&panel, &spec, cfg.lag)?;
    let sweep = sweep_weights(&cfg, &data, weights)?;
    for run in &sweep.runs {
        write_run(&args.out_dir, run)?;
    }
    let reports: Vec<_> = sweep.runs.iter().map(|r| r.report.clone()).collect();
    summary_csv(args.out_dir.join("summary.csv"), &reports)?;
    curves_csv(args.out_dir.join("curves.csv"), &reports)?;
    sweep_csv(args.out_dir.join("sweep.csv"), &sweep)?;
    for (w, v) in sweep.validation_curve() {
        println!("w = {w:e}: best val MSE {v:.6e}");
    }
    println!("selected w = {:e}", sweep.best_weight());
    Ok(())
}

fn run_noisy(
    args: &TrainArgs,
    n_datasets: usize,
    drop: f64,
    variants: &[Variant],
    weights: &[f64],
) -> Result<()> {
    let base = args.config()?;
    let (panel, spec) = load(&args.data)?;
    let arms = variants
        .iter()
        .map(|&v| match v {
            Variant::Base | Variant::Projection => ExperimentArm::new(v.name(), v, &[0.0]),
            Variant::Core | Variant::ProfhitStyle => ExperimentArm::new(v.name(), v, weights),
        })
        .collect();
    let cfg = NoisyConfig {
        n_datasets,
        drop_fraction: drop,
        seed: base.seed,
        arms,
        base,
        source: Some(args.data.values.display().to_string()),
    };
    let table = noisy_experiment(&panel, &spec, &cfg)?;
    write_noisy_table(&args.out_dir, &table)?;
    println!("{:<16} {:>24} {:>24} {:>24}", "variant", "coherency", "WMAPE", "avg MSE");
    for s in &table.summary {
        println!(
            "{:<16} {:>11.4e} ± {:<10.4e} {:>11.4} ± {:<10.4} {:>11.4e} ± {:<10.4e}",
            s.arm,
            s.coherency.mean,
            s.coherency.std,
            s.overall_wmape.mean,
            s.overall_wmape.std,
            s.average_mse.mean,
            s.average_mse.std
        );
    }
    Ok(())
}

fn run_verify_bound(
    ds: &[usize],
    trials: usize,
    seed: u64,
    hierarchy: Option<&Path>,
    coherent: bool,
    out_dir: Option<&Path>,
) -> Result<()> {
    let spec = match hierarchy {
        Some(p) => HierarchySpec::read_csv(p)?,
        None => example_tree(),
    };
    let a = build_aggregation(&spec)?;
    let mut tables = Vec::new();
    for &d in ds {
        let mut cfg = BoundConfig::new(d, trials, seed);
        cfg.coherent_layers = coherent;
        tables.push(verify_bound(&cfg, &a)?);
    }
    println!(
        "{:>5} {:>9} {:>12} {:>12} {:>12} {:>14} {:>6}",
        "d", "delta", "P(c>δ·lc)", "P(|z|>δ)", "4e^-δ²/8d", "4e^-δ²/8d²", "ok"
    );
    for t in &tables {
        for r in &t.rows {
            println!(
                "{:>5} {:>9.3} {:>12.5} {:>12.5} {:>12.5e} {:>14.5e} {:>6}",
                t.d,
                r.delta,
                r.violation_freq,
                r.norm_tail_freq,
                r.proof_bound,
                r.statement_bound,
                r.within_proof_bound
            );
        }
    }
    if let Some(t) = tables.first() {
        println!("note: {}", t.note);
    }
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_bound_table(dir.join("bound_table.csv"), &tables)?;
    }
    if tables.iter().any(|t| !t.all_within_proof_bound()) {
        bail!("empirical violation frequency exceeded the proof bound");
    }
    Ok(())
}

fn run_evaluate(checkpoint: &Path, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let cp = read_checkpoint(checkpoint)?;
    let (panel, spec) = load(data)?;
    if cp.model.config().series != spec.len() {
        bail!(
            "checkpoint has {} series but the hierarchy has {}",
            cp.model.config().series,
            spec.len()
        );
    }
    let prepared = Prepared::new(&panel, &spec, cp.config.lag)?;
    let report = evaluate_model(&cp.model, &cp.config, &prepared, &cp.config_hash)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_make_noisy(data: &DataArgs, drop: f64, seed: u64, out_dir: &Path) -> Result<()> {
    let (panel, spec) = load(data)?;
    let mut noisy = make_noisy(&panel, &spec, drop, seed)?;
    noisy.manifest.source = Some(data.values.display().to_string());
    create_dir(out_dir)?;
    noisy.panel.write_csv(out_dir.join("values.csv"))?;
    noisy.spec.write_csv(out_dir.join("hierarchy.csv"))?;
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&noisy.manifest)?,
    )
    .context("writing manifest")?;
    println!(
        "dropped {} leaves; raw coherency {:.6e}",
        noisy.manifest.dropped.len(),
        noisy.manifest.raw_coherency
    );
    Ok(())
}

fn run_gen_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<()> {
    let (panel, spec) = generate_synthetic(cfg)?;
    create_dir(out_dir)?;
    panel.write_csv(out_dir.join("values.csv"))?;
    spec.write_csv(out_dir.join("hierarchy.csv"))?;
    println!(
        "{} series ({} leaves), {} timesteps -> {}",
        spec.len(),
        spec.leaf_indices().len(),
        panel.timesteps(),
        out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => run_train(&args),
        Command::Sweep { run, weights } => run_sweep(&run, &weights),
        Command::Noisy {
            run,
            n_datasets,
            drop,
            variants,
            weights,
        } => run_noisy(&run, n_datasets, drop, &variants, &weights),
        Command::VerifyBound {
            d,
            trials,
            seed,
            hierarchy,
            coherent,
            out_dir,
        } => run_verify_bound(&d, trials, seed, hierarchy.as_deref(), coherent, out_dir.as_deref()),
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => run_evaluate(&checkpoint, &data, out.as_deref()),
        Command::MakeNoisy {
            data,
            drop,
            seed,
            out_dir,
        } => run_make_noisy(&data, drop, seed, &out_dir),
        Command::GenSynthetic {
            leaves,
            depth,
            timesteps,
            noise,
            seed,
            out_dir,
        } => run_gen_synthetic(
            &SyntheticConfig {
                leaves,
                depth,
                timesteps,
                noise,
                seed,
            },
            &out_dir,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
