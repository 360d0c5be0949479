//! Panels of hierarchical series, lag windows, chronological splits, noisy
//! variants and a synthetic generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{build_aggregation, coherency_panel, AggregationMatrix, HierarchySpec};
use crate::models::WindowBatch;
use crate::numerics::{rng_for, stream, Tensor};

/// `m x S` observations (series by timestep) in hierarchy node order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPanel {
    pub values: Tensor,
    pub node_ids: Vec<String>,
    /// Global maximum of the raw data when scaled, `1.0` otherwise.
    pub scale_factor: f64,
    pub is_scaled: bool,
    /// Coherency of the raw data (mean over timesteps), when measured.
    pub raw_coherency: Option<f64>,
}

impl SeriesPanel {
    pub fn new(values: Tensor, node_ids: Vec<String>) -> Result<Self> {
        if values.rows() != node_ids.len() {
            return Err(Error::Data(format!(
                "{} rows for {} series",
                values.rows(),
                node_ids.len()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Data("panel contains non-finite values".into()));
        }
        Ok(SeriesPanel {
            values,
            node_ids,
            scale_factor: 1.0,
            is_scaled: false,
            raw_coherency: None,
        })
    }

    pub fn series(&self) -> usize {
        self.values.rows()
    }

    pub fn timesteps(&self) -> usize {
        self.values.cols()
    }

    /// Write the wide-format values CSV (header of ids, one row per timestep).
    pub fn to_csv_writer(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.node_ids)?;
        for t in 0..self.timesteps() {
            w.write_record(self.values.column(t).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }

    /// Undo [`scale_global_max`].
    pub fn unscale(&self) -> SeriesPanel {
        SeriesPanel {
            values: self.values.scale(self.scale_factor),
            scale_factor: 1.0,
            is_scaled: false,
            ..self.clone()
        }
    }
}

/// Parse a wide values CSV and order its columns by `spec`.
pub fn panel_from_csv_reader(
    reader: impl std::io::Read,
    spec: &HierarchySpec,
) -> Result<SeriesPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut column_of = vec![None; spec.len()];
    for (c, id) in headers.iter().enumerate() {
        let i = spec
            .index_of(id)
            .ok_or_else(|| Error::Data(format!("series '{id}' is not in the hierarchy")))?;
        if column_of[i].replace(c).is_some() {
            return Err(Error::Data(format!("series '{id}' appears twice")));
        }
    }
    if let Some(i) = column_of.iter().position(Option::is_none) {
        return Err(Error::Data(format!(
            "missing series '{}' in values file",
            spec.node_ids()[i]
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (t, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                Error::Data(format!("ragged row at timestep {t}: {e}"))
            }
            _ => Error::Csv(e),
        })?;
        let mut row = Vec::with_capacity(rec.len());
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric cell '{cell}' at timestep {t}, series '{}'",
                    headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite cell at timestep {t}")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("values file has no rows".into()));
    }
    let m = spec.len();
    let s = rows.len();
    let mut values = Tensor::zeros(m, s);
    for (t, row) in rows.iter().enumerate() {
        for (i, col) in column_of.iter().enumerate() {
            values.set(i, t, row[col.expect("checked above")]);
        }
    }
    SeriesPanel::new(values, spec.node_ids().to_vec())
}

/// Load `values.csv` and `hierarchy.csv`, recording the raw coherency.
pub fn load_panel(
    values_csv: impl AsRef<Path>,
    hierarchy_csv: impl AsRef<Path>,
) -> Result<(SeriesPanel, HierarchySpec)> {
    let spec = HierarchySpec::read_csv(hierarchy_csv)?;
    let path = values_csv.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut panel = panel_from_csv_reader(file, &spec)?;
    let a = build_aggregation(&spec)?;
    panel.raw_coherency = Some(coherency_panel(&panel.values, &a)?);
    Ok((panel, spec))
}

/// Divide every entry by the single largest observed value.
pub fn scale_global_max(panel: &SeriesPanel) -> Result<SeriesPanel> {
    if panel.is_scaled {
        return Err(Error::Data("panel is already scaled".into()));
    }
    let max = panel
        .values
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Data(
            "cannot scale: the panel's maximum is not positive (all-zero panel?)".into(),
        ));
    }
    Ok(SeriesPanel {
        values: panel.values.scale(1.0 / max),
        node_ids: panel.node_ids.clone(),
        scale_factor: max,
        is_scaled: true,
        raw_coherency: panel.raw_coherency,
    })
}

/// Lag windows: datapoint `i` uses columns `i .. i + k` as input and column
/// `i + k` as target. `timestamps[i]` is the target's column index.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub windows: Vec<Tensor>,
    pub targets: Tensor,
    pub timestamps: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn batch(&self) -> Result<WindowBatch> {
        WindowBatch::from_windows(&self.windows)
    }

    fn slice(&self, range: std::ops::Range<usize>) -> WindowedDataset {
        let idx: Vec<usize> = range.clone().collect();
        WindowedDataset {
            windows: self.windows[range.clone()].to_vec(),
            targets: self.targets.select_rows(&idx),
            timestamps: self.timestamps[range].to_vec(),
        }
    }
}

pub fn make_windows(panel: &SeriesPanel, k: usize) -> Result<WindowedDataset> {
    let (m, s) = panel.values.shape();
    if k == 0 {
        return Err(Error::InvalidArgument("lag window must be at least 1".into()));
    }
    if s <= k {
        return Err(Error::Data(format!(
            "{s} timesteps is not enough for a lag window of {k}"
        )));
    }
    let cols: Vec<Vec<f64>> = (0..s).map(|t| panel.values.column(t)).collect();
    let n = s - k;
    let mut windows = Vec::with_capacity(n);
    let mut targets = Tensor::zeros(n, m);
    for i in 0..n {
        windows.push(Tensor::from_rows(&cols[i..i + k])?);
        targets.row_mut(i).copy_from_slice(&cols[i + k]);
    }
    Ok(WindowedDataset {
        windows,
        targets,
        timestamps: (k..s).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

/// Contiguous chronological split: `floor(0.8 n)`, `floor(0.1 n)`, remainder.
pub fn split_80_10_10(dataset: &WindowedDataset) -> Result<Splits> {
    let n = dataset.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "{n} datapoints; the 80/10/10 split needs at least 10"
        )));
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    Ok(Splits {
        train: dataset.slice(0..n_train),
        val: dataset.slice(n_train..n_train + n_val),
        test: dataset.slice(n_train + n_val..n),
    })
}

/// A panel with a random subset of leaves removed while the aggregates keep
/// their original values.
#[derive(Clone, Debug)]
pub struct NoisyDataset {
    pub panel: SeriesPanel,
    pub spec: HierarchySpec,
    pub aggregation: AggregationMatrix,
    pub manifest: NoisyManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyManifest {
    pub source: Option<String>,
    pub seed: u64,
    pub drop_fraction: f64,
    pub dropped: Vec<String>,
    /// Mean per-timestep coherency of the surviving raw data.
    pub raw_coherency: f64,
}

pub fn make_noisy(
    panel: &SeriesPanel,
    spec: &HierarchySpec,
    drop_fraction: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::InvalidArgument(format!(
            "drop fraction must be in [0, 1), got {drop_fraction}"
        )));
    }
    if panel.node_ids.as_slice() != spec.node_ids() {
        return Err(Error::Data("panel and hierarchy node orders differ".into()));
    }
    let leaves = spec.leaf_indices();
    let n_drop = (drop_fraction * leaves.len() as f64).floor() as usize;
    let mut rng = rng_for(seed, stream::NOISY_DATASET);
    let mut dropped: Vec<usize> = leaves
        .choose_multiple(&mut rng, n_drop)
        .copied()
        .collect();
    dropped.sort_unstable();
    let keep: Vec<usize> = (0..spec.len())
        .filter(|i| dropped.binary_search(i).is_err())
        .collect();
    let new_spec = spec.retain(&keep)?;
    let aggregation = build_aggregation(&new_spec)?;
    let mut new_panel = SeriesPanel::new(
        panel.values.select_rows(&keep),
        new_spec.node_ids().to_vec(),
    )?;
    new_panel.scale_factor = panel.scale_factor;
    new_panel.is_scaled = panel.is_scaled;
    let raw = if panel.is_scaled {
        new_panel.values.scale(panel.scale_factor)
    } else {
        new_panel.values.clone()
    };
    let raw_coherency = coherency_panel(&raw, &aggregation)?;
    new_panel.raw_coherency = Some(raw_coherency);
    Ok(NoisyDataset {
        panel: new_panel,
        spec: new_spec,
        aggregation,
        manifest: NoisyManifest {
            source: None,
            seed,
            drop_fraction,
            dropped: dropped
                .iter()
                .map(|&i| spec.node_ids()[i].clone())
                .collect(),
            raw_coherency,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub leaves: usize,
    pub depth: usize,
    pub timesteps: usize,
    /// Standard deviation of the per-leaf Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            leaves: 24,
            depth: 3,
            timesteps: 300,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Random tree with `depth` levels whose bottom level holds the leaves.
/// Leaf series are seasonal + trend + noise (clipped at zero); aggregates are
/// exact sums, so the panel is coherent.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(SeriesPanel, HierarchySpec)> {
    if cfg.depth == 0 || cfg.leaves == 0 || cfg.timesteps == 0 {
        return Err(Error::InvalidArgument(
            "leaves, depth and timesteps must be positive".into(),
        ));
    }
    let mut rng = rng_for(cfg.seed, stream::SYNTHETIC);

    // Level sizes grow geometrically from 1 to `leaves`.
    let d = cfg.depth;
    let mut sizes = vec![cfg.leaves; d];
    if d > 1 {
        sizes[0] = 1;
        for l in 1..d - 1 {
            let target = (cfg.leaves as f64).powf(l as f64 / (d - 1) as f64).round() as usize;
            sizes[l] = target.clamp(sizes[l - 1], cfg.leaves);
        }
    }

    let mut ids: Vec<String> = Vec::new();
    let mut parent: Vec<Option<usize>> = Vec::new();
    let mut prev_level: Vec<usize> = Vec::new();
    for (l, &size) in sizes.iter().enumerate() {
        let start = ids.len();
        for i in 0..size {
            ids.push(if l == 0 && size == 1 {
                "total".to_string()
            } else if l == d - 1 {
                format!("leaf_{i}")
            } else {
                format!("l{}_{i}", l + 1)
            });
            parent.push(None);
        }
        if !prev_level.is_empty() {
            // Balanced group sizes in shuffled order.
            let p = prev_level.len();
            let mut group: Vec<usize> = (0..size).map(|i| i % p).collect();
            group.shuffle(&mut rng);
            group.sort_unstable();
            for (i, g) in group.into_iter().enumerate() {
                parent[start + i] = Some(prev_level[g]);
            }
        }
        prev_level = (start..start + size).collect();
    }
    let spec = HierarchySpec::from_parents(ids, parent)?;

    let s = cfg.timesteps;
    let m = spec.len();
    let mut values = Tensor::zeros(m, s);
    let periods = [7.0, 12.0, 24.0];
    for &leaf in &spec.leaf_indices() {
        let base: f64 = rng.gen_range(5.0..15.0);
        let amp: f64 = rng.gen_range(1.0..4.0);
        let period = periods[rng.gen_range(0..periods.len())];
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let trend: f64 = rng.gen_range(-0.005..0.02);
        for t in 0..s {
            let eps: f64 = rng.sample(StandardNormal);
            let v = base
                + amp * (std::f64::consts::TAU * t as f64 / period + phase).sin()
                + trend * t as f64
                + cfg.noise * eps;
            values.set(leaf, t, v.max(0.0));
        }
    }
    // Children have larger indices than parents: fill aggregates bottom-up.
    for i in (0..m).rev() {
        if !spec.is_leaf(i) {
            let leaves = spec.leaf_descendants(i);
            for t in 0..s {
                let total: f64 = leaves.iter().map(|&j| values.get(j, t)).sum();
                values.set(i, t, total);
            }
        }
    }
    let mut panel = SeriesPanel::new(values, spec.node_ids().to_vec())?;
    panel.raw_coherency = Some(coherency_panel(&panel.values, &build_aggregation(&spec)?)?);
    Ok((panel, spec))
}
