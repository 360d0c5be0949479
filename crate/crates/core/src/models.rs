//! Forecasters built around a shared recurrent body.
//!
//! Every model ends in a [`FinalLinearLayer`] preceded by the activation `z`
//! it reads:
//!
//! * point mode: `h_t = tanh(U x_t + V h_{t-1} + c)`, `z = batchnorm(h_k)`,
//!   `y = W z + b`;
//! * VAE mode: `theta = batchnorm(h_k)` is perturbed with Gaussian noise and
//!   decoded by a hidden `tanh` layer `z` and the final layer;
//! * dropout mode: as VAE mode without latent noise; instead every hidden
//!   state of the recurrence goes through dropout. The final layer never
//!   sees dropout.
//!
//! The projection variant multiplies the output by the orthogonal projector
//! onto the coherent subspace; the PROFHiT-style variant adds a softplus
//! standard-deviation head next to the mean head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::AggregationMatrix;
use crate::losses::{self, AccuracyLoss, FinalLinearLayer, GaussianForecast};
use crate::numerics::{
    batchnorm, dropout, gaussian_noise, BatchNormState, Graph, Mode, SeededRng, Tensor, Var,
};

/// Floor added to the softplus standard deviation.
pub const STDDEV_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    Core,
    Projection,
    ProfhitStyle,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Core => "core",
            Variant::Projection => "projection",
            Variant::ProfhitStyle => "profhit_style",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "core" => Ok(Variant::Core),
            "projection" => Ok(Variant::Projection),
            "profhit_style" | "profhit" => Ok(Variant::ProfhitStyle),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    #[default]
    Point,
    Vae,
    Dropout,
}

impl ForecastMode {
    pub fn name(self) -> &'static str {
        match self {
            ForecastMode::Point => "point",
            ForecastMode::Vae => "vae",
            ForecastMode::Dropout => "dropout",
        }
    }

    pub fn is_distributional(self) -> bool {
        self != ForecastMode::Point
    }
}

impl std::str::FromStr for ForecastMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(ForecastMode::Point),
            "vae" => Ok(ForecastMode::Vae),
            "dropout" => Ok(ForecastMode::Dropout),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub series: usize,
    pub hidden: usize,
    pub lag: usize,
    pub variant: Variant,
    pub mode: ForecastMode,
    pub dropout_rate: f64,
    pub noise_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.series == 0 || self.hidden == 0 || self.lag == 0 {
            return Err(Error::Config(
                "series, hidden width and lag must all be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config(format!(
                "noise scale must be nonnegative, got {}",
                self.noise_scale
            )));
        }
        if self.variant == Variant::ProfhitStyle && self.mode != ForecastMode::Point {
            return Err(Error::Config(
                "profhit_style is a parametric Gaussian forecaster; use mode 'point' \
                 (its samples are drawn from the Gaussian heads)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Lag windows laid out time-major: `steps[j]` is the `batch x m` matrix of
/// observations at offset `j` (oldest first).
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub steps: Vec<Tensor>,
}

impl WindowBatch {
    pub fn batch(&self) -> usize {
        self.steps.first().map_or(0, Tensor::rows)
    }

    /// A batch from individual `k x m` windows.
    pub fn from_windows(windows: &[Tensor]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty window batch".into()))?;
        let (k, m) = first.shape();
        let mut steps = vec![Tensor::zeros(windows.len(), m); k];
        for (i, w) in windows.iter().enumerate() {
            if w.shape() != (k, m) {
                return Err(Error::shape(
                    "WindowBatch",
                    format!("window {i} is {:?}, expected ({k}, {m})", w.shape()),
                ));
            }
            for (j, step) in steps.iter_mut().enumerate() {
                step.row_mut(i).copy_from_slice(w.row(j));
            }
        }
        Ok(WindowBatch { steps })
    }

    /// The same window repeated `n` times.
    pub fn repeat(window: &Tensor, n: usize) -> Result<Self> {
        let windows = vec![window.clone(); n];
        Self::from_windows(&windows)
    }

    /// Every window repeated `n` times, window-major.
    pub fn tile(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..self.batch()).collect();
        WindowBatch {
            steps: self.steps.iter().map(|s| s.select_rows(&idx)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    input: usize,
    recurrent: usize,
    hidden_bias: usize,
    decoder: Option<(usize, usize)>,
    out_weight: usize,
    out_bias: usize,
    stddev: Option<(usize, usize)>,
}

impl Layout {
    fn for_config(cfg: &ModelConfig) -> (Layout, Vec<(String, usize, usize)>) {
        let (m, d) = (cfg.series, cfg.hidden);
        let mut shapes = vec![
            ("input".to_string(), d, m),
            ("recurrent".to_string(), d, d),
            ("hidden_bias".to_string(), 1, d),
        ];
        let decoder = if cfg.mode.is_distributional() {
            shapes.push(("decoder_weight".into(), d, d));
            shapes.push(("decoder_bias".into(), 1, d));
            Some((3, 4))
        } else {
            None
        };
        let out_weight = shapes.len();
        shapes.push(("out_weight".into(), m, d));
        shapes.push(("out_bias".into(), 1, m));
        let stddev = if cfg.variant == Variant::ProfhitStyle {
            shapes.push(("stddev_weight".into(), m, d));
            shapes.push(("stddev_bias".into(), 1, m));
            Some((out_weight + 2, out_weight + 3))
        } else {
            None
        };
        (
            Layout {
                input: 0,
                recurrent: 1,
                hidden_bias: 2,
                decoder,
                out_weight,
                out_bias: out_weight + 1,
                stddev,
            },
            shapes,
        )
    }
}

/// Recorded forward pass.
pub struct Forward {
    pub graph: Graph,
    pub params: Vec<Var>,
    /// Input to the final layer.
    pub z: Var,
    /// Final-layer output (the Gaussian mean for the PROFHiT-style head).
    pub raw: Var,
    /// Model output: `raw`, or its projection for the projection variant.
    pub output: Var,
    pub stddev: Option<Var>,
}

impl Forward {
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.output)
    }

    pub fn z(&self) -> &Tensor {
        self.graph.value(self.z)
    }

    pub fn raw(&self) -> &Tensor {
        self.graph.value(self.raw)
    }

    pub fn gradients(&self) -> Vec<Tensor> {
        self.params.iter().map(|&p| self.graph.grad(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecaster {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    batchnorm: BatchNormState,
    projection: Option<Tensor>,
}

impl Forecaster {
    /// Uniform `+-1/sqrt(fan_in)` initialization. `projection` is required
    /// for (and only used by) the projection variant.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        projection: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = Layout::for_config(&config);
        let projection = match (config.variant, projection) {
            (Variant::Projection, Some(p)) => {
                if p.shape() != (config.series, config.series) {
                    return Err(Error::shape(
                        "Forecaster",
                        format!("projection {:?} for {} series", p.shape(), config.series),
                    ));
                }
                Some(p)
            }
            (Variant::Projection, None) => {
                return Err(Error::Config(
                    "projection variant needs a projection matrix".into(),
                ))
            }
            _ => None,
        };
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, r, c) in shapes {
            let fan_in = if name.ends_with("bias") {
                config.hidden
            } else {
                c
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Tensor::from_vec(r, c, data)?);
            names.push(name);
        }
        Ok(Forecaster {
            batchnorm: BatchNormState::new(config.hidden),
            config,
            layout,
            names,
            params,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn batchnorm(&self) -> &BatchNormState {
        &self.batchnorm
    }

    pub fn batchnorm_mut(&mut self) -> &mut BatchNormState {
        &mut self.batchnorm
    }

    pub fn projection(&self) -> Option<&Tensor> {
        self.projection.as_ref()
    }

    pub fn final_layer(&self) -> FinalLinearLayer {
        FinalLinearLayer {
            weight: self.params[self.layout.out_weight].clone(),
            bias: self.params[self.layout.out_bias].as_slice().to_vec(),
        }
    }

    /// Replace the final layer (same shape).
    pub fn set_final_layer(&mut self, layer: &FinalLinearLayer) -> Result<()> {
        let w = &mut self.params[self.layout.out_weight];
        if w.shape() != layer.weight.shape() || layer.bias.len() != self.config.series {
            return Err(Error::shape(
                "set_final_layer",
                format!("{:?} vs {:?}", w.shape(), layer.weight.shape()),
            ));
        }
        *w = layer.weight.clone();
        self.params[self.layout.out_bias] = Tensor::row_vector(&layer.bias);
        Ok(())
    }

    pub fn out_weight_index(&self) -> usize {
        self.layout.out_weight
    }

    pub fn out_bias_index(&self) -> usize {
        self.layout.out_bias
    }

    /// Record a forward pass. `mode` selects batch or running statistics for
    /// batchnorm; `stochastic` switches on latent noise (VAE) or dropout
    /// masks. Point-mode models ignore `stochastic`.
    pub fn forward(
        &mut self,
        inputs: &WindowBatch,
        mode: Mode,
        stochastic: bool,
        rng: &mut SeededRng,
    ) -> Result<Forward> {
        let mut bn = self.batchnorm.clone();
        let fwd = self.forward_with(inputs, mode, stochastic, rng, &mut bn)?;
        if mode == Mode::Train {
            self.batchnorm = bn;
        }
        Ok(fwd)
    }

    /// Deterministic inference pass with running batchnorm statistics.
    pub fn infer(&self, inputs: &WindowBatch) -> Result<Forward> {
        let mut bn = self.batchnorm.clone();
        let mut rng = crate::numerics::rng_for(0, 0);
        self.forward_with(inputs, Mode::Infer, false, &mut rng, &mut bn)
    }

    pub fn predict(&self, inputs: &WindowBatch) -> Result<Tensor> {
        Ok(self.infer(inputs)?.output().clone())
    }

    fn forward_with(
        &self,
        inputs: &WindowBatch,
        mode: Mode,
        stochastic: bool,
        rng: &mut SeededRng,
        bn: &mut BatchNormState,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if inputs.steps.len() != cfg.lag {
            return Err(Error::shape(
                "forward",
                format!("window of length {}, model lag {}", inputs.steps.len(), cfg.lag),
            ));
        }
        let batch = inputs.batch();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for s in &inputs.steps {
            if s.shape() != (batch, cfg.series) {
                return Err(Error::shape(
                    "forward",
                    format!("step {:?}, expected ({batch}, {})", s.shape(), cfg.series),
                ));
            }
        }

        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let l = self.layout;
        let drop_hidden = cfg.mode == ForecastMode::Dropout && stochastic;

        let mut h: Option<Var> = None;
        for step in &inputs.steps {
            let x = g.constant(step.clone());
            let mut pre = g.matmul_nt(x, params[l.input])?;
            if let Some(prev) = h {
                let rec = g.matmul_nt(prev, params[l.recurrent])?;
                pre = g.add(pre, rec)?;
            }
            let pre = g.add_row(pre, params[l.hidden_bias])?;
            let mut hidden = g.tanh(pre);
            if drop_hidden {
                hidden = dropout(&mut g, hidden, cfg.dropout_rate, rng, true)?;
            }
            h = Some(hidden);
        }
        let h = h.expect("lag >= 1");
        let mut z = batchnorm(&mut g, h, mode, bn)?;

        if let Some((dw, db)) = l.decoder {
            if cfg.mode == ForecastMode::Vae && stochastic && cfg.noise_scale > 0.0 {
                let eps = gaussian_noise(batch, cfg.hidden, rng).scale(cfg.noise_scale);
                let eps = g.constant(eps);
                z = g.add(z, eps)?;
            }
            let pre = g.matmul_nt(z, params[dw])?;
            let pre = g.add_row(pre, params[db])?;
            z = g.tanh(pre);
        }

        let raw = g.matmul_nt(z, params[l.out_weight])?;
        let raw = g.add_row(raw, params[l.out_bias])?;

        let output = match &self.projection {
            Some(p) => {
                let p = g.constant(p.clone());
                // P is symmetric, so row-wise P y is y P.
                g.matmul(raw, p)?
            }
            None => raw,
        };

        let stddev = match l.stddev {
            Some((sw, sb)) => {
                let pre = g.matmul_nt(z, params[sw])?;
                let pre = g.add_row(pre, params[sb])?;
                let sp = g.softplus(pre);
                Some(g.add_scalar(sp, STDDEV_FLOOR))
            }
            None => None,
        };

        Ok(Forward {
            graph: g,
            params,
            z,
            raw,
            output,
            stddev,
        })
    }

    /// Append the variant's training objective to a forward pass.
    pub fn loss(
        &self,
        fwd: &mut Forward,
        targets: &Tensor,
        a: &AggregationMatrix,
        weight: f64,
        accuracy: AccuracyLoss,
    ) -> Result<Var> {
        let g = &mut fwd.graph;
        let y = g.constant(targets.clone());
        let l = self.layout;
        match self.config.variant {
            Variant::Base | Variant::Projection => losses::accuracy(g, accuracy, fwd.output, y),
            Variant::Core => losses::combined_loss(
                g,
                fwd.output,
                y,
                fwd.params[l.out_weight],
                fwd.params[l.out_bias],
                a,
                weight,
                accuracy,
            ),
            Variant::ProfhitStyle => {
                let sd = fwd.stddev.expect("profhit head");
                let nll = losses::gaussian_nll(g, fwd.output, sd, y)?;
                if weight == 0.0 {
                    return Ok(nll);
                }
                let cons = losses::profhit_consistency_graph(g, fwd.output, sd, a)?;
                let cons = g.scale(cons, weight);
                g.add(nll, cons)
            }
        }
    }

    /// Gaussian forecast of a single `k x m` window (PROFHiT-style only).
    pub fn gaussian_forecast(&self, window: &Tensor) -> Result<GaussianForecast> {
        if self.config.variant != Variant::ProfhitStyle {
            return Err(Error::Config(
                "gaussian_forecast needs the profhit_style variant".into(),
            ));
        }
        let inputs = WindowBatch::from_windows(std::slice::from_ref(window))?;
        let mut bn = self.batchnorm.clone();
        let mut rng = crate::numerics::rng_for(0, 0);
        let fwd = self.forward_with(&inputs, Mode::Infer, false, &mut rng, &mut bn)?;
        let sd = fwd.stddev.expect("profhit head");
        GaussianForecast::new(
            fwd.output().as_slice().to_vec(),
            fwd.graph.value(sd).as_slice().to_vec(),
        )
    }

    /// `n` stochastic forecasts for every window in `inputs`, with running
    /// batchnorm statistics. Returns one `batch x m` tensor per sample.
    ///
    /// VAE: latent noise; dropout: dropout masks in the recurrence;
    /// PROFHiT-style: independent Gaussian draws per series; point models
    /// return `n` copies of the deterministic forecast.
    pub fn sample(
        &self,
        inputs: &WindowBatch,
        n: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<Tensor>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        let batch = inputs.batch();
        let mut bn = self.batchnorm.clone();
        if self.config.variant == Variant::ProfhitStyle {
            let fwd = self.forward_with(inputs, Mode::Infer, false, rng, &mut bn)?;
            let mu = fwd.output().clone();
            let sd = fwd.graph.value(fwd.stddev.expect("profhit head")).clone();
            return Ok((0..n)
                .map(|_| {
                    let eps = gaussian_noise(batch, self.config.series, rng);
                    let mut s = mu.clone();
                    for ((v, e), sdv) in s
                        .as_mut_slice()
                        .iter_mut()
                        .zip(eps.as_slice())
                        .zip(sd.as_slice())
                    {
                        *v += sdv * e;
                    }
                    s
                })
                .collect());
        }
        if !self.config.mode.is_distributional() {
            let y = self.forward_with(inputs, Mode::Infer, false, rng, &mut bn)?;
            return Ok(vec![y.output().clone(); n]);
        }
        let tiled = inputs.tile(n);
        let fwd = self.forward_with(&tiled, Mode::Infer, true, rng, &mut bn)?;
        let out = fwd.output();
        Ok((0..n)
            .map(|s| out.select_rows(&(s * batch..(s + 1) * batch).collect::<Vec<_>>()))
            .collect())
    }

    /// `n x m` samples for one window from the VAE sampler.
    pub fn vae_sample(&self, window: &Tensor, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        if self.config.mode != ForecastMode::Vae {
            return Err(Error::Config("vae_sample needs a VAE-mode model".into()));
        }
        self.sample_window(window, n, rng)
    }

    /// `n x m` samples for one window from the dropout sampler.
    pub fn dropout_sample(
        &self,
        window: &Tensor,
        n: usize,
        rng: &mut SeededRng,
    ) -> Result<Tensor> {
        if self.config.mode != ForecastMode::Dropout {
            return Err(Error::Config(
                "dropout_sample needs a dropout-mode model".into(),
            ));
        }
        self.sample_window(window, n, rng)
    }

    fn sample_window(&self, window: &Tensor, n: usize, rng: &mut SeededRng) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        let inputs = WindowBatch::repeat(window, n)?;
        let mut bn = self.batchnorm.clone();
        let fwd = self.forward_with(&inputs, Mode::Infer, true, rng, &mut bn)?;
        Ok(fwd.output().clone())
    }

    /// Activation `z` feeding the final layer for each sample row, matching
    /// [`Forecaster::sample_window`] when called with an identically seeded
    /// generator. Used to check the per-sample coherency bound.
    pub fn sample_window_with_z(
        &self,
        window: &Tensor,
        n: usize,
        rng: &mut SeededRng,
    ) -> Result<(Tensor, Tensor)> {
        let inputs = WindowBatch::repeat(window, n)?;
        let mut bn = self.batchnorm.clone();
        let fwd = self.forward_with(&inputs, Mode::Infer, true, rng, &mut bn)?;
        Ok((fwd.output().clone(), fwd.z().clone()))
    }
}
