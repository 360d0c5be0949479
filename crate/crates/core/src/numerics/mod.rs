//! Dense tensors, reverse-mode differentiation, normalization, dropout,
//! noise and optimizers.

mod graph;
mod optim;
mod rng;
mod tensor;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use graph::{Graph, Var};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use rng::{derive_seed, rng_for, stream, SeededRng};
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of a non-affine batch normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(width: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }
}

/// Normalize each column of `x`. Train mode uses the batch's population
/// statistics and updates the running statistics; infer mode uses the running
/// statistics.
pub fn batchnorm(g: &mut Graph, x: Var, mode: Mode, state: &mut BatchNormState) -> Result<Var> {
    if !(state.eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "batchnorm eps must be positive, got {}",
            state.eps
        )));
    }
    let width = g.shape(x).1;
    if state.running_mean.len() != width || state.running_var.len() != width {
        return Err(Error::shape(
            "batchnorm",
            format!("{width} columns, state of width {}", state.running_mean.len()),
        ));
    }
    match mode {
        Mode::Train => {
            let (out, mean, var) = g.batchnorm_train(x, state.eps)?;
            let mom = state.momentum;
            for (r, m) in state.running_mean.iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            for (r, v) in state.running_var.iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * v;
            }
            Ok(out)
        }
        Mode::Infer => {
            let scale: Vec<f64> = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.eps).sqrt())
                .collect();
            g.column_affine(x, &state.running_mean, &scale)
        }
    }
}

/// Inverted dropout. `stochastic = false` is the identity; otherwise each
/// entry is zeroed with probability `rate` and survivors are scaled by
/// `1 / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    rng: &mut R,
    stochastic: bool,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !stochastic || rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::from_vec(r, c, mask)?)
}

/// I.i.d. standard normal entries.
pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, 1.0]]).unwrap());
        let mut st = BatchNormState::new(2);
        let y = batchnorm(&mut g, x, Mode::Train, &mut st).unwrap();
        let out = g.value(y);
        assert_eq!(out.column(0), vec![0.0, 0.0]);
        // (-1, 1) has population mean 0 and variance 1.
        let expected = 1.0 / (1.0 + st.eps).sqrt();
        assert!((out.get(0, 1) + expected).abs() < 1e-15);
        assert!((out.get(1, 1) - expected).abs() < 1e-15);
        assert!((out.get(1, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batchnorm_updates_running_stats() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let mut st = BatchNormState::new(1);
        batchnorm(&mut g, x, Mode::Train, &mut st).unwrap();
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.2]]).unwrap());
        let y = batchnorm(&mut g, x, Mode::Infer, &mut st).unwrap();
        assert!(g.value(y).item().abs() < 1e-15);
    }

    #[test]
    fn batchnorm_rejects_bad_input() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(1, 3));
        let mut st = BatchNormState::new(3);
        assert!(batchnorm(&mut g, x, Mode::Train, &mut st).is_err());
        st.eps = 0.0;
        let x2 = g.param(Tensor::zeros(2, 3));
        assert!(batchnorm(&mut g, x2, Mode::Train, &mut st).is_err());
    }

    #[test]
    fn dropout_rate_zero_and_infer_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(3, 3, 2.0));
        assert_eq!(dropout(&mut g, x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.5, &mut rng, false).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, &mut rng, true).is_err());
        assert!(dropout(&mut g, x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_zero_fraction_and_unbiasedness() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let n = 100_000;
        let x = g.constant(Tensor::filled(1, n, 1.0));
        let y = dropout(&mut g, x, 0.5, &mut rng, true).unwrap();
        let v = g.value(y);
        let zeros = v.as_slice().iter().filter(|&&e| e == 0.0).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&zeros), "zero fraction {zeros}");
        assert!((v.mean() - 1.0).abs() < 0.01);
    }

    #[test]
    fn gaussian_noise_moments_and_determinism() {
        let a = gaussian_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let b = gaussian_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let c = gaussian_noise(3, 4, &mut ChaCha8Rng::seed_from_u64(6));
        assert_eq!(a, b);
        assert_ne!(a, c);

        let big = gaussian_noise(1, 1_000_000, &mut ChaCha8Rng::seed_from_u64(9));
        let mean = big.mean();
        let var = big.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / big.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
