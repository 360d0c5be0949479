//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use coreg::numerics::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor for components whose true derivative is ~0, where a
/// relative comparison is meaningless.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_REL_TOL * analytic.abs().max(numeric.abs()) + FD_ABS_FLOOR
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].as_mut_slice()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].as_mut_slice()[i] -= FD_STEP;
            g.as_mut_slice()[i] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

/// Compare graph gradients of `build` (which must return a 1x1 node) with
/// central differences. Returns a description of the first mismatch.
pub fn check_graph_gradients(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> Result<(), String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let numeric = numeric_gradients(inputs, &eval);
    compare(&analytic, &numeric)
}

pub fn compare(analytic: &[Tensor], numeric: &[Tensor]) -> Result<(), String> {
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (x, y)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
            if !fd_close(*x, *y) {
                return Err(format!("input {k}, entry {i}: analytic {x}, numeric {y}"));
            }
        }
    }
    Ok(())
}

/// Aggregation matrix by walking parent links, independent of the library.
pub fn brute_aggregation(parents: &[Option<usize>]) -> Vec<Vec<f64>> {
    let m = parents.len();
    let is_leaf: Vec<bool> = (0..m).map(|i| !parents.contains(&Some(i))).collect();
    let mut a = vec![vec![0.0; m]; m];
    for j in (0..m).filter(|&j| is_leaf[j]) {
        let mut cur = Some(j);
        while let Some(i) = cur {
            a[i][j] = 1.0;
            cur = parents[i];
        }
    }
    a
}

pub fn brute_coherency(a: &[Vec<f64>], y: &[f64]) -> f64 {
    a.iter()
        .zip(y)
        .map(|(row, yi)| {
            let ay: f64 = row.iter().zip(y).map(|(p, q)| p * q).sum();
            (yi - ay) * (yi - ay)
        })
        .sum::<f64>()
        .sqrt()
}

/// CRPS by its definition `E|X - y| - E|X - X'| / 2` over all sample pairs.
pub fn brute_crps(samples: &[f64], y: f64) -> f64 {
    let n = samples.len() as f64;
    let first: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let mut pairs = 0.0;
    for x in samples {
        for x2 in samples {
            pairs += (x - x2).abs();
        }
    }
    first - pairs / (2.0 * n * n)
}
