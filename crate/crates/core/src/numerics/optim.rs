use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_shapes(op: &'static str, params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            op,
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                op,
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.rows(), p.cols());
        AdamState {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check_shapes("adam_step", params, grads)?;
    check_shapes("adam_step", &state.m, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, (pv, &gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gv;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gv * gv;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
