//! Pixelwise L1 loss and Adam with a log-linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::tensor::{Real, Tensor5D};
use crate::error::{domain, Result};

/// Mean absolute error and its subgradient `sign(pred - target) / n`, sign(0) = 0.
pub fn l1_loss<T: Real>(pred: &Tensor5D<T>, target: &Tensor5D<T>) -> Result<(f64, Tensor5D<T>)> {
    if pred.dims != target.dims {
        return domain(format!("prediction {:?} and target {:?} differ", pred.dims, target.dims));
    }
    let n = pred.len() as f64;
    let inv = T::of(1.0 / n);
    let mut loss = 0.0;
    let mut grad = Tensor5D::zeros(pred.dims);
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d.abs().to_f64().unwrap();
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_start: 1e-4, lr_end: 1e-5 }
    }
}

impl AdamHyper {
    /// Linear in log-space from `lr_start` at epoch 0 to `lr_end` at the last epoch.
    pub fn learning_rate(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.lr_start;
        }
        let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        (self.lr_start.ln() + f * (self.lr_end.ln() - self.lr_start.ln())).exp()
    }
}

/// First and second moments per parameter, in `Network::params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new<T: Real>(net: &Network<T>) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        OptimState { step: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn matches<T: Real>(&self, net: &Network<T>) -> bool {
        let p = net.params();
        p.len() == self.m.len() && p.iter().zip(&self.m).zip(&self.v).all(|((p, m), v)| p.len() == m.len() && p.len() == v.len())
    }
}

/// One Adam update from the accumulated gradients. Parameters of frozen z
/// sub-convolutions are left untouched.
pub fn adam_step(net: &mut Network<f32>, state: &mut OptimState, hyper: &AdamHyper, lr: f64) -> Result<()> {
    if !state.matches(net) {
        return domain("optimizer state does not match the network parameters");
    }
    let frozen: Vec<bool> = net
        .blocks()
        .flat_map(|b| [false, false, b.frozen_z, b.frozen_z, false, false])
        .chain([false, false])
        .collect();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    for (((p, m), v), &fz) in net.params_mut().into_iter().zip(&mut state.m).zip(&mut state.v).zip(&frozen) {
        if fz {
            continue;
        }
        for i in 0..p.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] as f64 / bc1;
            let vh = v[i] as f64 / bc2;
            p.data[i] -= (lr * mh / (vh.sqrt() + hyper.eps)) as f32;
        }
    }
    Ok(())
}
