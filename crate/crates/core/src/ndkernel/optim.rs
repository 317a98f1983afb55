use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One SGD-with-momentum update: `v ← momentum·v + grad; p ← p − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    if velocity.shape() != param.shape() {
        return Err(Error::shape("sgd_step", param.shape(), velocity.shape()));
    }
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: lr must be positive and momentum in [0, 1), got lr={lr} momentum={momentum}"
        )));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum over a [`ParamStore`], keeping one velocity buffer per
/// parameter name.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies `grads` to `params`; `lr_for` picks the learning rate of each
    /// parameter (parameter groups). Parameters without a gradient are left
    /// untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            sgd_step(param, grad, v, lr_for(name), self.momentum)?;
        }
        Ok(())
    }
}

/// Global L2 norm across a gradient map.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
