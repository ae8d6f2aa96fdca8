//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0, lr, beta1, beta2, eps, weight_decay }
    }
}

/// One update of every parameter in `store`.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let (lr, eps, wd) = (state.lr, state.eps, state.weight_decay);
    for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(&grads.0).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((x, &gi), mi), vi) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
        }
    }
    Ok(())
}
