use serde::{Deserialize, Serialize};

use super::graph::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        let zeros: Vec<Tensor> = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Ok(Self {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one per parameter.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Restores the step counter and moments saved by a checkpoint.
    pub fn restore(&mut self, steps_taken: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter store".into()));
        }
        self.step = steps_taken;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update to every parameter using the gradients held in
    /// `store`, with the learning rate scaled by `lr_mult`.
    pub fn step(&mut self, store: &mut ParamStore, lr_mult: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        self.step_params(store, &ids, lr_mult)
    }

    /// Like [`AdamW::step`] but touches only `ids`; other parameters and
    /// their moments stay as they are.
    pub fn step_params(&mut self, store: &mut ParamStore, ids: &[ParamId], lr_mult: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::config("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.lr * lr_mult;
        for &id in ids {
            let grad = store.grad(id).clone();
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            if m.shape() != grad.shape() {
                return Err(Error::config(format!("moment shape mismatch for {}", store.name(id))));
            }
            let w = store.value_mut(id);
            let decay = 1.0 - lr * self.weight_decay;
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi = *wi * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
