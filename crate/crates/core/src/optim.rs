//! First-order optimisers over parameter groups.

use std::collections::HashMap;

use crate::autodiff::{Group, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.5 }
    }
}

/// Optimiser state for the parameters of some groups.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    groups: Vec<Group>,
    first: HashMap<ParamId, Tensor>,
    second: HashMap<ParamId, Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, groups: &[Group]) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            groups: groups.to_vec(),
            first: HashMap::new(),
            second: HashMap::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies the accumulated gradients of the optimiser's groups.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps as i32;
        for id in store.ids_in(&self.groups) {
            let grad = store.grad(id).clone();
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self
                        .second
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(grad.shape()));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let lr = self.lr;
                    let w = store.value_mut(id).data_mut();
                    for (((wi, mi), vi), gi) in w
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(grad.data())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum { momentum } => {
                    let lr = self.lr;
                    let w = store.value_mut(id).data_mut();
                    for ((wi, mi), gi) in w.iter_mut().zip(m.data_mut()).zip(grad.data()) {
                        *mi = momentum * *mi + gi;
                        *wi -= lr * *mi;
                    }
                }
            }
        }
    }
}
