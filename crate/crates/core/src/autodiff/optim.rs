//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `lr0 * 0.5 * (1 + cos(pi * epoch / total))`, clamped at `total`.
pub fn cosine_lr(lr0: f64, epoch: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    let e = epoch.clamp(0.0, total);
    lr0 * 0.5 * (1.0 + (PI * e / total).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer hyper-parameters plus per-parameter auxiliary buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    // first buffer: velocity (SGD) or first moment (Adam); second: Adam only
    slots: Vec<Option<(Vec<T>, Vec<T>)>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            slots: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` to every parameter that has
    /// a gradient in `grads`. Weight decay is coupled (added to the
    /// gradient).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.steps += 1;
        let wd = T::lit(self.weight_decay);
        let lr_t = T::lit(lr);
        for (id, g) in grads {
            let idx = id.index();
            if self.slots.len() <= idx {
                self.slots.resize(idx + 1, None);
            }
            let p = params.get_mut(*id);
            let n = p.len();
            let (a, b) = self.slots[idx].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let pd = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let m = T::lit(momentum);
                    for ((pv, v), &gv) in pd.iter_mut().zip(a.iter_mut()).zip(g.data()) {
                        *v = m * *v + gv + wd * *pv;
                        *pv -= lr_t * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::lit(1.0 - beta1.powi(self.steps as i32));
                    let c2 = T::lit(1.0 - beta2.powi(self.steps as i32));
                    let eps = T::lit(eps);
                    for (((pv, m), v), &gv) in pd.iter_mut().zip(a.iter_mut()).zip(b.iter_mut()).zip(g.data()) {
                        let gv = gv + wd * *pv;
                        *m = b1 * *m + (T::one() - b1) * gv;
                        *v = b2 * *v + (T::one() - b2) * gv * gv;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *pv -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
