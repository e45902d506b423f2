//! First-order optimizers over [`ParamVector`]s.

use serde::{Deserialize, Serialize};

use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: ParamVector,
    v: ParamVector,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, like: &ParamVector) -> Self {
        Self { cfg, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let tensors = params.tensors_mut().iter_mut();
        let moments = self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut());
        for ((p, (m, v)), g) in tensors.zip(moments).zip(grad.tensors()) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum and decoupled-into-gradient L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Option<ParamVector>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: None }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        let mut d = grad.clone();
        if self.weight_decay != 0.0 {
            d.axpy(self.weight_decay, params);
        }
        if self.momentum != 0.0 {
            let v = self.velocity.get_or_insert_with(|| params.zeros_like());
            v.scale(self.momentum);
            v.axpy(1.0, &d);
            d = v.clone();
        }
        params.axpy(-lr, &d);
    }
}
