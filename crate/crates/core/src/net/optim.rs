use serde::{Deserialize, Serialize};

use super::forward::GradientSet;
use super::layers::NetworkState;
use crate::error::{Error, Result};

/// `theta <- theta - lr * g` for every parameter.
pub fn sgd_step(net: &mut NetworkState, grads: &GradientSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidInput(format!("learning rate must be non-negative, got {lr}")));
    }
    grads.check_matches(net)?;
    for (p, g) in net.params_mut().zip(&grads.tensors) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }
    }
}

/// SGD with optional heavy-ball momentum and L2 weight decay. With both at
/// zero each step is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Option<GradientSet>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg, velocity: None }
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn step(&mut self, net: &mut NetworkState, grads: &GradientSet) -> Result<()> {
        if self.cfg.momentum == 0.0 && self.cfg.weight_decay == 0.0 {
            return sgd_step(net, grads, self.cfg.lr);
        }
        grads.check_matches(net)?;
        let mut effective = grads.clone();
        if self.cfg.weight_decay != 0.0 {
            for (g, p) in effective.tensors.iter_mut().zip(net.params()) {
                for (gi, w) in g.data_mut().iter_mut().zip(p.data()) {
                    *gi += self.cfg.weight_decay * w;
                }
            }
        }
        if self.cfg.momentum != 0.0 {
            let v = self.velocity.get_or_insert_with(|| GradientSet::zeros_like(net));
            for (vt, g) in v.tensors.iter_mut().zip(effective.tensors.iter_mut()) {
                for (vi, gi) in vt.data_mut().iter_mut().zip(g.data_mut()) {
                    *vi = self.cfg.momentum * *vi + *gi;
                    *gi = *vi;
                }
            }
        }
        sgd_step(net, &effective, self.cfg.lr)
    }
}
