//! Central finite-difference check of [`NetworkState::backward`].
//!
//! The numerical side only ever calls `forward`; k-WTA selections and dropout
//! masks from the reference pass are frozen so that the perturbed function is
//! smooth in every parameter (away from ReLU and max-pool kinks).

use crate::error::Result;
use crate::net::{cross_entropy, ForwardOptions, HookMasks, Mode, NetworkState};
use crate::tensor::Tensor;

/// Scale below which gradients are compared absolutely instead of relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: usize,
    pub within: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.entries == 0 {
            1.0
        } else {
            self.within as f64 / self.entries as f64
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward against central differences of the mean cross-entropy.
pub fn check_network(
    net: &NetworkState,
    batch: &Tensor,
    labels: &[usize],
    dropout: Option<&HookMasks>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let opts = ForwardOptions { mode: Mode::Train, dropout, frozen: None };
    let out = net.forward(batch, opts)?;
    let (_, g) = cross_entropy(&out.logits, labels)?;
    let analytic = net.backward(&out, &g)?;
    let frozen = out.selections.clone();
    let frozen_opts = ForwardOptions { mode: Mode::Eval, dropout: None, frozen: Some(&frozen) };

    let mut probe = net.clone();
    let mut report = GradCheckReport { entries: 0, within: 0, max_rel_err: 0.0 };
    let n_params = net.params().count();
    for pi in 0..n_params {
        let len = net.params().nth(pi).unwrap().len();
        for j in 0..len {
            let orig = probe.params().nth(pi).unwrap().data()[j];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.params_mut().nth(pi).unwrap().data_mut()[j] = v;
                let o = probe.forward(batch, frozen_opts)?;
                Ok(cross_entropy(&o.logits, labels)?.0)
            };
            let up = eval_at(orig + step)?;
            let down = eval_at(orig - step)?;
            probe.params_mut().nth(pi).unwrap().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_err(analytic.tensors[pi].data()[j], numeric);
            report.entries += 1;
            if err < tol {
                report.within += 1;
            }
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    Ok(report)
}
