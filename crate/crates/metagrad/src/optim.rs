//! Base-level optimizers as pure update maps, plus the elementwise
//! derivative of each update with respect to the raw gradient.
//!
//! `update_vector` is the map u in `theta <- theta - u(g)`. `adaptation_diag`
//! is du/dg holding the pre-update moments fixed — the diagonal that turns a
//! direct gradient into a perturbation direction aware of the optimizer. For
//! SGD the diagonal is the constant learning rate; for Adam it is derived
//! from the moment recursions and checked against finite differences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        bias_correction: bool,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 coefficient applied by callers as part of the loss gradient;
    /// the update map itself never sees parameters.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay: 0.0,
        }
    }

    /// Standard Adam with bias correction on.
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                bias_correction: true,
            },
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn adam_uncorrected(lr: f64) -> Self {
        let mut cfg = Self::adam(lr);
        if let OptimizerKind::Adam {
            ref mut bias_correction,
            ..
        } = cfg.kind
        {
            *bias_correction = false;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidHyperparameter(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidHyperparameter(
                "weight decay must be nonnegative".into(),
            ));
        }
        match self.kind {
            OptimizerKind::Sgd => {}
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "momentum {momentum} outside [0,1)"
                    )));
                }
            }
            OptimizerKind::Adam {
                beta1, beta2, eps, ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "betas ({beta1}, {beta2}) outside [0,1)"
                    )));
                }
                if !(eps > 0.0) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "adam eps {eps} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter moment buffers and step count.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl OptimizerState {
    pub fn zeros_like(param: &Tensor) -> Self {
        OptimizerState {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            t: 0,
        }
    }
}

/// One optimizer step: returns the update vector u (apply as `theta - u`)
/// and the post-step state.
pub fn update_vector(
    state: &OptimizerState,
    g: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<(Tensor, OptimizerState)> {
    if g.shape() != state.m.shape() {
        return Err(Error::shape_mismatch("update_vector", state.m.shape(), g.shape()));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("update_vector gradient".into()));
    }
    let t_next = state.t + 1;
    match cfg.kind {
        OptimizerKind::Sgd => Ok((
            g.scale(cfg.lr),
            OptimizerState {
                m: state.m.clone(),
                v: state.v.clone(),
                t: t_next,
            },
        )),
        OptimizerKind::SgdMomentum { momentum } => {
            let m_next = state.m.zip_map(g, |m, gi| momentum * m + gi)?;
            let u = m_next.scale(cfg.lr);
            Ok((
                u,
                OptimizerState {
                    m: m_next,
                    v: state.v.clone(),
                    t: t_next,
                },
            ))
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps,
            bias_correction,
        } => {
            let m_next = state.m.zip_map(g, |m, gi| beta1 * m + (1.0 - beta1) * gi)?;
            let v_next = state
                .v
                .zip_map(g, |v, gi| beta2 * v + (1.0 - beta2) * gi * gi)?;
            let (c1, c2) = if bias_correction {
                (
                    1.0 - beta1.powi(t_next as i32),
                    1.0 - beta2.powi(t_next as i32),
                )
            } else {
                (1.0, 1.0)
            };
            let u = m_next.zip_map(&v_next, |m, v| {
                let m_hat = m / c1;
                let v_hat = v / c2;
                cfg.lr * m_hat / (v_hat.sqrt() + eps)
            })?;
            Ok((
                u,
                OptimizerState {
                    m: m_next,
                    v: v_next,
                    t: t_next,
                },
            ))
        }
    }
}

/// Elementwise du/dg of [`update_vector`] at the PRE-update state.
///
/// `state` must hold the moments from before the step that consumed `g`
/// (equivalently: the state the next call to `update_vector` would read).
pub fn adaptation_diag(
    state: &OptimizerState,
    g: &Tensor,
    cfg: &OptimizerConfig,
) -> Result<Tensor> {
    if g.shape() != state.m.shape() {
        return Err(Error::shape_mismatch(
            "adaptation_diag",
            state.m.shape(),
            g.shape(),
        ));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("adaptation_diag gradient".into()));
    }
    match cfg.kind {
        OptimizerKind::Sgd => Ok(Tensor::full(g.shape(), cfg.lr)),
        // u = lr * (mu*m + g), so du/dg = lr regardless of the moment.
        OptimizerKind::SgdMomentum { .. } => Ok(Tensor::full(g.shape(), cfg.lr)),
        OptimizerKind::Adam {
            beta1,
            beta2,
            eps,
            bias_correction,
        } => {
            // With c1 = 1 - beta1^t, c2 = 1 - beta2^t at the step being taken,
            // bias-corrected Adam is the uncorrected rule with
            // lr_eff = lr * sqrt(c2) / c1 and eps_eff = eps * sqrt(c2).
            let (lr_eff, eps_eff) = if bias_correction {
                let t_next = state.t + 1;
                let c1 = 1.0 - beta1.powi(t_next as i32);
                let c2 = 1.0 - beta2.powi(t_next as i32);
                (cfg.lr * c2.sqrt() / c1, eps * c2.sqrt())
            } else {
                (cfg.lr, eps)
            };
            let mut out = Vec::with_capacity(g.numel());
            for i in 0..g.numel() {
                let (mi, vi, gi) = (state.m.data()[i], state.v.data()[i], g.data()[i]);
                let s = (beta2 * vi + (1.0 - beta2) * gi * gi).sqrt();
                if s == 0.0 {
                    if eps_eff == 0.0 {
                        return Err(Error::SingularAdaptation);
                    }
                    // Symmetric limit at v = g = 0: the m-dependent kink
                    // cancels in the central difference.
                    out.push(lr_eff * (1.0 - beta1) / eps_eff);
                    continue;
                }
                let numer = (1.0 - beta1) * beta2 * vi + (1.0 - beta1) * eps_eff * s
                    - (1.0 - beta2) * beta1 * mi * gi;
                let denom = s * (s + eps_eff) * (s + eps_eff);
                out.push(lr_eff * numer / denom);
            }
            Tensor::from_vec(g.shape().to_vec(), out)
        }
    }
}
