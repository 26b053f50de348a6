//! The meta-gradient engine: alternating base/meta optimization with a
//! central-difference meta gradient, plus implicit-differentiation baselines.
//!
//! The core method perturbs the base parameters along
//! `v = du/dg ⊙ dL_meta/dtheta`, evaluates the lambda-gradient of the base
//! loss at `theta ± eps*v` with `eps = alpha/|v|`, and combines the two
//! first-order passes into the meta gradient. No second-order autodiff is
//! used anywhere: the Neumann-series and conjugate-gradient baselines get
//! their Hessian-vector products from central differences of first-order
//! gradients.

use std::time::Instant;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{adaptation_diag, update_vector, OptimizerConfig, OptimizerState};
use crate::tensor::{axpy_all, global_norm, mem, Tensor};

/// A bilevel program: a base loss over (theta, lambda) and a meta loss over
/// theta. Implementations build both losses from graph primitives; the
/// engine decides which parameter set is differentiable on each pass.
pub trait Problem {
    type BaseBatch;
    type MetaBatch;

    fn base_loss(
        &self,
        g: &mut Graph,
        theta: &[Var],
        lambda: &[Var],
        batch: &Self::BaseBatch,
    ) -> Result<Var>;

    fn meta_loss(&self, g: &mut Graph, theta: &[Var], batch: &Self::MetaBatch) -> Result<Var>;

    /// Closed-form meta gradient for problems that admit one; backs the
    /// `exact_ift` method.
    fn closed_form_meta_grad(&self, _lambda: &[Tensor]) -> Option<Result<Vec<Tensor>>> {
        None
    }

    /// Exact derivative through `steps` unrolled base updates; defined for
    /// quadratic problems only.
    fn unrolled_meta_grad(
        &self,
        _lambda: &[Tensor],
        _steps: usize,
        _lr: f64,
    ) -> Option<Result<Vec<Tensor>>> {
        None
    }

    /// Called by [`base_step`] after each parameter update, with the new
    /// theta. Lets problems maintain auxiliary state (e.g. a moving-average
    /// model for uncertainty inputs).
    fn after_base_step(&self, _theta: &[Tensor]) {}
}

/// Gradient and pre-update optimizer state cached from the most recent base
/// step; the adaptation diagonal is evaluated at exactly this pairing.
#[derive(Debug, Clone)]
pub struct LastBaseStep {
    pub pre_states: Vec<OptimizerState>,
    pub grads: Vec<Tensor>,
}

/// Mutable engine state: parameters and optimizer state for both levels.
#[derive(Debug, Clone)]
pub struct BilevelState {
    pub theta: Vec<Tensor>,
    pub lambda: Vec<Tensor>,
    pub base_cfg: OptimizerConfig,
    pub base_states: Vec<OptimizerState>,
    pub meta_cfg: OptimizerConfig,
    pub meta_states: Vec<OptimizerState>,
    pub last_base: Option<LastBaseStep>,
}

impl BilevelState {
    pub fn new(
        theta: Vec<Tensor>,
        lambda: Vec<Tensor>,
        base_cfg: OptimizerConfig,
        meta_cfg: OptimizerConfig,
    ) -> Result<Self> {
        base_cfg.validate()?;
        meta_cfg.validate()?;
        let base_states = theta.iter().map(OptimizerState::zeros_like).collect();
        let meta_states = lambda.iter().map(OptimizerState::zeros_like).collect();
        Ok(BilevelState {
            theta,
            lambda,
            base_cfg,
            base_states,
            meta_cfg,
            meta_states,
            last_base: None,
        })
    }
}

/// Meta-gradient method selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaGradMethod {
    /// Central-difference meta gradient with algorithmic adaptation.
    Sama { alpha: f64 },
    /// Same, with the adaptation replaced by the identity.
    SamaNa { alpha: f64 },
    /// Truncated Neumann series for the inverse-Hessian-vector product.
    Neumann { terms: usize, eta: f64, hvp_step: f64 },
    /// Conjugate-gradient solve of (H + damping I) x = g_direct.
    Cg {
        max_iters: usize,
        tol: f64,
        damping: f64,
        hvp_step: f64,
    },
    /// Problem-supplied closed form (oracle).
    ExactIft,
    /// Problem-supplied exact derivative through the unrolled updates.
    UnrolledExact,
}

impl MetaGradMethod {
    pub fn sama() -> Self {
        MetaGradMethod::Sama { alpha: 1.0 }
    }

    pub fn sama_na() -> Self {
        MetaGradMethod::SamaNa { alpha: 1.0 }
    }

    pub fn applies_v_step(&self) -> bool {
        matches!(
            self,
            MetaGradMethod::Sama { .. } | MetaGradMethod::SamaNa { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetaGradMethod::Sama { .. } => "sama",
            MetaGradMethod::SamaNa { .. } => "sama_na",
            MetaGradMethod::Neumann { .. } => "neumann",
            MetaGradMethod::Cg { .. } => "cg",
            MetaGradMethod::ExactIft => "exact_ift",
            MetaGradMethod::UnrolledExact => "unrolled_exact",
        }
    }
}

/// Result of one meta-gradient computation.
#[derive(Debug, Clone)]
pub struct MetaGrad {
    pub grad: Vec<Tensor>,
    /// Step size used in the central difference (0 for closed forms).
    pub epsilon: f64,
    /// Perturbation direction in theta-space (empty for closed forms).
    pub v: Vec<Tensor>,
}

/// Below this perturbation norm the central difference is skipped; a
/// legitimately converged base problem produces v -> 0.
pub const DEGENERATE_V_THRESHOLD: f64 = 1e-12;

enum Level {
    Base,
    Meta,
}

enum Wrt {
    Theta,
    Lambda,
}

fn loss_and_grads<P: Problem>(
    p: &P,
    theta: &[Tensor],
    lambda: &[Tensor],
    base_batch: Option<&P::BaseBatch>,
    meta_batch: Option<&P::MetaBatch>,
    level: Level,
    wrt: Wrt,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let theta_diff = matches!(wrt, Wrt::Theta);
    let tvars: Vec<Var> = theta
        .iter()
        .map(|t| {
            if theta_diff {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let lvars: Vec<Var> = lambda
        .iter()
        .map(|t| {
            if theta_diff {
                g.constant(t.clone())
            } else {
                g.leaf(t.clone())
            }
        })
        .collect();
    let root = match level {
        Level::Base => p.base_loss(&mut g, &tvars, &lvars, base_batch.expect("base batch"))?,
        Level::Meta => p.meta_loss(&mut g, &tvars, meta_batch.expect("meta batch"))?,
    };
    let (mut tape, out) = g.finish(root);
    let loss = out.scalar_value()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let wrt_vars: &[Var] = if theta_diff { &tvars } else { &lvars };
    let mut grads = tape.backward(wrt_vars)?;
    let out = wrt_vars
        .iter()
        .map(|&v| grads.take(v).expect("requested leaf"))
        .collect();
    Ok((loss, out))
}

/// Meta-loss gradient with respect to theta at the current parameters.
pub fn direct_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    meta_batch: &P::MetaBatch,
) -> Result<(f64, Vec<Tensor>)> {
    loss_and_grads(
        p,
        &s.theta,
        &s.lambda,
        None,
        Some(meta_batch),
        Level::Meta,
        Wrt::Theta,
    )
}

/// Base-loss gradient with respect to theta at the given theta.
fn base_grad_at<P: Problem>(
    p: &P,
    theta: &[Tensor],
    s: &BilevelState,
    batch: &P::BaseBatch,
) -> Result<(f64, Vec<Tensor>)> {
    loss_and_grads(
        p,
        theta,
        &s.lambda,
        Some(batch),
        None,
        Level::Base,
        Wrt::Theta,
    )
}

/// Base-loss gradient with respect to lambda at the given theta.
fn lambda_grad_at<P: Problem>(
    p: &P,
    theta: &[Tensor],
    s: &BilevelState,
    batch: &P::BaseBatch,
) -> Result<(f64, Vec<Tensor>)> {
    loss_and_grads(
        p,
        theta,
        &s.lambda,
        Some(batch),
        None,
        Level::Base,
        Wrt::Lambda,
    )
}

/// Base-loss value and raw theta-gradient at the current parameters.
pub fn base_gradient<P: Problem>(
    p: &P,
    s: &BilevelState,
    batch: &P::BaseBatch,
) -> Result<(f64, Vec<Tensor>)> {
    base_grad_at(p, &s.theta, s, batch)
}

/// Apply one base optimizer step for a given raw gradient (weight decay is
/// added here). Caches the gradient and the pre-update optimizer state for
/// the adaptation diagonal.
pub fn apply_base_update<P: Problem>(
    p: &P,
    s: &mut BilevelState,
    mut grads: Vec<Tensor>,
) -> Result<()> {
    if s.base_cfg.weight_decay > 0.0 {
        for (g, t) in grads.iter_mut().zip(&s.theta) {
            *g = g.axpy(s.base_cfg.weight_decay, t)?;
        }
    }
    let pre_states = s.base_states.clone();
    for i in 0..s.theta.len() {
        let (u, next) = update_vector(&s.base_states[i], &grads[i], &s.base_cfg)?;
        s.theta[i] = s.theta[i].sub(&u)?;
        s.base_states[i] = next;
    }
    s.last_base = Some(LastBaseStep { pre_states, grads });
    p.after_base_step(&s.theta);
    Ok(())
}

/// One base optimizer step at the current lambda.
pub fn base_step<P: Problem>(p: &P, s: &mut BilevelState, batch: &P::BaseBatch) -> Result<f64> {
    let (loss, grads) = base_gradient(p, s, batch)?;
    apply_base_update(p, s, grads)?;
    Ok(loss)
}

/// Compute and cache the base gradient at the current theta without taking
/// a step. Gives `perturbation_vector` a fresh (state, gradient) pairing
/// when no base step has run yet.
pub fn record_base_gradient<P: Problem>(
    p: &P,
    s: &mut BilevelState,
    batch: &P::BaseBatch,
) -> Result<f64> {
    let (loss, grads) = base_grad_at(p, &s.theta, s, batch)?;
    s.last_base = Some(LastBaseStep {
        pre_states: s.base_states.clone(),
        grads,
    });
    Ok(loss)
}

/// Perturbation direction: the adaptation diagonal applied to the direct
/// gradient, or the direct gradient itself when `adapt` is false.
///
/// Requires a cached base gradient ([`base_step`] or
/// [`record_base_gradient`]); the diagonal pairs the pre-update moments
/// with the gradient that produced the current optimizer state.
pub fn perturbation_vector(
    s: &BilevelState,
    g_direct: &[Tensor],
    adapt: bool,
) -> Result<Vec<Tensor>> {
    if !adapt {
        return Ok(g_direct.to_vec());
    }
    let last = s.last_base.as_ref().ok_or_else(|| {
        Error::Unsupported(
            "perturbation_vector: no base gradient recorded; run base_step or \
             record_base_gradient first"
                .into(),
        )
    })?;
    let mut v = Vec::with_capacity(g_direct.len());
    for i in 0..g_direct.len() {
        let diag = adaptation_diag(&last.pre_states[i], &last.grads[i], &s.base_cfg)?;
        v.push(diag.hadamard(&g_direct[i])?);
    }
    Ok(v)
}

/// Raw central-difference mixed derivative with an explicit step:
/// `-[dL_base(theta+eps d)/dlambda - dL_base(theta-eps d)/dlambda] / (2 eps)`.
///
/// On base losses whose lambda-gradient is linear in theta this is exact
/// for any `eps`. Theta is never mutated; perturbed copies are dropped
/// after the two passes.
pub fn central_diff_lambda_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    dir: &[Tensor],
    eps: f64,
    batch: &P::BaseBatch,
) -> Result<Vec<Tensor>> {
    let theta_plus = axpy_all(&s.theta, eps, dir)?;
    let theta_minus = axpy_all(&s.theta, -eps, dir)?;
    let (_, gp) = lambda_grad_at(p, &theta_plus, s, batch)?;
    let (_, gm) = lambda_grad_at(p, &theta_minus, s, batch)?;
    let scale = -1.0 / (2.0 * eps);
    gp.iter()
        .zip(&gm)
        .map(|(a, b)| Ok(a.sub(b)?.scale(scale)))
        .collect()
}

/// Normalized mixed derivative along `dir`: the step size `eps = alpha/|dir|`
/// is recomputed from the current direction on every call, so the applied
/// perturbation `eps*dir` always has norm `alpha` and the result depends
/// only on the direction of `dir`, never its scale.
fn mixed_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    dir: &[Tensor],
    alpha: f64,
    batch: &P::BaseBatch,
) -> Result<MetaGrad> {
    let vnorm = global_norm(dir);
    if vnorm < DEGENERATE_V_THRESHOLD {
        return Err(Error::DegeneratePerturbation(vnorm));
    }
    let eps = alpha / vnorm;
    let theta_plus = axpy_all(&s.theta, eps, dir)?;
    let theta_minus = axpy_all(&s.theta, -eps, dir)?;
    let (_, gp) = lambda_grad_at(p, &theta_plus, s, batch)?;
    let (_, gm) = lambda_grad_at(p, &theta_minus, s, batch)?;
    // Dividing by the realized step 2*alpha (= 2*eps*|dir|) instead of
    // 2*eps keeps the output invariant under dir -> c*dir.
    let scale = -1.0 / (2.0 * alpha);
    let grad = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| Ok(a.sub(b)?.scale(scale)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaGrad {
        grad,
        epsilon: eps,
        v: dir.to_vec(),
    })
}

/// The central-difference meta gradient at perturbation `v`.
///
/// Signals [`Error::DegeneratePerturbation`] below the norm threshold;
/// callers skip the meta update for that step. The returned `epsilon` and
/// `v` reproduce the applied perturbation (`theta -> theta - epsilon*v` is
/// the follow-up base update).
pub fn sama_meta_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    v: &[Tensor],
    alpha: f64,
    batch: &P::BaseBatch,
) -> Result<MetaGrad> {
    mixed_grad(p, s, v, alpha, batch)
}

/// Hessian-vector product of the base loss by central differences of
/// first-order gradients, with step `delta_h / |w|`.
pub fn hvp_fd<P: Problem>(
    p: &P,
    s: &BilevelState,
    w: &[Tensor],
    delta_h: f64,
    batch: &P::BaseBatch,
) -> Result<Vec<Tensor>> {
    let wnorm = global_norm(w);
    if wnorm == 0.0 {
        return Err(Error::InvalidHyperparameter("hvp_fd: zero direction".into()));
    }
    let d = delta_h / wnorm;
    let (_, gp) = base_grad_at(p, &axpy_all(&s.theta, d, w)?, s, batch)?;
    let (_, gm) = base_grad_at(p, &axpy_all(&s.theta, -d, w)?, s, batch)?;
    gp.iter()
        .zip(&gm)
        .map(|(a, b)| Ok(a.sub(b)?.scale(1.0 / (2.0 * d))))
        .collect()
}

fn zero_meta_grad(s: &BilevelState) -> MetaGrad {
    MetaGrad {
        grad: s.lambda.iter().map(|l| Tensor::zeros(l.shape())).collect(),
        epsilon: 0.0,
        v: s.theta.iter().map(|t| Tensor::zeros(t.shape())).collect(),
    }
}

/// Neumann-series baseline: `x = eta * sum_k (I - eta H)^k g_direct`, then
/// the same mixed-derivative machinery as the central-difference method
/// with `v := x`.
pub fn neumann_meta_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    g_direct: &[Tensor],
    terms: usize,
    eta: f64,
    delta_h: f64,
    batch: &P::BaseBatch,
) -> Result<MetaGrad> {
    let g0 = global_norm(g_direct);
    if g0 == 0.0 {
        return Ok(zero_meta_grad(s));
    }
    let mut term: Vec<Tensor> = g_direct.to_vec();
    let mut acc: Vec<Tensor> = g_direct.to_vec();
    for k in 1..terms {
        let h = hvp_fd(p, s, &term, delta_h, batch)?;
        term = axpy_all(&term, -eta, &h)?;
        let tnorm = global_norm(&term);
        if tnorm > 10.0 * g0 {
            return Err(Error::NeumannDivergence { term: k, norm: tnorm });
        }
        acc = axpy_all(&acc, 1.0, &term)?;
    }
    let x: Vec<Tensor> = acc.iter().map(|t| t.scale(eta)).collect();
    match mixed_grad(p, s, &x, 1.0, batch) {
        Err(Error::DegeneratePerturbation(_)) => Ok(zero_meta_grad(s)),
        other => other,
    }
}

/// Conjugate-gradient baseline: solves `(H + damping I) x = g_direct` with
/// finite-difference Hessian-vector products, then assembles the meta
/// gradient as in the Neumann baseline.
#[allow(clippy::too_many_arguments)]
pub fn cg_meta_grad<P: Problem>(
    p: &P,
    s: &BilevelState,
    g_direct: &[Tensor],
    max_iters: usize,
    tol: f64,
    damping: f64,
    delta_h: f64,
    batch: &P::BaseBatch,
) -> Result<MetaGrad> {
    let bnorm = global_norm(g_direct);
    if bnorm == 0.0 {
        return Ok(zero_meta_grad(s));
    }
    let mut x: Vec<Tensor> = g_direct.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut r: Vec<Tensor> = g_direct.to_vec();
    let mut d: Vec<Tensor> = g_direct.to_vec();
    let mut rs = dot_all(&r, &r)?;
    for it in 0..max_iters {
        if rs.sqrt() <= tol * bnorm {
            break;
        }
        let mut hd = hvp_fd(p, s, &d, delta_h, batch)?;
        if damping != 0.0 {
            hd = axpy_all(&hd, damping, &d)?;
        }
        let dhd = dot_all(&d, &hd)?;
        if dhd <= 0.0 {
            return Err(Error::NegativeCurvature(it));
        }
        let a = rs / dhd;
        x = axpy_all(&x, a, &d)?;
        r = axpy_all(&r, -a, &hd)?;
        let rs_next = dot_all(&r, &r)?;
        d = axpy_all(&r, rs_next / rs, &d)?;
        rs = rs_next;
    }
    match mixed_grad(p, s, &x, 1.0, batch) {
        Err(Error::DegeneratePerturbation(_)) => Ok(zero_meta_grad(s)),
        other => other,
    }
}

fn dot_all(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x.dot(y)?;
    }
    Ok(s)
}

/// Training loop configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Base steps per meta step (T >= 1).
    pub unroll: usize,
    pub meta_steps: usize,
    /// Apply the extra `theta <- theta - eps v` update after each meta step
    /// (central-difference methods only).
    pub apply_v_step: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            unroll: 1,
            meta_steps: 100,
            apply_v_step: true,
            seed: 0,
        }
    }
}

/// Per-meta-step trajectory record.
#[derive(Debug, Clone)]
pub struct MetaStepRecord {
    pub step: usize,
    pub base_loss: f64,
    pub meta_loss: f64,
    pub meta_grad_norm: f64,
    /// Wall-clock seconds for the step; the one field outside the
    /// bit-determinism contract.
    pub wall_time_s: f64,
    /// Tensor-byte high-water mark during the step.
    pub peak_bytes: usize,
    /// True when a degenerate perturbation skipped the meta update.
    pub skipped: bool,
}

pub type Trajectory = Vec<MetaStepRecord>;

/// Deterministic batch supply for [`train`].
pub trait BatchSource<P: Problem> {
    fn next_base(&mut self) -> P::BaseBatch;
    fn next_meta(&mut self) -> P::MetaBatch;
}

/// Compute one meta gradient with the given method at the current state.
/// `unroll` is only read by the exact unrolled method.
pub fn meta_grad_by_method<P: Problem>(
    p: &P,
    s: &BilevelState,
    method: &MetaGradMethod,
    g_direct: &[Tensor],
    base_batch: &P::BaseBatch,
    unroll: usize,
) -> Result<MetaGrad> {
    match *method {
        MetaGradMethod::Sama { alpha } => {
            let v = perturbation_vector(s, g_direct, true)?;
            sama_meta_grad(p, s, &v, alpha, base_batch)
        }
        MetaGradMethod::SamaNa { alpha } => {
            let v = perturbation_vector(s, g_direct, false)?;
            sama_meta_grad(p, s, &v, alpha, base_batch)
        }
        MetaGradMethod::Neumann {
            terms,
            eta,
            hvp_step,
        } => neumann_meta_grad(p, s, g_direct, terms, eta, hvp_step, base_batch),
        MetaGradMethod::Cg {
            max_iters,
            tol,
            damping,
            hvp_step,
        } => cg_meta_grad(p, s, g_direct, max_iters, tol, damping, hvp_step, base_batch),
        MetaGradMethod::ExactIft => {
            let grad = p.closed_form_meta_grad(&s.lambda).ok_or_else(|| {
                Error::Unsupported("exact_ift: problem has no closed-form meta gradient".into())
            })??;
            Ok(MetaGrad {
                grad,
                epsilon: 0.0,
                v: Vec::new(),
            })
        }
        MetaGradMethod::UnrolledExact => {
            let grad = p
                .unrolled_meta_grad(&s.lambda, unroll, s.base_cfg.lr)
                .ok_or_else(|| {
                    Error::Unsupported(
                        "unrolled_exact: problem has no exact unrolled derivative".into(),
                    )
                })??;
            Ok(MetaGrad {
                grad,
                epsilon: 0.0,
                v: Vec::new(),
            })
        }
    }
}

/// Alternating train loop: T base steps, one meta gradient, one meta
/// optimizer step, optionally the extra v-step on theta. Degenerate
/// perturbations skip the meta update and are recorded; non-finite losses
/// abort with the step index.
pub fn train<P: Problem, B: BatchSource<P>>(
    p: &P,
    s: &mut BilevelState,
    method: &MetaGradMethod,
    cfg: &TrainConfig,
    data: &mut B,
) -> Result<Trajectory> {
    train_hooked(p, s, method, cfg, data, |_| Ok(()))
}

/// What a [`train_hooked`] observer sees at each meta step: the state
/// after the base steps but before the meta update (lambda is still
/// lambda_t), and the meta gradient (`None` when skipped as degenerate).
pub struct StepView<'a> {
    pub step: usize,
    pub base_loss: f64,
    pub meta_loss: f64,
    pub state: &'a BilevelState,
    pub meta: Option<&'a MetaGrad>,
}

/// [`train`] with an observer invoked after each meta-gradient computation
/// and before the parameter updates.
pub fn train_hooked<P: Problem, B: BatchSource<P>, F>(
    p: &P,
    s: &mut BilevelState,
    method: &MetaGradMethod,
    cfg: &TrainConfig,
    data: &mut B,
    mut hook: F,
) -> Result<Trajectory>
where
    F: FnMut(StepView<'_>) -> Result<()>,
{
    if cfg.unroll < 1 {
        return Err(Error::InvalidHyperparameter("unroll must be >= 1".into()));
    }
    let mut trajectory = Vec::with_capacity(cfg.meta_steps);
    for step in 0..cfg.meta_steps {
        mem::reset_peak();
        let t0 = Instant::now();

        let mut base_loss = f64::NAN;
        let mut last_batch = None;
        for _ in 0..cfg.unroll {
            let batch = data.next_base();
            base_loss = base_step(p, s, &batch).map_err(|e| step_err(e, step))?;
            last_batch = Some(batch);
        }
        // The meta gradient reuses the most recent base batch; both central
        // difference evaluations see the same samples.
        let base_batch = last_batch.expect("unroll >= 1");

        let meta_batch = data.next_meta();
        let (meta_loss, g_direct) =
            direct_grad(p, s, &meta_batch).map_err(|e| step_err(e, step))?;

        let meta = match meta_grad_by_method(p, s, method, &g_direct, &base_batch, cfg.unroll) {
            Ok(m) => Some(m),
            Err(Error::DegeneratePerturbation(_)) => None,
            Err(e) => return Err(step_err(e, step)),
        };
        hook(StepView {
            step,
            base_loss,
            meta_loss,
            state: s,
            meta: meta.as_ref(),
        })?;

        let (grad_norm, skipped) = match &meta {
            Some(m) => {
                for i in 0..s.lambda.len() {
                    let g_eff = if s.meta_cfg.weight_decay > 0.0 {
                        m.grad[i].axpy(s.meta_cfg.weight_decay, &s.lambda[i])?
                    } else {
                        m.grad[i].clone()
                    };
                    let (u, next) = update_vector(&s.meta_states[i], &g_eff, &s.meta_cfg)?;
                    s.lambda[i] = s.lambda[i].sub(&u)?;
                    s.meta_states[i] = next;
                }
                if cfg.apply_v_step && method.applies_v_step() {
                    s.theta = axpy_all(&s.theta, -m.epsilon, &m.v)?;
                }
                (global_norm(&m.grad), false)
            }
            None => (0.0, true),
        };

        trajectory.push(MetaStepRecord {
            step,
            base_loss,
            meta_loss,
            meta_grad_norm: grad_norm,
            wall_time_s: t0.elapsed().as_secs_f64(),
            peak_bytes: mem::peak_bytes(),
            skipped,
        });
    }
    Ok(trajectory)
}

fn step_err(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFiniteLoss(step),
        other => other,
    }
}
