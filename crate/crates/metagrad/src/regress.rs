//! Biased-regression testbed with closed-form ground truth.
//!
//! The base problem is ridge regression pulled toward the meta parameter,
//! `|Xw - y|^2 + beta |w - lambda|^2`, and the meta problem fits a held-out
//! design, `|X'w*(lambda) - y'|^2`. Everything of interest has a closed
//! form: the base solution `w*`, the meta gradient `g_lambda`, and the
//! optimal meta parameter `lambda*`. These are the oracles every
//! approximate meta-gradient method is scored against.
//!
//! Convention note: the closed forms below omit the factor 2 that
//! differentiating `|.|^2` produces. Engine-computed gradients of the
//! written objective therefore carry an extra factor 2 relative to
//! `meta_grad_closed`; the factor cancels in cosine similarity and only
//! rescales learning rates.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::autodiff::{Graph, Var};
use crate::bilevel::Problem;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A biased-regression instance: base design/targets, meta design/targets,
/// and the coupling strength beta.
#[derive(Debug, Clone)]
pub struct BiasedRegressionInstance {
    pub x: Tensor,      // [n, d]
    pub y: Tensor,      // [n]
    pub x_meta: Tensor, // [n', d]
    pub y_meta: Tensor, // [n']
    pub beta: f64,
}

/// Standard-normal designs with noisy linear targets (sigma = 0.1), all
/// drawn from seeded substreams so equal seeds give identical instances.
pub fn generate(
    n: usize,
    d: usize,
    n_meta: usize,
    beta: f64,
    seed: u64,
) -> Result<BiasedRegressionInstance> {
    if n < 1 || d < 1 || n_meta < 1 {
        return Err(Error::InvalidHyperparameter(
            "generate: n, d, n_meta must be >= 1".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "generate: beta {beta} must be positive"
        )));
    }
    let mut rng = Rng::substream(seed, 0);
    let x = Tensor::from_fn(&[n, d], |_| rng.normal());
    let x_meta = Tensor::from_fn(&[n_meta, d], |_| rng.normal());
    let w_true = Tensor::from_fn(&[d], |_| rng.normal());
    let w_true_meta = Tensor::from_fn(&[d], |_| rng.normal());
    let mut y = x.matmul(&w_true)?;
    y = Tensor::from_fn(&[n], |i| y.data()[i] + 0.1 * rng.normal());
    let mut y_meta = x_meta.matmul(&w_true_meta)?;
    y_meta = Tensor::from_fn(&[n_meta], |i| y_meta.data()[i] + 0.1 * rng.normal());
    Ok(BiasedRegressionInstance {
        x,
        y,
        x_meta,
        y_meta,
        beta,
    })
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.cols(), t.data())
}

fn to_dvector(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

fn from_dvector(v: &DVector<f64>) -> Tensor {
    Tensor::vector(v.as_slice().to_vec())
}

impl BiasedRegressionInstance {
    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// X'X + beta I, positive definite for beta > 0.
    pub fn base_jacobian(&self) -> DMatrix<f64> {
        let x = to_dmatrix(&self.x);
        let d = self.dim();
        x.transpose() * &x + DMatrix::identity(d, d) * self.beta
    }

    fn base_jacobian_chol(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.base_jacobian()).ok_or(Error::RankDeficient)
    }

    /// Closed-form base solution `w* = (X'X + beta I)^-1 (X'y + beta lambda)`.
    pub fn w_star(&self, lambda: &Tensor) -> Result<Tensor> {
        if lambda.numel() != self.dim() {
            return Err(Error::shape_mismatch(
                "w_star",
                &[self.dim()],
                lambda.shape(),
            ));
        }
        let chol = self.base_jacobian_chol()?;
        let rhs = to_dmatrix(&self.x).transpose() * to_dvector(&self.y)
            + to_dvector(lambda) * self.beta;
        Ok(from_dvector(&chol.solve(&rhs)))
    }

    /// Closed-form meta gradient
    /// `g = beta (X'X + beta I)^-1 (Xm' Xm w* - Xm' ym)`.
    pub fn meta_grad_closed(&self, lambda: &Tensor) -> Result<Tensor> {
        let w = self.w_star(lambda)?;
        let xm = to_dmatrix(&self.x_meta);
        let resid = &xm * to_dvector(&w) - to_dvector(&self.y_meta);
        let rhs = xm.transpose() * resid;
        let chol = self.base_jacobian_chol()?;
        Ok(from_dvector(&(chol.solve(&rhs) * self.beta)))
    }

    /// Closed-form optimal meta parameter `lambda* = (A'A)^-1 A'b` with
    /// `A = beta Xm (X'X + beta I)^-1` and `b = ym - Xm (X'X+beta I)^-1 X'y`.
    /// Needs n_meta >= d for A'A to be invertible.
    pub fn lambda_star(&self) -> Result<Tensor> {
        let chol = self.base_jacobian_chol()?;
        let xm = to_dmatrix(&self.x_meta);
        // A' = beta * (X'X+bI)^-1 Xm'   (the base Jacobian is symmetric).
        let a_t = chol.solve(&xm.transpose()) * self.beta;
        let a = a_t.transpose();
        let ridge_fit = chol.solve(&(to_dmatrix(&self.x).transpose() * to_dvector(&self.y)));
        let b = to_dvector(&self.y_meta) - &xm * ridge_fit;
        let normal = &a_t * &a;
        let chol_normal = Cholesky::new(normal).ok_or(Error::RankDeficient)?;
        Ok(from_dvector(&chol_normal.solve(&(a_t * b))))
    }

    /// Largest eigenvalue of the base Hessian `2(X'X + beta I)` by power
    /// iteration (deterministic start), for picking stable base step sizes.
    pub fn hessian_spectral_bound(&self) -> f64 {
        let m = self.base_jacobian();
        let d = m.nrows();
        let mut v = DVector::from_element(d, 1.0 / (d as f64).sqrt());
        let mut lam = 0.0;
        for _ in 0..60 {
            let w = &m * &v;
            lam = w.norm();
            if lam == 0.0 {
                break;
            }
            v = w / lam;
        }
        2.0 * lam
    }
}

/// Exact derivative of the meta objective through `steps` unrolled gradient
/// descent updates on the written base objective, from `w_0 = 0`.
///
/// Propagates `J_{t+1} = (I - gamma H) J_t + 2 gamma beta I` with
/// `H = 2 X'X + 2 beta I` alongside `w_t`, then applies the transported
/// Jacobian to the closed-form-convention meta-residual gradient
/// `Xm'(Xm w_T - ym)` so the infinite-step limit matches
/// [`BiasedRegressionInstance::meta_grad_closed`].
pub fn unrolled_exact_meta_grad(
    inst: &BiasedRegressionInstance,
    lambda: &Tensor,
    steps: usize,
    gamma: f64,
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::InvalidHyperparameter(
            "unrolled_exact_meta_grad: steps must be >= 1".into(),
        ));
    }
    let d = inst.dim();
    let x = to_dmatrix(&inst.x);
    let xty = x.transpose() * to_dvector(&inst.y);
    let h = (x.transpose() * &x + DMatrix::identity(d, d) * inst.beta) * 2.0;
    let lam = to_dvector(lambda);

    let mut w = DVector::zeros(d);
    let mut jac = DMatrix::zeros(d, d);
    let feed = DMatrix::identity(d, d) * (2.0 * gamma * inst.beta);
    for _ in 0..steps {
        // grad = H w - 2 X'y - 2 beta lambda
        let grad = &h * &w - &xty * 2.0 - &lam * (2.0 * inst.beta);
        jac = &jac - &h * &jac * gamma + &feed;
        w -= grad * gamma;
    }
    let xm = to_dmatrix(&inst.x_meta);
    let meta_resid_grad = xm.transpose() * (&xm * &w - to_dvector(&inst.y_meta));
    Ok(from_dvector(&(jac.transpose() * meta_resid_grad)))
}

/// Cosine similarity and L2 distance to the optimum. Cosine is 0 by
/// convention when either vector's norm is below 1e-15.
pub fn metrics(
    g_approx: &Tensor,
    g_closed: &Tensor,
    lambda_t: &Tensor,
    lambda_star: &Tensor,
) -> Result<(f64, f64)> {
    let cosine = cosine_similarity(g_approx, g_closed)?;
    let l2 = lambda_t.sub(lambda_star)?.norm_l2();
    Ok((cosine, l2))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.norm_l2(), b.norm_l2());
    if na < 1e-15 || nb < 1e-15 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

impl Problem for BiasedRegressionInstance {
    type BaseBatch = ();
    type MetaBatch = ();

    /// `|Xw - y|^2 + beta |w - lambda|^2`, full batch.
    fn base_loss(&self, g: &mut Graph, theta: &[Var], lambda: &[Var], _b: &()) -> Result<Var> {
        let x = g.constant(self.x.clone());
        let y = g.constant(self.y.clone());
        let pred = g.matmul(x, theta[0])?;
        let resid = g.sub(pred, y)?;
        let rsq = g.mul(resid, resid)?;
        let fit = g.sum(rsq);
        let diff = g.sub(theta[0], lambda[0])?;
        let dsq = g.mul(diff, diff)?;
        let reg_sum = g.sum(dsq);
        let reg = g.scale(reg_sum, self.beta);
        g.add(fit, reg)
    }

    /// `|Xm w - ym|^2`, full batch.
    fn meta_loss(&self, g: &mut Graph, theta: &[Var], _b: &()) -> Result<Var> {
        let xm = g.constant(self.x_meta.clone());
        let ym = g.constant(self.y_meta.clone());
        let pred = g.matmul(xm, theta[0])?;
        let resid = g.sub(pred, ym)?;
        let rsq = g.mul(resid, resid)?;
        Ok(g.sum(rsq))
    }

    fn closed_form_meta_grad(&self, lambda: &[Tensor]) -> Option<Result<Vec<Tensor>>> {
        Some(self.meta_grad_closed(&lambda[0]).map(|g| vec![g]))
    }

    fn unrolled_meta_grad(
        &self,
        lambda: &[Tensor],
        steps: usize,
        lr: f64,
    ) -> Option<Result<Vec<Tensor>>> {
        Some(unrolled_exact_meta_grad(self, &lambda[0], steps, lr).map(|g| vec![g]))
    }
}
