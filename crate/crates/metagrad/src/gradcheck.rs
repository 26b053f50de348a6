//! Seeded finite-difference verification suites.
//!
//! The autodiff suite builds randomized MLPs (widths up to 32, depth up to
//! 3) under every supported loss and compares `backward` against the
//! central-difference oracle, leaf by leaf. The adaptation suite does the
//! same for `adaptation_diag` against finite differences of
//! `update_vector` across all optimizer kinds and both bias-correction
//! settings. Both are library code so the CLI and the acceptance tests run
//! the exact same checks.

use crate::autodiff::{finite_diff_grad, Graph, Var};
use crate::error::Result;
use crate::optim::{adaptation_diag, update_vector, OptimizerConfig, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub case: usize,
    pub description: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy)]
enum LossKind {
    Mse,
    SoftmaxXent,
    SumOfSquares,
    Mean,
}

struct MlpCase {
    weights: Vec<Tensor>, // alternating [in,out] weight and [out] bias
    input: Tensor,
    target: Tensor,
    labels: Vec<usize>,
    activation: Activation,
    loss: LossKind,
}

fn build_case(rng: &mut Rng) -> MlpCase {
    let depth = 1 + rng.below(3);
    let batch = 2 + rng.below(6);
    let activation = match rng.below(3) {
        0 => Activation::Tanh,
        1 => Activation::Sigmoid,
        _ => Activation::Relu,
    };
    let loss = match rng.below(4) {
        0 => LossKind::Mse,
        1 => LossKind::SoftmaxXent,
        2 => LossKind::SumOfSquares,
        _ => LossKind::Mean,
    };
    let mut dims = vec![2 + rng.below(7)];
    for _ in 0..depth {
        dims.push(2 + rng.below(31));
    }
    if matches!(loss, LossKind::SoftmaxXent) {
        *dims.last_mut().unwrap() = 2 + rng.below(4);
    }
    let mut weights = Vec::new();
    for layer in 0..depth {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let s = 1.0 / (fan_in as f64).sqrt();
        weights.push(Tensor::from_fn(&[fan_in, fan_out], |_| s * rng.normal()));
        weights.push(Tensor::from_fn(&[fan_out], |_| 0.1 * rng.normal()));
    }
    let input = Tensor::from_fn(&[batch, dims[0]], |_| rng.normal());
    let out_dim = *dims.last().unwrap();
    let target = Tensor::from_fn(&[batch, out_dim], |_| rng.normal());
    let labels = (0..batch).map(|_| rng.below(out_dim)).collect();
    MlpCase {
        weights,
        input,
        target,
        labels,
        activation,
        loss,
    }
}

fn forward(g: &mut Graph, case: &MlpCase, params: &[Var]) -> Result<Var> {
    let x = g.constant(case.input.clone());
    let mut h = x;
    let layers = params.len() / 2;
    for layer in 0..layers {
        h = g.matmul(h, params[2 * layer])?;
        h = g.add_bias(h, params[2 * layer + 1])?;
        // No activation after the final layer.
        if layer + 1 < layers {
            h = match case.activation {
                Activation::Tanh => g.tanh(h),
                Activation::Sigmoid => g.sigmoid(h),
                Activation::Relu => g.relu(h),
            };
        }
    }
    match case.loss {
        LossKind::Mse => {
            let t = g.constant(case.target.clone());
            g.mse(h, t)
        }
        LossKind::SoftmaxXent => {
            let per_sample = g.softmax_xent(h, &case.labels)?;
            Ok(g.mean(per_sample))
        }
        LossKind::SumOfSquares => {
            let sq = g.mul(h, h)?;
            Ok(g.sum(sq))
        }
        LossKind::Mean => Ok(g.mean(h)),
    }
}

/// A relu kink within the finite-difference step makes the oracle itself
/// invalid, so such cases are regenerated, not skipped.
fn has_kink_near_zero(case: &MlpCase, delta: f64) -> bool {
    if !matches!(case.activation, Activation::Relu) {
        return false;
    }
    let mut g = Graph::new();
    let params: Vec<Var> = case.weights.iter().map(|w| g.constant(w.clone())).collect();
    let x = g.constant(case.input.clone());
    let mut h = x;
    let layers = params.len() / 2;
    let margin = 200.0 * delta;
    for layer in 0..layers {
        h = g.matmul(h, params[2 * layer]).expect("shapes fixed");
        h = g.add_bias(h, params[2 * layer + 1]).expect("shapes fixed");
        if layer + 1 < layers {
            if g.value(h).data().iter().any(|z| z.abs() < margin) {
                return true;
            }
            h = g.relu(h);
        }
    }
    false
}

/// Randomized-MLP gradient check: `backward` vs central differences at
/// `delta = 1e-5`, relative error per leaf entry.
pub fn autodiff_suite(cases: usize, tolerance: f64, seed: u64) -> Result<SuiteReport> {
    let delta = 1e-5;
    let mut rng = Rng::substream(seed, 5);
    let mut results = Vec::with_capacity(cases);
    for case_idx in 0..cases {
        let mut case = build_case(&mut rng);
        let mut retries = 0;
        while has_kink_near_zero(&case, delta) && retries < 20 {
            case = build_case(&mut rng);
            retries += 1;
        }

        let mut g = Graph::new();
        let params: Vec<Var> = case.weights.iter().map(|w| g.leaf(w.clone())).collect();
        let root = forward(&mut g, &case, &params)?;
        let (mut tape, _) = g.finish(root);
        let mut grads = tape.backward(&params)?;

        let mut max_rel = 0.0_f64;
        for (pi, w0) in case.weights.iter().enumerate() {
            let analytic = grads.take(params[pi]).expect("leaf requested");
            let fd = finite_diff_grad(
                |probe| {
                    let mut g = Graph::new();
                    let params: Vec<Var> = case
                        .weights
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            g.constant(if i == pi { probe.clone() } else { w.clone() })
                        })
                        .collect();
                    let root = forward(&mut g, &case, &params)?;
                    g.value(root).scalar_value()
                },
                w0,
                delta,
            )?;
            for i in 0..w0.numel() {
                let (a, b) = (analytic.data()[i], fd.data()[i]);
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        results.push(CaseResult {
            case: case_idx,
            description: format!(
                "mlp depth={} act={:?} loss={:?}",
                case.weights.len() / 2,
                case.activation,
                case.loss
            ),
            max_rel_error: max_rel,
            passed: max_rel < tolerance,
        });
    }
    Ok(SuiteReport {
        name: "autodiff-gradcheck",
        tolerance,
        cases: results,
    })
}

/// Adaptation-diagonal check: `adaptation_diag` vs central differences of
/// `update_vector` with step `1e-6 * (1 + |g|)`, across optimizer kinds
/// and both Adam bias-correction settings.
pub fn adaptation_suite(cases: usize, tolerance: f64, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::substream(seed, 6);
    let mut results = Vec::with_capacity(cases);
    for case_idx in 0..cases {
        let lr = 0.01 + 0.3 * rng.uniform();
        let (cfg, label) = match case_idx % 4 {
            0 => (OptimizerConfig::sgd(lr), "sgd"),
            1 => (
                OptimizerConfig::sgd_momentum(lr, 0.99 * rng.uniform()),
                "sgd-momentum",
            ),
            2 => (OptimizerConfig::adam(lr), "adam+bc"),
            _ => (OptimizerConfig::adam_uncorrected(lr), "adam"),
        };
        let n = 1 + rng.below(8);
        let state = OptimizerState {
            m: Tensor::from_fn(&[n], |_| rng.normal()),
            v: Tensor::from_fn(&[n], |_| rng.normal().abs() + 1e-3),
            t: rng.below(100) as u64,
        };
        let g = Tensor::from_fn(&[n], |_| rng.normal());

        let analytic = adaptation_diag(&state, &g, &cfg)?;
        let mut max_rel = 0.0_f64;
        for i in 0..n {
            let delta = 1e-6 * (1.0 + g.data()[i].abs());
            let mut probe = g.data().to_vec();
            probe[i] += delta;
            let up = update_vector(&state, &Tensor::vector(probe.clone()), &cfg)?.0;
            probe[i] -= 2.0 * delta;
            let um = update_vector(&state, &Tensor::vector(probe), &cfg)?.0;
            let fd = (up.data()[i] - um.data()[i]) / (2.0 * delta);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-9);
            max_rel = max_rel.max(rel);
        }
        results.push(CaseResult {
            case: case_idx,
            description: format!("{label} n={n}"),
            max_rel_error: max_rel,
            passed: max_rel < tolerance,
        });
    }
    Ok(SuiteReport {
        name: "adaptation-diag",
        tolerance,
        cases: results,
    })
}
