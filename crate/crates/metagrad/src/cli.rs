//! Experiment harness: strict TOML configs, CSV/JSON emission, and the
//! four runnable experiments (regress | reweight | bench | gradcheck).
//!
//! Configs are flat key = value tables with one section per experiment;
//! unknown keys are rejected. The `METAGRAD_SEED` environment variable and
//! the `--seed` flag override the configured seed (flag wins). All numeric
//! CSV output is serialized with 17 significant digits, so fixed-seed runs
//! of regress/reweight/gradcheck are byte-identical; bench rows contain
//! wall-clock throughput and are deterministic in every other column.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{self, BatchSource, BilevelState, MetaGradMethod, TrainConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::optim::OptimizerConfig;
use crate::parallel::{self, SyncMode, SyncPlan};
use crate::regress;
use crate::rng::Rng;
use crate::tasks::{self, ReweightBatches, ReweightProblem, WeightMode};
use crate::tensor::{global_norm, Tensor};

/// 17-significant-digit float formatting, enough to round-trip f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_method(name: &str) -> Result<MetaGradName> {
    match name {
        "sama" => Ok(MetaGradName::Sama),
        "sama_na" => Ok(MetaGradName::SamaNa),
        "neumann" => Ok(MetaGradName::Neumann),
        "cg" => Ok(MetaGradName::Cg),
        "exact_ift" => Ok(MetaGradName::ExactIft),
        "unrolled_exact" => Ok(MetaGradName::UnrolledExact),
        "baseline" => Ok(MetaGradName::Baseline),
        other => Err(Error::Config(format!(
            "unknown method {other:?}; expected one of sama, sama_na, neumann, cg, \
             exact_ift, unrolled_exact, baseline"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaGradName {
    Sama,
    SamaNa,
    Neumann,
    Cg,
    ExactIft,
    UnrolledExact,
    /// No meta learning at all (reweight/bench only).
    Baseline,
}

impl MetaGradName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetaGradName::Sama => "sama",
            MetaGradName::SamaNa => "sama_na",
            MetaGradName::Neumann => "neumann",
            MetaGradName::Cg => "cg",
            MetaGradName::ExactIft => "exact_ift",
            MetaGradName::UnrolledExact => "unrolled_exact",
            MetaGradName::Baseline => "baseline",
        }
    }
}

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressConfig {
    pub n: usize,
    pub d: usize,
    pub n_meta: usize,
    pub beta: f64,
    pub seed: u64,
    pub meta_steps: usize,
    /// Base steps per meta step.
    pub unroll: usize,
    /// 0 = auto: 1 / (largest base-Hessian eigenvalue).
    pub base_lr: f64,
    pub meta_lr: f64,
    pub alpha: f64,
    pub methods: Vec<String>,
    pub neumann_terms: usize,
    /// 0 = use the base learning rate.
    pub neumann_eta: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub cg_damping: f64,
    /// 0 = auto: 1e-4 * (1 + |theta_0|).
    pub hvp_step: f64,
    pub apply_v_step: bool,
}

impl Default for RegressConfig {
    fn default() -> Self {
        RegressConfig {
            n: 100,
            d: 20,
            n_meta: 50,
            beta: 0.1,
            seed: 0,
            meta_steps: 100,
            unroll: 40,
            base_lr: 0.0,
            meta_lr: 50.0,
            alpha: 1.0,
            methods: ["sama", "sama_na", "neumann", "cg", "exact_ift"]
                .map(String::from)
                .to_vec(),
            neumann_terms: 100,
            neumann_eta: 0.0,
            cg_iters: 100,
            cg_tol: 1e-10,
            cg_damping: 0.0,
            hvp_step: 0.0,
            apply_v_step: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReweightConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Label-flip probability.
    pub noise: f64,
    /// Clean meta-split size.
    pub meta_split: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Seeds seed, seed+1, ... are run and averaged in the summary.
    pub num_seeds: usize,
    pub meta_steps: usize,
    pub unroll: usize,
    pub batch: usize,
    pub hidden: usize,
    pub weight_hidden: usize,
    pub base_lr: f64,
    pub meta_lr: f64,
    pub alpha: f64,
    pub use_uncertainty: bool,
    pub methods: Vec<String>,
    /// Evaluate accuracy/AUC every this many meta steps (1 = every step).
    pub eval_every: usize,
    /// Optional dataset CSV export path.
    pub export_dataset: Option<PathBuf>,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig {
            n: 2000,
            d: 10,
            classes: 4,
            noise: 0.4,
            meta_split: 40,
            test_size: 1000,
            seed: 0,
            num_seeds: 1,
            meta_steps: 500,
            unroll: 5,
            batch: 64,
            hidden: 64,
            weight_hidden: 16,
            base_lr: 3e-3,
            meta_lr: 1e-2,
            // At this parameter scale a unit-norm v-step swamps the base
            // updates; 0.05 keeps it a nudge.
            alpha: 0.05,
            use_uncertainty: true,
            methods: ["baseline", "sama_na", "sama"].map(String::from).to_vec(),
            eval_every: 1,
            export_dataset: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub noise: f64,
    pub meta_split: usize,
    pub seed: u64,
    pub batch: usize,
    pub hidden: usize,
    pub weight_hidden: usize,
    pub base_lr: f64,
    pub meta_lr: f64,
    pub alpha: f64,
    pub use_uncertainty: bool,
    /// Single-process rows: methods x unrolls.
    pub methods: Vec<String>,
    pub unrolls: Vec<usize>,
    /// Distributed rows: sama x modes x workers (>1) at this unroll.
    pub workers: Vec<usize>,
    pub modes: Vec<String>,
    pub distributed_unroll: usize,
    /// Measured meta steps (after warmup).
    pub meta_steps: usize,
    pub warmup: usize,
    pub neumann_terms: usize,
    pub cg_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 2000,
            d: 10,
            classes: 4,
            noise: 0.4,
            meta_split: 40,
            seed: 0,
            batch: 64,
            hidden: 64,
            weight_hidden: 16,
            base_lr: 3e-3,
            meta_lr: 3e-3,
            alpha: 1.0,
            use_uncertainty: false,
            methods: ["sama", "sama_na", "neumann", "cg"].map(String::from).to_vec(),
            unrolls: vec![1, 10, 100],
            workers: vec![2, 4],
            modes: ["deferred", "exact"].map(String::from).to_vec(),
            distributed_unroll: 10,
            meta_steps: 10,
            warmup: 3,
            neumann_terms: 5,
            cg_iters: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub adaptation_cases: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            cases: 100,
            adaptation_cases: 1000,
            tolerance: 1e-5,
            seed: 12345,
        }
    }
}

/// Top-level config file: one optional section per experiment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullConfig {
    pub regress: RegressConfig,
    pub reweight: ReweightConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<FullConfig> {
    match path {
        None => Ok(FullConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Seed precedence: --seed flag, then METAGRAD_SEED, then the config file.
pub fn resolve_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("METAGRAD_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("METAGRAD_SEED={v} is not a u64"))),
        Err(_) => Ok(config_seed),
    }
}

// ---------------------------------------------------------------------
// regress
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RegressRow {
    pub step: usize,
    pub method: &'static str,
    pub cosine_to_closed_form: f64,
    pub lambda_l2_dist: f64,
    pub meta_grad_norm: f64,
}

#[derive(Debug)]
pub struct RegressOutcome {
    pub rows: Vec<RegressRow>,
    /// |lambda_0 - lambda*| before any meta update.
    pub initial_lambda_dist: f64,
    /// Per-method |lambda - lambda*| after the full run.
    pub final_lambda_dist: std::collections::BTreeMap<String, f64>,
}

fn build_method(name: MetaGradName, cfg: &RegressConfig, base_lr: f64, hvp: f64) -> MetaGradMethod {
    match name {
        MetaGradName::Sama => MetaGradMethod::Sama { alpha: cfg.alpha },
        MetaGradName::SamaNa => MetaGradMethod::SamaNa { alpha: cfg.alpha },
        MetaGradName::Neumann => MetaGradMethod::Neumann {
            terms: cfg.neumann_terms,
            eta: if cfg.neumann_eta > 0.0 {
                cfg.neumann_eta
            } else {
                base_lr
            },
            hvp_step: hvp,
        },
        MetaGradName::Cg => MetaGradMethod::Cg {
            max_iters: cfg.cg_iters,
            tol: cfg.cg_tol,
            damping: cfg.cg_damping,
            hvp_step: hvp,
        },
        MetaGradName::ExactIft => MetaGradMethod::ExactIft,
        MetaGradName::UnrolledExact => MetaGradMethod::UnrolledExact,
        MetaGradName::Baseline => unreachable!("baseline is not a meta-gradient method"),
    }
}

/// All requested methods on the same instance and seed, with per-step
/// cosine to the closed-form meta gradient and distance to lambda*.
pub fn run_regress(cfg: &RegressConfig) -> Result<RegressOutcome> {
    let inst = regress::generate(cfg.n, cfg.d, cfg.n_meta, cfg.beta, cfg.seed)?;
    let lambda_star = inst.lambda_star()?;
    let base_lr = if cfg.base_lr > 0.0 {
        cfg.base_lr
    } else {
        1.0 / inst.hessian_spectral_bound()
    };
    let hvp = if cfg.hvp_step > 0.0 { cfg.hvp_step } else { 1e-4 };

    let mut rows = Vec::new();
    let mut final_lambda_dist = std::collections::BTreeMap::new();
    let initial_dist = lambda_star.norm_l2();
    for method_name in &cfg.methods {
        let name = parse_method(method_name)?;
        if name == MetaGradName::Baseline {
            return Err(Error::Config(
                "method baseline is not meaningful for regress".into(),
            ));
        }
        let method = build_method(name, cfg, base_lr, hvp);
        let mut state = BilevelState::new(
            vec![Tensor::zeros(&[cfg.d])],
            vec![Tensor::zeros(&[cfg.d])],
            OptimizerConfig::sgd(base_lr),
            OptimizerConfig::adam(cfg.meta_lr),
        )?;
        let train_cfg = TrainConfig {
            unroll: cfg.unroll,
            meta_steps: cfg.meta_steps,
            apply_v_step: cfg.apply_v_step && method.applies_v_step(),
            seed: cfg.seed,
        };
        let mut src = FullBatchSource;
        let mut method_rows: Vec<RegressRow> = Vec::new();
        bilevel::train_hooked(&inst, &mut state, &method, &train_cfg, &mut src, |view| {
            let s = view.state;
            let closed = inst.meta_grad_closed(&s.lambda[0])?;
            let (grad, norm) = match view.meta {
                Some(m) => (m.grad[0].clone(), global_norm(&m.grad)),
                None => (Tensor::zeros(&[cfg.d]), 0.0),
            };
            let (cosine, l2) = regress::metrics(&grad, &closed, &s.lambda[0], &lambda_star)?;
            method_rows.push(RegressRow {
                step: view.step,
                method: method.name(),
                cosine_to_closed_form: cosine,
                lambda_l2_dist: l2,
                meta_grad_norm: norm,
            });
            Ok(())
        })?;
        let final_dist = state.lambda[0].sub(&lambda_star)?.norm_l2();
        final_lambda_dist.insert(method.name().to_string(), final_dist);
        rows.extend(method_rows);
    }
    Ok(RegressOutcome {
        rows,
        initial_lambda_dist: initial_dist,
        final_lambda_dist,
    })
}

struct FullBatchSource;
impl bilevel::BatchSource<regress::BiasedRegressionInstance> for FullBatchSource {
    fn next_base(&mut self) {}
    fn next_meta(&mut self) {}
}

pub fn regress_csv(rows: &[RegressRow]) -> String {
    let mut out = String::from("# schema: regress v1\n");
    out.push_str("step,method,cosine_to_closed_form,lambda_l2_dist,meta_grad_norm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.method,
            fmt_f64(r.cosine_to_closed_form),
            fmt_f64(r.lambda_l2_dist),
            fmt_f64(r.meta_grad_norm)
        );
    }
    out
}

// ---------------------------------------------------------------------
// reweight
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReweightRow {
    pub seed: u64,
    pub method: &'static str,
    pub step: usize,
    pub train_loss: f64,
    pub meta_loss: f64,
    pub test_accuracy: f64,
    pub weight_auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReweightSummary {
    pub seeds: Vec<u64>,
    /// method -> per-seed final test accuracy, in seed order.
    pub final_accuracy: std::collections::BTreeMap<String, Vec<f64>>,
    pub mean_accuracy: std::collections::BTreeMap<String, f64>,
    pub mean_weight_auc: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct ReweightOutcome {
    pub rows: Vec<ReweightRow>,
    pub summary: ReweightSummary,
}

fn held_out_test(cfg: &ReweightConfig, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = Rng::substream(seed, 7);
    tasks::sample_blobs(cfg.test_size, cfg.d, cfg.classes, &mut rng)
}

/// One training run of one method on one seed, producing per-step rows.
fn run_reweight_method(
    cfg: &ReweightConfig,
    name: MetaGradName,
    seed: u64,
) -> Result<Vec<ReweightRow>> {
    let dataset = tasks::gen_noisy(cfg.n, cfg.d, cfg.classes, cfg.noise, cfg.meta_split, seed)?;
    let (test_x, test_y) = held_out_test(cfg, seed)?;
    let weight_mode = if name == MetaGradName::Baseline {
        WeightMode::ConstantOne
    } else {
        WeightMode::Learned
    };
    let p = ReweightProblem::new(dataset, weight_mode, cfg.use_uncertainty);
    let mut state = tasks::init_state(
        &p,
        cfg.hidden,
        cfg.weight_hidden,
        OptimizerConfig::adam(cfg.base_lr),
        OptimizerConfig::adam(cfg.meta_lr),
        seed,
    )?;
    let mut src = ReweightBatches::new(&p.dataset, cfg.batch, seed);

    let mut rows = Vec::new();
    let mut eval = |step: usize,
                    s: &BilevelState,
                    train_loss: f64,
                    meta_loss: f64,
                    rows: &mut Vec<ReweightRow>|
     -> Result<()> {
        if step % cfg.eval_every != 0 && step + 1 != cfg.meta_steps {
            return Ok(());
        }
        let test_accuracy = p.accuracy(&s.theta, &test_x, &test_y)?;
        let weight_auc = if weight_mode == WeightMode::ConstantOne {
            0.5 // constant weights carry no ranking signal
        } else {
            tasks::weight_separation_auc(&p, &s.theta, &s.lambda)?
        };
        rows.push(ReweightRow {
            seed,
            method: method_label(name),
            step,
            train_loss,
            meta_loss,
            test_accuracy,
            weight_auc,
        });
        Ok(())
    };

    if name == MetaGradName::Baseline {
        // Standard training: same batch cadence, no meta machinery.
        for step in 0..cfg.meta_steps {
            let mut train_loss = f64::NAN;
            for _ in 0..cfg.unroll {
                let b = src.next_base();
                train_loss = bilevel::base_step(&p, &mut state, &b)?;
            }
            let mb = src.next_meta();
            let (meta_loss, _) = bilevel::direct_grad(&p, &state, &mb)?;
            eval(step, &state, train_loss, meta_loss, &mut rows)?;
        }
        return Ok(rows);
    }

    let method = match name {
        MetaGradName::Sama => MetaGradMethod::Sama { alpha: cfg.alpha },
        MetaGradName::SamaNa => MetaGradMethod::SamaNa { alpha: cfg.alpha },
        other => {
            return Err(Error::Config(format!(
                "reweight supports baseline, sama, sama_na; got {}",
                other.as_str()
            )))
        }
    };
    let train_cfg = TrainConfig {
        unroll: cfg.unroll,
        meta_steps: cfg.meta_steps,
        apply_v_step: true,
        seed,
    };
    bilevel::train_hooked(&p, &mut state, &method, &train_cfg, &mut src, |view| {
        eval(view.step, view.state, view.base_loss, view.meta_loss, &mut rows)
    })?;
    Ok(rows)
}

fn method_label(name: MetaGradName) -> &'static str {
    name.as_str()
}

/// Per-seed, per-method training with per-step rows and a final summary.
pub fn run_reweight(cfg: &ReweightConfig) -> Result<ReweightOutcome> {
    let mut rows = Vec::new();
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|k| cfg.seed + k).collect();
    for &seed in &seeds {
        for method_name in &cfg.methods {
            let name = parse_method(method_name)?;
            rows.extend(run_reweight_method(cfg, name, seed)?);
        }
    }
    if let Some(path) = &cfg.export_dataset {
        let dataset =
            tasks::gen_noisy(cfg.n, cfg.d, cfg.classes, cfg.noise, cfg.meta_split, cfg.seed)?;
        tasks::export_csv(&dataset, path)?;
    }

    let mut final_accuracy: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut mean_auc: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for method_name in &cfg.methods {
        let name = parse_method(method_name)?;
        let label = method_label(name).to_string();
        for &seed in &seeds {
            let last = rows
                .iter()
                .filter(|r| r.method == label && r.seed == seed)
                .last()
                .ok_or_else(|| Error::Config(format!("no rows for {label}")))?;
            final_accuracy.entry(label.clone()).or_default().push(last.test_accuracy);
            let e = mean_auc.entry(label.clone()).or_insert((0.0, 0));
            e.0 += last.weight_auc;
            e.1 += 1;
        }
    }
    let mean_accuracy = final_accuracy
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mean_weight_auc = mean_auc
        .into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect();
    Ok(ReweightOutcome {
        rows,
        summary: ReweightSummary {
            seeds,
            final_accuracy,
            mean_accuracy,
            mean_weight_auc,
        },
    })
}

pub fn reweight_csv(rows: &[ReweightRow]) -> String {
    let mut out = String::from("# schema: reweight v1\n");
    out.push_str("seed,method,step,train_loss,meta_loss,test_accuracy,weight_auc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.seed,
            r.method,
            r.step,
            fmt_f64(r.train_loss),
            fmt_f64(r.meta_loss),
            fmt_f64(r.test_accuracy),
            fmt_f64(r.weight_auc)
        );
    }
    out
}

// ---------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: String,
    pub mode: &'static str,
    pub workers: usize,
    pub unroll: usize,
    pub throughput: f64,
    pub peak_bytes: usize,
    pub sync_count: usize,
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub comm_log: Vec<parallel::StepReport>,
}

fn bench_problem(cfg: &BenchConfig, seed: u64) -> Result<(ReweightProblem, BilevelState)> {
    let dataset = tasks::gen_noisy(cfg.n, cfg.d, cfg.classes, cfg.noise, cfg.meta_split, seed)?;
    let p = ReweightProblem::new(dataset, WeightMode::Learned, cfg.use_uncertainty);
    let state = tasks::init_state(
        &p,
        cfg.hidden,
        cfg.weight_hidden,
        OptimizerConfig::adam(cfg.base_lr),
        OptimizerConfig::adam(cfg.meta_lr),
        seed,
    )?;
    Ok((p, state))
}

fn bench_method(cfg: &BenchConfig, name: MetaGradName) -> Result<Option<MetaGradMethod>> {
    Ok(Some(match name {
        MetaGradName::Sama => MetaGradMethod::Sama { alpha: cfg.alpha },
        MetaGradName::SamaNa => MetaGradMethod::SamaNa { alpha: cfg.alpha },
        MetaGradName::Neumann => MetaGradMethod::Neumann {
            terms: cfg.neumann_terms,
            eta: cfg.base_lr,
            hvp_step: 1e-4,
        },
        MetaGradName::Cg => MetaGradMethod::Cg {
            max_iters: cfg.cg_iters,
            tol: 1e-10,
            damping: 1.0, // stochastic minibatch Hessians are often indefinite
            hvp_step: 1e-4,
        },
        MetaGradName::Baseline => return Ok(None),
        other => {
            return Err(Error::Config(format!(
                "bench cannot run {}",
                other.as_str()
            )))
        }
    }))
}

/// Single-process timing: warmup steps, then measured steps.
fn bench_single(
    cfg: &BenchConfig,
    method: &MetaGradMethod,
    unroll: usize,
) -> Result<(f64, usize)> {
    let (p, mut state) = bench_problem(cfg, cfg.seed)?;
    let mut src = ReweightBatches::new(&p.dataset, cfg.batch, cfg.seed);
    let warm_cfg = TrainConfig {
        unroll,
        meta_steps: cfg.warmup,
        apply_v_step: true,
        seed: cfg.seed,
    };
    bilevel::train(&p, &mut state, method, &warm_cfg, &mut src)?;
    let run_cfg = TrainConfig {
        unroll,
        meta_steps: cfg.meta_steps,
        apply_v_step: true,
        seed: cfg.seed,
    };
    let t0 = std::time::Instant::now();
    let traj = bilevel::train(&p, &mut state, method, &run_cfg, &mut src)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let samples = (cfg.meta_steps * unroll * cfg.batch) as f64;
    let peak = traj.iter().map(|r| r.peak_bytes).max().unwrap_or(0);
    Ok((samples / elapsed, peak))
}

fn bench_distributed(
    cfg: &BenchConfig,
    method: &MetaGradMethod,
    workers: usize,
    mode: SyncMode,
) -> Result<(f64, usize, usize, Vec<parallel::StepReport>)> {
    let (p, state) = bench_problem(cfg, cfg.seed)?;
    let mut replicas = parallel::replicate(&p, &state, workers);
    let plan = SyncPlan::new(workers, mode);
    let mut src = ReweightBatches::new(&p.dataset, cfg.batch, cfg.seed);
    let warm_cfg = TrainConfig {
        unroll: cfg.distributed_unroll,
        meta_steps: cfg.warmup,
        apply_v_step: true,
        seed: cfg.seed,
    };
    parallel::distributed_train(&mut replicas, &plan, method, &warm_cfg, &mut src)?;
    let run_cfg = TrainConfig {
        unroll: cfg.distributed_unroll,
        meta_steps: cfg.meta_steps,
        apply_v_step: true,
        seed: cfg.seed,
    };
    let t0 = std::time::Instant::now();
    let (traj, reports) =
        parallel::distributed_train(&mut replicas, &plan, method, &run_cfg, &mut src)?;
    let elapsed = t0.elapsed().as_secs_f64();
    let samples = (cfg.meta_steps * cfg.distributed_unroll * cfg.batch) as f64;
    let peak = traj.iter().map(|r| r.peak_bytes).max().unwrap_or(0);
    let sync = reports.first().map_or(0, |r| r.sync_count);
    Ok((samples / elapsed, peak, sync, reports))
}

/// The method x unroll x workers matrix on the reweighting task.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    let mut rows = Vec::new();
    let mut comm_log = Vec::new();
    for method_name in &cfg.methods {
        let name = parse_method(method_name)?;
        let Some(method) = bench_method(cfg, name)? else {
            continue;
        };
        for &unroll in &cfg.unrolls {
            let (throughput, peak) = bench_single(cfg, &method, unroll)?;
            rows.push(BenchRow {
                method: name.as_str().into(),
                mode: "single",
                workers: 1,
                unroll,
                throughput,
                peak_bytes: peak,
                sync_count: 0,
            });
        }
    }
    for &workers in &cfg.workers {
        if workers < 2 {
            continue;
        }
        for mode_name in &cfg.modes {
            let mode = match mode_name.as_str() {
                "deferred" => SyncMode::Deferred,
                "exact" => SyncMode::Exact,
                other => return Err(Error::Config(format!("unknown sync mode {other:?}"))),
            };
            let method = MetaGradMethod::Sama { alpha: cfg.alpha };
            let (throughput, peak, sync, reports) =
                bench_distributed(cfg, &method, workers, mode)?;
            comm_log.extend(reports);
            rows.push(BenchRow {
                method: "sama".into(),
                mode: mode.name(),
                workers,
                unroll: cfg.distributed_unroll,
                throughput,
                peak_bytes: peak,
                sync_count: sync,
            });
        }
    }
    Ok(BenchOutcome { rows, comm_log })
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("# schema: bench v1\n");
    out.push_str("method,mode,workers,unroll,throughput,peak_bytes,sync_count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.mode,
            r.workers,
            r.unroll,
            fmt_f64(r.throughput),
            r.peak_bytes,
            r.sync_count
        );
    }
    out
}

// ---------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct GradcheckOutcome {
    pub reports: Vec<gradcheck::SuiteReport>,
}

impl GradcheckOutcome {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.all_passed())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let status = if r.all_passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{status} {} ({} cases, tolerance {:.1e}, max rel error {:.3e})",
                r.name,
                r.cases.len(),
                r.tolerance,
                r.max_error()
            );
            for f in r.failures() {
                let _ = writeln!(
                    out,
                    "  case {} [{}]: max rel error {:.3e}",
                    f.case, f.description, f.max_rel_error
                );
            }
        }
        out
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    Ok(GradcheckOutcome {
        reports: vec![
            gradcheck::autodiff_suite(cfg.cases, cfg.tolerance, cfg.seed)?,
            gradcheck::adaptation_suite(cfg.adaptation_cases, cfg.tolerance, cfg.seed)?,
        ],
    })
}
