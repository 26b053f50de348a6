//! Acceptance suite: one test per criterion, run serially (shared lock) so
//! the tensor-byte gauge and wall-clock numbers are not polluted across
//! criteria. Each test prints a `PASS criterion-N ...` line; run with
//! `cargo test --release --test acceptance -- --nocapture` to see them.
//! Wall-clock limits are enforced in release builds and reported otherwise.

use std::sync::Mutex;
use std::time::Instant;

use metagrad::bilevel::{
    self, BilevelState, MetaGradMethod, TrainConfig,
};
use metagrad::cli;
use metagrad::gradcheck;
use metagrad::optim::OptimizerConfig;
use metagrad::parallel::{self, SyncMode, SyncPlan};
use metagrad::regress;
use metagrad::rng::Rng;
use metagrad::tasks::{self, ReweightBatches, ReweightProblem, WeightMode};
use metagrad::tensor::{global_norm, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion<F: FnOnce()>(name: &str, limit_s: f64, body: F) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    body();
    let elapsed = t0.elapsed().as_secs_f64();
    println!("PASS {name} ({elapsed:.2}s, limit {limit_s}s)");
    if !cfg!(debug_assertions) {
        assert!(
            elapsed < limit_s,
            "{name} took {elapsed:.2}s, over the {limit_s}s limit"
        );
    }
}

#[test]
fn criterion_1_gradcheck() {
    criterion("1-gradcheck", 10.0, || {
        let report = gradcheck::autodiff_suite(100, 1e-5, 12345).expect("suite runs");
        assert!(report.cases.len() >= 100);
        let failures: Vec<_> = report.failures().collect();
        assert!(
            failures.is_empty(),
            "{} of {} cases over 1e-5 (worst {:.3e})",
            failures.len(),
            report.cases.len(),
            report.max_error()
        );
    });
}

#[test]
fn criterion_2_adaptation_matrix() {
    criterion("2-adaptation-matrix", 5.0, || {
        // Covers sgd, sgd-momentum, and adam with both bias settings.
        let report = gradcheck::adaptation_suite(1000, 1e-5, 12345).expect("suite runs");
        assert_eq!(report.cases.len(), 1000);
        let failures: Vec<_> = report.failures().collect();
        assert!(
            failures.is_empty(),
            "{} of 1000 cases over 1e-5 (worst {:.3e})",
            failures.len(),
            report.max_error()
        );
    });
}

#[test]
fn criterion_3_closed_form_oracles() {
    criterion("3-closed-form-oracles", 30.0, || {
        // Hand-computed scalar instance: lambda* = -9, w*(lambda*) = 1.
        let scalar = regress::BiasedRegressionInstance {
            x: Tensor::matrix(&[vec![1.0]]).unwrap(),
            y: Tensor::vector(vec![2.0]),
            x_meta: Tensor::matrix(&[vec![1.0]]).unwrap(),
            y_meta: Tensor::vector(vec![1.0]),
            beta: 0.1,
        };
        let ls = scalar.lambda_star().unwrap();
        assert!((ls.data()[0] + 9.0).abs() < 1e-10, "lambda* = {:?}", ls);
        let w = scalar.w_star(&ls).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-10, "w*(lambda*) = {:?}", w);
        let g = scalar.meta_grad_closed(&ls).unwrap();
        assert!(g.norm_l2() < 1e-10, "meta grad at optimum: {:?}", g);

        // Baseline fidelity on 20 random instances at the spec scale.
        for seed in 0..20 {
            let inst = regress::generate(100, 20, 50, 0.1, seed).unwrap();
            let mut rng = Rng::substream(seed, 40);
            let lambda = Tensor::from_fn(&[20], |_| 3.0 * rng.normal());
            let closed = inst.meta_grad_closed(&lambda).unwrap();

            // Baselines evaluated at the base optimum for this lambda.
            let theta = inst.w_star(&lambda).unwrap();
            let state = BilevelState::new(
                vec![theta.clone()],
                vec![lambda.clone()],
                OptimizerConfig::sgd(1e-3),
                OptimizerConfig::sgd(1e-3),
            )
            .unwrap();
            let (_, g_dir) = bilevel::direct_grad(&inst, &state, &()).unwrap();
            let eta = 1.0 / inst.hessian_spectral_bound();
            let hvp_step = 1e-4 * (1.0 + theta.norm_l2());

            let neumann =
                bilevel::neumann_meta_grad(&inst, &state, &g_dir, 1000, eta, hvp_step, &())
                    .unwrap();
            let cos_n = regress::cosine_similarity(&neumann.grad[0], &closed).unwrap();
            assert!(cos_n >= 0.999, "seed {seed}: neumann cosine {cos_n}");

            let cg = bilevel::cg_meta_grad(&inst, &state, &g_dir, 200, 1e-10, 0.0, hvp_step, &())
                .unwrap();
            let cos_c = regress::cosine_similarity(&cg.grad[0], &closed).unwrap();
            assert!(cos_c >= 0.999, "seed {seed}: cg cosine {cos_c}");
        }
    });
}

#[test]
fn criterion_4_sama_on_biased_regression() {
    criterion("4-sama-biased-regression", 60.0, || {
        // Protocol: 100 meta updates on the generated instance, default
        // engine configuration, seed 0.
        let cfg = cli::RegressConfig {
            methods: vec!["sama".into()],
            ..Default::default()
        };
        assert_eq!(cfg.meta_steps, 100);
        assert_eq!(cfg.beta, 0.1);
        let outcome = cli::run_regress(&cfg).unwrap();
        assert_eq!(outcome.rows.len(), 100);

        let cosines: Vec<f64> = outcome
            .rows
            .iter()
            .map(|r| r.cosine_to_closed_form)
            .collect();
        assert!(
            cosines.iter().all(|&c| c > 0.0),
            "min cosine {:?}",
            cosines.iter().cloned().fold(f64::INFINITY, f64::min)
        );
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        assert!(mean >= 0.5, "mean cosine {mean}");

        let final_dist = outcome.final_lambda_dist["sama"];
        assert!(
            final_dist <= 0.2 * outcome.initial_lambda_dist,
            "final |lambda-lambda*| {final_dist} vs initial {}",
            outcome.initial_lambda_dist
        );
    });
}

#[test]
fn criterion_5_exactness_and_invariance() {
    criterion("5-exactness-invariance", 5.0, || {
        let inst = regress::generate(100, 20, 50, 0.1, 3).unwrap();
        let mut rng = Rng::substream(3, 41);
        let state = BilevelState::new(
            vec![Tensor::from_fn(&[20], |_| rng.normal())],
            vec![Tensor::from_fn(&[20], |_| rng.normal())],
            OptimizerConfig::sgd(1e-3),
            OptimizerConfig::sgd(1e-3),
        )
        .unwrap();
        let v = vec![Tensor::from_fn(&[20], |_| rng.normal())];

        // Central difference equals 2*beta*v for any eps (lambda-gradient
        // is linear in theta).
        for eps in [1e-6, 1e-2, 1.0, 25.0] {
            let cd = bilevel::central_diff_lambda_grad(&inst, &state, &v, eps, &()).unwrap();
            for i in 0..20 {
                let want = 2.0 * inst.beta * v[0].data()[i];
                let got = cd[0].data()[i];
                assert!(
                    (got - want).abs() <= 1e-10 * want.abs().max(1.0),
                    "eps {eps} entry {i}: {got} vs {want}"
                );
            }
        }

        // Scale invariance of the meta-gradient operation.
        let base = bilevel::sama_meta_grad(&inst, &state, &v, 1.0, &()).unwrap();
        for c in [1e-3, 0.5, 2.0, 737.0] {
            let scaled: Vec<Tensor> = v.iter().map(|t| t.scale(c)).collect();
            let m = bilevel::sama_meta_grad(&inst, &state, &scaled, 1.0, &()).unwrap();
            for i in 0..20 {
                let (a, b) = (base.grad[0].data()[i], m.grad[0].data()[i]);
                assert!(
                    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()),
                    "c={c} entry {i}: {a} vs {b}"
                );
            }
        }

        // Constant SGD adaptation makes both variants coincide.
        let mut state = state;
        bilevel::base_step(&inst, &mut state, &()).unwrap();
        let (_, g_dir) = bilevel::direct_grad(&inst, &state, &()).unwrap();
        let va = bilevel::perturbation_vector(&state, &g_dir, true).unwrap();
        let vb = bilevel::perturbation_vector(&state, &g_dir, false).unwrap();
        let ma = bilevel::sama_meta_grad(&inst, &state, &va, 1.0, &()).unwrap();
        let mb = bilevel::sama_meta_grad(&inst, &state, &vb, 1.0, &()).unwrap();
        for i in 0..20 {
            let (a, b) = (ma.grad[0].data()[i], mb.grad[0].data()[i]);
            assert!(
                (a - b).abs() <= 1e-12 * a.abs().max(b.abs()),
                "entry {i}: sama {a} vs sama_na {b}"
            );
        }
    });
}

fn reweight_fixture(seed: u64) -> (ReweightProblem, BilevelState) {
    let ds = tasks::gen_noisy(400, 8, 4, 0.4, 40, seed).unwrap();
    let p = ReweightProblem::new(ds, WeightMode::Learned, false);
    let s = tasks::init_state(
        &p,
        32,
        8,
        OptimizerConfig::adam(3e-3),
        OptimizerConfig::adam(1e-2),
        seed,
    )
    .unwrap();
    (p, s)
}

fn full_batch(p: &ReweightProblem, count: usize) -> tasks::Batch {
    let d = p.dataset.dim();
    tasks::Batch {
        x: Tensor::from_vec(
            vec![count, d],
            p.dataset.features.data()[..count * d].to_vec(),
        )
        .unwrap(),
        labels: p.dataset.observed[..count].to_vec(),
        ids: (0..count).collect(),
    }
}

fn meta_batch(p: &ReweightProblem) -> tasks::Batch {
    let n = p.dataset.len();
    tasks::Batch {
        x: p.dataset.meta_features.clone(),
        labels: p.dataset.meta_labels.clone(),
        ids: (n..n + p.dataset.meta_len()).collect(),
    }
}

#[test]
fn criterion_6_distributed_equivalence() {
    criterion("6-distributed-equivalence", 30.0, || {
        use metagrad::parallel::Shardable;

        let (p, mut s) = reweight_fixture(21);
        let batch = full_batch(&p, 128);
        let mbatch = meta_batch(&p);
        bilevel::base_step(&p, &mut s, &batch).unwrap();

        // Single-process reference.
        let (_, g_dir) = bilevel::direct_grad(&p, &s, &mbatch).unwrap();
        let v = bilevel::perturbation_vector(&s, &g_dir, true).unwrap();
        let reference = bilevel::sama_meta_grad(&p, &s, &v, 1.0, &batch).unwrap();
        let ref_norm = global_norm(&reference.grad);

        // Exact mode matches within 1e-10 for K in {2, 4}.
        for k in [2usize, 4] {
            let mut workers = parallel::replicate(&p, &s, k);
            let out = parallel::distributed_meta_step(
                &mut workers,
                &SyncPlan::new(k, SyncMode::Exact),
                &MetaGradMethod::sama(),
                &batch.split(k).unwrap(),
                &mbatch.split(k).unwrap(),
                0,
            )
            .unwrap();
            assert_eq!(out.report.sync_count, 2, "exact mode syncs");
            let mut diff = 0.0_f64;
            for (a, b) in out.grad.iter().zip(&reference.grad) {
                diff = diff.max(a.sub(b).unwrap().norm_inf());
            }
            assert!(
                diff <= 1e-10 * ref_norm.max(1.0),
                "K={k}: diff {diff}, ref norm {ref_norm}"
            );
        }

        // Sync counts from the event log: 1 for deferred, 2 for exact.
        let k = 2;
        let mut workers = parallel::replicate(&p, &s, k);
        let deferred = parallel::distributed_meta_step(
            &mut workers,
            &SyncPlan::new(k, SyncMode::Deferred),
            &MetaGradMethod::sama(),
            &batch.split(k).unwrap(),
            &mbatch.split(k).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(deferred.report.sync_count, 1, "deferred mode syncs");
        assert!(deferred.report.bucket_count > 0);

        // Identical batches on every worker: deferred == exact, bitwise.
        let base_same: Vec<_> = (0..k).map(|_| batch.clone()).collect();
        let meta_same: Vec<_> = (0..k).map(|_| mbatch.clone()).collect();
        let mut workers = parallel::replicate(&p, &s, k);
        let d = parallel::distributed_meta_step(
            &mut workers,
            &SyncPlan::new(k, SyncMode::Deferred),
            &MetaGradMethod::sama(),
            &base_same,
            &meta_same,
            0,
        )
        .unwrap();
        let mut workers = parallel::replicate(&p, &s, k);
        let e = parallel::distributed_meta_step(
            &mut workers,
            &SyncPlan::new(k, SyncMode::Exact),
            &MetaGradMethod::sama(),
            &base_same,
            &meta_same,
            0,
        )
        .unwrap();
        for (a, b) in d.grad.iter().zip(&e.grad) {
            assert!(
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "deferred and exact disagree on identical batches"
            );
        }
    });
}

#[test]
fn criterion_7_memory_flatness() {
    criterion("7-memory-flatness", 60.0, || {
        let mut peaks = Vec::new();
        for unroll in [1usize, 10, 100] {
            let ds = tasks::gen_noisy(2000, 10, 4, 0.4, 40, 7).unwrap();
            let p = ReweightProblem::new(ds, WeightMode::Learned, true);
            let mut s = tasks::init_state(
                &p,
                64,
                16,
                OptimizerConfig::adam(3e-3),
                OptimizerConfig::adam(1e-2),
                7,
            )
            .unwrap();
            let mut src = ReweightBatches::new(&p.dataset, 64, 7);
            let cfg = TrainConfig {
                unroll,
                meta_steps: 5,
                apply_v_step: true,
                seed: 7,
            };
            let traj = bilevel::train(&p, &mut s, &MetaGradMethod::sama(), &cfg, &mut src).unwrap();
            let peak = traj.iter().map(|r| r.peak_bytes).max().unwrap();
            peaks.push(peak);
        }
        let max = *peaks.iter().max().unwrap() as f64;
        let min = *peaks.iter().min().unwrap() as f64;
        assert!(
            max / min <= 1.1,
            "peak bytes across T in {{1,10,100}}: {peaks:?} (ratio {:.3})",
            max / min
        );
    });
}

#[test]
fn criterion_8_throughput_ordering() {
    criterion("8-throughput-ordering", 120.0, || {
        let cfg = cli::BenchConfig {
            methods: ["sama", "sama_na", "neumann", "cg"].map(String::from).to_vec(),
            unrolls: vec![10],
            workers: vec![],
            meta_steps: 30,
            warmup: 3,
            neumann_terms: 5,
            cg_iters: 5,
            ..Default::default()
        };
        let outcome = cli::run_bench(&cfg).unwrap();
        let tput = |m: &str| -> f64 {
            outcome
                .rows
                .iter()
                .find(|r| r.method == m && r.unroll == 10)
                .map(|r| r.throughput)
                .expect("bench row")
        };
        let (sama, na, neumann, cg) = (tput("sama"), tput("sama_na"), tput("neumann"), tput("cg"));
        assert!(
            sama >= 1.2 * neumann,
            "sama {sama:.0} vs neumann {neumann:.0} samples/s"
        );
        assert!(sama >= 1.2 * cg, "sama {sama:.0} vs cg {cg:.0} samples/s");
        assert!(
            (na - sama).abs() <= 0.10 * sama,
            "sama_na {na:.0} vs sama {sama:.0} samples/s ({}% apart)",
            (100.0 * (na - sama).abs() / sama).round()
        );
    });
}

#[test]
fn criterion_9_reweighting_efficacy() {
    criterion("9-reweighting-efficacy", 300.0, || {
        let cfg = cli::ReweightConfig {
            num_seeds: 5,
            methods: vec!["baseline".into(), "sama".into()],
            eval_every: 100,
            ..Default::default()
        };
        assert_eq!(
            (cfg.n, cfg.d, cfg.classes, cfg.noise, cfg.meta_split),
            (2000, 10, 4, 0.4, 40)
        );
        let outcome = cli::run_reweight(&cfg).unwrap();
        let baseline = outcome.summary.mean_accuracy["baseline"];
        let sama = outcome.summary.mean_accuracy["sama"];
        assert!(
            sama >= baseline + 0.03,
            "sama {sama:.4} vs baseline {baseline:.4} over seeds {:?}",
            outcome.summary.seeds
        );
        let auc = outcome.summary.mean_weight_auc["sama"];
        assert!(auc >= 0.7, "weight separation auc {auc:.4}");
    });
}
