//! Simulated multi-worker data parallelism with a single-synchronization
//! meta-gradient schedule.
//!
//! Workers are full replicas (theta, lambda, optimizer state) over disjoint
//! data shards. In `deferred` mode each worker runs the first two backward
//! passes locally — its own direct gradient, its own perturbation, its own
//! lambda-difference — and only the final lambda-gradient is all-reduced:
//! one synchronization per meta step. `exact` mode all-reduces the direct
//! gradient first so every worker perturbs along one global direction, then
//! all-reduces the final lambda-gradient: two synchronizations, and the
//! result matches the single-process full-batch meta gradient.
//!
//! Communication is simulated: the all-reduce walks buckets in ascending
//! worker-rank order (bit-deterministic regardless of thread scheduling)
//! and logs one event per bucket. No bytes cross any real wire.

use std::sync::Mutex;

use serde::Serialize;

use crate::bilevel::{
    apply_base_update, base_gradient, direct_grad, perturbation_vector, sama_meta_grad,
    BatchSource, BilevelState, MetaGrad, MetaGradMethod, TrainConfig, Trajectory,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{axpy_all, global_norm, mem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    /// Direct gradient and final lambda-gradient both all-reduced.
    Exact,
    /// Only the final lambda-gradient is all-reduced.
    Deferred,
}

impl SyncMode {
    pub fn name(&self) -> &'static str {
        match self {
            SyncMode::Exact => "exact",
            SyncMode::Deferred => "deferred",
        }
    }
}

/// Worker count, synchronization mode, and bucket size for the simulated
/// all-reduce. Reduction order is fixed ascending rank.
#[derive(Debug, Clone, Copy)]
pub struct SyncPlan {
    pub workers: usize,
    pub mode: SyncMode,
    pub bucket_bytes: usize,
}

impl SyncPlan {
    pub fn new(workers: usize, mode: SyncMode) -> Self {
        SyncPlan {
            workers,
            mode,
            bucket_bytes: 16 * 1024,
        }
    }
}

/// One bucket reduction, for the overlap/communication log.
#[derive(Debug, Clone, Serialize)]
pub struct CommEvent {
    pub phase: &'static str,
    pub bucket: usize,
    pub bytes: usize,
}

/// Per-meta-step communication report (JSON-lines schema).
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: usize,
    pub mode: &'static str,
    /// All-reduce operations inside the meta-gradient computation.
    pub sync_count: usize,
    /// Payload bytes across those all-reduces.
    pub bytes: usize,
    pub bucket_count: usize,
}

impl StepReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// A full replica with its rank. Problems are owned per worker so task
/// state (e.g. moving-average models) replicates alongside parameters.
pub struct Worker<P> {
    pub rank: usize,
    pub problem: P,
    pub state: BilevelState,
}

/// Build K replicas of a problem + state.
pub fn replicate<P: Clone>(problem: &P, state: &BilevelState, workers: usize) -> Vec<Worker<P>> {
    (0..workers)
        .map(|rank| Worker {
            rank,
            problem: problem.clone(),
            state: state.clone(),
        })
        .collect()
}

/// Disjoint, size-balanced (+-1) random shards covering 0..n.
pub fn shard(n: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 || workers > n {
        return Err(Error::InvalidHyperparameter(format!(
            "shard: need 1 <= workers <= {n}, got {workers}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    Rng::substream(seed, 4).shuffle(&mut ids);
    let base = n / workers;
    let extra = n % workers;
    let mut out = Vec::with_capacity(workers);
    let mut cursor = 0;
    for k in 0..workers {
        let take = base + usize::from(k < extra);
        out.push(ids[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(out)
}

/// Batches that can be split across workers.
pub trait Shardable: Sized {
    fn split(&self, workers: usize) -> Result<Vec<Self>>;
    fn size(&self) -> usize;
}

/// Full-batch problems replicate the batch to every worker.
impl Shardable for () {
    fn split(&self, workers: usize) -> Result<Vec<Self>> {
        Ok(vec![(); workers])
    }

    fn size(&self) -> usize {
        1
    }
}

impl Shardable for crate::tasks::Batch {
    fn split(&self, workers: usize) -> Result<Vec<Self>> {
        let n = self.labels.len();
        if workers > n {
            return Err(Error::InvalidHyperparameter(format!(
                "batch of {n} cannot be split across {workers} workers"
            )));
        }
        let d = self.x.cols();
        let base = n / workers;
        let extra = n % workers;
        let mut out = Vec::with_capacity(workers);
        let mut cursor = 0;
        for k in 0..workers {
            let take = base + usize::from(k < extra);
            let rows = cursor..cursor + take;
            let x = Tensor::from_vec(
                vec![take, d],
                self.x.data()[rows.start * d..rows.end * d].to_vec(),
            )?;
            out.push(crate::tasks::Batch {
                x,
                labels: self.labels[rows.clone()].to_vec(),
                ids: self.ids[rows.clone()].to_vec(),
            });
            cursor += take;
        }
        Ok(out)
    }

    fn size(&self) -> usize {
        self.labels.len()
    }
}

fn shard_weights<B: Shardable>(shards: &[B]) -> Vec<f64> {
    let total: usize = shards.iter().map(Shardable::size).sum();
    shards
        .iter()
        .map(|s| s.size() as f64 / total as f64)
        .collect()
}

/// Weighted elementwise mean across workers, reduced bucket-by-bucket in
/// ascending rank order.
///
/// Computed in pivot + weighted-deviation form,
/// `x_0 + sum_k w_k (x_k - x_0)`, which is exact when all inputs are
/// bit-identical (every deviation is exactly zero) — replicas that agree
/// stay agreed through the reduction.
pub fn all_reduce_mean(
    inputs: &[&Tensor],
    weights: &[f64],
    plan: &SyncPlan,
    events: &mut Vec<CommEvent>,
    phase: &'static str,
) -> Result<Tensor> {
    let first = inputs[0];
    for t in inputs.iter().skip(1) {
        if t.shape() != first.shape() {
            return Err(Error::shape_mismatch("all_reduce_mean", first.shape(), t.shape()));
        }
    }
    let n = first.numel();
    let bucket_elems = (plan.bucket_bytes / 8).max(1);
    let mut out = first.data().to_vec();
    let mut start = 0;
    let mut bucket = 0;
    while start < n {
        let end = (start + bucket_elems).min(n);
        for i in start..end {
            let pivot = first.data()[i];
            let mut acc = pivot;
            for (k, t) in inputs.iter().enumerate() {
                acc += weights[k] * (t.data()[i] - pivot);
            }
            out[i] = acc;
        }
        events.push(CommEvent {
            phase,
            bucket,
            bytes: (end - start) * 8,
        });
        bucket += 1;
        start = end;
    }
    Tensor::from_vec(first.shape().to_vec(), out)
}

fn all_reduce_mean_list(
    inputs: &[Vec<Tensor>],
    weights: &[f64],
    plan: &SyncPlan,
    events: &mut Vec<CommEvent>,
    phase: &'static str,
) -> Result<Vec<Tensor>> {
    let parts = inputs[0].len();
    (0..parts)
        .map(|i| {
            let slice: Vec<&Tensor> = inputs.iter().map(|w| &w[i]).collect();
            all_reduce_mean(&slice, weights, plan, events, phase)
        })
        .collect()
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hash of a replica's parameters (theta and lambda bit patterns).
pub fn replica_hash(state: &BilevelState) -> u64 {
    fnv1a(
        state
            .theta
            .iter()
            .chain(&state.lambda)
            .flat_map(|t| t.data().iter().flat_map(|x| x.to_bits().to_le_bytes())),
    )
}

fn check_replicas<P>(workers: &[Worker<P>]) -> Result<u64> {
    let expected = replica_hash(&workers[0].state);
    for w in &workers[1..] {
        let got = replica_hash(&w.state);
        if got != expected {
            return Err(Error::ReplicaDivergence {
                rank: w.rank,
                got,
                expected,
            });
        }
    }
    Ok(expected)
}

/// Run one closure per worker on scoped threads, collecting results in
/// rank order. Outcomes are rank-indexed, so scheduling cannot reorder
/// anything observable.
fn parallel_map<P, T, F>(workers: &mut [Worker<P>], f: F) -> Result<Vec<T>>
where
    P: Send,
    T: Send,
    F: Fn(&mut Worker<P>) -> Result<T> + Sync,
{
    let slots: Vec<Mutex<Option<Result<T>>>> =
        workers.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for (w, slot) in workers.iter_mut().zip(&slots) {
            let f = &f;
            scope.spawn(move || {
                let out = f(w);
                *slot.lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("worker ran"))
        .collect()
}

/// The synchronized meta gradient plus what each mode shares.
#[derive(Debug)]
pub struct DistributedMetaGrad {
    pub grad: Vec<Tensor>,
    pub report: StepReport,
    pub events: Vec<CommEvent>,
    /// Exact mode: the globally shared (epsilon, v) pair, usable for the
    /// follow-up theta update. Deferred mode has no synchronized v.
    pub shared_v: Option<(f64, Vec<Tensor>)>,
}

/// One distributed meta-gradient computation (central-difference methods).
///
/// Exact mode: all-reduce the direct gradient (sync 1), every worker
/// perturbs along the shared v, all-reduce the lambda-difference (sync 2).
/// Deferred mode: workers build their own v from their local direct
/// gradient; only the final lambda-difference is all-reduced (sync 1).
/// Replicas must be synchronized on entry; divergence is an error.
pub fn distributed_meta_step<P>(
    workers: &mut [Worker<P>],
    plan: &SyncPlan,
    method: &MetaGradMethod,
    base_shards: &[P::BaseBatch],
    meta_shards: &[P::MetaBatch],
    step: usize,
) -> Result<DistributedMetaGrad>
where
    P: crate::bilevel::Problem + Send,
    P::BaseBatch: Shardable + Sync,
    P::MetaBatch: Shardable + Sync,
{
    let alpha = match *method {
        MetaGradMethod::Sama { alpha } | MetaGradMethod::SamaNa { alpha } => alpha,
        _ => {
            return Err(Error::Unsupported(format!(
                "distributed_meta_step supports the central-difference methods, not {}",
                method.name()
            )))
        }
    };
    let adapt = matches!(method, MetaGradMethod::Sama { .. });
    check_replicas(workers)?;

    let base_weights = shard_weights(base_shards);
    let meta_weights = shard_weights(meta_shards);
    let mut events: Vec<CommEvent> = Vec::new();
    let mut sync_count = 0;

    // Backward pass 1, local on every device: the direct gradient.
    let g_dirs = parallel_map(workers, |w| {
        Ok(direct_grad(&w.problem, &w.state, &meta_shards[w.rank])?.1)
    })?;

    let local_grads: Vec<MetaGrad>;
    let mut shared_v = None;
    match plan.mode {
        SyncMode::Exact => {
            let g_global = all_reduce_mean_list(&g_dirs, &meta_weights, plan, &mut events, "meta")?;
            sync_count += 1;
            let v = perturbation_vector(&workers[0].state, &g_global, adapt)?;
            let vnorm = global_norm(&v);
            if vnorm >= crate::bilevel::DEGENERATE_V_THRESHOLD {
                shared_v = Some((alpha / vnorm, v.clone()));
            }
            local_grads = parallel_map(workers, |w| {
                sama_meta_grad(&w.problem, &w.state, &v, alpha, &base_shards[w.rank])
            })?;
        }
        SyncMode::Deferred => {
            local_grads = parallel_map(workers, |w| {
                let v = perturbation_vector(&w.state, &g_dirs[w.rank], adapt)?;
                sama_meta_grad(&w.problem, &w.state, &v, alpha, &base_shards[w.rank])
            })?;
        }
    }

    // Final backward pass: the one synchronization deferred mode performs.
    let grads: Vec<Vec<Tensor>> = local_grads.into_iter().map(|m| m.grad).collect();
    let grad = all_reduce_mean_list(&grads, &base_weights, plan, &mut events, "meta")?;
    sync_count += 1;

    let bytes = events.iter().map(|e| e.bytes).sum();
    Ok(DistributedMetaGrad {
        grad,
        report: StepReport {
            step,
            mode: plan.mode.name(),
            sync_count,
            bytes,
            bucket_count: events.len(),
        },
        events,
        shared_v,
    })
}

/// Data-parallel train loop over replicas.
///
/// Base steps all-reduce the raw base gradient (kept out of the meta-step
/// sync counts), so replicas take identical optimizer steps. Lambda updates
/// apply the synchronized meta gradient on every worker. The extra v-step
/// on theta runs only in exact mode, where a globally shared v exists;
/// deferred mode has only worker-local perturbations and skips it to keep
/// replicas bit-identical.
pub fn distributed_train<P, B>(
    workers: &mut [Worker<P>],
    plan: &SyncPlan,
    method: &MetaGradMethod,
    cfg: &TrainConfig,
    data: &mut B,
) -> Result<(Trajectory, Vec<StepReport>)>
where
    P: crate::bilevel::Problem + Send,
    P::BaseBatch: Shardable + Sync,
    P::MetaBatch: Shardable + Sync,
    B: BatchSource<P>,
{
    use crate::optim::update_vector;

    let k = workers.len();
    let mut trajectory = Vec::with_capacity(cfg.meta_steps);
    let mut reports = Vec::with_capacity(cfg.meta_steps);
    for step in 0..cfg.meta_steps {
        mem::reset_peak();
        let t0 = std::time::Instant::now();

        let mut base_loss = f64::NAN;
        let mut last_shards = None;
        for _ in 0..cfg.unroll {
            let global = data.next_base();
            let shards = global.split(k)?;
            let weights = shard_weights(&shards);
            let results = parallel_map(workers, |w| {
                base_gradient(&w.problem, &w.state, &shards[w.rank])
            })?;
            let losses: Vec<f64> = results.iter().map(|(l, _)| *l).collect();
            let grads: Vec<Vec<Tensor>> = results.into_iter().map(|(_, g)| g).collect();
            let mut base_events = Vec::new();
            let g_avg = all_reduce_mean_list(&grads, &weights, plan, &mut base_events, "base")?;
            for w in workers.iter_mut() {
                apply_base_update(&w.problem, &mut w.state, g_avg.clone())?;
            }
            base_loss = losses
                .iter()
                .zip(&weights)
                .map(|(l, w)| l * w)
                .sum();
            last_shards = Some(shards);
        }
        let base_shards = last_shards.expect("unroll >= 1");

        let meta_global = data.next_meta();
        let meta_shards = meta_global.split(k)?;
        let meta_weights = shard_weights(&meta_shards);
        let meta_losses = parallel_map(workers, |w| {
            Ok(direct_grad(&w.problem, &w.state, &meta_shards[w.rank])?.0)
        })?;
        let meta_loss: f64 = meta_losses
            .iter()
            .zip(&meta_weights)
            .map(|(l, w)| l * w)
            .sum();

        let outcome =
            match distributed_meta_step(workers, plan, method, &base_shards, &meta_shards, step) {
                Ok(o) => Some(o),
                Err(Error::DegeneratePerturbation(_)) => None,
                Err(e) => return Err(e),
            };

        let (grad_norm, skipped) = match outcome {
            Some(o) => {
                for w in workers.iter_mut() {
                    for i in 0..w.state.lambda.len() {
                        let (u, next) =
                            update_vector(&w.state.meta_states[i], &o.grad[i], &w.state.meta_cfg)?;
                        w.state.lambda[i] = w.state.lambda[i].sub(&u)?;
                        w.state.meta_states[i] = next;
                    }
                }
                if cfg.apply_v_step {
                    if let Some((eps, v)) = &o.shared_v {
                        for w in workers.iter_mut() {
                            w.state.theta = axpy_all(&w.state.theta, -eps, v)?;
                        }
                    }
                }
                reports.push(o.report);
                (global_norm(&o.grad), false)
            }
            None => (0.0, true),
        };

        trajectory.push(crate::bilevel::MetaStepRecord {
            step,
            base_loss,
            meta_loss,
            meta_grad_norm: grad_norm,
            wall_time_s: t0.elapsed().as_secs_f64(),
            peak_bytes: mem::peak_bytes(),
            skipped,
        });
    }
    Ok((trajectory, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::{base_step, BilevelState};
    use crate::optim::OptimizerConfig;
    use crate::tasks::{gen_noisy, init_state, ReweightBatches, ReweightProblem, WeightMode};

    #[test]
    fn shard_identity_and_balance() {
        let one = shard(10, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let mut all = one[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let three = shard(10, 3, 0).unwrap();
        let mut sizes: Vec<usize> = three.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let mut union: Vec<usize> = three.concat();
        union.sort_unstable();
        assert_eq!(union, (0..10).collect::<Vec<_>>());

        assert!(shard(3, 4, 0).is_err());
    }

    fn plan(workers: usize, mode: SyncMode) -> SyncPlan {
        SyncPlan {
            workers,
            mode,
            bucket_bytes: 64,
        }
    }

    #[test]
    fn all_reduce_identity_for_single_worker() {
        let x = Tensor::vector(vec![1.0, -2.5, 3.25]);
        let mut events = Vec::new();
        let out =
            all_reduce_mean(&[&x], &[1.0], &plan(1, SyncMode::Exact), &mut events, "meta").unwrap();
        assert!(out
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn all_reduce_of_opposites_is_zero() {
        let x = Tensor::vector(vec![0.3, -7.0, 1e-3]);
        let nx = x.scale(-1.0);
        let mut events = Vec::new();
        let out = all_reduce_mean(
            &[&x, &nx],
            &[0.5, 0.5],
            &plan(2, SyncMode::Exact),
            &mut events,
            "meta",
        )
        .unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_reduce_exact_for_identical_inputs() {
        let x = Tensor::vector(vec![1.0 / 3.0, 0.1, -7.77, 1e300]);
        let mut events = Vec::new();
        for k in [2, 3, 4, 5] {
            let inputs: Vec<&Tensor> = (0..k).map(|_| &x).collect();
            let weights = vec![1.0 / k as f64; k];
            let out = all_reduce_mean(
                &inputs,
                &weights,
                &plan(k, SyncMode::Exact),
                &mut events,
                "meta",
            )
            .unwrap();
            assert!(
                out.data()
                    .iter()
                    .zip(x.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "k={k}"
            );
        }
    }

    #[test]
    fn all_reduce_matches_weighted_mean_and_logs_buckets() {
        let a = Tensor::vector((0..20).map(|i| i as f64).collect());
        let b = Tensor::vector((0..20).map(|i| (i * i) as f64 * 0.1).collect());
        let mut events = Vec::new();
        let out = all_reduce_mean(
            &[&a, &b],
            &[0.25, 0.75],
            &plan(2, SyncMode::Exact),
            &mut events,
            "meta",
        )
        .unwrap();
        for i in 0..20 {
            let want = 0.25 * a.data()[i] + 0.75 * b.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-14);
        }
        // 20 f64s at 64-byte buckets = 8 elements per bucket -> 3 buckets.
        assert_eq!(events.len(), 3);
        assert_eq!(events.iter().map(|e| e.bytes).sum::<usize>(), 160);
    }

    fn reweight_fixture(seed: u64) -> (ReweightProblem, BilevelState) {
        let ds = gen_noisy(120, 6, 3, 0.3, 12, seed).unwrap();
        let p = ReweightProblem::new(ds, WeightMode::Learned, false);
        let s = init_state(
            &p,
            16,
            8,
            OptimizerConfig::adam(1e-2),
            OptimizerConfig::adam(1e-3),
            seed,
        )
        .unwrap();
        (p, s)
    }

    fn global_batch(p: &ReweightProblem, count: usize) -> crate::tasks::Batch {
        let d = p.dataset.dim();
        crate::tasks::Batch {
            x: Tensor::from_vec(
                vec![count, d],
                p.dataset.features.data()[..count * d].to_vec(),
            )
            .unwrap(),
            labels: p.dataset.observed[..count].to_vec(),
            ids: (0..count).collect(),
        }
    }

    fn meta_batch(p: &ReweightProblem) -> crate::tasks::Batch {
        let n = p.dataset.len();
        crate::tasks::Batch {
            x: p.dataset.meta_features.clone(),
            labels: p.dataset.meta_labels.clone(),
            ids: (n..n + p.dataset.meta_len()).collect(),
        }
    }

    /// Prepare a state that has taken one base step (so the adaptation
    /// cache exists) on the full batch.
    fn warmed(p: &ReweightProblem, mut s: BilevelState, batch: &crate::tasks::Batch) -> BilevelState {
        base_step(p, &mut s, batch).unwrap();
        s
    }

    #[test]
    fn single_worker_matches_single_process() {
        let (p, s) = reweight_fixture(3);
        let batch = global_batch(&p, 64);
        let mbatch = meta_batch(&p);
        let s = warmed(&p, s, &batch);

        let (_, g_dir) = direct_grad(&p, &s, &mbatch).unwrap();
        let v = perturbation_vector(&s, &g_dir, true).unwrap();
        let reference = sama_meta_grad(&p, &s, &v, 1.0, &batch).unwrap();

        for mode in [SyncMode::Exact, SyncMode::Deferred] {
            let mut workers = replicate(&p, &s, 1);
            let out = distributed_meta_step(
                &mut workers,
                &plan(1, mode),
                &MetaGradMethod::sama(),
                &batch.split(1).unwrap(),
                &mbatch.split(1).unwrap(),
                0,
            )
            .unwrap();
            for (a, b) in out.grad.iter().zip(&reference.grad) {
                assert!(a
                    .data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn exact_mode_matches_single_process_reference() {
        let (p, s) = reweight_fixture(5);
        let batch = global_batch(&p, 64);
        let mbatch = meta_batch(&p);
        let s = warmed(&p, s, &batch);

        let (_, g_dir) = direct_grad(&p, &s, &mbatch).unwrap();
        let v = perturbation_vector(&s, &g_dir, true).unwrap();
        let reference = sama_meta_grad(&p, &s, &v, 1.0, &batch).unwrap();
        let ref_norm = global_norm(&reference.grad);

        for k in [2, 4] {
            let mut workers = replicate(&p, &s, k);
            let out = distributed_meta_step(
                &mut workers,
                &plan(k, SyncMode::Exact),
                &MetaGradMethod::sama(),
                &batch.split(k).unwrap(),
                &mbatch.split(k).unwrap(),
                0,
            )
            .unwrap();
            assert_eq!(out.report.sync_count, 2);
            let mut diff = 0.0_f64;
            for (a, b) in out.grad.iter().zip(&reference.grad) {
                diff = diff.max(a.sub(b).unwrap().norm_inf());
            }
            assert!(
                diff <= 1e-10 * ref_norm.max(1.0),
                "k={k}: diff {diff} vs norm {ref_norm}"
            );
        }
    }

    #[test]
    fn deferred_single_sync_and_identical_batches_bitwise() {
        let (p, s) = reweight_fixture(7);
        let batch = global_batch(&p, 32);
        let mbatch = meta_batch(&p);
        let s = warmed(&p, s, &batch);

        // Identical batches on every worker: replicate instead of splitting.
        let k = 3;
        let base_shards: Vec<_> = (0..k).map(|_| batch.clone()).collect();
        let meta_shards: Vec<_> = (0..k).map(|_| mbatch.clone()).collect();

        let mut workers = replicate(&p, &s, k);
        let deferred = distributed_meta_step(
            &mut workers,
            &plan(k, SyncMode::Deferred),
            &MetaGradMethod::sama(),
            &base_shards,
            &meta_shards,
            0,
        )
        .unwrap();
        assert_eq!(deferred.report.sync_count, 1);

        let mut workers = replicate(&p, &s, k);
        let exact = distributed_meta_step(
            &mut workers,
            &plan(k, SyncMode::Exact),
            &MetaGradMethod::sama(),
            &base_shards,
            &meta_shards,
            0,
        )
        .unwrap();
        assert_eq!(exact.report.sync_count, 2);

        for (a, b) in deferred.grad.iter().zip(&exact.grad) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn replica_divergence_is_detected() {
        let (p, s) = reweight_fixture(9);
        let batch = global_batch(&p, 32);
        let mbatch = meta_batch(&p);
        let s = warmed(&p, s, &batch);
        let mut workers = replicate(&p, &s, 2);
        workers[1].state.lambda[0] = workers[1].state.lambda[0].scale(1.0 + 1e-9);
        let err = distributed_meta_step(
            &mut workers,
            &plan(2, SyncMode::Deferred),
            &MetaGradMethod::sama(),
            &batch.split(2).unwrap(),
            &mbatch.split(2).unwrap(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ReplicaDivergence { rank: 1, .. }));
    }

    #[test]
    fn distributed_train_keeps_replicas_hash_identical() {
        for mode in [SyncMode::Exact, SyncMode::Deferred] {
            let (p, s) = reweight_fixture(11);
            let mut workers = replicate(&p, &s, 2);
            let mut src = ReweightBatches::new(&p.dataset, 32, 11);
            let cfg = TrainConfig {
                unroll: 2,
                meta_steps: 3,
                apply_v_step: true,
                seed: 11,
            };
            let (traj, reports) = distributed_train(
                &mut workers,
                &plan(2, mode),
                &MetaGradMethod::sama(),
                &cfg,
                &mut src,
            )
            .unwrap();
            assert_eq!(traj.len(), 3);
            let want_syncs = if mode == SyncMode::Exact { 2 } else { 1 };
            assert!(reports.iter().all(|r| r.sync_count == want_syncs));
            let h0 = replica_hash(&workers[0].state);
            assert_eq!(h0, replica_hash(&workers[1].state), "{mode:?}");
        }
    }

    #[test]
    fn deferred_angle_shrinks_with_shard_size() {
        // Bigger i.i.d. shards (base and meta alike) -> local direct
        // gradients closer to the global one -> deferred direction closer
        // to exact, on average over seeds.
        let mut mean_angles = Vec::new();
        for &shard_size in &[8usize, 48, 288] {
            let mut angles = Vec::new();
            for seed in 0..12 {
                let ds = gen_noisy(640, 6, 3, 0.3, 2 * shard_size, 100 + seed).unwrap();
                let p = ReweightProblem::new(ds, WeightMode::Learned, false);
                let s = init_state(
                    &p,
                    16,
                    8,
                    OptimizerConfig::adam(1e-2),
                    OptimizerConfig::adam(1e-3),
                    seed,
                )
                .unwrap();
                let batch = global_batch(&p, 2 * shard_size);
                let mbatch = meta_batch(&p);
                let s = warmed(&p, s, &batch);

                let run = |mode: SyncMode| {
                    let mut workers = replicate(&p, &s, 2);
                    distributed_meta_step(
                        &mut workers,
                        &plan(2, mode),
                        &MetaGradMethod::sama(),
                        &batch.split(2).unwrap(),
                        &mbatch.split(2).unwrap(),
                        0,
                    )
                    .unwrap()
                };
                let d = run(SyncMode::Deferred);
                let e = run(SyncMode::Exact);
                let dot: f64 = d
                    .grad
                    .iter()
                    .zip(&e.grad)
                    .map(|(a, b)| a.dot(b).unwrap())
                    .sum();
                let cos = dot / (global_norm(&d.grad) * global_norm(&e.grad));
                angles.push(cos.clamp(-1.0, 1.0).acos());
            }
            mean_angles.push(angles.iter().sum::<f64>() / angles.len() as f64);
        }
        assert!(
            mean_angles[0] > mean_angles[1] && mean_angles[1] > mean_angles[2],
            "angles {mean_angles:?}"
        );
    }
}
