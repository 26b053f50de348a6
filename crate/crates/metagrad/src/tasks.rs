//! Synthetic noisy-label data reweighting.
//!
//! Gaussian class blobs with a fraction of training labels flipped, a small
//! clean meta split, a 2-layer MLP classifier as the base learner, and a
//! small weight network as the meta learner. The weight net maps each
//! sample's loss value (and optionally an uncertainty signal from a
//! moving-average model) to an importance weight in (0,1) that multiplies
//! the per-sample cross-entropy inside the base loss. The loss value fed
//! into the weight net is stop-gradded; gradient reaches theta only through
//! the multiplied loss term.

use std::cell::RefCell;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::bilevel::{BatchSource, BilevelState, Problem};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pairwise distance between class means; unit-covariance blobs.
pub const CLASS_SEPARATION: f64 = 4.0;

/// Noisy training split plus a clean, class-balanced meta split.
/// Sample ids are 0..n for the training split and n..n+m for the meta
/// split, so disjointness is auditable by id.
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    pub features: Tensor, // [n, d]
    pub observed: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub is_noisy: Vec<bool>,
    pub meta_features: Tensor, // [m, d]
    pub meta_labels: Vec<usize>,
    pub classes: usize,
}

impl NoisyDataset {
    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn meta_len(&self) -> usize {
        self.meta_labels.len()
    }
}

/// Class means on a centered simplex (scaled standard-basis vectors), so
/// any two means are exactly [`CLASS_SEPARATION`] apart.
pub fn class_means(d: usize, classes: usize) -> Result<Vec<Vec<f64>>> {
    if d < classes {
        return Err(Error::InvalidHyperparameter(format!(
            "class_means: need d >= classes, got d={d} classes={classes}"
        )));
    }
    let s = CLASS_SEPARATION / 2.0_f64.sqrt();
    let offset = s / classes as f64;
    Ok((0..classes)
        .map(|c| {
            (0..d)
                .map(|j| if j == c { s - offset } else if j < classes { -offset } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Draw `count` labelled blob samples from the shared class geometry.
pub fn sample_blobs(
    count: usize,
    d: usize,
    classes: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let means = class_means(d, classes)?;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        let c = rng.below(classes);
        labels.push(c);
        for j in 0..d {
            data.push(means[c][j] + rng.normal());
        }
    }
    Ok((Tensor::from_vec(vec![count, d], data)?, labels))
}

/// Generate the reweighting task: `n` training samples with a Bernoulli(rho)
/// chance of a uniformly wrong label each, plus `m` clean meta samples,
/// class-balanced.
pub fn gen_noisy(
    n: usize,
    d: usize,
    classes: usize,
    rho: f64,
    m: usize,
    seed: u64,
) -> Result<NoisyDataset> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidHyperparameter(format!(
            "gen_noisy: rho {rho} outside [0,1)"
        )));
    }
    if m < classes {
        return Err(Error::InvalidHyperparameter(format!(
            "gen_noisy: meta split m={m} smaller than {classes} classes"
        )));
    }
    let mut rng = Rng::substream(seed, 1);
    let (features, true_labels) = sample_blobs(n, d, classes, &mut rng)?;
    let mut observed = true_labels.clone();
    let mut is_noisy = vec![false; n];
    for i in 0..n {
        if rng.uniform() < rho {
            let shift = 1 + rng.below(classes - 1);
            observed[i] = (true_labels[i] + shift) % classes;
            is_noisy[i] = observed[i] != true_labels[i];
        }
    }

    // Class-balanced clean meta split: m/classes each, remainder to the
    // low-index classes.
    let means = class_means(d, classes)?;
    let mut meta_labels = Vec::with_capacity(m);
    for c in 0..classes {
        let quota = m / classes + usize::from(c < m % classes);
        meta_labels.extend(std::iter::repeat(c).take(quota));
    }
    let meta_features = Tensor::from_fn(&[m, d], |i| {
        let (row, col) = (i / d, i % d);
        means[meta_labels[row]][col] + rng.normal()
    });

    Ok(NoisyDataset {
        features,
        observed,
        true_labels,
        is_noisy,
        meta_features,
        meta_labels,
        classes,
    })
}

/// Whether per-sample importance weights are learned or pinned to one
/// (the no-meta baseline; training then reduces to standard training).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Learned,
    ConstantOne,
}

/// A batch view into the training (or meta) split.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor, // [b, d]
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

/// The reweighting bilevel problem. Theta is a 2-layer relu MLP classifier
/// `[w1, b1, w2, b2]`; lambda is the weight net `[v_loss, (v_unc,) b1, w2, b2]`
/// with a tanh hidden layer and a sigmoid output in (0,1).
#[derive(Clone)]
pub struct ReweightProblem {
    pub dataset: NoisyDataset,
    pub weight_mode: WeightMode,
    pub use_uncertainty: bool,
    pub ema_decay: f64,
    ema: RefCell<Option<Vec<Tensor>>>,
}

impl ReweightProblem {
    pub fn new(dataset: NoisyDataset, weight_mode: WeightMode, use_uncertainty: bool) -> Self {
        ReweightProblem {
            dataset,
            weight_mode,
            use_uncertainty,
            ema_decay: 0.95,
            ema: RefCell::new(None),
        }
    }

    /// He-initialized classifier parameters.
    pub fn init_classifier(&self, hidden: usize, rng: &mut Rng) -> Vec<Tensor> {
        let d = self.dataset.dim();
        let k = self.dataset.classes;
        let s1 = (2.0 / d as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        vec![
            Tensor::from_fn(&[d, hidden], |_| s1 * rng.normal()),
            Tensor::zeros(&[hidden]),
            Tensor::from_fn(&[hidden, k], |_| s2 * rng.normal()),
            Tensor::zeros(&[k]),
        ]
    }

    /// Small-init weight net; zero output layer puts every weight at 0.5.
    pub fn init_weight_net(&self, hidden: usize, rng: &mut Rng) -> Vec<Tensor> {
        let mut params = vec![Tensor::from_fn(&[1, hidden], |_| 0.5 * rng.normal())];
        if self.use_uncertainty {
            params.push(Tensor::from_fn(&[1, hidden], |_| 0.5 * rng.normal()));
        }
        params.push(Tensor::zeros(&[hidden]));
        params.push(Tensor::from_fn(&[hidden, 1], |_| 0.1 * rng.normal()));
        params.push(Tensor::zeros(&[1]));
        params
    }

    fn classifier_logits_var(
        &self,
        g: &mut Graph,
        theta: &[Var],
        x: Var,
    ) -> Result<Var> {
        let h = g.matmul(x, theta[0])?;
        let h = g.add_bias(h, theta[1])?;
        let h = g.relu(h);
        let o = g.matmul(h, theta[2])?;
        g.add_bias(o, theta[3])
    }

    fn weight_net_var(
        &self,
        g: &mut Graph,
        lambda: &[Var],
        loss_in: Var,        // [b, 1], already stop-gradded
        unc_in: Option<Var>, // [b, 1] constant
    ) -> Result<Var> {
        let (v_loss, rest) = (lambda[0], &lambda[1..]);
        let mut z = g.matmul(loss_in, v_loss)?;
        let rest = if self.use_uncertainty {
            let unc = unc_in.expect("uncertainty input");
            let zu = g.matmul(unc, rest[0])?;
            z = g.add(z, zu)?;
            &rest[1..]
        } else {
            rest
        };
        let z = g.add_bias(z, rest[0])?;
        let h = g.tanh(z);
        let o = g.matmul(h, rest[1])?;
        let o = g.add_bias(o, rest[2])?;
        Ok(g.sigmoid(o))
    }

    /// Eager classifier forward pass.
    pub fn logits(&self, theta: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&theta[0])?;
        let hidden = theta[1].numel();
        let h = Tensor::from_fn(h.shape(), |i| {
            (h.data()[i] + theta[1].data()[i % hidden]).max(0.0)
        });
        let o = h.matmul(&theta[2])?;
        let k = theta[3].numel();
        Ok(Tensor::from_fn(o.shape(), |i| {
            o.data()[i] + theta[3].data()[i % k]
        }))
    }

    /// Per-sample softmax probabilities, eagerly.
    pub fn probabilities(&self, theta: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(theta, x)?;
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            let row = &logits.data()[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k {
                out[r * k + j] = exps[j] / z;
            }
        }
        Tensor::from_vec(vec![b, k], out)
    }

    /// Per-sample cross-entropy losses, eagerly.
    pub fn sample_losses(&self, theta: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(theta, x)?;
        let k = logits.shape()[1];
        Ok(labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &logits.data()[r * k..(r + 1) * k];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                let logsum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
                logsum - row[y]
            })
            .collect())
    }

    /// Per-sample L2 distance between current and moving-average softmax
    /// outputs; zero until a base step has run. Bounded by sqrt(2).
    pub fn uncertainty(&self, theta: &[Tensor], x: &Tensor) -> Result<Vec<f64>> {
        let ema = self.ema.borrow();
        let ema_theta = match ema.as_ref() {
            Some(t) => t,
            None => return Ok(vec![0.0; x.shape()[0]]),
        };
        uncertainty_between(self, theta, ema_theta, x)
    }

    /// Eager weight-net forward over given inputs.
    pub fn weight_values(
        &self,
        lambda: &[Tensor],
        losses: &[f64],
        unc: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if self.weight_mode == WeightMode::ConstantOne {
            return Ok(vec![1.0; losses.len()]);
        }
        let (v_loss, rest) = (&lambda[0], &lambda[1..]);
        let hidden = v_loss.numel();
        let (v_unc, rest) = if self.use_uncertainty {
            (Some(&rest[0]), &rest[1..])
        } else {
            (None, rest)
        };
        let (b1, w2, b2) = (&rest[0], &rest[1], &rest[2]);
        let mut out = Vec::with_capacity(losses.len());
        for (i, &l) in losses.iter().enumerate() {
            let mut acc = 0.0;
            for h in 0..hidden {
                let mut z = l * v_loss.data()[h] + b1.data()[h];
                if let Some(vu) = v_unc {
                    z += unc.map_or(0.0, |u| u[i]) * vu.data()[h];
                }
                acc += z.tanh() * w2.data()[h];
            }
            let o = acc + b2.data()[0];
            out.push(1.0 / (1.0 + (-o).exp()));
        }
        Ok(out)
    }

    /// Argmax accuracy on a labelled set.
    pub fn accuracy(&self, theta: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(theta, x)?;
        let k = logits.shape()[1];
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &y)| {
                let row = &logits.data()[r * k..(r + 1) * k];
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (j, &v) in row.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                arg == y
            })
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Uncertainty between two explicit parameter sets.
pub fn uncertainty_between(
    p: &ReweightProblem,
    theta: &[Tensor],
    theta_ema: &[Tensor],
    x: &Tensor,
) -> Result<Vec<f64>> {
    let pa = p.probabilities(theta, x)?;
    let pb = p.probabilities(theta_ema, x)?;
    let (b, k) = (pa.shape()[0], pa.shape()[1]);
    Ok((0..b)
        .map(|r| {
            (0..k)
                .map(|j| {
                    let d = pa.data()[r * k + j] - pb.data()[r * k + j];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

impl Problem for ReweightProblem {
    type BaseBatch = Batch;
    type MetaBatch = Batch;

    /// Mean over the batch of `w(stop_grad(l_i), u_i; lambda) * l_i`, or the
    /// plain mean cross-entropy in the constant-one mode.
    fn base_loss(&self, g: &mut Graph, theta: &[Var], lambda: &[Var], batch: &Batch) -> Result<Var> {
        let b = batch.labels.len();
        if b == 0 {
            return Err(Error::InvalidHyperparameter("empty base batch".into()));
        }
        let x = g.constant(batch.x.clone());
        let logits = self.classifier_logits_var(g, theta, x)?;
        let losses = g.softmax_xent(logits, &batch.labels)?;
        if self.weight_mode == WeightMode::ConstantOne {
            return Ok(g.mean(losses));
        }
        let frozen = g.stop_grad(losses);
        let loss_in = g.reshape(frozen, &[b, 1])?;
        let unc_in = if self.use_uncertainty {
            let theta_vals: Vec<Tensor> =
                theta.iter().map(|&v| g.value(v).clone()).collect();
            let u = self.uncertainty(&theta_vals, &batch.x)?;
            Some(g.constant(Tensor::from_vec(vec![b, 1], u)?))
        } else {
            None
        };
        let w_col = self.weight_net_var(g, lambda, loss_in, unc_in)?;
        let w = g.reshape(w_col, &[b])?;
        let weighted = g.mul(w, losses)?;
        Ok(g.mean(weighted))
    }

    /// Plain mean cross-entropy on the clean meta batch.
    fn meta_loss(&self, g: &mut Graph, theta: &[Var], batch: &Batch) -> Result<Var> {
        let x = g.constant(batch.x.clone());
        let logits = self.classifier_logits_var(g, theta, x)?;
        let losses = g.softmax_xent(logits, &batch.labels)?;
        Ok(g.mean(losses))
    }

    fn after_base_step(&self, theta: &[Tensor]) {
        let mut ema = self.ema.borrow_mut();
        match ema.as_mut() {
            None => *ema = Some(theta.to_vec()),
            Some(avg) => {
                for (a, t) in avg.iter_mut().zip(theta) {
                    *a = a
                        .zip_map(t, |old, new| self.ema_decay * old + (1.0 - self.ema_decay) * new)
                        .expect("ema shapes fixed");
                }
            }
        }
    }
}

/// AUC of weights as a clean-vs-noisy classifier (clean positive), by rank
/// statistic with midranks for ties.
pub fn auc_clean_vs_noisy(weights: &[f64], is_noisy: &[bool]) -> Result<f64> {
    let n_pos = is_noisy.iter().filter(|&&n| !n).count();
    let n_neg = is_noisy.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Unsupported(
            "auc: need both clean and noisy samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
    // Midranks over tied runs.
    let mut ranks = vec![0.0; weights.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && weights[order[j + 1]] == weights[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..weights.len())
        .filter(|&i| !is_noisy[i])
        .map(|i| ranks[i])
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Learned-weight separation on the full training split at the current
/// parameters.
pub fn weight_separation_auc(
    p: &ReweightProblem,
    theta: &[Tensor],
    lambda: &[Tensor],
) -> Result<f64> {
    let losses = p.sample_losses(theta, &p.dataset.features, &p.dataset.observed)?;
    let unc = if p.use_uncertainty {
        Some(p.uncertainty(theta, &p.dataset.features)?)
    } else {
        None
    };
    let weights = p.weight_values(lambda, &losses, unc.as_deref())?;
    auc_clean_vs_noisy(&weights, &p.dataset.is_noisy)
}

/// Seeded shuffled minibatch cycling over the training split; the meta
/// batch is always the full clean split.
pub struct ReweightBatches {
    features: Tensor,
    labels: Vec<usize>,
    meta: Batch,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl ReweightBatches {
    pub fn new(dataset: &NoisyDataset, batch_size: usize, seed: u64) -> Self {
        let n = dataset.len();
        let meta = Batch {
            x: dataset.meta_features.clone(),
            labels: dataset.meta_labels.clone(),
            ids: (n..n + dataset.meta_len()).collect(),
        };
        ReweightBatches {
            features: dataset.features.clone(),
            labels: dataset.observed.clone(),
            meta,
            batch_size: batch_size.min(n),
            order: (0..n).collect(),
            cursor: 0,
            rng: Rng::substream(seed, 2),
        }
    }
}

impl BatchSource<ReweightProblem> for ReweightBatches {
    fn next_base(&mut self) -> Batch {
        let n = self.order.len();
        if self.cursor == 0 {
            self.rng.shuffle(&mut self.order);
        }
        let take = self.batch_size.min(n - self.cursor);
        let ids: Vec<usize> = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor = (self.cursor + take) % n;
        let d = self.features.cols();
        let x = Tensor::from_fn(&[ids.len(), d], |i| {
            let (row, col) = (i / d, i % d);
            self.features.data()[ids[row] * d + col]
        });
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Batch { x, labels, ids }
    }

    fn next_meta(&mut self) -> Batch {
        self.meta.clone()
    }
}

/// Dataset export: `feature_0..d-1, observed_label, true_label, is_noisy,
/// split` with split in {train, meta}.
pub fn export_csv(dataset: &NoisyDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = dataset.dim();
    let header: Vec<String> = (0..d)
        .map(|j| format!("feature_{j}"))
        .chain(["observed_label", "true_label", "is_noisy", "split"].map(String::from))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for i in 0..dataset.len() {
        let feats: Vec<String> = (0..d)
            .map(|j| format!("{:.16e}", dataset.features.data()[i * d + j]))
            .collect();
        writeln!(
            f,
            "{},{},{},{},train",
            feats.join(","),
            dataset.observed[i],
            dataset.true_labels[i],
            dataset.is_noisy[i]
        )?;
    }
    for i in 0..dataset.meta_len() {
        let feats: Vec<String> = (0..d)
            .map(|j| format!("{:.16e}", dataset.meta_features.data()[i * d + j]))
            .collect();
        writeln!(
            f,
            "{},{},{},false,meta",
            feats.join(","),
            dataset.meta_labels[i],
            dataset.meta_labels[i]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Inverse of [`export_csv`].
pub fn import_csv(path: &Path) -> Result<NoisyDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty dataset csv".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.iter().filter(|c| c.starts_with("feature_")).count();
    if d == 0 || cols.len() != d + 4 {
        return Err(Error::Config(format!("unexpected dataset header: {header}")));
    }
    let mut train_feats = Vec::new();
    let mut observed = Vec::new();
    let mut true_labels = Vec::new();
    let mut is_noisy = Vec::new();
    let mut meta_feats = Vec::new();
    let mut meta_labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 4 {
            return Err(Error::Config(format!(
                "dataset line {}: expected {} fields, got {}",
                lineno + 2,
                d + 4,
                fields.len()
            )));
        }
        let parse_err = |what: &str| Error::Config(format!("dataset line {}: bad {what}", lineno + 2));
        let feats: Vec<f64> = fields[..d]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<_>>()?;
        let obs: usize = fields[d].parse().map_err(|_| parse_err("observed_label"))?;
        let tru: usize = fields[d + 1].parse().map_err(|_| parse_err("true_label"))?;
        match fields[d + 3] {
            "train" => {
                train_feats.extend(feats);
                observed.push(obs);
                true_labels.push(tru);
                is_noisy.push(fields[d + 2] == "true");
            }
            "meta" => {
                meta_feats.extend(feats);
                meta_labels.push(obs);
            }
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
    let classes = true_labels
        .iter()
        .chain(&observed)
        .chain(&meta_labels)
        .max()
        .map_or(0, |&m| m + 1);
    let n = observed.len();
    let m = meta_labels.len();
    Ok(NoisyDataset {
        features: Tensor::from_vec(vec![n, d], train_feats)?,
        observed,
        true_labels,
        is_noisy,
        meta_features: Tensor::from_vec(vec![m, d], meta_feats)?,
        meta_labels,
        classes,
    })
}

/// Convenience: classifier theta plus weight-net lambda wrapped into a
/// fresh [`BilevelState`].
pub fn init_state(
    p: &ReweightProblem,
    hidden: usize,
    weight_hidden: usize,
    base_cfg: crate::optim::OptimizerConfig,
    meta_cfg: crate::optim::OptimizerConfig,
    seed: u64,
) -> Result<BilevelState> {
    let mut rng = Rng::substream(seed, 3);
    let theta = p.init_classifier(hidden, &mut rng);
    let lambda = p.init_weight_net(weight_hidden, &mut rng);
    BilevelState::new(theta, lambda, base_cfg, meta_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::bilevel::{self, MetaGradMethod, TrainConfig};
    use crate::optim::OptimizerConfig;

    fn small_dataset(rho: f64, seed: u64) -> NoisyDataset {
        gen_noisy(200, 6, 3, rho, 12, seed).unwrap()
    }

    #[test]
    fn zero_noise_means_no_noisy_flags() {
        let ds = small_dataset(0.0, 1);
        assert!(ds.is_noisy.iter().all(|&b| !b));
        assert_eq!(ds.observed, ds.true_labels);
    }

    #[test]
    fn noisy_count_within_binomial_bounds() {
        let ds = gen_noisy(2000, 10, 4, 0.4, 40, 7).unwrap();
        let noisy = ds.is_noisy.iter().filter(|&&b| b).count() as f64;
        // 3 sigma around n*rho for Bernoulli(0.4).
        let sigma = (2000.0_f64 * 0.4 * 0.6).sqrt();
        assert!((noisy - 800.0).abs() < 3.0 * sigma, "noisy = {noisy}");
        for (i, &flag) in ds.is_noisy.iter().enumerate() {
            assert_eq!(flag, ds.observed[i] != ds.true_labels[i]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_noisy(100, 6, 3, 0.3, 9, 5).unwrap();
        let b = gen_noisy(100, 6, 3, 0.3, 9, 5).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.meta_features, b.meta_features);
    }

    #[test]
    fn meta_split_is_class_balanced() {
        let ds = gen_noisy(100, 8, 4, 0.2, 40, 3).unwrap();
        for c in 0..4 {
            assert_eq!(ds.meta_labels.iter().filter(|&&y| y == c).count(), 10);
        }
    }

    #[test]
    fn gen_noisy_validates_inputs() {
        assert!(gen_noisy(10, 6, 3, 1.0, 6, 0).is_err());
        assert!(gen_noisy(10, 6, 3, 0.2, 2, 0).is_err());
        assert!(gen_noisy(10, 2, 3, 0.2, 6, 0).is_err());
    }

    #[test]
    fn constant_half_weight_net_halves_the_loss() {
        let ds = small_dataset(0.2, 11);
        let p = ReweightProblem::new(ds, WeightMode::Learned, false);
        let mut rng = Rng::seed(0);
        let theta = p.init_classifier(16, &mut rng);
        // Zero weight net outputs sigmoid(0) = 0.5 exactly.
        let hw = 8;
        let lambda = vec![
            Tensor::zeros(&[1, hw]),
            Tensor::zeros(&[hw]),
            Tensor::zeros(&[hw, 1]),
            Tensor::zeros(&[1]),
        ];
        let batch = Batch {
            x: p.dataset.features.clone(),
            labels: p.dataset.observed.clone(),
            ids: (0..p.dataset.len()).collect(),
        };
        let weighted = eval_base_loss(&p, &theta, &lambda, &batch);
        let losses = p
            .sample_losses(&theta, &batch.x, &batch.labels)
            .unwrap();
        let unweighted_mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((weighted - unweighted_mean / 2.0).abs() < 1e-12);
    }

    fn eval_base_loss(
        p: &ReweightProblem,
        theta: &[Tensor],
        lambda: &[Tensor],
        batch: &Batch,
    ) -> f64 {
        let mut g = Graph::new();
        let tv: Vec<Var> = theta.iter().map(|t| g.constant(t.clone())).collect();
        let lv: Vec<Var> = lambda.iter().map(|t| g.constant(t.clone())).collect();
        let root = p.base_loss(&mut g, &tv, &lv, batch).unwrap();
        g.value(root).scalar_value().unwrap()
    }

    #[test]
    fn single_sample_batch_is_w_times_loss() {
        let ds = small_dataset(0.2, 13);
        let p = ReweightProblem::new(ds, WeightMode::Learned, false);
        let mut rng = Rng::seed(4);
        let theta = p.init_classifier(16, &mut rng);
        let lambda = p.init_weight_net(8, &mut rng);
        let batch = Batch {
            x: Tensor::from_fn(&[1, p.dataset.dim()], |i| p.dataset.features.data()[i]),
            labels: vec![p.dataset.observed[0]],
            ids: vec![0],
        };
        let loss = eval_base_loss(&p, &theta, &lambda, &batch);
        let l = p.sample_losses(&theta, &batch.x, &batch.labels).unwrap()[0];
        let w = p.weight_values(&lambda, &[l], None).unwrap()[0];
        assert!((loss - w * l).abs() < 1e-12);
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        let ds = small_dataset(0.3, 17);
        let p = ReweightProblem::new(ds, WeightMode::Learned, false);
        let mut rng = Rng::seed(8);
        let theta = p.init_classifier(12, &mut rng);
        let lambda = p.init_weight_net(6, &mut rng);
        let batch = Batch {
            x: Tensor::from_fn(&[16, p.dataset.dim()], |i| p.dataset.features.data()[i]),
            labels: p.dataset.observed[..16].to_vec(),
            ids: (0..16).collect(),
        };

        // Engine gradient w.r.t. each lambda tensor.
        let mut g = Graph::new();
        let tv: Vec<Var> = theta.iter().map(|t| g.constant(t.clone())).collect();
        let lv: Vec<Var> = lambda.iter().map(|t| g.leaf(t.clone())).collect();
        let root = p.base_loss(&mut g, &tv, &lv, &batch).unwrap();
        let (mut tape, _) = g.finish(root);
        let mut grads = tape.backward(&lv).unwrap();

        for (pi, l0) in lambda.iter().enumerate() {
            let got = grads.take(lv[pi]).unwrap();
            let fd = finite_diff_grad(
                |probe| {
                    let mut trial: Vec<Tensor> = lambda.to_vec();
                    trial[pi] = probe.clone();
                    Ok(eval_base_loss(&p, &theta, &trial, &batch))
                },
                l0,
                1e-5,
            )
            .unwrap();
            for i in 0..l0.numel() {
                let (a, b) = (got.data()[i], fd.data()[i]);
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                assert!(rel < 1e-5, "lambda[{pi}][{i}]: {a} vs {b}");
            }
        }
    }

    #[test]
    fn uncertainty_is_zero_for_identical_models_and_bounded() {
        let ds = small_dataset(0.2, 19);
        let p = ReweightProblem::new(ds, WeightMode::Learned, true);
        let mut rng = Rng::seed(2);
        let theta = p.init_classifier(16, &mut rng);
        let x = Tensor::from_fn(&[20, p.dataset.dim()], |i| p.dataset.features.data()[i]);
        let zero = uncertainty_between(&p, &theta, &theta, &x).unwrap();
        assert!(zero.iter().all(|&u| u == 0.0));
        let other = p.init_classifier(16, &mut rng);
        let u = uncertainty_between(&p, &theta, &other, &x).unwrap();
        assert!(u.iter().all(|&v| (0.0..=2.0_f64.sqrt() + 1e-12).contains(&v)));
    }

    #[test]
    fn zero_decay_ema_tracks_current_model() {
        let ds = small_dataset(0.2, 23);
        let mut p = ReweightProblem::new(ds, WeightMode::Learned, true);
        p.ema_decay = 0.0;
        let mut rng = Rng::seed(3);
        let theta = p.init_classifier(8, &mut rng);
        p.after_base_step(&theta);
        let u = p.uncertainty(&theta, &p.dataset.features).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn auc_conventions() {
        let noisy = vec![false, true, false, true];
        assert_eq!(auc_clean_vs_noisy(&[0.3; 4], &noisy).unwrap(), 0.5);
        let perfect: Vec<f64> = noisy.iter().map(|&n| if n { 0.0 } else { 1.0 }).collect();
        assert_eq!(auc_clean_vs_noisy(&perfect, &noisy).unwrap(), 1.0);
        assert!(auc_clean_vs_noisy(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn weights_stay_in_unit_interval() {
        let ds = small_dataset(0.3, 29);
        let p = ReweightProblem::new(ds, WeightMode::Learned, false);
        let mut rng = Rng::seed(6);
        let lambda = p.init_weight_net(8, &mut rng);
        let losses: Vec<f64> = (0..100).map(|_| rng.normal().abs() * 5.0).collect();
        let w = p.weight_values(&lambda, &losses, None).unwrap();
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        // Weighted mean loss can't exceed the max per-sample loss.
        let weighted = losses
            .iter()
            .zip(&w)
            .map(|(l, wi)| l * wi)
            .sum::<f64>()
            / losses.len() as f64;
        let max_loss = losses.iter().fold(0.0_f64, |m, &l| m.max(l));
        assert!(weighted <= max_loss);
    }

    #[test]
    fn meta_split_never_in_base_batches() {
        let ds = gen_noisy(150, 6, 3, 0.3, 15, 31).unwrap();
        let meta_ids: std::collections::HashSet<usize> =
            (150..150 + ds.meta_len()).collect();
        let mut src = ReweightBatches::new(&ds, 32, 0);
        for _ in 0..20 {
            let b = src.next_base();
            assert!(b.ids.iter().all(|id| !meta_ids.contains(id)));
        }
        let m = src.next_meta();
        assert!(m.ids.iter().all(|id| meta_ids.contains(id)));
    }

    #[test]
    fn constant_one_training_is_bitwise_standard_training() {
        let run_bilevel = || {
            let ds = small_dataset(0.3, 37);
            let p = ReweightProblem::new(ds, WeightMode::ConstantOne, false);
            let mut s = init_state(
                &p,
                16,
                8,
                OptimizerConfig::adam(1e-2),
                OptimizerConfig::adam(1e-3),
                37,
            )
            .unwrap();
            let mut src = ReweightBatches::new(&p.dataset, 32, 37);
            let cfg = TrainConfig {
                unroll: 3,
                meta_steps: 4,
                apply_v_step: false,
                seed: 37,
            };
            bilevel::train(&p, &mut s, &MetaGradMethod::sama(), &cfg, &mut src).unwrap();
            s.theta
        };
        let run_plain = || {
            let ds = small_dataset(0.3, 37);
            let p = ReweightProblem::new(ds, WeightMode::ConstantOne, false);
            let mut s = init_state(
                &p,
                16,
                8,
                OptimizerConfig::adam(1e-2),
                OptimizerConfig::adam(1e-3),
                37,
            )
            .unwrap();
            let mut src = ReweightBatches::new(&p.dataset, 32, 37);
            for _ in 0..12 {
                let b = src.next_base();
                bilevel::base_step(&p, &mut s, &b).unwrap();
            }
            s.theta
        };
        let (a, b) = (run_bilevel(), run_plain());
        for (ta, tb) in a.iter().zip(&b) {
            assert!(ta
                .data()
                .iter()
                .zip(tb.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_noisy(50, 5, 3, 0.3, 9, 41).unwrap();
        let dir = std::env::temp_dir().join("metagrad_test_csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dataset.csv");
        export_csv(&ds, &path).unwrap();
        let back = import_csv(&path).unwrap();
        assert_eq!(back.observed, ds.observed);
        assert_eq!(back.true_labels, ds.true_labels);
        assert_eq!(back.is_noisy, ds.is_noisy);
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.features, ds.features);
        assert_eq!(back.meta_features, ds.meta_features);
        std::fs::remove_file(&path).ok();
    }
}
