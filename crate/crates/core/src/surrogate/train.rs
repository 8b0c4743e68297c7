use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{concat_rows, gather, rollout, Dynamics, SurrogateModel};
use crate::error::{invalid, Error, Result};
use crate::ndtensor::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::noise::{derive_seed, rng};
use crate::solver::{interval_rows, Dataset, SpdeProblem, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Fraction of epochs before hard samples are duplicated.
    pub warmup_fraction: f64,
    /// Samples whose loss exceeds this quantile are duplicated.
    pub quantile: f64,
    /// Extra copies of each hard sample.
    pub duplicates: usize,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.2,
            quantile: 0.8,
            duplicates: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub transition: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            transition: 1.0,
            reconstruction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: Augmentation,
    pub weights: LossWeights,
    /// Learning rate at the last epoch relative to `lr` (cosine schedule).
    pub final_lr_fraction: f64,
    /// Initialize `θ₁` by least squares on the training pairs.
    pub fit_linear_head: bool,
    /// Learning rate of `θ₁` relative to `lr`; 0 keeps it fixed.
    pub linear_head_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 1000,
            augmentation: Augmentation::default(),
            weights: LossWeights::default(),
            final_lr_fraction: 0.05,
            fit_linear_head: true,
            linear_head_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 1-D conv backbone defaults.
    pub fn conv() -> Self {
        Self::default()
    }

    /// 1-D spectral backbone defaults.
    pub fn spectral() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 25,
            ..Self::default()
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.augmentation;
        if !(a.quantile > 0.0 && a.quantile < 1.0) {
            return Err(invalid("augmentation quantile must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&a.warmup_fraction) {
            return Err(invalid("warmup fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0
            || !(self.lr > 0.0)
            || !(0.0..=1.0).contains(&self.final_lr_fraction)
            || !(self.linear_head_lr_scale >= 0.0)
        {
            return Err(invalid("batch size and learning rate must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs.max(1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
    /// Hard samples appended by augmentation.
    pub duplicated: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

/// Single-step pairs `(u_t, f_t, σξ_t) → u_{t+1}` extracted from trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub u: Tensor,
    pub f: Tensor,
    /// Physical noise rows of the interval, `[P, substeps, spatial]`.
    pub xi: Tensor,
    pub next: Tensor,
    pub times: Vec<f64>,
}

/// The trajectory's noise scaled by `σ`.
pub(crate) fn physical_noise(problem: &SpdeProblem, t: &Trajectory) -> Result<Tensor> {
    let xi = match &t.xi {
        Some(x) => x.clone(),
        None => problem.noise(t.noise_seed)?,
    };
    Ok(xi.scale(problem.sigma))
}

impl PairSet {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let problem = data.problem();
        let frames = problem.grid.frames;
        let (mut u, mut f, mut xi, mut next, mut times) = (vec![], vec![], vec![], vec![], vec![]);
        for t in &data.trajectories {
            let noise = physical_noise(problem, t)?;
            for k in 0..frames - 1 {
                u.push(t.frame(k));
                f.push(t.f.index0(k));
                xi.push(interval_rows(&noise, problem, k));
                next.push(t.frame(k + 1));
                times.push(k as f64 * problem.grid.dt());
            }
        }
        Ok(Self {
            u: Tensor::stack(&u)?,
            f: Tensor::stack(&f)?,
            xi: Tensor::stack(&xi)?,
            next: Tensor::stack(&next)?,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            u: gather(&self.u, idx),
            f: gather(&self.f, idx),
            xi: gather(&self.xi, idx),
            next: gather(&self.next, idx),
            times: idx.iter().map(|&i| self.times[i]).collect(),
        }
    }
}

/// Pairs with their encoded model inputs.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Encoded {
    /// `[P, C_raw, spatial]`
    pub raw: Tensor,
    pub u: Tensor,
    pub f: Tensor,
    pub next: Tensor,
    pub times: Vec<f64>,
}

impl Encoded {
    pub fn new(model: &SurrogateModel, pairs: &PairSet) -> Result<Self> {
        if pairs.u.shape()[1..] != model.problem().state_shape()[..] {
            return Err(invalid("pairs do not match the model grid"));
        }
        Ok(Self {
            raw: model.encode_values(&pairs.u, &pairs.f, &pairs.xi)?,
            u: pairs.u.clone(),
            f: pairs.f.clone(),
            next: pairs.next.clone(),
            times: pairs.times.clone(),
        })
    }

    fn len(&self) -> usize {
        self.times.len()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            raw: gather(&self.raw, idx),
            u: gather(&self.u, idx),
            f: gather(&self.f, idx),
            next: gather(&self.next, idx),
            times: idx.iter().map(|&i| self.times[i]).collect(),
        }
    }

    /// RMS of each encoded channel, floored away from zero.
    fn channel_rms(&self) -> Vec<f64> {
        let s = self.raw.shape();
        let (c, p) = (s[1], s[2..].iter().product::<usize>());
        let mut acc = vec![0.0; c];
        for sample in self.raw.data().chunks(c * p) {
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += sample[ch * p..(ch + 1) * p].iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (self.len() * p) as f64;
        acc.iter()
            .map(|a| {
                let r = (a / n).sqrt();
                if r > 1e-12 {
                    r
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Weighted per-sample loss `[B]` and its mean.
pub(crate) fn batch_loss<'t>(
    model: &SurrogateModel,
    params: &[Var<'t>],
    batch: &Encoded,
    weights: &LossWeights,
    tape: &'t Tape,
) -> Result<(Var<'t>, Var<'t>)> {
    let u = tape.constant(batch.u.clone());
    let out = model.head(params, tape.constant(batch.raw.clone()), u, &batch.times)?;
    let p = model.problem().grid.points() as f64;
    let mse = |pred: Var<'t>, target: &Tensor, w: f64| -> Result<Var<'t>> {
        pred.sub(tape.constant(target.clone()))?.square()?.sum_per_sample()?.scale(w / p)
    };
    let per = mse(out.next, &batch.next, weights.transition)?
        .add(mse(out.u_rec, &batch.u, weights.reconstruction)?)?
        .add(mse(out.f_rec, &batch.f, weights.reconstruction)?)?;
    Ok((per, per.mean()?))
}

/// Mean training loss and its gradient for `params` on `pairs`.
pub fn loss_and_gradient(
    model: &SurrogateModel,
    params: &[Tensor],
    pairs: &PairSet,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    encoded_loss_and_gradient(model, params, &Encoded::new(model, pairs)?, weights)
}

fn encoded_loss_and_gradient(
    model: &SurrogateModel,
    params: &[Tensor],
    batch: &Encoded,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = tape.params(params);
    let (_, loss) = batch_loss(model, &vars, batch, weights, &tape)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Per-sample losses of the whole set without gradients.
fn sample_losses(model: &SurrogateModel, pairs: &Encoded, weights: &LossWeights) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let starts: Vec<usize> = (0..pairs.len()).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(pairs.len())).collect();
            let tape = Tape::new();
            let params = model.constants(&tape);
            let (per, _) = batch_loss(model, &params, &pairs.subset(&idx), weights, &tape)?;
            Ok(per.value().data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Cholesky solve of a symmetric positive definite `n × n` system.
fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return Err(invalid("normal equations are not positive definite"));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Ok(x)
}

/// Ridge least squares `θ = argmin Σ‖Σ_c θ_c s_c − u_{t+1}‖²` on
/// column-normalized features.
fn fit_theta(pairs: &Encoded) -> Result<Vec<f64>> {
    let s = pairs.raw.shape();
    let (c, p) = (s[1], s[2..].iter().product::<usize>());
    let mut g = vec![0.0; c * c];
    let mut b = vec![0.0; c];
    for (sample, target) in pairs.raw.data().chunks(c * p).zip(pairs.next.data().chunks(p)) {
        for i in 0..c {
            let si = &sample[i * p..(i + 1) * p];
            b[i] += si.iter().zip(target).map(|(x, y)| x * y).sum::<f64>();
            for j in 0..=i {
                let v: f64 = si.iter().zip(&sample[j * p..(j + 1) * p]).map(|(x, y)| x * y).sum();
                g[i * c + j] += v;
            }
        }
    }
    let d: Vec<f64> = (0..c).map(|i| g[i * c + i].sqrt().max(1e-300)).collect();
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..=i {
            let v = g[i * c + j] / (d[i] * d[j]);
            a[i * c + j] = v;
            a[j * c + i] = v;
        }
        a[i * c + i] += 1e-9;
    }
    let rhs: Vec<f64> = (0..c).map(|i| b[i] / d[i]).collect();
    let x = solve_spd(&a, &rhs, c)?;
    Ok(x.iter().zip(&d).map(|(x, d)| x / d).collect())
}

/// Trains on precomputed pairs. Sets the model's input scales from `pairs`.
pub fn train_pairs(model: &mut SurrogateModel, pairs: &PairSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let start = Instant::now();
    let pairs = &Encoded::new(model, pairs)?;
    model.set_input_scale(pairs.channel_rms())?;
    if cfg.fit_linear_head && model.theta().is_some() {
        let theta = fit_theta(pairs)?;
        let shape = model.params[0].shape().to_vec();
        model.params[0] = Tensor::new(shape, theta)?;
    }
    // θ₁ gets its own moments so its step size can differ from the backbone's.
    let split = usize::from(model.theta().is_some());
    let adam_config = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam_head = AdamState::new(&model.params[..split], adam_config);
    let mut adam = AdamState::new(&model.params[split..], adam_config);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let aug = &cfg.augmentation;
    let warmup = (cfg.epochs as f64 * aug.warmup_fraction).round() as usize;
    let mut report = TrainReport {
        losses: vec![],
        duplicated: 0,
        seconds: 0.0,
    };
    for epoch in 0..cfg.epochs {
        if epoch == warmup && aug.duplicates > 0 {
            let losses = sample_losses(model, pairs, &cfg.weights)?;
            let mut sorted = losses.clone();
            sorted.sort_by(f64::total_cmp);
            let threshold = sorted[((sorted.len() - 1) as f64 * aug.quantile).floor() as usize];
            for (i, l) in losses.iter().enumerate() {
                if *l > threshold {
                    for _ in 0..aug.duplicates {
                        order.push(i);
                        report.duplicated += 1;
                    }
                }
            }
        }
        adam.config.lr = cfg.lr_at(epoch);
        adam_head.config.lr = adam.config.lr * cfg.linear_head_lr_scale;
        let mut epoch_order = order.clone();
        epoch_order.shuffle(&mut rng(derive_seed(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        for idx in epoch_order.chunks(cfg.batch_size) {
            let batch = pairs.subset(idx);
            let (loss, grads) = match encoded_loss_and_gradient(model, &model.params, &batch, &cfg.weights) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * idx.len() as f64;
            if split > 0 && cfg.linear_head_lr_scale > 0.0 {
                adam_head.step(&mut model.params[..split], &grads[..split])?;
            }
            adam.step(&mut model.params[split..], &grads[split..])?;
        }
        report.losses.push(total / epoch_order.len() as f64);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Extracts single-step pairs from `data` and trains.
pub fn train(model: &mut SurrogateModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.problem().grid != model.problem().grid {
        return Err(invalid("dataset grid does not match the model grid"));
    }
    train_pairs(model, &PairSet::from_dataset(data)?, cfg)
}

/// Relative L² test errors (mean over samples of `‖pred − true‖ / ‖true‖`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Reconstruction of `f_t`.
    pub f: f64,
    /// Reconstruction of `u_t`.
    pub u0: f64,
    /// Single-step prediction of `u_{t+1}`.
    pub u1: f64,
    /// Autoregressive rollout over frames `1..K`.
    pub prediction: f64,
    pub total: f64,
}

impl ErrorReport {
    pub fn new(f: f64, u0: f64, u1: f64, prediction: f64) -> Self {
        Self {
            f,
            u0,
            u1,
            prediction,
            total: f + u0 + u1 + prediction,
        }
    }
}

fn rel_rows(pred: &Tensor, truth: &Tensor) -> f64 {
    let s = truth.stride0();
    let rows = truth.len() / s;
    let sum: f64 = pred
        .data()
        .chunks(s)
        .zip(truth.data().chunks(s))
        .map(|(p, t)| {
            let num = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if num == 0.0 {
                0.0
            } else {
                num / den.max(f64::MIN_POSITIVE)
            }
        })
        .sum();
    sum / rows as f64
}

/// Single-step predictions and reconstructions for every pair.
fn predict_pairs(model: &dyn Dynamics, pairs: &PairSet) -> Result<(Tensor, Tensor, Tensor)> {
    const CHUNK: usize = 256;
    let starts: Vec<usize> = (0..pairs.len()).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(pairs.len())).collect();
            let b = pairs.subset(&idx);
            let tape = Tape::new();
            let out = model.transition(
                &tape,
                tape.constant(b.u),
                tape.constant(b.f),
                tape.constant(b.xi),
                &b.times,
            )?;
            Ok([out.next, out.u_rec, out.f_rec].map(|v| v.value().as_ref().clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |i: usize| concat_rows(&parts.iter().map(|p| p[i].clone()).collect::<Vec<_>>());
    Ok((pick(0)?, pick(1)?, pick(2)?))
}

/// Rollouts of every trajectory from its initial frame with its recorded
/// forcing and noise: `[N, K, spatial]`.
pub fn rollout_dataset(model: &dyn Dynamics, data: &Dataset) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let problem = data.problem();
    let starts: Vec<usize> = (0..data.len()).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let ts = &data.trajectories[s..(s + CHUNK).min(data.len())];
            let u0 = Tensor::stack(&ts.iter().map(|t| t.frame(0)).collect::<Vec<_>>())?;
            let f = Tensor::stack(&ts.iter().map(|t| t.f.clone()).collect::<Vec<_>>())?;
            let xi = Tensor::stack(&ts.iter().map(|t| physical_noise(problem, t)).collect::<Result<Vec<_>>>()?)?;
            rollout(model, &u0, &f, &xi)
        })
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts)
}

/// Relative errors of reconstructions, single steps and rollouts on `data`.
pub fn evaluate_model(model: &dyn Dynamics, data: &Dataset) -> Result<ErrorReport> {
    if data.problem().grid != model.problem().grid {
        return Err(invalid("dataset grid does not match the model grid"));
    }
    let pairs = PairSet::from_dataset(data)?;
    let (next, u_rec, f_rec) = predict_pairs(model, &pairs)?;
    let pred = rollout_dataset(model, data)?;
    let truth = Tensor::stack(&data.trajectories.iter().map(|t| t.u.clone()).collect::<Vec<_>>())?;
    let k = data.problem().grid.frames;
    let tail = |x: &Tensor| super::select_rows(x, k, 1, k - 1);
    Ok(ErrorReport::new(
        rel_rows(&f_rec, &pairs.f),
        rel_rows(&u_rec, &pairs.u),
        rel_rows(&next, &pairs.next),
        rel_rows(&tail(&pred), &tail(&truth)),
    ))
}
