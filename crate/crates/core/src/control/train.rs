//! Policy training through a frozen surrogate.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{controlled_rollout, noise_batch, repeat_rows, PolicyNet};
use crate::bench::TaskSampler;
use crate::error::{invalid, Error, Result};
use crate::ndtensor::{AdamConfig, AdamState, Tape, Tensor};
use crate::noise::derive_seed;
use crate::surrogate::{gather, Dynamics};

/// Samples per tape; fixed so results do not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub iterations: usize,
    /// Tasks per iteration.
    pub batch_tasks: usize,
    pub lr: f64,
    /// Cosine decay to `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            batch_tasks: 16,
            lr: 1e-3,
            final_lr_fraction: 0.1,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_tasks == 0 {
            return Err(invalid("iterations and batch_tasks must be positive"));
        }
        if !(self.lr > 0.0 && (0.0..=1.0).contains(&self.final_lr_fraction)) {
            return Err(invalid("lr must be positive and final_lr_fraction in [0, 1]"));
        }
        Ok(())
    }

    fn lr_at(&self, it: usize) -> f64 {
        let c = 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / self.iterations as f64).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrainReport {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl PolicyTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.17e}\n"));
        }
        s
    }
}

/// Mean tracking objective over samples and its gradient with respect to the
/// policy parameters. `u0`, `target`: `[M, spatial]`; `xi`: unscaled noise
/// `[M, fine steps, spatial]`.
pub fn policy_loss_and_gradient(
    policy: &PolicyNet,
    params: &[Tensor],
    model: &dyn Dynamics,
    u0: &Tensor,
    target: &Tensor,
    xi: &Tensor,
    alpha: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let m = u0.shape()[0];
    if target.shape() != u0.shape() || xi.shape().first() != Some(&m) {
        return Err(Error::ShapeMismatch {
            op: "policy loss",
            lhs: u0.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let dt = model.problem().grid.dt();
    let starts: Vec<usize> = (0..m).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + CHUNK).min(m)).collect();
            let tape = Tape::new();
            let vars = tape.params(params);
            let goal = tape.constant(gather(target, &idx));
            let obj = controlled_rollout(model, &tape, tape.constant(gather(u0, &idx)), goal, &gather(xi, &idx), |k, u| {
                policy.forward(&vars, u, goal, k as f64 * dt)
            })?;
            let loss = obj.per_sample(alpha)?.sum()?.scale(1.0 / m as f64)?;
            let grads = tape.backward(loss)?;
            Ok((loss.value().item(), vars.iter().map(|v| grads.wrt(*v)).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (l, g) in parts {
        total += l;
        for (a, g) in acc.iter_mut().zip(&g) {
            a.axpy(1.0, g);
        }
    }
    Ok((total, acc))
}

/// Minimizes the expected tracking objective over tasks from `sampler`,
/// rolling `model` forward under the tasks' `samples` fresh noise
/// realizations each iteration. Fits the policy's input scale first.
pub fn train_policy(
    policy: &mut PolicyNet,
    model: &dyn Dynamics,
    sampler: &TaskSampler,
    cfg: &PolicyTrainConfig,
) -> Result<PolicyTrainReport> {
    cfg.validate()?;
    if model.problem().grid != policy.problem().grid || sampler.problem().grid != policy.problem().grid {
        return Err(invalid("policy, surrogate and tasks must share a grid"));
    }
    let start = Instant::now();
    let calib = sampler.tasks(256, derive_seed(cfg.seed, u64::MAX));
    let states: Vec<Tensor> = calib.iter().map(|t| t.u0.clone()).collect();
    let targets: Vec<Tensor> = calib.iter().map(|t| t.target.clone()).collect();
    policy.fit_input_scale(&states, &targets)?;
    let alpha = sampler.config().alpha;
    let n = sampler.config().samples;
    if n == 0 {
        return Err(invalid("tasks need at least one noise sample"));
    }
    let mut adam = AdamState::new(
        &policy.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let tasks = sampler.tasks(cfg.batch_tasks, derive_seed(cfg.seed, it as u64));
        let u0 = repeat_rows(&Tensor::stack(&tasks.iter().map(|t| t.u0.clone()).collect::<Vec<_>>())?, n);
        let target = repeat_rows(&Tensor::stack(&tasks.iter().map(|t| t.target.clone()).collect::<Vec<_>>())?, n);
        let seeds: Vec<u64> = tasks
            .iter()
            .flat_map(|t| (0..n).map(move |i| derive_seed(t.noise_seed, i as u64)))
            .collect();
        let xi = noise_batch(model.problem(), &seeds)?;
        let (loss, grads) = match policy_loss_and_gradient(policy, &policy.params, model, &u0, &target, &xi, alpha) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch: it, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: it, loss });
        }
        losses.push(loss);
        adam.config.lr = cfg.lr_at(it);
        adam.step(&mut policy.params, &grads)?;
    }
    Ok(PolicyTrainReport {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}
