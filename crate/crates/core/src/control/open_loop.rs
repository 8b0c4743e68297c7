//! Forcing schedules optimized in advance through a frozen surrogate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{controlled_rollout, noise_batch, repeat_rows};
use crate::bench::TrackingTask;
use crate::error::{invalid, Error, Result};
use crate::ndtensor::{AdamConfig, AdamState, Tape, Tensor};
use crate::noise::derive_seed;
use crate::surrogate::Dynamics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpenLoopConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            lr: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopPlan {
    /// Best forcing found, `[K − 1, spatial]`.
    pub forcing: Tensor,
    /// Objective of `forcing`.
    pub objective: f64,
    /// Objective at every iterate, starting from zero forcing.
    pub history: Vec<f64>,
    /// Best objective so far after every iterate.
    pub accepted: Vec<f64>,
    /// False when no iterate beat zero forcing.
    pub improved: bool,
    pub seconds: f64,
}

/// Objective of a forcing schedule `[K − 1, spatial]` under the unscaled noise
/// batch `xi` `[N, fine steps, spatial]`, and its gradient.
pub fn open_loop_objective(
    model: &dyn Dynamics,
    task: &TrackingTask,
    xi: &Tensor,
    forcing: &Tensor,
) -> Result<(f64, Tensor)> {
    let problem = model.problem();
    let n = xi.shape()[0];
    let lift = |x: &Tensor| -> Result<Tensor> {
        let mut s = vec![1];
        s.extend(x.shape());
        Ok(repeat_rows(&x.reshape(&s)?, n))
    };
    let (u0, target) = (lift(&task.u0)?, lift(&task.target)?);
    let mut mask = vec![1.0; problem.grid.points()];
    problem.grid.pin_boundary(&mut mask);
    let state = problem.state_shape();
    let tape = Tape::new();
    let fv = tape.param(forcing.clone());
    let zeros = tape.constant(Tensor::zeros(u0.shape()));
    let maskv = tape.constant(Tensor::new(state.clone(), mask)?);
    let obj = controlled_rollout(model, &tape, tape.constant(u0), tape.constant(target), xi, |k, _| {
        // one slice broadcast over the noise samples
        zeros.add(fv.narrow(0, k, 1)?.reshape(&state)?.mul(maskv)?)
    })?;
    let loss = obj.per_sample(task.alpha)?.mean()?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), grads.wrt(fv)))
}

/// Gradient descent (Adam) on the tracking objective with the forcing as the
/// free variable, keeping the best iterate. The task's `samples` noise
/// realizations are drawn once and reused at every iterate.
pub fn open_loop_optimize(model: &dyn Dynamics, task: &TrackingTask, cfg: &OpenLoopConfig) -> Result<OpenLoopPlan> {
    if task.samples == 0 || !(cfg.lr > 0.0) {
        return Err(invalid("open loop needs noise samples and a positive lr"));
    }
    let start = Instant::now();
    let problem = model.problem();
    let seeds: Vec<u64> = (0..task.samples)
        .map(|i| derive_seed(derive_seed(cfg.seed, task.noise_seed), i as u64))
        .collect();
    let xi = noise_batch(problem, &seeds)?;
    let mut f = vec![Tensor::zeros(&problem.forcing_shape())];
    let mut adam = AdamState::new(
        &f,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut plan = OpenLoopPlan {
        forcing: f[0].clone(),
        objective: f64::INFINITY,
        history: vec![],
        accepted: vec![],
        improved: false,
        seconds: 0.0,
    };
    for it in 0..=cfg.iterations {
        let (value, grad) = match open_loop_objective(model, task, &xi, &f[0]) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) | Err(Error::BlowUp { .. }) => break,
            Err(e) => return Err(e),
        };
        plan.history.push(value);
        if value < plan.objective {
            if it > 0 {
                plan.improved = true;
            }
            plan.objective = value;
            plan.forcing = f[0].clone();
            problem.grid.pin_boundary(plan.forcing.data_mut());
        }
        plan.accepted.push(plan.objective);
        if it == cfg.iterations {
            break;
        }
        adam.step(&mut f, &[grad])?;
    }
    plan.seconds = start.elapsed().as_secs_f64();
    Ok(plan)
}

/// Mean optimized objective of `tasks` for each learning rate; returns the
/// best rate and the means in the order given.
pub fn sweep_open_loop_lr(
    model: &dyn Dynamics,
    tasks: &[TrackingTask],
    cfg: &OpenLoopConfig,
    lrs: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if lrs.is_empty() || tasks.is_empty() {
        return Err(invalid("learning-rate sweep needs rates and tasks"));
    }
    let mut means = vec![];
    for &lr in lrs {
        let c = OpenLoopConfig { lr, ..cfg.clone() };
        let mut s = 0.0;
        for t in tasks {
            s += open_loop_optimize(model, t, &c)?.objective;
        }
        means.push(s / tasks.len() as f64);
    }
    let best = (0..lrs.len()).min_by(|&a, &b| means[a].total_cmp(&means[b])).expect("nonempty");
    Ok((lrs[best], means))
}
