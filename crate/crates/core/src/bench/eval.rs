//! Evaluating controllers on tracking tasks against the reference solver.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{score, MetricsReport, TaskMetrics, TrackingTask};
use crate::control::{open_loop_optimize, replay, run_closed_loop, OpenLoopConfig, PolicyNet};
use crate::error::{invalid, Result};
use crate::ndtensor::Tensor;
use crate::noise::derive_seed;
use crate::regfeat::feature_nanos;
use crate::solver::SpdeProblem;
use crate::surrogate::Dynamics;

pub enum Controller<'a> {
    /// No forcing.
    Zero,
    /// Closed loop: one policy forward pass per interval.
    Policy(&'a PolicyNet),
    /// A schedule optimized through the surrogate before the run.
    OpenLoop {
        model: &'a dyn Dynamics,
        config: OpenLoopConfig,
    },
}

pub struct Method<'a> {
    pub name: String,
    pub controller: Controller<'a>,
}

impl<'a> Method<'a> {
    pub fn new(name: impl Into<String>, controller: Controller<'a>) -> Self {
        Self {
            name: name.into(),
            controller,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Environment noise scale.
    pub sigma: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

/// Environment noise seed of the `r`-th run of a task.
pub fn repeat_seed(task: &TrackingTask, r: usize) -> u64 {
    if r == 0 {
        task.noise_seed
    } else {
        derive_seed(task.noise_seed, r as u64)
    }
}

fn mean_metrics(runs: &[TaskMetrics]) -> TaskMetrics {
    let n = runs.len() as f64;
    let track = runs.iter().map(|m| m.track).sum::<f64>() / n;
    let energy = runs.iter().map(|m| m.energy).sum::<f64>() / n;
    TaskMetrics {
        e: track + energy,
        track,
        energy,
    }
}

/// Per-task plan of a controller: a fixed schedule or nothing, and its cost.
struct Plan {
    forcing: Option<Tensor>,
    seconds: f64,
}

fn plan(method: &Method, env: &SpdeProblem, tasks: &[TrackingTask]) -> Result<(Vec<Plan>, f64)> {
    let before = feature_nanos();
    let plans = match &method.controller {
        Controller::Zero => tasks
            .iter()
            .map(|_| {
                let clock = Instant::now();
                let f = Tensor::zeros(&env.forcing_shape());
                Ok(Plan {
                    forcing: Some(f),
                    seconds: clock.elapsed().as_secs_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Controller::Policy(_) => tasks.iter().map(|_| Plan { forcing: None, seconds: 0.0 }).collect(),
        Controller::OpenLoop { model, config } => tasks
            .par_iter()
            .map(|t| {
                let p = open_loop_optimize(*model, t, config)?;
                Ok(Plan {
                    forcing: Some(p.forcing),
                    seconds: p.seconds,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let features = (feature_nanos() - before) as f64 * 1e-9 / tasks.len() as f64;
    Ok((plans, features))
}

/// Scores every method on every task at every environment noise scale.
/// Schedules are planned once and reused across scales. Reported times are
/// per task: optimization for open loop, forward passes for policies.
pub fn evaluate_methods(
    methods: &[Method],
    env: &SpdeProblem,
    tasks: &[TrackingTask],
    sigmas: &[f64],
    repeats: usize,
) -> Result<BenchTable> {
    if tasks.is_empty() || repeats == 0 {
        return Err(invalid("evaluation needs tasks and at least one repeat"));
    }
    let mut rows = vec![];
    for m in methods {
        if let Controller::Policy(p) = m.controller {
            if p.problem().grid != env.grid {
                return Err(invalid(format!("policy of {} is on another grid", m.name)));
            }
        }
        let (plans, feature_seconds) = plan(m, env, tasks)?;
        for &sigma in sigmas {
            let envs = env.clone().with_sigma(sigma);
            let results = tasks
                .par_iter()
                .zip(&plans)
                .map(|(t, pl)| {
                    let mut runs = Vec::with_capacity(repeats);
                    let mut seconds = pl.seconds;
                    for r in 0..repeats {
                        let seed = repeat_seed(t, r);
                        let (u, f) = match (&m.controller, &pl.forcing) {
                            (Controller::Policy(p), _) => {
                                let run = run_closed_loop(p, &envs, &TrackingTask { noise_seed: seed, ..t.clone() })?;
                                seconds += run.controller_seconds() / repeats as f64;
                                (run.trajectory, run.forcing)
                            }
                            (_, Some(f)) => (replay(&envs, &t.u0, f, seed)?, f.clone()),
                            _ => unreachable!("schedules exist for non-policy controllers"),
                        };
                        runs.push(score(&envs, &u, &f, t)?);
                    }
                    Ok((mean_metrics(&runs), seconds))
                })
                .collect::<Result<Vec<_>>>()?;
            let seconds = results.iter().map(|r| r.1).sum::<f64>() / tasks.len() as f64;
            let metrics = results.into_iter().map(|r| r.0).collect();
            rows.push(BenchRow {
                sigma,
                report: MetricsReport::new(m.name.clone(), metrics, seconds, feature_seconds),
            });
        }
    }
    Ok(BenchTable { rows })
}

impl BenchTable {
    pub fn get(&self, sigma: f64, method: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.sigma == sigma && r.report.method == method)
            .map(|r| &r.report)
    }

    pub fn extend(&mut self, other: BenchTable) {
        self.rows.extend(other.rows);
    }

    /// Mean metrics per row, without timings: identical for identical runs.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("sigma,method,e,e_track,e_energy\n");
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(s, "{},{},{:.17e},{:.17e},{:.17e}", r.sigma, m.method, m.e, m.track, m.energy);
        }
        s
    }

    /// Mean controller time per task and the share spent computing features.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("sigma,method,seconds,feature_seconds\n");
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(s, "{},{},{:.6e},{:.6e}", r.sigma, m.method, m.seconds, m.feature_seconds);
        }
        s
    }

    pub fn tasks_csv(&self) -> String {
        let mut s = String::from("sigma,method,task,e,e_track,e_energy\n");
        for r in &self.rows {
            for (i, t) in r.report.tasks.iter().enumerate() {
                let _ = writeln!(s, "{},{},{i},{:.17e},{:.17e},{:.17e}", r.sigma, r.report.method, t.e, t.track, t.energy);
            }
        }
        s
    }

    /// Aligned text rendering of metrics and timings.
    pub fn text(&self) -> String {
        let w = self.rows.iter().map(|r| r.report.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!(
            "{:>6}  {:<w$}  {:>10}  {:>10}  {:>10}  {:>11}  {:>11}\n",
            "sigma", "method", "e", "e_track", "e_energy", "seconds", "features"
        );
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(
                s,
                "{:>6}  {:<w$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>11.4e}  {:>11.4e}",
                r.sigma, m.method, m.e, m.track, m.energy, m.seconds, m.feature_seconds
            );
        }
        s
    }
}
