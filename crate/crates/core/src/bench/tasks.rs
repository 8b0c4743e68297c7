//! Tracking tasks and their scores.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ndtensor::Tensor;
use crate::noise::{derive_seed, rng, Rng};
use crate::solver::{Dataset, FieldSampler, SpdeProblem};

/// Drive the state from `u0` toward the fixed field `target` with energy weight `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingTask {
    pub u0: Tensor,
    pub target: Tensor,
    pub alpha: f64,
    /// Noise realizations per objective evaluation.
    pub samples: usize,
    /// Seed of the environment noise used when the task is run.
    pub noise_seed: u64,
    /// Index of the last frame `target` was resampled from.
    pub source: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "fifty")]
    pub count: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "fifty")]
    pub samples: usize,
    /// Standard deviation of the target jitter; draws are clipped at three deviations.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub initial: FieldSampler,
}

fn fifty() -> usize {
    50
}

fn default_alpha() -> f64 {
    0.01
}

fn default_jitter() -> f64 {
    0.02
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            count: 50,
            alpha: 0.01,
            samples: 50,
            jitter: 0.02,
            initial: FieldSampler::default(),
        }
    }
}

/// Draws `u0` from the initial-condition sampler and the target from the
/// empirical last-frame distribution of a dataset.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    problem: SpdeProblem,
    config: TaskConfig,
    last_frames: Vec<Tensor>,
}

impl TaskSampler {
    pub fn new(data: &Dataset, config: &TaskConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("task sampler needs a nonempty dataset"));
        }
        if !(config.alpha >= 0.0 && config.jitter >= 0.0) || config.samples == 0 {
            return Err(invalid("alpha and jitter must be non-negative, samples positive"));
        }
        let k = data.problem().grid.frames - 1;
        Ok(Self {
            problem: data.problem().clone(),
            config: config.clone(),
            last_frames: data.trajectories.iter().map(|t| t.frame(k)).collect(),
        })
    }

    pub fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn last_frames(&self) -> &[Tensor] {
        &self.last_frames
    }

    pub fn sample(&self, r: &mut Rng, noise_seed: u64) -> TrackingTask {
        let g = &self.problem.grid;
        let u0 = self.config.initial.sample(g, r);
        let source = r.random_range(0..self.last_frames.len());
        let j = self.config.jitter;
        let mut target = self.last_frames[source].clone();
        for v in target.data_mut() {
            let z: f64 = StandardNormal.sample(r);
            *v += j * z.clamp(-3.0, 3.0);
        }
        g.pin_boundary(target.data_mut());
        TrackingTask {
            u0,
            target,
            alpha: self.config.alpha,
            samples: self.config.samples,
            noise_seed,
            source,
        }
    }

    /// `count` tasks; task `i` uses its own derived stream.
    pub fn tasks(&self, count: usize, seed: u64) -> Vec<TrackingTask> {
        (0..count)
            .map(|i| {
                let s = derive_seed(seed, i as u64);
                self.sample(&mut rng(derive_seed(s, 0)), derive_seed(s, 1))
            })
            .collect()
    }
}

/// `config.count` tasks built from `data`.
pub fn make_tasks(data: &Dataset, config: &TaskConfig, seed: u64) -> Result<Vec<TrackingTask>> {
    Ok(TaskSampler::new(data, config)?.tasks(config.count, seed))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub e: f64,
    pub track: f64,
    pub energy: f64,
}

/// `‖·‖_{L²}` weight of one grid value on one coarse interval.
pub fn l2_weight(problem: &SpdeProblem) -> f64 {
    (problem.grid.dt() * problem.grid.cell_volume()).sqrt()
}

/// Tracking error of frames `1..K` of `u` (`[K, spatial]`) and the energy of
/// every forcing slice `f` (`[K − 1, spatial]`).
pub fn score_fields(u: &Tensor, f: &Tensor, target: &Tensor, alpha: f64, dt: f64, cell: f64) -> Result<TaskMetrics> {
    let p = target.len();
    if p == 0 || u.len() % p != 0 || f.len() % p != 0 || u.len() < p || u.len() / p != f.len() / p + 1 {
        return Err(Error::ShapeMismatch {
            op: "score",
            lhs: u.shape().to_vec(),
            rhs: f.shape().to_vec(),
        });
    }
    let track: f64 = u.data()[p..]
        .chunks(p)
        .flat_map(|frame| frame.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    let energy: f64 = f.data().iter().map(|v| v * v).sum();
    let track = (track * dt * cell).sqrt();
    let energy = alpha * (energy * dt * cell).sqrt();
    Ok(TaskMetrics {
        e: track + energy,
        track,
        energy,
    })
}

pub fn score(problem: &SpdeProblem, u: &Tensor, f: &Tensor, task: &TrackingTask) -> Result<TaskMetrics> {
    if u.shape() != problem.trajectory_shape().as_slice() || f.shape() != problem.forcing_shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op: "score",
            lhs: u.shape().to_vec(),
            rhs: problem.trajectory_shape(),
        });
    }
    let g = &problem.grid;
    score_fields(u, f, &task.target, task.alpha, g.dt(), g.cell_volume())
}

/// Per-task metrics of one method and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub e: f64,
    pub track: f64,
    pub energy: f64,
    pub tasks: Vec<TaskMetrics>,
    /// Mean wall time per task.
    pub seconds: f64,
    /// Mean feature-evaluation time per task.
    pub feature_seconds: f64,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, tasks: Vec<TaskMetrics>, seconds: f64, feature_seconds: f64) -> Self {
        let n = tasks.len().max(1) as f64;
        let track = tasks.iter().map(|t| t.track).sum::<f64>() / n;
        let energy = tasks.iter().map(|t| t.energy).sum::<f64>() / n;
        Self {
            method: method.into(),
            e: track + energy,
            track,
            energy,
            tasks,
            seconds,
            feature_seconds,
        }
    }
}
