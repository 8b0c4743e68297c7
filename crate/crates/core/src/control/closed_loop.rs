//! Running controllers against the reference solver.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PolicyNet;
use crate::bench::TrackingTask;
use crate::error::{invalid, Result};
use crate::ndtensor::Tensor;
use crate::solver::{simulate_with_noise, SpdeProblem, Stepper};

/// One record of the JSON-lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub frame: usize,
    pub t: f64,
    /// First 16 hex digits of the SHA-256 of the state's little-endian bytes.
    pub state_hash: String,
    /// `‖f_k‖` on the grid; absent at the last frame.
    pub action_norm: Option<f64>,
    /// `‖u_k − u*‖_{L²(D)}`.
    pub tracking_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlLoopResult {
    /// Environment states `[K, spatial]`.
    pub trajectory: Tensor,
    /// Forcing applied on each interval, `[K − 1, spatial]`.
    pub forcing: Tensor,
    /// Controller time per interval.
    pub action_seconds: Vec<f64>,
    /// Environment time per interval.
    pub step_seconds: Vec<f64>,
    pub noise_seed: u64,
    pub events: Vec<ControlEvent>,
}

impl ControlLoopResult {
    pub fn event_log(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable event") + "\n")
            .collect()
    }

    /// Total controller time.
    pub fn controller_seconds(&self) -> f64 {
        self.action_seconds.iter().sum()
    }
}

fn state_hash(u: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in u {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn events(problem: &SpdeProblem, u: &Tensor, f: &Tensor, target: &Tensor) -> Vec<ControlEvent> {
    let g = &problem.grid;
    let p = g.points();
    let cell = g.cell_volume();
    (0..g.frames)
        .map(|k| {
            let frame = &u.data()[k * p..(k + 1) * p];
            let err: f64 = frame.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            ControlEvent {
                frame: k,
                t: k as f64 * g.dt(),
                state_hash: state_hash(frame),
                action_norm: (k + 1 < g.frames)
                    .then(|| (f.data()[k * p..(k + 1) * p].iter().map(|v| v * v).sum::<f64>() * cell).sqrt()),
                tracking_error: (err * cell).sqrt(),
            }
        })
        .collect()
}

/// Drives `env` from `task.u0` with the noise of `task.noise_seed`, choosing
/// each interval's forcing with `policy` from the observed state.
pub fn run_closed_loop(policy: &PolicyNet, env: &SpdeProblem, task: &TrackingTask) -> Result<ControlLoopResult> {
    if policy.problem().grid != env.grid {
        return Err(invalid("policy and environment grids differ"));
    }
    let g = &env.grid;
    let (p, sub) = (g.points(), g.substeps());
    let xi = env.noise(task.noise_seed)?;
    let st = Stepper::new(env)?;
    let mut u = task.u0.clone();
    g.pin_boundary(u.data_mut());
    let mut frames = u.data().to_vec();
    let mut forcing = Vec::with_capacity((g.frames - 1) * p);
    let (mut action_seconds, mut step_seconds) = (vec![], vec![]);
    for k in 0..g.frames - 1 {
        let clock = Instant::now();
        let f = policy.act(&u, &task.target, k as f64 * g.dt())?;
        action_seconds.push(clock.elapsed().as_secs_f64());
        let clock = Instant::now();
        let rows = &xi.data()[k * sub * p..(k + 1) * sub * p];
        st.advance(u.data_mut(), f.data(), rows, k * sub)?;
        step_seconds.push(clock.elapsed().as_secs_f64());
        frames.extend_from_slice(u.data());
        forcing.extend_from_slice(f.data());
    }
    let trajectory = Tensor::new(env.trajectory_shape(), frames)?;
    let forcing = Tensor::new(env.forcing_shape(), forcing)?;
    Ok(ControlLoopResult {
        events: events(env, &trajectory, &forcing, &task.target),
        trajectory,
        forcing,
        action_seconds,
        step_seconds,
        noise_seed: task.noise_seed,
    })
}

/// Applies a fixed forcing schedule to `env` under the task's noise.
pub fn run_open_loop(env: &SpdeProblem, task: &TrackingTask, forcing: &Tensor) -> Result<ControlLoopResult> {
    let clock = Instant::now();
    let trajectory = replay(env, &task.u0, forcing, task.noise_seed)?;
    let steps = env.grid.frames - 1;
    Ok(ControlLoopResult {
        events: events(env, &trajectory, forcing, &task.target),
        trajectory,
        forcing: forcing.clone(),
        action_seconds: vec![0.0; steps],
        step_seconds: vec![clock.elapsed().as_secs_f64() / steps as f64; steps],
        noise_seed: task.noise_seed,
    })
}

/// The environment trajectory for a recorded forcing and noise seed.
pub fn replay(env: &SpdeProblem, u0: &Tensor, forcing: &Tensor, noise_seed: u64) -> Result<Tensor> {
    let xi = env.noise(noise_seed)?;
    simulate_with_noise(env, u0, forcing, &xi)
}
