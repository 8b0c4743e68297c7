//! Open-loop control by optimizing the forcing through a frozen surrogate, and
//! closed-loop control by an operator-encoded policy trained on the tracking
//! objective.

mod closed_loop;
mod open_loop;
mod policy;
mod train;

pub use closed_loop::{replay, run_closed_loop, run_open_loop, ControlEvent, ControlLoopResult};
pub use open_loop::{open_loop_objective, open_loop_optimize, sweep_open_loop_lr, OpenLoopConfig, OpenLoopPlan};
pub use policy::{encode_state, policy_act, PolicyConfig, PolicyNet, SECTION};
pub use train::{policy_loss_and_gradient, train_policy, PolicyTrainConfig, PolicyTrainReport};

use crate::bench::l2_weight;
use crate::error::Result;
use crate::ndtensor::{Tape, Tensor, Var};
use crate::solver::SpdeProblem;
use crate::surrogate::Dynamics;

/// Per-sample tracking and forcing norms of one controlled rollout.
pub(crate) struct Objective<'t> {
    /// `‖ũ − u_T‖_{L²((0,T]×D)}`, `[B]`.
    pub track: Var<'t>,
    /// `‖f‖_{L²([0,T]×D)}`, `[B]`.
    pub forcing: Var<'t>,
}

impl<'t> Objective<'t> {
    /// `track + α·forcing` per sample, `[B]`.
    pub fn per_sample(&self, alpha: f64) -> Result<Var<'t>> {
        self.track.add(self.forcing.scale(alpha)?)
    }
}

/// Rolls `model` forward from `u0` (`[B, spatial]`) over every coarse
/// interval, taking the forcing of interval `k` from `act(k, ũ_k)`.
///
/// `xi` is unscaled noise `[B, fine steps, spatial]`; the model receives `σ·ξ`.
pub(crate) fn controlled_rollout<'t>(
    model: &dyn Dynamics,
    tape: &'t Tape,
    u0: Var<'t>,
    target: Var<'t>,
    xi: &Tensor,
    mut act: impl FnMut(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<Objective<'t>> {
    let problem = model.problem();
    let g = &problem.grid;
    let (steps, sub) = (g.frames - 1, g.substeps());
    let b = u0.shape()[0];
    let sigma = problem.sigma;
    let mut u = u0;
    let mut gaps = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    for k in 0..steps {
        let f = act(k, u)?;
        let xk = crate::surrogate::select_rows(xi, g.fine_steps, k * sub, sub).scale(sigma);
        let out = model.transition(tape, u, f, tape.constant(xk), &vec![k as f64 * g.dt(); b])?;
        u = out.next;
        gaps.push(u.sub(target)?);
        actions.push(f);
    }
    let w = l2_weight(problem);
    Ok(Objective {
        track: tape.concat(&gaps, 1)?.norm_per_sample()?.scale(w)?,
        forcing: tape.concat(&actions, 1)?.norm_per_sample()?.scale(w)?,
    })
}

/// Unscaled noise realizations, `[seeds, fine steps, spatial]`.
pub fn noise_batch(problem: &SpdeProblem, seeds: &[u64]) -> Result<Tensor> {
    use rayon::prelude::*;
    let fields = seeds.par_iter().map(|&s| problem.noise(s)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&fields)
}

/// Repeats every row of the leading axis `n` times.
pub(crate) fn repeat_rows(x: &Tensor, n: usize) -> Tensor {
    let s = x.stride0();
    let mut data = Vec::with_capacity(x.len() * n);
    for row in x.data().chunks(s) {
        for _ in 0..n {
            data.extend_from_slice(row);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= n;
    Tensor::new(shape, data).expect("sized above")
}
