//! Operator-encoded feedforward policy `P_γ(u_t, u_T, t) ↦ f_t`.

use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::OperatorApply;
use crate::ndtensor::{Tape, Tensor, Var};
use crate::noise::rng;
use crate::solver::SpdeProblem;
use crate::surrogate::Checkpoint;

pub const SECTION: &[u8; 4] = b"PLCY";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Multiplies the last layer's output.
    #[serde(default = "default_action_scale")]
    pub action_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_action_scale() -> f64 {
    10.0
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128, 128],
            action_scale: default_action_scale(),
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// Hidden widths 2048, 1024, 1024.
    pub fn large() -> Self {
        Self {
            hidden: vec![2048, 1024, 1024],
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) || !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            return Err(invalid("policy widths and action scale must be positive"));
        }
        Ok(())
    }
}

/// `(u_t, 𝓛u_t, u_T, 𝓛u_T, t)` for fields flattened in row-major order.
pub fn encode_state(problem: &SpdeProblem, u: &Tensor, target: &Tensor, t: f64) -> Result<Tensor> {
    let want = problem.state_shape();
    for x in [u, target] {
        if x.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode_state",
                lhs: x.shape().to_vec(),
                rhs: want,
            });
        }
    }
    let op = problem.operator()?;
    let mut out = Vec::with_capacity(4 * u.len() + 1);
    for x in [u, target] {
        out.extend_from_slice(x.data());
        out.extend(op.apply(x.data()));
    }
    out.push(t);
    Ok(Tensor::from_vec(out))
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    config: PolicyConfig,
    problem: SpdeProblem,
    op: Arc<OperatorApply>,
    pub params: Vec<Tensor>,
    /// Multiplier per encoded input entry.
    input_scale: Vec<f64>,
}

impl PolicyNet {
    pub fn new(problem: &SpdeProblem, config: PolicyConfig) -> Result<Self> {
        problem.validate()?;
        config.validate()?;
        let p = problem.grid.points();
        let mut widths = vec![4 * p + 1];
        widths.extend(&config.hidden);
        widths.push(p);
        let mut r = rng(config.seed);
        let mut params = vec![];
        let last = widths.len() - 2;
        for (i, w) in widths.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let weight = if i == last {
                Tensor::zeros(&[a, b])
            } else {
                let d = Normal::new(0.0, (2.0 / a as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&[a, b], |_| d.sample(&mut r))
            };
            params.push(weight);
            params.push(Tensor::zeros(&[b]));
        }
        Ok(Self {
            config,
            problem: problem.clone(),
            op: OperatorApply::new(problem.operator()?),
            params,
            input_scale: vec![1.0; 4 * p + 1],
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    pub fn input_width(&self) -> usize {
        self.input_scale.len()
    }

    pub fn output_width(&self) -> usize {
        self.problem.grid.points()
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn set_input_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != self.input_width() || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("policy input scales must be positive, one per input"));
        }
        self.input_scale = scale;
        Ok(())
    }

    /// Sets one multiplier per input block (`u_t`, `𝓛u_t`, `u_T`, `𝓛u_T`, `t`)
    /// to the reciprocal RMS of the block over `states` and `targets`.
    pub fn fit_input_scale(&mut self, states: &[Tensor], targets: &[Tensor]) -> Result<()> {
        if states.is_empty() || targets.is_empty() {
            return Err(invalid("no samples for the policy input scale"));
        }
        let rms = |xs: &[Tensor], op: bool| -> f64 {
            let (mut s, mut n) = (0.0, 0usize);
            for x in xs {
                let v = if op { self.op_values(x) } else { x.data().to_vec() };
                s += v.iter().map(|a| a * a).sum::<f64>();
                n += v.len();
            }
            let r = (s / n as f64).sqrt();
            if r > 1e-12 {
                1.0 / r
            } else {
                1.0
            }
        };
        let all: Vec<Tensor> = states.iter().chain(targets).cloned().collect();
        let (su, sl) = (rms(&all, false), rms(&all, true));
        let p = self.output_width();
        let mut scale = Vec::with_capacity(4 * p + 1);
        for _ in 0..2 {
            scale.extend(std::iter::repeat(su).take(p));
            scale.extend(std::iter::repeat(sl).take(p));
        }
        scale.push(1.0 / self.problem.grid.t_final);
        self.set_input_scale(scale)
    }

    fn op_values(&self, x: &Tensor) -> Vec<f64> {
        self.problem.operator().expect("validated problem").apply(x.data())
    }

    /// Encoded inputs on the tape: `u`, `target` `[B, spatial]` → `[B, 4P + 1]`.
    pub fn encode<'t>(&self, u: Var<'t>, target: Var<'t>, t: f64) -> Result<Var<'t>> {
        let tape = u.tape();
        let b = u.shape()[0];
        let p = self.output_width();
        let flat = [b, p];
        let (u, target) = (u.reshape(&flat)?, target.reshape(&flat)?);
        let parts = [
            u,
            u.linear(self.op.clone())?,
            target,
            target.linear(self.op.clone())?,
            tape.constant(Tensor::full(&[b, 1], t)),
        ];
        tape.concat(&parts, 1)
    }

    /// Actions `[B, spatial]` on the tape. Boundary values are zero on Dirichlet grids.
    pub fn forward<'t>(&self, params: &[Var<'t>], u: Var<'t>, target: Var<'t>, t: f64) -> Result<Var<'t>> {
        if params.len() != self.params.len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        let tape = u.tape();
        let b = u.shape()[0];
        let x = self.encode(u, target, t)?;
        let mut h = x.mul(tape.constant(Tensor::from_vec(self.input_scale.clone())))?;
        let layers = params.len() / 2;
        for i in 0..layers {
            h = h.matmul(params[2 * i])?.add(params[2 * i + 1])?;
            if i + 1 < layers {
                h = h.gelu()?;
            }
        }
        let g = &self.problem.grid;
        let mut mask = vec![self.config.action_scale; g.points()];
        g.pin_boundary(&mut mask);
        let mut shape = vec![b];
        shape.extend(g.spatial_shape());
        h.mul(tape.constant(Tensor::from_vec(mask)))?.reshape(&shape)
    }

    /// The action for one state (`[spatial]`) or a batch (`[B, spatial]`).
    pub fn act(&self, u: &Tensor, target: &Tensor, t: f64) -> Result<Tensor> {
        let single = u.rank() == self.problem.grid.dim;
        let lift = |x: &Tensor| -> Result<Tensor> {
            let mut s = vec![if single { 1 } else { x.shape()[0] }];
            s.extend(self.problem.state_shape());
            x.reshape(&s)
        };
        let tape = Tape::new();
        let params = tape.constants(&self.params);
        let out = self.forward(&params, tape.constant(lift(u)?), tape.constant(lift(target)?), t)?;
        let a = out.value().as_ref().clone();
        if single {
            a.reshape(&self.problem.state_shape())
        } else {
            Ok(a)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tag: *SECTION,
            header: serde_json::json!({
                "policy": self.config,
                "problem": self.problem,
                "input_scale": self.input_scale,
            }),
            tensors: self
                .params
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("layer{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" }), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_tag(SECTION)?;
        let field = |k: &str| c.header.get(k).cloned().ok_or_else(|| Error::Format(format!("header lacks {k}")));
        let config: PolicyConfig = serde_json::from_value(field("policy")?)?;
        let problem: SpdeProblem = serde_json::from_value(field("problem")?)?;
        let mut net = Self::new(&problem, config)?;
        net.set_input_scale(serde_json::from_value(field("input_scale")?)?)?;
        if c.tensors.len() != net.params.len() {
            return Err(Error::Format("policy parameter count mismatch".into()));
        }
        for (slot, (name, t)) in net.params.iter_mut().zip(&c.tensors) {
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("policy parameter {name} has shape {:?}", t.shape())));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `P_γ(u_t, u_T, t)` for a single state.
pub fn policy_act(policy: &PolicyNet, u: &Tensor, target: &Tensor, t: f64) -> Result<Tensor> {
    policy.act(u, target, t)
}
