//! Autoregressive surrogate `ũ_{t+1} = θ₁·s^out + W_θ₂(s^out, 𝒪)` with
//! reconstruction heads for `u_t` and `f_t`.
//!
//! The plain variant replaces `s^out` by the raw inputs `(u_t, f_t, ΔW_t)`
//! and `θ₁·s^out` by the skip connection `u_t`.

pub mod backbone;
pub mod checkpoint;
mod train;

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, BackboneKind};
pub use checkpoint::Checkpoint;
pub use train::{
    evaluate_model, loss_and_gradient, rollout_dataset, train, train_pairs, Augmentation, ErrorReport, LossWeights,
    PairSet, TrainConfig, TrainReport,
};

use crate::error::{invalid, Error, Result};
use crate::grid::Boundary;
use crate::ndtensor::{LinearOp, Padding, SpectralPlan, Tape, Tensor, Var};
use crate::regfeat::{FeatureSpec, RfBlock};
use crate::solver::SpdeProblem;
use backbone::ParamSpec;

pub const SECTION: &[u8; 4] = b"SURR";

/// Output channels of the backbone: residual, `û_t`, `f̂_t`.
const HEADS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Feature block; absent for the plain variant.
    #[serde(default)]
    pub features: Option<FeatureSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn rf(backbone: BackboneConfig, spec: FeatureSpec) -> Self {
        Self {
            backbone,
            features: Some(spec),
            seed: 0,
        }
    }

    pub fn plain(backbone: BackboneConfig) -> Self {
        Self {
            backbone,
            features: None,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short label such as `rf-conv` or `spectral`.
    pub fn label(&self) -> String {
        let b = match self.backbone.kind {
            BackboneKind::Conv => "conv",
            BackboneKind::Spectral => "spectral",
            BackboneKind::None => "linear",
        };
        match self.features {
            Some(_) => format!("rf-{b}"),
            None => b.to_string(),
        }
    }
}

/// `[B, rows, spatial] → [B, spatial]`: `Σ_rows x·δt`, the interval's noise increment.
#[derive(Debug)]
struct Increment {
    rows: usize,
    points: usize,
    dt: f64,
}

impl LinearOp for Increment {
    fn name(&self) -> &'static str {
        "increment"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial: usize = input.iter().skip(2).product();
        if input.len() < 3 || input[1] != self.rows || spatial != self.points {
            return Err(Error::ShapeMismatch {
                op: "increment",
                lhs: input.to_vec(),
                rhs: vec![self.rows, self.points],
            });
        }
        let mut s = vec![input[0]];
        s.extend(&input[2..]);
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let shape = self.output_shape(x.shape()).expect("validated on record");
        let p = self.points;
        let mut out = vec![0.0; x.len() / self.rows];
        for (xb, ob) in x.data().chunks(self.rows * p).zip(out.chunks_mut(p)) {
            for row in xb.chunks(p) {
                for (o, v) in ob.iter_mut().zip(row) {
                    *o += self.dt * v;
                }
            }
        }
        Tensor::new(shape, out).expect("shape matches")
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.points;
        let mut out = Vec::with_capacity(g.len() * self.rows);
        for gb in g.data().chunks(p) {
            for _ in 0..self.rows {
                out.extend(gb.iter().map(|v| self.dt * v));
            }
        }
        Tensor::new(input_shape.to_vec(), out).expect("shape matches")
    }
}

/// One transition on the tape. `next == linear + residual` by construction.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput<'t> {
    pub next: Var<'t>,
    pub u_rec: Var<'t>,
    pub f_rec: Var<'t>,
    /// `θ₁·s^out` (RF) or `u_t` (plain).
    pub linear: Var<'t>,
    /// Backbone contribution to the next state.
    pub residual: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct SurrogateModel {
    config: ModelConfig,
    problem: SpdeProblem,
    rf: Option<RfBlock>,
    plan: Option<Arc<SpectralPlan>>,
    specs: Vec<ParamSpec>,
    pub params: Vec<Tensor>,
    input_scale: Vec<f64>,
}

fn theta_shape(n: usize, dim: usize) -> Vec<usize> {
    let mut s = vec![1, n];
    s.extend(std::iter::repeat(1).take(dim));
    s
}

impl SurrogateModel {
    pub fn new(problem: &SpdeProblem, config: ModelConfig) -> Result<Self> {
        problem.validate()?;
        config.backbone.validate()?;
        let grid = &problem.grid;
        let rf = match &config.features {
            Some(spec) => Some(RfBlock::new(spec, grid, &problem.operator()?)?),
            None => None,
        };
        let raw = rf.as_ref().map_or(3, |b| b.len());
        let plan = backbone::plan(&config.backbone, &grid.spatial_shape())?;
        let mut specs = vec![];
        if rf.is_some() {
            specs.push(ParamSpec::zeros("theta", theta_shape(raw, grid.dim)));
        }
        let c_in = raw + grid.dim + 1;
        specs.extend(backbone::layout(&config.backbone, c_in, HEADS, grid.dim, plan.as_deref()));
        let mut rng = crate::noise::rng(config.seed);
        let params = specs.iter().map(|s| s.sample(&mut rng)).collect();
        Ok(Self {
            config,
            problem: problem.clone(),
            rf,
            plan,
            specs,
            params,
            input_scale: vec![1.0; raw],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    pub fn features(&self) -> Option<&RfBlock> {
        self.rf.as_ref()
    }

    pub fn label(&self) -> String {
        self.config.label()
    }

    /// Channels of the encoded input (`N_S` or 3).
    pub fn raw_channels(&self) -> usize {
        self.input_scale.len()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// The linear feature head `θ₁` (RF variant only).
    pub fn theta(&self) -> Option<&Tensor> {
        self.rf.as_ref().map(|_| &self.params[0])
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn set_input_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != self.raw_channels() || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(invalid("input scales must be positive, one per encoded channel"));
        }
        self.input_scale = scale;
        Ok(())
    }

    fn padding(&self) -> Padding {
        match self.problem.grid.boundary {
            Boundary::DirichletZero => Padding::Zero,
            Boundary::Periodic => Padding::Periodic,
        }
    }

    fn points(&self) -> usize {
        self.problem.grid.points()
    }

    fn batched(&self, b: usize, channels: usize) -> Vec<usize> {
        let mut s = vec![b, channels];
        s.extend(self.problem.grid.spatial_shape());
        s
    }

    /// Encoded inputs `[B, C_raw, spatial]`: `s^out` over one coarse interval,
    /// or `(u_t, f_t, ΔW_t)`.
    ///
    /// `u`, `f`: `[B, spatial]`; `xi`: physical noise `σ·ξ`, `[B, substeps, spatial]`.
    pub fn encode<'t>(&self, u: Var<'t>, f: Var<'t>, xi: Var<'t>) -> Result<Var<'t>> {
        let b = u.shape()[0];
        match &self.rf {
            Some(block) => {
                let f = f.reshape(&self.batched(b, 1))?;
                block.end_features(u, f, xi)
            }
            None => {
                let g = &self.problem.grid;
                let dw = xi.linear(Arc::new(Increment {
                    rows: g.substeps(),
                    points: g.points(),
                    dt: g.dt_fine(),
                }))?;
                let one = self.batched(b, 1);
                let parts = [u.reshape(&one)?, f.reshape(&one)?, dw.reshape(&one)?];
                u.tape().concat(&parts, 1)
            }
        }
    }

    /// [`encode`](Self::encode) without gradients, evaluated in parallel chunks.
    pub fn encode_values(&self, u: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let b = u.shape()[0];
        let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + CHUNK).min(b)).collect();
                let tape = Tape::new();
                let v = self.encode(
                    tape.constant(gather(u, &idx)),
                    tape.constant(gather(f, &idx)),
                    tape.constant(gather(xi, &idx)),
                )?;
                Ok(v.value().as_ref().clone())
            })
            .collect::<Result<Vec<_>>>()?;
        concat_rows(&parts)
    }

    /// Applies the head and backbone to encoded inputs.
    ///
    /// `params` are this model's parameters on `raw`'s tape; `times` holds the
    /// start time of each sample's interval.
    pub fn head<'t>(&self, params: &[Var<'t>], raw: Var<'t>, u: Var<'t>, times: &[f64]) -> Result<StepOutput<'t>> {
        let tape = raw.tape();
        let shape = raw.shape();
        let b = shape[0];
        if shape.len() != self.problem.grid.dim + 2 || shape[1] != self.raw_channels() || times.len() != b {
            return Err(Error::ShapeMismatch {
                op: "surrogate head",
                lhs: shape,
                rhs: self.batched(times.len(), self.raw_channels()),
            });
        }
        if params.len() != self.specs.len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.specs.len(), params.len())));
        }
        let state = u.shape();
        let linear = match &self.rf {
            Some(_) => raw.conv(params[0], self.padding())?.reshape(&state)?,
            None => u,
        };
        let p = self.points();
        let spatial = self.problem.grid.spatial_shape();
        let zero_heads = || tape.constant(Tensor::zeros(&state));
        if self.config.backbone.kind == BackboneKind::None {
            let residual = zero_heads();
            return Ok(StepOutput {
                next: linear.add(residual)?,
                u_rec: zero_heads(),
                f_rec: zero_heads(),
                linear,
                residual,
            });
        }
        let c = self.raw_channels();
        let inv: Vec<f64> = self.input_scale.iter().flat_map(|s| std::iter::repeat(1.0 / s).take(p)).collect();
        let mut cs = vec![c];
        cs.extend(&spatial);
        let scaled = raw.mul(tape.constant(Tensor::new(cs, inv)?))?;
        let coords = self.coordinate_channels(times);
        let x = tape.concat(&[scaled, tape.constant(coords)], 1)?;
        let offset = usize::from(self.rf.is_some());
        let out = backbone::forward(&self.config.backbone, self.plan.as_ref(), self.padding(), &params[offset..], x)?;
        let mask = self.mask(b);
        let head = |i: usize| -> Result<Var<'t>> {
            let h = out.narrow(1, i, 1)?.reshape(&state)?;
            match &mask {
                Some(m) => h.mul(tape.constant(m.clone())),
                None => Ok(h),
            }
        };
        let residual = head(0)?;
        Ok(StepOutput {
            next: linear.add(residual)?,
            u_rec: head(1)?,
            f_rec: head(2)?,
            linear,
            residual,
        })
    }

    /// Coordinates and time as constant channels: `[B, dim + 1, spatial]`.
    fn coordinate_channels(&self, times: &[f64]) -> Tensor {
        let g = &self.problem.grid;
        let coords = g.coordinate_fields();
        let p = g.points();
        let mut data = Vec::with_capacity(times.len() * (coords.len() + 1) * p);
        for &t in times {
            for c in &coords {
                data.extend_from_slice(c.data());
            }
            data.extend(std::iter::repeat(t).take(p));
        }
        Tensor::new(self.batched(times.len(), coords.len() + 1), data).expect("sized above")
    }

    /// Zero on Dirichlet boundary points, `[B, spatial]`.
    fn mask(&self, b: usize) -> Option<Tensor> {
        let g = &self.problem.grid;
        if g.boundary != Boundary::DirichletZero {
            return None;
        }
        let mut m = vec![1.0; b * g.points()];
        g.pin_boundary(&mut m);
        let mut shape = vec![b];
        shape.extend(g.spatial_shape());
        Some(Tensor::new(shape, m).expect("sized above"))
    }

    /// Full transition on the tape: encode then head.
    pub fn forward<'t>(
        &self,
        params: &[Var<'t>],
        u: Var<'t>,
        f: Var<'t>,
        xi: Var<'t>,
        times: &[f64],
    ) -> Result<StepOutput<'t>> {
        let raw = self.encode(u, f, xi)?;
        self.head(params, raw, u, times)
    }

    /// The parameters as constants on `tape` (frozen model).
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        tape.constants(&self.params)
    }

    /// One transition without gradients; see [`predict_step`].
    pub fn predict_step(&self, u: &Tensor, f: &Tensor, xi: &Tensor, t: f64) -> Result<(Tensor, Tensor, Tensor)> {
        predict_step(self, u, f, xi, t)
    }

    /// Iterated prediction; see [`rollout`].
    pub fn rollout(&self, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
        rollout(self, u0, f, xi)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = serde_json::json!({
            "model": self.config,
            "problem": self.problem,
            "feature_hash": self.config.features.as_ref().map(FeatureSpec::hash),
            "input_scale": self.input_scale,
        });
        Checkpoint {
            tag: *SECTION,
            header,
            tensors: self
                .specs
                .iter()
                .zip(&self.params)
                .map(|(s, t)| (s.name.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_tag(SECTION)?;
        let field = |k: &str| c.header.get(k).cloned().ok_or_else(|| Error::Format(format!("header lacks {k}")));
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let problem: SpdeProblem = serde_json::from_value(field("problem")?)?;
        let scale: Vec<f64> = serde_json::from_value(field("input_scale")?)?;
        let hash: Option<String> = serde_json::from_value(field("feature_hash")?)?;
        if hash != config.features.as_ref().map(FeatureSpec::hash) {
            return Err(Error::Format("feature spec hash mismatch".into()));
        }
        let mut m = Self::new(&problem, config)?;
        m.set_input_scale(scale)?;
        if c.tensors.len() != m.specs.len() {
            return Err(Error::Format("parameter count mismatch".into()));
        }
        for (i, spec) in m.specs.iter().enumerate() {
            let t = c
                .get(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!("parameter {} has shape {:?}", spec.name, t.shape())));
            }
            m.params[i] = t.clone();
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// A learned or stub transition `(u_t, f_t, σξ_t) ↦ (u_{t+1}, û_t, f̂_t)`
/// evaluated on a tape with frozen parameters.
pub trait Dynamics: Sync {
    fn problem(&self) -> &SpdeProblem;

    /// `u`, `f`: `[B, spatial]`; `xi`: `[B, substeps, spatial]`; `times`: one
    /// interval start time per sample.
    fn transition<'t>(
        &self,
        tape: &'t Tape,
        u: Var<'t>,
        f: Var<'t>,
        xi: Var<'t>,
        times: &[f64],
    ) -> Result<StepOutput<'t>>;
}

impl Dynamics for SurrogateModel {
    fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    fn transition<'t>(
        &self,
        tape: &'t Tape,
        u: Var<'t>,
        f: Var<'t>,
        xi: Var<'t>,
        times: &[f64],
    ) -> Result<StepOutput<'t>> {
        let params = self.constants(tape);
        self.forward(&params, u, f, xi, times)
    }
}

fn check_state(problem: &SpdeProblem, x: &Tensor, op: &'static str) -> Result<()> {
    let want = problem.state_shape();
    if x.rank() != want.len() + 1 || x.shape()[1..] != want[..] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: want,
        });
    }
    Ok(())
}

/// One transition without gradients. Inputs are a batch `[B, spatial]`
/// (noise `[B, substeps, spatial]`, physical scale) or a single sample
/// without the batch axis. Returns `(u_{t+1}, û_t, f̂_t)`.
pub fn predict_step(model: &dyn Dynamics, u: &Tensor, f: &Tensor, xi: &Tensor, t: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let problem = model.problem();
    let single = u.rank() == problem.grid.dim;
    let lift = |x: &Tensor| -> Result<Tensor> {
        if single {
            let mut s = vec![1];
            s.extend(x.shape());
            x.reshape(&s)
        } else {
            Ok(x.clone())
        }
    };
    let (u, f, xi) = (lift(u)?, lift(f)?, lift(xi)?);
    check_state(problem, &u, "predict_step")?;
    check_state(problem, &f, "predict_step")?;
    let b = u.shape()[0];
    let tape = Tape::new();
    let out = model.transition(&tape, tape.constant(u), tape.constant(f), tape.constant(xi), &vec![t; b])?;
    let drop = |v: Var| -> Result<Tensor> {
        let t = v.value().as_ref().clone();
        if single {
            t.reshape(&t.shape()[1..])
        } else {
            Ok(t)
        }
    };
    Ok((drop(out.next)?, drop(out.u_rec)?, drop(out.f_rec)?))
}

/// Iterated prediction. `u0`: `[B, spatial]`; `f`: `[B, K−1, spatial]`;
/// `xi`: physical noise `[B, (K−1)·substeps, spatial]`. Returns `[B, K, spatial]`
/// with frame 0 equal to `u0`.
pub fn rollout(model: &dyn Dynamics, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
    let problem = model.problem();
    check_state(problem, u0, "rollout")?;
    let b = u0.shape()[0];
    let steps = f.shape().get(1).copied().unwrap_or(0);
    let g = &problem.grid;
    let (p, sub) = (g.points(), g.substeps());
    if f.len() != b * steps * p || xi.len() != b * steps * sub * p {
        return Err(Error::ShapeMismatch {
            op: "rollout",
            lhs: f.shape().to_vec(),
            rhs: xi.shape().to_vec(),
        });
    }
    let mut frames = vec![u0.clone()];
    let mut u = u0.clone();
    for k in 0..steps {
        let fk = select_rows(f, steps, k, 1);
        let xk = select_rows(xi, steps * sub, k * sub, sub);
        let (next, _, _) = predict_step(model, &u, &fk.reshape(u.shape())?, &xk, k as f64 * g.dt())?;
        frames.push(next.clone());
        u = next;
    }
    // [K][B, S] -> [B, K, S]
    let k = frames.len();
    let mut data = Vec::with_capacity(b * k * p);
    for i in 0..b {
        for fr in &frames {
            data.extend_from_slice(&fr.data()[i * p..(i + 1) * p]);
        }
    }
    let mut shape = vec![b, k];
    shape.extend(g.spatial_shape());
    Tensor::new(shape, data)
}

/// Rows `idx` of the leading axis.
pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let s = t.stride0();
    let mut data = Vec::with_capacity(idx.len() * s);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * s..(i + 1) * s]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("sized above")
}

/// Concatenates along the leading axis.
pub(crate) fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// `[B, T, rest] → [B, len, rest]` rows `start..start + len` of axis 1.
pub(crate) fn select_rows(x: &Tensor, t: usize, start: usize, len: usize) -> Tensor {
    let b = x.shape()[0];
    let per = x.len() / (b * t);
    let mut data = Vec::with_capacity(b * len * per);
    for i in 0..b {
        let base = (i * t + start) * per;
        data.extend_from_slice(&x.data()[base..base + len * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::new(shape, data).expect("sized above")
}
