//! Reference solvers: 1-D stochastic reaction-diffusion with multiplicative
//! noise and 2-D stochastic Navier–Stokes in vorticity form, plus random
//! initial/forcing samplers and dataset generation.
//!
//! Forcing is piecewise constant over coarse intervals. Coarse frame `k` is the
//! state after `k·substeps` fine steps; fine step `j` uses forcing slice
//! `j / substeps` and noise slice `j`.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::grid::{Boundary, DiscreteOperator, Grid, Propagator};
use crate::ndtensor::fft::{wavenumber, FftNd};
use crate::ndtensor::Tensor;
use crate::noise::{self, derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    ReactionDiffusion,
    NavierStokes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCoupling {
    /// `σ·u·ξ`
    Multiplicative,
    /// `σ·ξ`
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeProblem {
    pub kind: ProblemKind,
    pub nu: f64,
    pub sigma: f64,
    pub grid: Grid,
    /// RD: `3u − u³`; NS: advection `−u·∇w`.
    #[serde(default = "yes")]
    pub nonlinear: bool,
    pub coupling: NoiseCoupling,
    #[serde(default = "three")]
    pub noise_window: usize,
}

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

impl SpdeProblem {
    /// ν = 0.1, σ = 0.05, multiplicative noise, 64-point Dirichlet grid.
    pub fn reaction_diffusion() -> Self {
        Self {
            kind: ProblemKind::ReactionDiffusion,
            nu: 0.1,
            sigma: 0.05,
            grid: Grid::reaction_diffusion(),
            nonlinear: true,
            coupling: NoiseCoupling::Multiplicative,
            noise_window: 3,
        }
    }

    /// ν = 0.02, σ = 1e-5, additive noise, 40×40 periodic grid.
    pub fn navier_stokes() -> Self {
        Self {
            kind: ProblemKind::NavierStokes,
            nu: 0.02,
            sigma: 1e-5,
            grid: Grid::navier_stokes(),
            nonlinear: true,
            coupling: NoiseCoupling::Additive,
            noise_window: 3,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let expect = match self.kind {
            ProblemKind::ReactionDiffusion => (1, Boundary::DirichletZero),
            ProblemKind::NavierStokes => (2, Boundary::Periodic),
        };
        if (self.grid.dim, self.grid.boundary) != expect {
            return Err(invalid(format!(
                "{:?} needs a {}-D {:?} grid",
                self.kind, expect.0, expect.1
            )));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid("ν and σ must be finite and non-negative"));
        }
        if self.noise_window % 2 == 0 {
            return Err(invalid("noise window must be odd"));
        }
        Ok(())
    }

    /// `ν·Δ` on the problem grid.
    pub fn operator(&self) -> Result<DiscreteOperator> {
        DiscreteOperator::for_grid(&self.grid, self.nu)
    }

    /// Semi-implicit propagator on the fine time grid.
    pub fn propagator(&self) -> Result<Propagator> {
        Propagator::new(&self.operator()?, self.grid.dt_fine())
    }

    /// Smoothed noise realization for `seed` (unscaled).
    pub fn noise(&self, seed: u64) -> Result<Tensor> {
        let raw = noise::sample_white_noise(&self.grid, seed);
        noise::smooth_fields(&raw.values, &self.grid, self.noise_window)
    }

    pub fn state_shape(&self) -> Vec<usize> {
        self.grid.spatial_shape()
    }

    /// `[K, spatial...]`
    pub fn trajectory_shape(&self) -> Vec<usize> {
        let mut s = vec![self.grid.frames];
        s.extend(self.state_shape());
        s
    }

    /// `[K − 1, spatial...]`
    pub fn forcing_shape(&self) -> Vec<usize> {
        let mut s = vec![self.grid.frames - 1];
        s.extend(self.state_shape());
        s
    }

    /// `[fine steps, spatial...]`
    pub fn noise_shape(&self) -> Vec<usize> {
        let mut s = vec![self.grid.fine_steps];
        s.extend(self.state_shape());
        s
    }
}

struct NsOps {
    fft: FftNd,
    /// `2π·k_x`, `2π·k_y` per bin (Nyquist zeroed)
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// `1 / (4π²|k|²)`, zero at the mean mode
    inv_lap: Vec<f64>,
    dealias: Vec<bool>,
    /// Crank–Nicolson factors per bin
    explicit: Vec<f64>,
    implicit: Vec<f64>,
}

impl NsOps {
    fn new(problem: &SpdeProblem) -> Self {
        let g = &problem.grid;
        let n = g.n;
        let fft = FftNd::new(&g.spatial_shape());
        let total = g.points();
        let cut = n as f64 / 3.0;
        let dt = g.dt_fine();
        let mut ops = Self {
            fft,
            kx: vec![0.0; total],
            ky: vec![0.0; total],
            inv_lap: vec![0.0; total],
            dealias: vec![false; total],
            explicit: vec![0.0; total],
            implicit: vec![0.0; total],
        };
        for idx in 0..total {
            let (a, b) = (wavenumber(idx / n, n), wavenumber(idx % n, n));
            let nyq = |k: usize| n % 2 == 0 && k == n / 2;
            ops.kx[idx] = if nyq(idx / n) { 0.0 } else { 2.0 * PI * a as f64 };
            ops.ky[idx] = if nyq(idx % n) { 0.0 } else { 2.0 * PI * b as f64 };
            let k2 = (2.0 * PI).powi(2) * (a * a + b * b) as f64;
            ops.inv_lap[idx] = if k2 > 0.0 { 1.0 / k2 } else { 0.0 };
            ops.dealias[idx] = (a.abs() as f64) < cut && (b.abs() as f64) < cut;
            let lam = -problem.nu * k2;
            ops.explicit[idx] = 1.0 + 0.5 * dt * lam;
            ops.implicit[idx] = 1.0 / (1.0 - 0.5 * dt * lam);
        }
        ops
    }

    fn velocity_from_spectrum(&self, w_hat: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        // ψ̂ = ŵ / (4π²|k|²), u = (∂_y ψ, −∂_x ψ)
        let ux: Vec<Complex64> = (0..w_hat.len())
            .map(|b| i * self.ky[b] * w_hat[b] * self.inv_lap[b])
            .collect();
        let uy: Vec<Complex64> = (0..w_hat.len())
            .map(|b| -i * self.kx[b] * w_hat[b] * self.inv_lap[b])
            .collect();
        (self.fft.inverse_real(ux), self.fft.inverse_real(uy))
    }

    /// Dealiased spectrum of `−u·∇w` with the mean mode removed.
    fn advection(&self, w_hat: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let (ux, uy) = self.velocity_from_spectrum(w_hat);
        let wx = self
            .fft
            .inverse_real((0..w_hat.len()).map(|b| i * self.kx[b] * w_hat[b]).collect());
        let wy = self
            .fft
            .inverse_real((0..w_hat.len()).map(|b| i * self.ky[b] * w_hat[b]).collect());
        let prod: Vec<f64> = (0..ux.len()).map(|p| -(ux[p] * wx[p] + uy[p] * wy[p])).collect();
        let mut spec = self.fft.forward_real(&prod);
        for (b, z) in spec.iter_mut().enumerate() {
            if !self.dealias[b] {
                *z = Complex64::new(0.0, 0.0);
            }
        }
        spec[0] = Complex64::new(0.0, 0.0);
        spec
    }
}

/// Reusable fine-step integrator for one problem.
pub struct Stepper {
    problem: SpdeProblem,
    prop: Option<Propagator>,
    ns: Option<NsOps>,
}

impl std::fmt::Debug for Stepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stepper").field("problem", &self.problem).finish()
    }
}

impl Stepper {
    pub fn new(problem: &SpdeProblem) -> Result<Self> {
        problem.validate()?;
        let (prop, ns) = match problem.kind {
            ProblemKind::ReactionDiffusion => (Some(problem.propagator()?), None),
            ProblemKind::NavierStokes => (None, Some(NsOps::new(problem))),
        };
        Ok(Self {
            problem: problem.clone(),
            prop,
            ns,
        })
    }

    pub fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    /// One fine step in place. `xi` is the unscaled noise slice.
    pub fn step(&self, u: &mut [f64], f: &[f64], xi: &[f64]) {
        let p = &self.problem;
        let dt = p.grid.dt_fine();
        match (&self.prop, &self.ns) {
            (Some(prop), _) => {
                for ((v, &fv), &x) in u.iter_mut().zip(f).zip(xi) {
                    let reaction = if p.nonlinear { 3.0 * *v - *v * *v * *v } else { 0.0 };
                    let coupling = match p.coupling {
                        NoiseCoupling::Multiplicative => *v,
                        NoiseCoupling::Additive => 1.0,
                    };
                    *v += dt * (reaction + fv + p.sigma * coupling * x);
                }
                prop.solve_slice(u);
                p.grid.pin_boundary(u);
            }
            (None, Some(ns)) => {
                let w_hat = ns.fft.forward_real(u);
                let adv = if p.nonlinear {
                    ns.advection(&w_hat)
                } else {
                    vec![Complex64::new(0.0, 0.0); u.len()]
                };
                let src: Vec<f64> = f
                    .iter()
                    .zip(xi)
                    .zip(u.iter())
                    .map(|((&fv, &x), &w)| {
                        let c = match p.coupling {
                            NoiseCoupling::Multiplicative => w,
                            NoiseCoupling::Additive => 1.0,
                        };
                        fv + p.sigma * c * x
                    })
                    .collect();
                let src_hat = ns.fft.forward_real(&src);
                let next: Vec<Complex64> = (0..u.len())
                    .map(|b| (ns.explicit[b] * w_hat[b] + dt * (adv[b] + src_hat[b])) * ns.implicit[b])
                    .collect();
                u.copy_from_slice(&ns.fft.inverse_real(next));
            }
            _ => unreachable!(),
        }
    }

    /// Advances one coarse interval: `substeps` fine steps with forcing slice
    /// `f` held constant and noise rows `xi` (`[substeps, spatial]` flat).
    pub fn advance(&self, u: &mut [f64], f: &[f64], xi: &[f64], first_step: usize) -> Result<()> {
        let p = u.len();
        for (s, x) in xi.chunks(p).enumerate() {
            self.step(u, f, x);
            check_state(u, first_step + s)?;
        }
        Ok(())
    }
}

fn check_state(u: &[f64], step: usize) -> Result<()> {
    let bad = u.iter().position(|v| !v.is_finite() || v.abs() > 1e8);
    match bad {
        None => Ok(()),
        Some(i) => Err(Error::BlowUp {
            step,
            detail: format!("state[{i}] = {}", u[i]),
        }),
    }
}

/// One semi-implicit reaction-diffusion step.
pub fn step_rd(problem: &SpdeProblem, u: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
    if problem.kind != ProblemKind::ReactionDiffusion {
        return Err(invalid("step_rd on a non reaction-diffusion problem"));
    }
    step_with(problem, u, f, xi)
}

/// One pseudo-spectral vorticity step.
pub fn step_ns(problem: &SpdeProblem, w: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
    if problem.kind != ProblemKind::NavierStokes {
        return Err(invalid("step_ns on a non Navier-Stokes problem"));
    }
    step_with(problem, w, f, xi)
}

fn step_with(problem: &SpdeProblem, u: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
    let shape = problem.state_shape();
    for t in [u, f, xi] {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "solver_step",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
    }
    let st = Stepper::new(problem)?;
    let mut out = u.clone();
    st.step(out.data_mut(), f.data(), xi.data());
    check_state(out.data(), 0)?;
    Ok(out)
}

/// Velocity `(u_x, u_y)` recovered from vorticity through the streamfunction.
pub fn ns_velocity(problem: &SpdeProblem, w: &Tensor) -> (Tensor, Tensor) {
    let ns = NsOps::new(problem);
    let (ux, uy) = ns.velocity_from_spectrum(&ns.fft.forward_real(w.data()));
    let s = problem.state_shape();
    (Tensor::from_parts(s.clone(), ux), Tensor::from_parts(s, uy))
}

/// Spectral divergence of a velocity field.
pub fn ns_divergence(problem: &SpdeProblem, ux: &Tensor, uy: &Tensor) -> Tensor {
    let ns = NsOps::new(problem);
    let i = Complex64::new(0.0, 1.0);
    let a = ns.fft.forward_real(ux.data());
    let b = ns.fft.forward_real(uy.data());
    let d = (0..a.len()).map(|k| i * ns.kx[k] * a[k] + i * ns.ky[k] * b[k]).collect();
    Tensor::from_parts(problem.state_shape(), ns.fft.inverse_real(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[K, spatial...]`
    pub u: Tensor,
    /// `[K − 1, spatial...]`
    pub f: Tensor,
    /// Smoothed unscaled noise `[fine steps, spatial...]` when retained.
    pub xi: Option<Tensor>,
    pub noise_seed: u64,
}

impl Trajectory {
    pub fn frame(&self, k: usize) -> Tensor {
        self.u.index0(k)
    }

    /// Noise rows of coarse interval `k`, `[substeps, spatial...]`.
    pub fn noise_interval(&self, problem: &SpdeProblem, k: usize) -> Result<Tensor> {
        let xi = match &self.xi {
            Some(x) => x.clone(),
            None => problem.noise(self.noise_seed)?,
        };
        Ok(interval_rows(&xi, problem, k))
    }
}

pub(crate) fn interval_rows(xi: &Tensor, problem: &SpdeProblem, k: usize) -> Tensor {
    let sub = problem.grid.substeps();
    let p = problem.grid.points();
    let mut shape = vec![sub];
    shape.extend(problem.state_shape());
    Tensor::from_parts(shape, xi.data()[k * sub * p..(k + 1) * sub * p].to_vec())
}

fn check_inputs(problem: &SpdeProblem, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<()> {
    let checks = [
        (u0.shape(), problem.state_shape()),
        (f.shape(), problem.forcing_shape()),
        (xi.shape(), problem.noise_shape()),
    ];
    for (got, want) in checks {
        if got != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "simulate",
                lhs: got.to_vec(),
                rhs: want,
            });
        }
    }
    Ok(())
}

/// Integrates with an explicit noise field (unscaled, already smoothed).
pub fn simulate_with_noise(problem: &SpdeProblem, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
    check_inputs(problem, u0, f, xi)?;
    let st = Stepper::new(problem)?;
    let g = &problem.grid;
    let (p, sub) = (g.points(), g.substeps());
    let mut u = u0.data().to_vec();
    g.pin_boundary(&mut u);
    let mut frames = Vec::with_capacity(g.frames * p);
    frames.extend_from_slice(&u);
    for k in 0..g.frames - 1 {
        let rows = &xi.data()[k * sub * p..(k + 1) * sub * p];
        st.advance(&mut u, &f.data()[k * p..(k + 1) * p], rows, k * sub)?;
        frames.extend_from_slice(&u);
    }
    Ok(Tensor::from_parts(problem.trajectory_shape(), frames))
}

/// Integrates with the smoothed noise realization of `seed`.
pub fn simulate(problem: &SpdeProblem, u0: &Tensor, f: &Tensor, seed: u64) -> Result<Trajectory> {
    let xi = problem.noise(seed)?;
    let u = simulate_with_noise(problem, u0, f, &xi)?;
    Ok(Trajectory {
        u,
        f: f.clone(),
        xi: Some(xi),
        noise_seed: seed,
    })
}

/// Truncated random series with independent Gaussian coefficients of
/// standard deviation `amplitude·|k|^(−decay)`, `1 ≤ |k|∞ ≤ k_max`.
/// Dirichlet grids use the sine basis, periodic grids Fourier modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSampler {
    pub k_max: usize,
    pub amplitude: f64,
    pub decay: f64,
}

impl Default for FieldSampler {
    fn default() -> Self {
        Self {
            k_max: 8,
            amplitude: 1.0,
            decay: 2.0,
        }
    }
}

impl FieldSampler {
    pub fn sample(&self, grid: &Grid, rng: &mut Rng) -> Tensor {
        let xs = grid.axis_coords();
        let n = grid.n;
        let mut out = Tensor::zeros(&grid.spatial_shape());
        let std = |k2: f64| self.amplitude * k2.sqrt().powf(-self.decay);
        match (grid.dim, grid.boundary) {
            (1, Boundary::DirichletZero) => {
                let z = noise::standard_normals(rng, self.k_max);
                for k in 1..=self.k_max {
                    let c = z[k - 1] * std((k * k) as f64);
                    for (v, &x) in out.data_mut().iter_mut().zip(&xs) {
                        *v += c * (k as f64 * PI * x / grid.length).sin();
                    }
                }
                grid.pin_boundary(out.data_mut());
            }
            (1, _) => {
                let z = noise::standard_normals(rng, 2 * self.k_max);
                for k in 1..=self.k_max {
                    let (a, b) = (z[2 * k - 2], z[2 * k - 1]);
                    let s = std((k * k) as f64);
                    for (v, &x) in out.data_mut().iter_mut().zip(&xs) {
                        let ph = 2.0 * PI * k as f64 * x / grid.length;
                        *v += s * (a * ph.cos() + b * ph.sin());
                    }
                }
            }
            _ => {
                let km = self.k_max as i64;
                // half-plane: k0 > 0, or k0 == 0 and k1 > 0
                let modes: Vec<(i64, i64)> = (0..=km)
                    .flat_map(|a| (-km..=km).map(move |b| (a, b)))
                    .filter(|&(a, b)| a > 0 || b > 0)
                    .collect();
                let z = noise::standard_normals(rng, 2 * modes.len());
                let d = out.data_mut();
                for (m, &(a, b)) in modes.iter().enumerate() {
                    let s = std((a * a + b * b) as f64);
                    let (ca, cb) = (z[2 * m] * s, z[2 * m + 1] * s);
                    for i in 0..n {
                        for j in 0..n {
                            let ph = 2.0 * PI * (a as f64 * xs[i] + b as f64 * xs[j]) / grid.length;
                            d[i * n + j] += ca * ph.cos() + cb * ph.sin();
                        }
                    }
                }
            }
        }
        out
    }

    /// Pointwise variance of the sampled field at `x` (1-D Dirichlet).
    pub fn variance_at(&self, x: f64, length: f64) -> f64 {
        (1..=self.k_max)
            .map(|k| {
                let s = self.amplitude * (k as f64).powf(-self.decay);
                (s * (k as f64 * PI * x / length).sin()).powi(2)
            })
            .sum()
    }
}

/// Forcing slices `f_k = base + time_variation·w_k` with `base`, `w_k`
/// independent draws from `field`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSampler {
    pub field: FieldSampler,
    pub time_variation: f64,
}

impl Default for ForcingSampler {
    fn default() -> Self {
        Self {
            field: FieldSampler {
                amplitude: 2.0,
                ..FieldSampler::default()
            },
            time_variation: 0.5,
        }
    }
}

impl ForcingSampler {
    pub fn sample(&self, grid: &Grid, rng: &mut Rng) -> Tensor {
        let base = self.field.sample(grid, rng);
        let slices: Vec<Tensor> = (0..grid.frames - 1)
            .map(|_| {
                let mut w = self.field.sample(grid, rng);
                w.data_mut()
                    .iter_mut()
                    .zip(base.data())
                    .for_each(|(v, b)| *v = b + self.time_variation * *v);
                w
            })
            .collect();
        Tensor::stack(&slices).expect("equal slice shapes")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Samplers {
    #[serde(default)]
    pub initial: FieldSampler,
    #[serde(default)]
    pub forcing: ForcingSampler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub problem: SpdeProblem,
    #[serde(default)]
    pub samplers: Samplers,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
    /// Keep the noise fields alongside the states.
    #[serde(default = "yes")]
    pub keep_noise: bool,
}

impl DatasetConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable config");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn problem(&self) -> &SpdeProblem {
        &self.config.problem
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Trajectory seed `i`: initial/forcing draws use `derive_seed(s, 0)`,
    /// noise uses `derive_seed(s, 1)`.
    pub fn trajectory_seed(seed: u64, index: usize) -> u64 {
        derive_seed(seed, index as u64)
    }
}

/// Samples `(u₀, f)` for trajectory seed `s`.
pub fn sample_inputs(problem: &SpdeProblem, samplers: &Samplers, s: u64) -> (Tensor, Tensor) {
    let mut r = noise::rng(derive_seed(s, 0));
    let u0 = samplers.initial.sample(&problem.grid, &mut r);
    let f = samplers.forcing.sample(&problem.grid, &mut r);
    (u0, f)
}

/// Generates `config.count` trajectories in parallel; output is independent of
/// the thread count.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.count == 0 {
        return Err(invalid("dataset count must be at least 1"));
    }
    config.problem.validate()?;
    let trajectories = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let s = Dataset::trajectory_seed(config.seed, i);
            let (u0, f) = sample_inputs(&config.problem, &config.samplers, s);
            let mut t = simulate(&config.problem, &u0, &f, derive_seed(s, 1))?;
            if !config.keep_noise {
                t.xi = None;
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        trajectories,
    })
}
