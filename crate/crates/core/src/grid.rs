//! Space/time grids, the discretized linear operator and its semi-implicit
//! propagator `(Id − δt·L)⁻¹`.
//!
//! 1-D grids are Dirichlet: fields store every point including the two boundary
//! samples, the operator acts on the interior and boundary outputs are pinned
//! to zero. 2-D grids are periodic on `[0, 1)²` and handled spectrally.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ndtensor::fft::{wavenumber, FftNd};
use crate::ndtensor::{LinearOp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    DirichletZero,
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "unit")]
    pub length: f64,
    pub boundary: Boundary,
    /// Number of coarse frames `K` (including `t = 0`).
    pub frames: usize,
    /// Fine integration steps over the whole horizon.
    pub fine_steps: usize,
    #[serde(default = "unit")]
    pub t_final: f64,
}

fn unit() -> f64 {
    1.0
}

impl Grid {
    pub fn new(
        dim: usize,
        n: usize,
        boundary: Boundary,
        frames: usize,
        fine_steps: usize,
        t_final: f64,
    ) -> Result<Self> {
        let g = Self {
            dim,
            n,
            length: 1.0,
            boundary,
            frames,
            fine_steps,
            t_final,
        };
        g.validate()?;
        Ok(g)
    }

    /// 64 points on `[0, 1]` with zero Dirichlet data, 11 frames, 200 fine steps.
    pub fn reaction_diffusion() -> Self {
        Self::new(1, 64, Boundary::DirichletZero, 11, 200, 1.0).expect("valid default")
    }

    /// 40×40 periodic grid, 11 frames, 200 fine steps.
    pub fn navier_stokes() -> Self {
        Self::new(2, 40, Boundary::Periodic, 11, 200, 1.0).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 1 || self.dim == 2) {
            return Err(invalid(format!("grid dim must be 1 or 2, got {}", self.dim)));
        }
        if self.dim == 2 && self.boundary != Boundary::Periodic {
            return Err(invalid("2-D grids are periodic"));
        }
        let min_n = match self.boundary {
            Boundary::DirichletZero => 3,
            Boundary::Periodic => 4,
        };
        if self.n < min_n {
            return Err(invalid(format!("grid needs n >= {min_n}, got {}", self.n)));
        }
        if self.frames < 2 {
            return Err(invalid("grid needs at least two time frames"));
        }
        if self.fine_steps == 0 || self.fine_steps % (self.frames - 1) != 0 {
            return Err(invalid(format!(
                "fine steps {} must be a positive multiple of frames - 1 = {}",
                self.fine_steps,
                self.frames - 1
            )));
        }
        if !(self.t_final > 0.0 && self.length > 0.0) {
            return Err(invalid("grid extents must be positive"));
        }
        Ok(())
    }

    /// Spatial step ε.
    pub fn eps(&self) -> f64 {
        match self.boundary {
            Boundary::DirichletZero => self.length / (self.n - 1) as f64,
            Boundary::Periodic => self.length / self.n as f64,
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.eps().powi(self.dim as i32)
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        vec![self.n; self.dim]
    }

    pub fn points(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Coarse frame spacing `T / (K − 1)`.
    pub fn dt(&self) -> f64 {
        self.t_final / (self.frames - 1) as f64
    }

    pub fn dt_fine(&self) -> f64 {
        self.t_final / self.fine_steps as f64
    }

    /// Fine steps per coarse interval.
    pub fn substeps(&self) -> usize {
        self.fine_steps / (self.frames - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.frames).map(|k| k as f64 * self.dt()).collect()
    }

    /// Coordinates along one axis.
    pub fn axis_coords(&self) -> Vec<f64> {
        (0..self.n).map(|i| i as f64 * self.eps()).collect()
    }

    /// One coordinate field per spatial axis, each shaped like a state.
    pub fn coordinate_fields(&self) -> Vec<Tensor> {
        let xs = self.axis_coords();
        let shape = self.spatial_shape();
        match self.dim {
            1 => vec![Tensor::from_parts(shape, xs)],
            _ => {
                let n = self.n;
                vec![
                    Tensor::from_fn(&shape, |i| xs[i / n]),
                    Tensor::from_fn(&shape, |i| xs[i % n]),
                ]
            }
        }
    }

    /// Zeroes the boundary samples of every field in a flat batch (Dirichlet only).
    pub fn pin_boundary(&self, data: &mut [f64]) {
        if self.boundary == Boundary::DirichletZero {
            for field in data.chunks_mut(self.n) {
                field[0] = 0.0;
                field[self.n - 1] = 0.0;
            }
        }
    }

    /// Samples `f` at every grid point (x, or (x, y)).
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let xs = self.axis_coords();
        match self.dim {
            1 => Tensor::from_parts(vec![self.n], xs.iter().map(|&x| f(&[x])).collect()),
            _ => {
                let n = self.n;
                Tensor::from_fn(&[n, n], |i| f(&[xs[i / n], xs[i % n]]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorRepr {
    Dense {
        n: usize,
        matrix: Vec<f64>,
    },
    Tridiagonal {
        lower: Vec<f64>,
        diag: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Real Fourier symbol per FFT bin.
    Spectral {
        dims: Vec<usize>,
        symbol: Vec<f64>,
    },
}

/// A linear spatial operator. `embedded` operators act on the interior of
/// fields that carry one extra boundary sample on each side (Dirichlet
/// grids); their boundary outputs are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteOperator {
    pub repr: OperatorRepr,
    pub boundary: Boundary,
    embedded: bool,
}

impl DiscreteOperator {
    /// Three-point Laplacian: `−2/ε²` on the diagonal, `1/ε²` off it.
    pub fn laplacian_1d(n: usize, eps: f64) -> Result<Self> {
        if n < 3 {
            return Err(invalid(format!("laplacian_1d needs n >= 3, got {n}")));
        }
        let inv = 1.0 / (eps * eps);
        Ok(Self {
            repr: OperatorRepr::Tridiagonal {
                lower: vec![inv; n],
                diag: vec![-2.0 * inv; n],
                upper: vec![inv; n],
            },
            boundary: Boundary::DirichletZero,
            embedded: false,
        })
    }

    /// Spectral Laplacian on the periodic unit square (or unit interval when
    /// `dim == 1`): symbol `−(2π)²|k|²`.
    pub fn laplacian_spectral(n: usize, dim: usize) -> Result<Self> {
        if n < 4 {
            return Err(invalid(format!("spectral Laplacian needs n >= 4, got {n}")));
        }
        let dims = vec![n; dim];
        let total: usize = dims.iter().product();
        let symbol = (0..total)
            .map(|idx| {
                let k2: i64 = match dim {
                    1 => wavenumber(idx, n).pow(2),
                    _ => wavenumber(idx / n, n).pow(2) + wavenumber(idx % n, n).pow(2),
                };
                -(2.0 * PI).powi(2) * k2 as f64
            })
            .collect();
        Ok(Self {
            repr: OperatorRepr::Spectral { dims, symbol },
            boundary: Boundary::Periodic,
            embedded: false,
        })
    }

    pub fn laplacian_2d_spectral(n: usize) -> Result<Self> {
        Self::laplacian_spectral(n, 2)
    }

    /// `ν·Δ` discretized for `grid`, acting on whole fields.
    pub fn for_grid(grid: &Grid, nu: f64) -> Result<Self> {
        let op = match grid.boundary {
            Boundary::DirichletZero => {
                let mut op = Self::laplacian_1d(grid.n - 2, grid.eps())?;
                op.embedded = true;
                op
            }
            Boundary::Periodic => Self::laplacian_spectral(grid.n, grid.dim)?,
        };
        Ok(op.scaled(nu))
    }

    /// The zero operator on `grid`.
    pub fn zero(grid: &Grid) -> Result<Self> {
        Ok(Self::for_grid(grid, 1.0)?.scaled(0.0))
    }

    pub fn scaled(mut self, c: f64) -> Self {
        let s = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= c);
        match &mut self.repr {
            OperatorRepr::Dense { matrix, .. } => s(matrix),
            OperatorRepr::Tridiagonal { lower, diag, upper } => {
                s(lower);
                s(diag);
                s(upper);
            }
            OperatorRepr::Spectral { symbol, .. } => s(symbol),
        }
        self
    }

    /// Length of the vectors the underlying matrix acts on.
    pub fn size(&self) -> usize {
        match &self.repr {
            OperatorRepr::Dense { n, .. } => *n,
            OperatorRepr::Tridiagonal { diag, .. } => diag.len(),
            OperatorRepr::Spectral { dims, .. } => dims.iter().product(),
        }
    }

    /// Number of values in one field this operator is applied to.
    pub fn field_len(&self) -> usize {
        self.size() + if self.embedded { 2 } else { 0 }
    }

    pub fn to_dense(&self) -> Option<Vec<f64>> {
        match &self.repr {
            OperatorRepr::Dense { matrix, .. } => Some(matrix.clone()),
            OperatorRepr::Tridiagonal { lower, diag, upper } => {
                let n = diag.len();
                let mut m = vec![0.0; n * n];
                for i in 0..n {
                    m[i * n + i] = diag[i];
                    if i > 0 {
                        m[i * n + i - 1] = lower[i];
                    }
                    if i + 1 < n {
                        m[i * n + i + 1] = upper[i];
                    }
                }
                Some(m)
            }
            OperatorRepr::Spectral { .. } => None,
        }
    }

    fn apply_raw(&self, x: &[f64], transpose: bool, fft: Option<&FftNd>) -> Vec<f64> {
        match &self.repr {
            OperatorRepr::Dense { n, matrix } => (0..*n)
                .map(|i| {
                    (0..*n)
                        .map(|j| {
                            let m = if transpose { matrix[j * n + i] } else { matrix[i * n + j] };
                            m * x[j]
                        })
                        .sum()
                })
                .collect(),
            OperatorRepr::Tridiagonal { lower, diag, upper } => {
                let n = diag.len();
                let (lo, up) = if transpose {
                    // (Aᵀ)[i][i-1] = A[i-1][i] = upper[i-1]
                    (
                        (0..n).map(|i| if i > 0 { upper[i - 1] } else { 0.0 }).collect::<Vec<_>>(),
                        (0..n).map(|i| if i + 1 < n { lower[i + 1] } else { 0.0 }).collect::<Vec<_>>(),
                    )
                } else {
                    (lower.clone(), upper.clone())
                };
                (0..n)
                    .map(|i| {
                        let mut s = diag[i] * x[i];
                        if i > 0 {
                            s += lo[i] * x[i - 1];
                        }
                        if i + 1 < n {
                            s += up[i] * x[i + 1];
                        }
                        s
                    })
                    .collect()
            }
            OperatorRepr::Spectral { dims, symbol } => {
                let owned;
                let plan = match fft {
                    Some(p) => p,
                    None => {
                        owned = FftNd::new(dims);
                        &owned
                    }
                };
                let mut spec = plan.forward_real(x);
                for (z, s) in spec.iter_mut().zip(symbol) {
                    *z *= *s;
                }
                plan.inverse_real(spec)
            }
        }
    }

    fn apply_field_slice(&self, x: &[f64], transpose: bool, fft: Option<&FftNd>) -> Vec<f64> {
        if self.embedded {
            let n = x.len();
            let inner = self.apply_raw(&x[1..n - 1], transpose, fft);
            let mut out = vec![0.0; n];
            out[1..n - 1].copy_from_slice(&inner);
            out
        } else {
            self.apply_raw(x, transpose, fft)
        }
    }

    /// Applies the operator to one field.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_field_slice(x, false, None)
    }

    /// Applies the operator to every field in a batch whose trailing elements
    /// form fields of length [`Self::field_len`].
    pub fn apply_batch(&self, x: &Tensor) -> Tensor {
        let fft = self.fft_plan();
        let len = self.field_len();
        let mut out = Vec::with_capacity(x.len());
        for f in x.data().chunks(len) {
            out.extend(self.apply_field_slice(f, false, fft.as_ref()));
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    fn fft_plan(&self) -> Option<FftNd> {
        match &self.repr {
            OperatorRepr::Spectral { dims, .. } => Some(FftNd::new(dims)),
            _ => None,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self.to_dense() {
            Some(m) => {
                let n = self.size();
                (0..n).all(|i| (0..n).all(|j| m[i * n + j] == m[j * n + i]))
            }
            None => true,
        }
    }
}

/// Tape-recordable application of a [`DiscreteOperator`] over the trailing
/// spatial axes.
#[derive(Debug)]
pub struct OperatorApply {
    op: DiscreteOperator,
    fft: Option<FftNd>,
}

impl OperatorApply {
    pub fn new(op: DiscreteOperator) -> Arc<Self> {
        let fft = op.fft_plan();
        Arc::new(Self { op, fft })
    }
}

impl LinearOp for OperatorApply {
    fn name(&self) -> &'static str {
        "operator_apply"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_field_len(input, self.op.field_len(), "operator_apply")
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let len = self.op.field_len();
        let mut out = Vec::with_capacity(x.len());
        for f in x.data().chunks(len) {
            out.extend(self.op.apply_field_slice(f, false, self.fft.as_ref()));
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let len = self.op.field_len();
        let mut out = Vec::with_capacity(g.len());
        for f in g.data().chunks(len) {
            out.extend(self.op.apply_field_slice(f, true, self.fft.as_ref()));
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}

fn check_field_len(input: &[usize], len: usize, op: &'static str) -> Result<Vec<usize>> {
    let total: usize = input.iter().product();
    if total % len != 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: input.to_vec(),
            rhs: vec![len],
        });
    }
    Ok(input.to_vec())
}

#[derive(Clone, Debug)]
struct Thomas {
    lower: Vec<f64>,
    denom: Vec<f64>,
    upper_scaled: Vec<f64>,
}

impl Thomas {
    fn factor(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut denom = vec![0.0; n];
        let mut cp = vec![0.0; n];
        for i in 0..n {
            let d = if i == 0 {
                diag[0]
            } else {
                diag[i] - lower[i] * cp[i - 1]
            };
            if d.abs() < 1e-300 || !d.is_finite() {
                return Err(invalid(format!("singular tridiagonal system at row {i}")));
            }
            denom[i] = d;
            cp[i] = if i + 1 < n { upper[i] / d } else { 0.0 };
        }
        Ok(Self {
            lower: lower.to_vec(),
            denom,
            upper_scaled: cp,
        })
    }

    fn solve(&self, x: &mut [f64]) {
        let n = x.len();
        x[0] /= self.denom[0];
        for i in 1..n {
            x[i] = (x[i] - self.lower[i] * x[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.upper_scaled[i] * x[i + 1];
        }
    }
}

#[derive(Clone, Debug)]
enum PropagatorKind {
    Tridiagonal { forward: Thomas, transpose: Thomas },
    Spectral { fft: FftNd, gains: Vec<f64> },
}

/// Factorized `(Id − δt·L)⁻¹`, reusable across steps and features.
#[derive(Clone, Debug)]
pub struct Propagator {
    kind: PropagatorKind,
    embedded: bool,
    field_len: usize,
    dt: f64,
}

impl Propagator {
    pub fn new(op: &DiscreteOperator, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid(format!("propagator needs dt > 0, got {dt}")));
        }
        let kind = match &op.repr {
            OperatorRepr::Tridiagonal { lower, diag, upper } => {
                let n = diag.len();
                let l: Vec<f64> = lower.iter().map(|v| -dt * v).collect();
                let d: Vec<f64> = diag.iter().map(|v| 1.0 - dt * v).collect();
                let u: Vec<f64> = upper.iter().map(|v| -dt * v).collect();
                let lt: Vec<f64> = (0..n).map(|i| if i > 0 { u[i - 1] } else { 0.0 }).collect();
                let ut: Vec<f64> = (0..n).map(|i| if i + 1 < n { l[i + 1] } else { 0.0 }).collect();
                PropagatorKind::Tridiagonal {
                    forward: Thomas::factor(&l, &d, &u)?,
                    transpose: Thomas::factor(&lt, &d, &ut)?,
                }
            }
            OperatorRepr::Spectral { dims, symbol } => {
                let gains: Vec<f64> = symbol.iter().map(|s| 1.0 / (1.0 - dt * s)).collect();
                if gains.iter().any(|g| !g.is_finite()) {
                    return Err(invalid("singular spectral propagator"));
                }
                PropagatorKind::Spectral {
                    fft: FftNd::new(dims),
                    gains,
                }
            }
            OperatorRepr::Dense { .. } => {
                return Err(invalid("dense operators have no propagator factorization"));
            }
        };
        Ok(Self {
            kind,
            embedded: op.embedded,
            field_len: op.field_len(),
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn field_len(&self) -> usize {
        self.field_len
    }

    fn solve_slice_impl(&self, x: &mut [f64], transpose: bool) {
        match &self.kind {
            PropagatorKind::Tridiagonal { forward, transpose: tr } => {
                let t = if transpose { tr } else { forward };
                if self.embedded {
                    let n = x.len();
                    t.solve(&mut x[1..n - 1]);
                    x[0] = 0.0;
                    x[n - 1] = 0.0;
                } else {
                    t.solve(x);
                }
            }
            PropagatorKind::Spectral { fft, gains } => {
                let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.forward(&mut spec);
                for (z, g) in spec.iter_mut().zip(gains) {
                    *z *= *g;
                }
                fft.inverse(&mut spec);
                let s = 1.0 / x.len() as f64;
                for (o, z) in x.iter_mut().zip(&spec) {
                    *o = z.re * s;
                }
            }
        }
    }

    /// Solves `(Id − δt·L) y = x` in place for one field.
    pub fn solve_slice(&self, x: &mut [f64]) {
        self.solve_slice_impl(x, false);
    }

    /// Transposed solve in place for one field.
    pub fn solve_adjoint_slice(&self, x: &mut [f64]) {
        self.solve_slice_impl(x, true);
    }

    /// Solves for every field of a batch.
    pub fn solve(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for f in out.data_mut().chunks_mut(self.field_len) {
            self.solve_slice(f);
        }
        out
    }
}

/// Tape-recordable propagator solve.
#[derive(Debug)]
pub struct PropagatorSolve(pub Arc<Propagator>);

impl LinearOp for PropagatorSolve {
    fn name(&self) -> &'static str {
        "propagator_solve"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_field_len(input, self.0.field_len, "propagator_solve")
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.0.solve(x)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let mut out = Tensor::from_parts(input_shape.to_vec(), g.data().to_vec());
        for f in out.data_mut().chunks_mut(self.0.field_len) {
            self.0.solve_adjoint_slice(f);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// First spatial derivative along one axis: central differences with
/// one-sided boundary stencils on Dirichlet grids, spectral on periodic ones.
#[derive(Debug)]
pub struct Derivative {
    grid: Grid,
    axis: Axis,
    fft: Option<FftNd>,
    multipliers: Vec<f64>,
}

impl Derivative {
    pub fn new(grid: &Grid, axis: Axis) -> Result<Arc<Self>> {
        if axis == Axis::Y && grid.dim < 2 {
            return Err(invalid("y-derivative on a 1-D grid"));
        }
        let (fft, multipliers) = match grid.boundary {
            Boundary::DirichletZero => (None, vec![]),
            Boundary::Periodic => {
                let dims = grid.spatial_shape();
                let n = grid.n;
                let total = grid.points();
                let mult = (0..total)
                    .map(|idx| {
                        let bin = match (grid.dim, axis) {
                            (1, _) => idx,
                            (_, Axis::X) => idx / n,
                            (_, Axis::Y) => idx % n,
                        };
                        // the Nyquist bin has no odd counterpart
                        if n % 2 == 0 && bin == n / 2 {
                            0.0
                        } else {
                            2.0 * PI * wavenumber(bin, n) as f64 / grid.length
                        }
                    })
                    .collect();
                (Some(FftNd::new(&dims)), mult)
            }
        };
        Ok(Arc::new(Self {
            grid: grid.clone(),
            axis,
            fft,
            multipliers,
        }))
    }

    fn apply_slice(&self, x: &[f64], adjoint: bool) -> Vec<f64> {
        match &self.fft {
            None => {
                let n = x.len();
                let h = self.grid.eps();
                let mut y = vec![0.0; n];
                if !adjoint {
                    y[0] = (x[1] - x[0]) / h;
                    y[n - 1] = (x[n - 1] - x[n - 2]) / h;
                    for i in 1..n - 1 {
                        y[i] = (x[i + 1] - x[i - 1]) / (2.0 * h);
                    }
                } else {
                    // transpose of the stencil matrix above
                    y[0] -= x[0] / h;
                    y[1] += x[0] / h;
                    y[n - 1] += x[n - 1] / h;
                    y[n - 2] -= x[n - 1] / h;
                    for i in 1..n - 1 {
                        y[i + 1] += x[i] / (2.0 * h);
                        y[i - 1] -= x[i] / (2.0 * h);
                    }
                }
                y
            }
            Some(fft) => {
                let mut spec: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.forward(&mut spec);
                let sign = if adjoint { -1.0 } else { 1.0 };
                for (z, &k) in spec.iter_mut().zip(&self.multipliers) {
                    *z *= Complex64::new(0.0, sign * k);
                }
                fft.inverse(&mut spec);
                let s = 1.0 / x.len() as f64;
                spec.iter().map(|z| z.re * s).collect()
            }
        }
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }
}

impl LinearOp for Derivative {
    fn name(&self) -> &'static str {
        "spatial_derivative"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        check_field_len(input, self.grid.points(), "spatial_derivative")
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = Vec::with_capacity(x.len());
        for f in x.data().chunks(self.grid.points()) {
            out.extend(self.apply_slice(f, false));
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(g.len());
        for f in g.data().chunks(self.grid.points()) {
            out.extend(self.apply_slice(f, true));
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}
