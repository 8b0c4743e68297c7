//! Seeded discretized space-time white noise and its spatial moving average.
//!
//! Draws come from ChaCha8 (a counter-based stream cipher RNG, stable across
//! platforms) seeded with the 64-bit seed expanded by `seed_from_u64`.
//! Per-trajectory seeds are derived with the splitmix64 finalizer so that
//! serial and parallel dataset generation agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::grid::{Boundary, Grid};
use crate::ndtensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer over `seed ⊕ (index + 1)·φ`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normals(rng: &mut Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| StandardNormal.sample(rng)).collect()
}

/// Noise values on the fine time grid, shape `[fine_steps, spatial...]`.
/// `values` hold the unscaled field; `scale` is applied by consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    pub values: Tensor,
    pub seed: u64,
    pub scale: f64,
    pub window: usize,
}

impl NoiseField {
    /// Values multiplied by `scale`.
    pub fn scaled_values(&self) -> Tensor {
        self.values.scale(self.scale)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Fine step `i` as a spatial field.
    pub fn slice(&self, i: usize) -> Tensor {
        self.values.index0(i)
    }
}

/// Standard deviation of one discretized white-noise cell.
pub fn cell_std(grid: &Grid) -> f64 {
    (1.0 / (grid.dt_fine() * grid.cell_volume())).sqrt()
}

/// I.i.d. Gaussian cells with variance `1/(δt·εᵈ)` over the fine time grid.
pub fn sample_white_noise(grid: &Grid, seed: u64) -> NoiseField {
    let mut r = rng(seed);
    let mut shape = vec![grid.fine_steps];
    shape.extend(grid.spatial_shape());
    let count = grid.fine_steps * grid.points();
    let s = cell_std(grid);
    let data = standard_normals(&mut r, count).into_iter().map(|z| z * s).collect();
    NoiseField {
        values: Tensor::from_parts(shape, data),
        seed,
        scale: 1.0,
        window: 1,
    }
}

/// Spatial moving average of every time slice. Dirichlet grids clamp at the
/// edges (the boundary sample is repeated); periodic grids wrap, one axis at
/// a time.
pub fn smooth(xi: &NoiseField, grid: &Grid, window: usize) -> Result<NoiseField> {
    let values = smooth_fields(&xi.values, grid, window)?;
    Ok(NoiseField {
        values,
        window: xi.window.max(1) * window,
        ..xi.clone()
    })
}

/// Smooths every spatial field in a batch whose trailing axes match `grid`.
pub fn smooth_fields(x: &Tensor, grid: &Grid, window: usize) -> Result<Tensor> {
    if window % 2 == 0 {
        return Err(invalid(format!("smoothing window must be odd, got {window}")));
    }
    let p = grid.points();
    if x.len() % p != 0 {
        return Err(invalid(format!(
            "field of {} values does not tile the {}-point grid",
            x.len(),
            p
        )));
    }
    if window == 1 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for field in out.data_mut().chunks_mut(p) {
        match (grid.dim, grid.boundary) {
            (1, b) => {
                let wrapped = b == Boundary::Periodic;
                let src = field.to_vec();
                average_line(&src, field, window, wrapped);
            }
            _ => {
                let n = grid.n;
                // rows (axis 1), then columns (axis 0)
                for r in 0..n {
                    let src = field[r * n..(r + 1) * n].to_vec();
                    average_line(&src, &mut field[r * n..(r + 1) * n], window, true);
                }
                let src = field.to_vec();
                for c in 0..n {
                    let col: Vec<f64> = (0..n).map(|r| src[r * n + c]).collect();
                    let mut dst = vec![0.0; n];
                    average_line(&col, &mut dst, window, true);
                    for r in 0..n {
                        field[r * n + c] = dst[r];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn average_line(src: &[f64], dst: &mut [f64], window: usize, wrapped: bool) {
    let n = src.len() as isize;
    let h = (window / 2) as isize;
    for (i, d) in dst.iter_mut().enumerate() {
        let mut s = 0.0;
        for o in -h..=h {
            let j = i as isize + o;
            let j = if wrapped { j.rem_euclid(n) } else { j.clamp(0, n - 1) };
            s += src[j as usize];
        }
        *d = s / window as f64;
    }
}
