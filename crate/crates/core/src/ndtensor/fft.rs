//! Complex FFTs over 1-D and 2-D periodic grids, backed by `rustfft`
//! (mixed radix, so sizes such as 40 are handled directly).

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse transforms for a fixed spatial shape (`[n]` or `[n0, n1]`).
///
/// The inverse is unnormalized: `inverse(forward(x)) == N·x`.
#[derive(Clone)]
pub struct FftNd {
    dims: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("dims", &self.dims).finish()
    }
}

impl FftNd {
    pub fn new(dims: &[usize]) -> Self {
        assert!(
            dims.len() == 1 || dims.len() == 2,
            "only 1-D and 2-D transforms are supported"
        );
        let mut planner = FftPlanner::new();
        let fwd = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            dims: dims.to_vec(),
            fwd,
            inv,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.fwd);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inv);
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        debug_assert_eq!(buf.len() % self.len(), 0);
        match self.dims.as_slice() {
            [_] => plans[0].process(buf),
            [n0, n1] => {
                let (n0, n1) = (*n0, *n1);
                for field in buf.chunks_mut(n0 * n1) {
                    // rows (axis 1), then columns (axis 0) through a transpose
                    plans[1].process(field);
                    let mut t = vec![Complex64::new(0.0, 0.0); n0 * n1];
                    for i in 0..n0 {
                        for j in 0..n1 {
                            t[j * n0 + i] = field[i * n1 + j];
                        }
                    }
                    plans[0].process(&mut t);
                    for i in 0..n0 {
                        for j in 0..n1 {
                            field[i * n1 + j] = t[j * n0 + i];
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    /// Forward transform of a batch of real fields laid out contiguously.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Normalized inverse keeping only the real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spec);
        let scale = 1.0 / self.len() as f64;
        spec.iter().map(|c| c.re * scale).collect()
    }
}

/// Signed integer wavenumber of FFT bin `k` on an `n`-point grid.
pub fn wavenumber(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}
