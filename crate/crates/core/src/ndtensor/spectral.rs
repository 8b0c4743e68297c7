//! Fourier-layer channel mixing: FFT, a complex `C_in × C_out` map on each
//! retained low-frequency bin, zero elsewhere, inverse FFT.
//!
//! The real output is `y = Re(IFFT(P)) / N` where `P_r = c_r · (W X)_r` on
//! the retained half-spectrum bins and `c_r ∈ {1, 2}` accounts for the
//! conjugate-symmetric partner of each bin on the last axis.

use rustfft::num_complex::Complex64;

use super::fft::FftNd;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct SpectralPlan {
    fft: FftNd,
    modes: usize,
    /// (flat bin index, multiplicity weight)
    bins: Vec<(usize, f64)>,
}

impl SpectralPlan {
    /// `dims` is the spatial shape (`[n]` or `[n0, n1]`). In 1-D `modes` may be
    /// up to `n/2 + 1` (every half-spectrum bin); in 2-D the retained window is
    /// `|k0| < modes`, `0 ≤ k1 < modes` with `modes ≤ min(n)/2`.
    pub fn new(dims: &[usize], modes: usize) -> Result<Self> {
        let bins = match dims {
            [n] => {
                if modes == 0 || modes > n / 2 + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "modes {modes} out of range for n = {n}"
                    )));
                }
                (0..modes).map(|k| (k, weight(k, *n))).collect()
            }
            [n0, n1] => {
                if modes == 0 || modes > n0.min(n1) / 2 {
                    return Err(Error::InvalidArgument(format!(
                        "modes {modes} out of range for {n0}x{n1}"
                    )));
                }
                let mut rows: Vec<usize> = (0..modes).collect();
                rows.extend(n0 - modes + 1..*n0);
                let mut bins = Vec::new();
                for &k0 in &rows {
                    for k1 in 0..modes {
                        bins.push((k0 * n1 + k1, weight(k1, *n1)));
                    }
                }
                bins
            }
            _ => return Err(Error::InvalidArgument("spectral layers are 1-D or 2-D".into())),
        };
        Ok(Self {
            fft: FftNd::new(dims),
            modes,
            bins,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Number of retained complex bins per channel pair.
    pub fn retained(&self) -> usize {
        self.bins.len()
    }

    pub fn weight_shape(&self, c_in: usize, c_out: usize) -> Vec<usize> {
        vec![c_in, c_out, self.retained()]
    }

    fn check(&self, x: &Tensor, wr: &Tensor) -> Result<(usize, usize, usize, bool)> {
        let sd = self.fft.dims().len();
        let (batch, c_in, batched) = if x.rank() == sd + 2 {
            (x.shape()[0], x.shape()[1], true)
        } else if x.rank() == sd + 1 {
            (1, x.shape()[0], false)
        } else {
            return Err(Error::ShapeMismatch {
                op: "spectral_multiply",
                lhs: x.shape().to_vec(),
                rhs: self.fft.dims().to_vec(),
            });
        };
        let spatial = &x.shape()[x.rank() - sd..];
        if spatial != self.fft.dims() || wr.rank() != 3 || wr.shape()[0] != c_in || wr.shape()[2] != self.retained() {
            return Err(Error::ShapeMismatch {
                op: "spectral_multiply",
                lhs: x.shape().to_vec(),
                rhs: wr.shape().to_vec(),
            });
        }
        Ok((batch, c_in, wr.shape()[1], batched))
    }

    /// Retained spectrum of every `(b, c)` field: `[B·C][R]`.
    fn gather(&self, x: &[f64], fields: usize) -> Vec<Complex64> {
        let n = self.fft.len();
        let r = self.retained();
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        let mut out = Vec::with_capacity(fields * r);
        for f in 0..fields {
            for &(idx, _) in &self.bins {
                out.push(buf[f * n + idx]);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor, wr: &Tensor, wi: &Tensor) -> Result<Tensor> {
        let (batch, c_in, c_out, batched) = self.check(x, wr)?;
        if wi.shape() != wr.shape() {
            return Err(Error::ShapeMismatch {
                op: "spectral_multiply",
                lhs: wr.shape().to_vec(),
                rhs: wi.shape().to_vec(),
            });
        }
        let (n, r) = (self.fft.len(), self.retained());
        let xs = self.gather(x.data(), batch * c_in);
        let mut spec = vec![Complex64::new(0.0, 0.0); batch * c_out * n];
        for b in 0..batch {
            for o in 0..c_out {
                let dst = &mut spec[(b * c_out + o) * n..(b * c_out + o + 1) * n];
                for (ri, &(idx, cw)) in self.bins.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for c in 0..c_in {
                        let w = Complex64::new(wr.data()[(c * c_out + o) * r + ri], wi.data()[(c * c_out + o) * r + ri]);
                        acc += w * xs[(b * c_in + c) * r + ri];
                    }
                    dst[idx] = acc * cw;
                }
            }
        }
        self.fft.inverse(&mut spec);
        let scale = 1.0 / n as f64;
        let data = spec.iter().map(|z| z.re * scale).collect();
        let mut shape = Vec::new();
        if batched {
            shape.push(batch);
        }
        shape.push(c_out);
        shape.extend_from_slice(self.fft.dims());
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn backward(&self, x: &Tensor, wr: &Tensor, wi: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (batch, c_in, c_out, _) = self.check(x, wr).expect("validated in forward");
        let (n, r) = (self.fft.len(), self.retained());
        let xs = self.gather(x.data(), batch * c_in);
        // gradient w.r.t. the retained output bins: c_r · FFT(g)_r / N
        let gy_full = self.gather(g.data(), batch * c_out);
        let inv_n = 1.0 / n as f64;
        let gy: Vec<Complex64> = gy_full
            .iter()
            .enumerate()
            .map(|(i, z)| z * (self.bins[i % r].1 * inv_n))
            .collect();

        let mut gwr = vec![0.0; wr.len()];
        let mut gwi = vec![0.0; wi.len()];
        let mut gx_spec = vec![Complex64::new(0.0, 0.0); batch * c_in * n];
        for b in 0..batch {
            for c in 0..c_in {
                for o in 0..c_out {
                    for ri in 0..r {
                        let widx = (c * c_out + o) * r + ri;
                        let xv = xs[(b * c_in + c) * r + ri];
                        let gv = gy[(b * c_out + o) * r + ri];
                        gwr[widx] += gv.re * xv.re + gv.im * xv.im;
                        gwi[widx] += -gv.re * xv.im + gv.im * xv.re;
                        let (w_re, w_im) = (wr.data()[widx], wi.data()[widx]);
                        let gx_re = gv.re * w_re + gv.im * w_im;
                        let gx_im = -gv.re * w_im + gv.im * w_re;
                        gx_spec[(b * c_in + c) * n + self.bins[ri].0] += Complex64::new(gx_re, gx_im);
                    }
                }
            }
        }
        self.fft.inverse(&mut gx_spec);
        let gx = gx_spec.iter().map(|z| z.re).collect();
        (
            Tensor::from_parts(x.shape().to_vec(), gx),
            Tensor::from_parts(wr.shape().to_vec(), gwr),
            Tensor::from_parts(wi.shape().to_vec(), gwi),
        )
    }
}

fn weight(k: usize, n: usize) -> f64 {
    if k == 0 || (n % 2 == 0 && k == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// Identity weights on every retained bin (`C_in == C_out`).
pub fn identity_weights(plan: &SpectralPlan, channels: usize) -> (Tensor, Tensor) {
    let r = plan.retained();
    let mut wr = Tensor::zeros(&[channels, channels, r]);
    for c in 0..channels {
        for ri in 0..r {
            wr.data_mut()[(c * channels + c) * r + ri] = 1.0;
        }
    }
    (wr, Tensor::zeros(&[channels, channels, r]))
}
