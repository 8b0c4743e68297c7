//! Multi-channel 1-D/2-D cross-correlation with same-size output.
//!
//! Inputs are `[B, C_in, W]` / `[B, C_in, H, W]` (or the unbatched forms
//! without `B`); kernels are `[C_out, C_in, k]` / `[C_out, C_in, kh, kw]` with
//! odd extents. Implemented as im2col followed by one GEMM per call.

use serde::{Deserialize, Serialize};

use super::tape::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Zero,
    Periodic,
}

const NONE: usize = usize::MAX;

struct Layout {
    batch: usize,
    c_in: usize,
    c_out: usize,
    spatial: Vec<usize>,
    kernel: Vec<usize>,
    batched: bool,
}

impl Layout {
    fn points(&self) -> usize {
        self.spatial.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn layout(x: &Tensor, k: &Tensor) -> Result<Layout> {
    let kr = k.rank();
    if !(kr == 3 || kr == 4) {
        return Err(Error::InvalidShape {
            shape: k.shape().to_vec(),
            reason: "kernel must be [C_out, C_in, k] or [C_out, C_in, kh, kw]".into(),
        });
    }
    let sd = kr - 2;
    let kernel = k.shape()[2..].to_vec();
    if kernel.iter().any(|&e| e % 2 == 0) {
        return Err(Error::InvalidShape {
            shape: k.shape().to_vec(),
            reason: "kernel extents must be odd".into(),
        });
    }
    let (batch, rest, batched) = if x.rank() == sd + 2 {
        (x.shape()[0], &x.shape()[1..], true)
    } else if x.rank() == sd + 1 {
        (1, x.shape(), false)
    } else {
        return Err(Error::ShapeMismatch {
            op: "conv",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    };
    if rest[0] != k.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "conv",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    Ok(Layout {
        batch,
        c_in: rest[0],
        c_out: k.shape()[0],
        spatial: rest[1..].to_vec(),
        kernel,
        batched,
    })
}

/// For each (tap, output point) the flat source point, or `NONE` when the tap
/// falls into zero padding.
fn source_table(l: &Layout, padding: Padding) -> Vec<usize> {
    let p = l.points();
    let mut table = vec![NONE; l.taps() * p];
    let wrap = |i: isize, n: usize| -> Option<usize> {
        if (0..n as isize).contains(&i) {
            Some(i as usize)
        } else if padding == Padding::Periodic {
            Some(i.rem_euclid(n as isize) as usize)
        } else {
            None
        }
    };
    match (l.spatial.as_slice(), l.kernel.as_slice()) {
        ([n], [k]) => {
            let half = (k / 2) as isize;
            for t in 0..*k {
                for i in 0..*n {
                    if let Some(s) = wrap(i as isize + t as isize - half, *n) {
                        table[t * p + i] = s;
                    }
                }
            }
        }
        ([n0, n1], [k0, k1]) => {
            let (h0, h1) = ((k0 / 2) as isize, (k1 / 2) as isize);
            for t0 in 0..*k0 {
                for t1 in 0..*k1 {
                    let t = t0 * k1 + t1;
                    for i in 0..*n0 {
                        let Some(si) = wrap(i as isize + t0 as isize - h0, *n0) else {
                            continue;
                        };
                        for j in 0..*n1 {
                            if let Some(sj) = wrap(j as isize + t1 as isize - h1, *n1) {
                                table[t * p + i * n1 + j] = si * n1 + sj;
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    table
}

fn im2col(x: &Tensor, l: &Layout, table: &[usize]) -> Vec<f64> {
    let (p, taps, bp) = (l.points(), l.taps(), l.batch * l.points());
    let mut cols = vec![0.0; l.c_in * taps * bp];
    let xd = x.data();
    for c in 0..l.c_in {
        for t in 0..taps {
            let row = &mut cols[(c * taps + t) * bp..(c * taps + t + 1) * bp];
            for b in 0..l.batch {
                let src = &xd[(b * l.c_in + c) * p..(b * l.c_in + c + 1) * p];
                let dst = &mut row[b * p..(b + 1) * p];
                for (i, d) in dst.iter_mut().enumerate() {
                    let s = table[t * p + i];
                    if s != NONE {
                        *d = src[s];
                    }
                }
            }
        }
    }
    cols
}

fn out_shape(l: &Layout) -> Vec<usize> {
    let mut s = Vec::new();
    if l.batched {
        s.push(l.batch);
    }
    s.push(l.c_out);
    s.extend_from_slice(&l.spatial);
    s
}

pub fn conv_forward(x: &Tensor, k: &Tensor, padding: Padding) -> Result<Tensor> {
    let l = layout(x, k)?;
    let table = source_table(&l, padding);
    let cols = im2col(x, &l, &table);
    let (p, bp, kk) = (l.points(), l.batch * l.points(), l.c_in * l.taps());
    let mut y = vec![0.0; l.c_out * bp];
    gemm(l.c_out, kk, bp, k.data(), (kk as isize, 1), &cols, (bp as isize, 1), &mut y, false);
    // [C_out, B, P] -> [B, C_out, P]
    let mut out = vec![0.0; y.len()];
    for o in 0..l.c_out {
        for b in 0..l.batch {
            out[(b * l.c_out + o) * p..(b * l.c_out + o + 1) * p]
                .copy_from_slice(&y[o * bp + b * p..o * bp + (b + 1) * p]);
        }
    }
    Ok(Tensor::from_parts(out_shape(&l), out))
}

pub fn conv_backward(x: &Tensor, k: &Tensor, padding: Padding, g: &Tensor) -> (Tensor, Tensor) {
    let l = layout(x, k).expect("layout validated in forward");
    let table = source_table(&l, padding);
    let cols = im2col(x, &l, &table);
    let (p, taps, bp, kk) = (l.points(), l.taps(), l.batch * l.points(), l.c_in * l.taps());
    // [B, C_out, P] -> [C_out, B, P]
    let mut gy = vec![0.0; g.len()];
    for o in 0..l.c_out {
        for b in 0..l.batch {
            gy[o * bp + b * p..o * bp + (b + 1) * p]
                .copy_from_slice(&g.data()[(b * l.c_out + o) * p..(b * l.c_out + o + 1) * p]);
        }
    }
    let mut gk = vec![0.0; l.c_out * kk];
    // gK = gY · colsᵀ
    gemm(l.c_out, bp, kk, &gy, (bp as isize, 1), &cols, (1, bp as isize), &mut gk, false);
    let mut gcols = vec![0.0; kk * bp];
    // gcols = Kᵀ · gY
    gemm(kk, l.c_out, bp, k.data(), (1, kk as isize), &gy, (bp as isize, 1), &mut gcols, false);
    let mut gx = vec![0.0; x.len()];
    for c in 0..l.c_in {
        for t in 0..taps {
            let row = &gcols[(c * taps + t) * bp..(c * taps + t + 1) * bp];
            for b in 0..l.batch {
                let dst = &mut gx[(b * l.c_in + c) * p..(b * l.c_in + c + 1) * p];
                for (i, &v) in row[b * p..(b + 1) * p].iter().enumerate() {
                    let s = table[t * p + i];
                    if s != NONE {
                        dst[s] += v;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}
