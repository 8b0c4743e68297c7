//! Time-axis linear operators used by the feature recursion. Inputs are laid
//! out as `[..., time, spatial...]` with `points` values per spatial field.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Propagator;
use crate::ndtensor::{LinearOp, Tensor};

fn blocks(shape: &[usize], per_block: usize, op: &'static str) -> Result<usize> {
    let total: usize = shape.iter().product();
    if per_block == 0 || total % per_block != 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![per_block],
        });
    }
    Ok(total / per_block)
}

/// `u₀ ↦ (u₀, P u₀, P² u₀, …, Pˢ u₀)`: `[B, spatial] → [B, s+1, spatial]`.
#[derive(Debug)]
pub struct Semigroup {
    pub prop: Arc<Propagator>,
    pub steps: usize,
    pub spatial: Vec<usize>,
}

impl LinearOp for Semigroup {
    fn name(&self) -> &'static str {
        "semigroup"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let p: usize = self.spatial.iter().product();
        let b = blocks(input, p, "semigroup")?;
        let mut s = vec![b, self.steps + 1];
        s.extend(&self.spatial);
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let p = self.prop.field_len();
        let shape = self.output_shape(x.shape()).expect("validated on record");
        let mut out = Vec::with_capacity(shape.iter().product());
        for u0 in x.data().chunks(p) {
            let mut s = u0.to_vec();
            out.extend_from_slice(&s);
            for _ in 0..self.steps {
                self.prop.solve_slice(&mut s);
                out.extend_from_slice(&s);
            }
        }
        Tensor::from_parts(shape, out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.prop.field_len();
        let t = self.steps + 1;
        let mut out = Vec::with_capacity(g.len() / t);
        for gb in g.data().chunks(t * p) {
            // λ_s = g_s; λ_k = g_k + Pᵀ λ_{k+1}
            let mut lam = gb[self.steps * p..].to_vec();
            for k in (0..self.steps).rev() {
                self.prop.solve_adjoint_slice(&mut lam);
                for (l, gv) in lam.iter_mut().zip(&gb[k * p..(k + 1) * p]) {
                    *l += gv;
                }
            }
            out.extend(lam);
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}

/// `I_0 = 0`, `I_{k+1} = P(I_k + δt·z_k)` along the time axis of
/// `[B, s+1, spatial]`. The last time row of `z` does not contribute.
#[derive(Debug)]
pub struct TimeIntegral {
    pub prop: Arc<Propagator>,
    pub steps: usize,
}

impl LinearOp for TimeIntegral {
    fn name(&self) -> &'static str {
        "time_integral"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        blocks(input, (self.steps + 1) * self.prop.field_len(), "time_integral")?;
        Ok(input.to_vec())
    }

    fn apply(&self, z: &Tensor) -> Tensor {
        let p = self.prop.field_len();
        let dt = self.prop.dt();
        let t = self.steps + 1;
        let mut out = vec![0.0; z.len()];
        for (zb, ob) in z.data().chunks(t * p).zip(out.chunks_mut(t * p)) {
            let mut acc = vec![0.0; p];
            for k in 0..self.steps {
                for (a, zv) in acc.iter_mut().zip(&zb[k * p..(k + 1) * p]) {
                    *a += dt * zv;
                }
                self.prop.solve_slice(&mut acc);
                ob[(k + 1) * p..(k + 2) * p].copy_from_slice(&acc);
            }
        }
        Tensor::from_parts(z.shape().to_vec(), out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.prop.field_len();
        let dt = self.prop.dt();
        let t = self.steps + 1;
        let mut out = vec![0.0; g.len()];
        for (gb, ob) in g.data().chunks(t * p).zip(out.chunks_mut(t * p)) {
            // λ_s = g_s; v = Pᵀ λ_{k+1}; gz_k = δt·v; λ_k = g_k + v
            let mut lam = gb[self.steps * p..].to_vec();
            for k in (0..self.steps).rev() {
                self.prop.solve_adjoint_slice(&mut lam);
                for (i, l) in lam.iter_mut().enumerate() {
                    ob[k * p + i] = dt * *l;
                    *l += gb[k * p + i];
                }
            }
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}

/// Holds coarse forcing slices over the fine grid:
/// `[B, J, spatial] → [B, J·sub + 1, spatial]`, row `j` = slice `min(j / sub, J − 1)`.
#[derive(Debug)]
pub struct HoldForcing {
    pub slices: usize,
    pub substeps: usize,
    pub points: usize,
}

impl HoldForcing {
    fn source(&self, j: usize) -> usize {
        (j / self.substeps).min(self.slices - 1)
    }

    fn rows(&self) -> usize {
        self.slices * self.substeps + 1
    }
}

impl LinearOp for HoldForcing {
    fn name(&self) -> &'static str {
        "hold_forcing"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let axis = time_axis(input, self.slices, self.points, "hold_forcing")?;
        let mut s = input.to_vec();
        s[axis] = self.rows();
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let p = self.points;
        let rows = self.rows();
        let shape = self.output_shape(x.shape()).expect("validated on record");
        let mut out = Vec::with_capacity(x.len() / self.slices * rows);
        for xb in x.data().chunks(self.slices * p) {
            for j in 0..rows {
                let s = self.source(j);
                out.extend_from_slice(&xb[s * p..(s + 1) * p]);
            }
        }
        Tensor::from_parts(shape, out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.points;
        let rows = self.rows();
        let mut out = vec![0.0; g.len() / rows * self.slices];
        for (gb, ob) in g.data().chunks(rows * p).zip(out.chunks_mut(self.slices * p)) {
            for j in 0..rows {
                let s = self.source(j);
                for (o, v) in ob[s * p..(s + 1) * p].iter_mut().zip(&gb[j * p..(j + 1) * p]) {
                    *o += v;
                }
            }
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}

/// Locates the time axis: the axis right before the trailing spatial axes
/// whose product is `points`.
fn time_axis(shape: &[usize], len: usize, points: usize, op: &'static str) -> Result<usize> {
    let mut p = 1;
    for axis in (0..shape.len()).rev() {
        if p == points {
            if shape[axis] == len {
                return Ok(axis);
            }
            break;
        }
        p *= shape[axis];
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: shape.to_vec(),
        rhs: vec![len, points],
    })
}

/// Appends a zero time row: `[B, s, spatial] → [B, s+1, spatial]`.
#[derive(Debug)]
pub struct PadTime {
    pub steps: usize,
    pub points: usize,
}

impl LinearOp for PadTime {
    fn name(&self) -> &'static str {
        "pad_time"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let axis = time_axis(input, self.steps, self.points, "pad_time")?;
        let mut s = input.to_vec();
        s[axis] += 1;
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let p = self.points;
        let shape = self.output_shape(x.shape()).expect("validated on record");
        let mut out = Vec::with_capacity(shape.iter().product());
        for xb in x.data().chunks(self.steps * p) {
            out.extend_from_slice(xb);
            out.extend(std::iter::repeat(0.0).take(p));
        }
        Tensor::from_parts(shape, out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.points;
        let mut out = Vec::with_capacity(g.len());
        for gb in g.data().chunks((self.steps + 1) * p) {
            out.extend_from_slice(&gb[..self.steps * p]);
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}

/// Selects time rows: `[..., T, spatial] → [..., rows.len(), spatial]`.
#[derive(Debug)]
pub struct TimeSample {
    pub times: usize,
    pub rows: Vec<usize>,
    pub points: usize,
}

impl LinearOp for TimeSample {
    fn name(&self) -> &'static str {
        "time_sample"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let axis = time_axis(input, self.times, self.points, "time_sample")?;
        if self.rows.iter().any(|&r| r >= self.times) || self.rows.is_empty() {
            return Err(Error::InvalidArgument("time sample rows out of range".into()));
        }
        let mut s = input.to_vec();
        s[axis] = self.rows.len();
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let p = self.points;
        let shape = self.output_shape(x.shape()).expect("validated on record");
        let mut out = Vec::with_capacity(shape.iter().product());
        for xb in x.data().chunks(self.times * p) {
            for &r in &self.rows {
                out.extend_from_slice(&xb[r * p..(r + 1) * p]);
            }
        }
        Tensor::from_parts(shape, out)
    }

    fn adjoint(&self, g: &Tensor, input_shape: &[usize]) -> Tensor {
        let p = self.points;
        let k = self.rows.len();
        let mut out = vec![0.0; g.len() / k * self.times];
        for (gb, ob) in g.data().chunks(k * p).zip(out.chunks_mut(self.times * p)) {
            for (i, &r) in self.rows.iter().enumerate() {
                for (o, v) in ob[r * p..(r + 1) * p].iter_mut().zip(&gb[i * p..(i + 1) * p]) {
                    *o += v;
                }
            }
        }
        Tensor::from_parts(input_shape.to_vec(), out)
    }
}
