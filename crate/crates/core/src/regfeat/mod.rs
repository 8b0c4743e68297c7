//! Regularity features: symbolic enumeration and differentiable evaluation of
//! iterated time integrals of products of `s^in = I_c[u₀]`, the forcing `f`
//! and the noise `ξ`.
//!
//! Evaluation runs on the fine time grid of one or more coarse intervals.
//! Every intermediate quantity is a tape variable, so gradients flow from the
//! features back to `u₀`, `f` and `ξ`.

mod ops;
mod terms;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

pub use ops::{HoldForcing, PadTime, Semigroup, TimeIntegral, TimeSample};
pub use terms::{enumerate_terms, term_keys, Deriv, Expr, Factor, FeatureSpec, FeatureTerm, Leaf};

use crate::error::{invalid, Error, Result};
use crate::grid::{Axis, Derivative, DiscreteOperator, Grid, Propagator};
use crate::ndtensor::{LinearOp, Tape, Tensor, Var};

static FEATURE_NANOS: AtomicU64 = AtomicU64::new(0);

/// Total wall time spent evaluating features in this process.
pub fn feature_nanos() -> u64 {
    FEATURE_NANOS.load(Ordering::Relaxed)
}

/// The feature block for one grid, operator and spec.
#[derive(Debug, Clone)]
pub struct RfBlock {
    spec: FeatureSpec,
    terms: Vec<FeatureTerm>,
    grid: Grid,
    prop: Arc<Propagator>,
    derivs: Vec<Arc<Derivative>>,
}

/// Feature fields sampled at coarse frames, `[B, N_S, frames, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub keys: Vec<String>,
    pub values: Tensor,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl RfBlock {
    /// Features over `grid`'s fine time step with propagator `(Id − δt·L)⁻¹`.
    pub fn new(spec: &FeatureSpec, grid: &Grid, op: &DiscreteOperator) -> Result<Self> {
        let terms = enumerate_terms(spec, grid.dim)?;
        let prop = Arc::new(Propagator::new(op, grid.dt_fine())?);
        if prop.field_len() != grid.points() {
            return Err(invalid("operator does not match the grid"));
        }
        let mut derivs = vec![Derivative::new(grid, Axis::X)?];
        if grid.dim == 2 {
            derivs.push(Derivative::new(grid, Axis::Y)?);
        }
        Ok(Self {
            spec: spec.clone(),
            terms,
            grid: grid.clone(),
            prop,
            derivs,
        })
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn terms(&self) -> &[FeatureTerm] {
        &self.terms
    }

    pub fn keys(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.key.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.key == key)
    }

    fn spatial(&self) -> Vec<usize> {
        self.grid.spatial_shape()
    }

    /// `s^in` on `steps` fine steps: `[B, spatial] → [B, steps+1, spatial]`.
    pub fn initial_feature<'t>(&self, u0: Var<'t>, steps: usize) -> Result<Var<'t>> {
        u0.linear(Arc::new(Semigroup {
            prop: self.prop.clone(),
            steps,
            spatial: self.spatial(),
        }))
    }

    /// All features on the fine grid covering `f.shape()[1]` coarse intervals.
    ///
    /// `u0`: `[B, spatial]`; `f`: `[B, J, spatial]` (one slice per coarse
    /// interval); `xi`: `[B, J·substeps, spatial]`. Returns
    /// `[B, N_S, J·substeps + 1, spatial]`.
    pub fn evaluate_fine<'t>(&self, u0: Var<'t>, f: Var<'t>, xi: Var<'t>) -> Result<Var<'t>> {
        self.timed(|| {
            let terms = self.term_values(u0, f, xi)?;
            let s = terms[0].shape();
            let mut one = vec![s[0], 1];
            one.extend(&s[1..]);
            let parts = terms.iter().map(|v| v.reshape(&one)).collect::<Result<Vec<_>>>()?;
            u0.tape().concat(&parts, 1)
        })
    }

    fn timed<T>(&self, run: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = run();
        FEATURE_NANOS.fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        out
    }

    /// Every feature on the fine grid, one `[B, steps + 1, spatial]` value per term.
    fn term_values<'t>(&self, u0: Var<'t>, f: Var<'t>, xi: Var<'t>) -> Result<Vec<Var<'t>>> {
        let sp = self.spatial();
        let p = self.grid.points();
        let sub = self.grid.substeps();
        let (us, fs, xs) = (u0.shape(), f.shape(), xi.shape());
        let sd = sp.len();
        let bad = |what: &str, s: &[usize]| invalid(format!("features: bad {what} shape {s:?}"));
        if us.len() != sd + 1 || us[1..] != sp[..] {
            return Err(bad("u0", &us));
        }
        let b = us[0];
        if fs.len() != sd + 2 || fs[0] != b || fs[2..] != sp[..] || fs[1] == 0 {
            return Err(bad("forcing", &fs));
        }
        let j = fs[1];
        let steps = j * sub;
        if xs.len() != sd + 2 || xs[0] != b || xs[1] != steps || xs[2..] != sp[..] {
            return Err(bad("noise", &xs));
        }

        let s_in = self.initial_feature(u0, steps)?;
        let f_fine = f.linear(Arc::new(HoldForcing {
            slices: j,
            substeps: sub,
            points: p,
        }))?;
        let xi_fine = xi.linear(Arc::new(PadTime { steps, points: p }))?;
        let integral: Arc<dyn LinearOp> = Arc::new(TimeIntegral {
            prop: self.prop.clone(),
            steps,
        });

        let mut values: Vec<Var<'t>> = Vec::with_capacity(self.terms.len());
        let mut derived: HashMap<Factor, Var<'t>> = HashMap::new();
        for term in &self.terms {
            let v = match &term.expr {
                Expr::Input => s_in,
                Expr::Integral { leaf, factors } => {
                    let mut z: Option<Var<'t>> = leaf.map(|l| match l {
                        Leaf::F => f_fine,
                        Leaf::Xi => xi_fine,
                    });
                    for fac in factors {
                        let fv = match fac.deriv {
                            Deriv::None => values[fac.term],
                            d => match derived.get(fac) {
                                Some(v) => *v,
                                None => {
                                    let op = self.derivs[if d == Deriv::X { 0 } else { 1 }].clone();
                                    let v = values[fac.term].linear(op)?;
                                    derived.insert(*fac, v);
                                    v
                                }
                            },
                        };
                        z = Some(match z {
                            None => fv,
                            Some(acc) => acc.mul(fv)?,
                        });
                    }
                    let z = z.ok_or_else(|| invalid(format!("empty integrand in {}", term.key)))?;
                    z.linear(integral.clone())?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Features at the fine rows `rows` (e.g. the coarse frames):
    /// `[B, N_S, rows.len(), spatial]`.
    pub fn sample<'t>(&self, fine: Var<'t>, rows: Vec<usize>) -> Result<Var<'t>> {
        let s = fine.shape();
        let times = s[2];
        fine.linear(Arc::new(TimeSample {
            times,
            rows,
            points: self.grid.points(),
        }))
    }

    /// Features at the end of the evaluated window: `[B, N_S, spatial]`.
    pub fn end_features<'t>(&self, u0: Var<'t>, f: Var<'t>, xi: Var<'t>) -> Result<Var<'t>> {
        self.timed(|| {
            let terms = self.term_values(u0, f, xi)?;
            let s = terms[0].shape();
            let parts = terms
                .iter()
                .map(|v| v.narrow(1, s[1] - 1, 1))
                .collect::<Result<Vec<_>>>()?;
            u0.tape().concat(&parts, 1)
        })
    }

    /// Non-differentiable evaluation sampled at the coarse frames.
    ///
    /// `u0`: `[B, spatial]`, `f`: `[B, J, spatial]`, `xi`: `[B, J·sub, spatial]`.
    pub fn evaluate(&self, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<FeatureSet> {
        let tape = Tape::new();
        let (u, fv, x) = (
            tape.constant(u0.clone()),
            tape.constant(f.clone()),
            tape.constant(xi.clone()),
        );
        let fine = self.evaluate_fine(u, fv, x)?;
        let j = f.shape()[1];
        let sub = self.grid.substeps();
        let rows = (0..=j).map(|k| k * sub).collect();
        let coarse = self.sample(fine, rows)?;
        let values = coarse.value().as_ref().clone();
        Ok(FeatureSet {
            keys: self.keys(),
            values,
        })
    }

    /// End-of-interval features for a batch of single coarse intervals
    /// without recording gradients: `[B, N_S, spatial]`.
    pub fn end_values(&self, u0: &Tensor, f: &Tensor, xi: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.end_features(
            tape.constant(u0.clone()),
            tape.constant(f.clone()),
            tape.constant(xi.clone()),
        )?;
        let out = v.value().as_ref().clone();
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "features".into() });
        }
        Ok(out)
    }
}

/// Spatial derivative of a batch of fields along `axis`.
pub fn spatial_derivative(grid: &Grid, axis: Axis, field: &Tensor) -> Result<Tensor> {
    let d = Derivative::new(grid, axis)?;
    d.output_shape(field.shape())?;
    Ok(d.apply(field))
}
