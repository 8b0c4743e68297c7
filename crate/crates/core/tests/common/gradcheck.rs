//! Central-difference checks for every op the tape records. Each case is
//! reduced to a scalar through fixed random weights so every output entry
//! contributes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdectl_core::grid::{Axis, Boundary, Derivative, DiscreteOperator, Grid, OperatorApply, Propagator, PropagatorSolve};
use spdectl_core::ndtensor::{Padding, SpectralPlan, Tape, Tensor, Var};
use spdectl_core::regfeat::{HoldForcing, PadTime, Semigroup, TimeIntegral, TimeSample};
use spdectl_core::Result;

type Build = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

impl Case {
    fn new(name: &'static str, inputs: Vec<Tensor>, build: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn weights(&self) -> Tensor {
        let tape = Tape::new();
        let vars = tape.constants(&self.inputs);
        let out = (self.build)(&tape, &vars).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        Tensor::from_fn(&out.shape(), |_| r.random_range(-1.0..1.0))
    }

    fn loss_and_grads(&self, inputs: &[Tensor], w: &Tensor) -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars = tape.params(inputs);
        let out = (self.build)(&tape, &vars).unwrap();
        let loss = out.mul(tape.constant(w.clone())).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        (loss.value().item(), vars.iter().map(|v| g.wrt(*v)).collect())
    }

    /// Largest relative error between analytic and central-difference
    /// directional derivatives over `directions` random directions.
    pub fn max_rel_err(&self, directions: usize, h: f64, seed: u64) -> f64 {
        let w = self.weights();
        let (_, grads) = self.loss_and_grads(&self.inputs, &w);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let dir: Vec<Tensor> = self
                .inputs
                .iter()
                .map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0)))
                .collect();
            let at = |c: f64| {
                let shifted: Vec<Tensor> = self
                    .inputs
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| {
                        let mut x = x.clone();
                        x.axpy(c, d);
                        x
                    })
                    .collect();
                self.loss_and_grads(&shifted, &w).0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
            worst = worst.max(super::fd::rel_err(analytic, numeric));
        }
        worst
    }
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Entries in `[-1, 1]` at least 0.2 away from zero, so kinks and poles stay
/// outside the difference stencil.
fn nonzero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.2..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -1.0, 1.0);
    let mut cases = vec![];
    macro_rules! case {
        ($name:expr, [$($x:expr),*], $f:expr) => {
            cases.push(Case::new($name, vec![$($x),*], $f))
        };
    }

    case!("add", [u(&[3, 4]), u(&[3, 4])], |_, v| v[0].add(v[1]));
    case!("sub", [u(&[3, 4]), u(&[3, 4])], |_, v| v[0].sub(v[1]));
    case!("mul", [u(&[3, 4]), u(&[3, 4])], |_, v| v[0].mul(v[1]));
    case!("add broadcast", [u(&[2, 3, 4]), u(&[4])], |_, v| v[0].add(v[1]));
    case!("sub broadcast", [u(&[3]), u(&[2, 3])], |_, v| v[0].sub(v[1]));
    case!("mul broadcast", [u(&[4]), u(&[3, 4])], |_, v| v[0].mul(v[1]));
    case!("neg", [u(&[5])], |_, v| v[0].neg());
    case!("tanh", [u(&[6])], |_, v| v[0].tanh());
    case!("gelu", [u(&[6])], |_, v| v[0].gelu());
    case!("square", [u(&[6])], |_, v| v[0].square());
    case!("exp", [u(&[6])], |_, v| v[0].exp());
    case!("scale", [u(&[2, 3])], |_, v| v[0].scale(-1.7));
    case!("add_scalar", [u(&[2, 3])], |_, v| v[0].add_scalar(0.3));
    case!("sum", [u(&[3, 4])], |_, v| v[0].sum());
    case!("mean", [u(&[3, 4])], |_, v| v[0].mean());
    case!("sum_per_sample", [u(&[3, 2, 5])], |_, v| v[0].sum_per_sample());
    case!("norm_per_sample", [u(&[3, 2, 4])], |_, v| v[0].norm_per_sample());
    case!("matmul", [u(&[5, 4]), u(&[4, 3])], |_, v| v[0].matmul(v[1]));
    case!("conv 1-D zero", [u(&[2, 3, 8]), u(&[4, 3, 3])], |_, v| v[0].conv(v[1], Padding::Zero));
    case!("conv 1-D periodic", [u(&[2, 3, 8]), u(&[2, 3, 5])], |_, v| v[0].conv(v[1], Padding::Periodic));
    case!("conv 1-D unbatched", [u(&[3, 7]), u(&[2, 3, 3])], |_, v| v[0].conv(v[1], Padding::Zero));
    case!("conv 2-D zero", [u(&[2, 2, 5, 6]), u(&[3, 2, 3, 3])], |_, v| v[0].conv(v[1], Padding::Zero));
    case!("conv 2-D periodic", [u(&[1, 2, 6, 6]), u(&[2, 2, 3, 5])], |_, v| v[0].conv(v[1], Padding::Periodic));
    case!("add_channel_bias", [u(&[2, 3, 5]), u(&[3])], |_, v| v[0].add_channel_bias(v[1]));
    case!("add_channel_bias 2-D", [u(&[2, 3, 4, 4]), u(&[3])], |_, v| v[0].add_channel_bias(v[1]));
    case!("reshape", [u(&[3, 4])], |_, v| v[0].reshape(&[2, 6]));
    case!("narrow", [u(&[3, 5, 2])], |_, v| v[0].narrow(1, 1, 3));
    case!("concat", [u(&[2, 3]), u(&[2, 2]), u(&[2, 1])], |t, v| t.concat(v, 1));
    case!("concat axis 0", [u(&[1, 4]), u(&[2, 4])], |t, v| t.concat(v, 0));

    let plan1 = Arc::new(SpectralPlan::new(&[16], 5).unwrap());
    let ws = plan1.weight_shape(3, 2);
    case!("spectral 1-D", [u(&[2, 3, 16]), u(&ws), u(&ws)], move |_, v| v[0].spectral_multiply(v[1], v[2], &plan1));
    let plan2 = Arc::new(SpectralPlan::new(&[8, 8], 3).unwrap());
    let ws = plan2.weight_shape(2, 2);
    case!("spectral 2-D", [u(&[2, 2, 8, 8]), u(&ws), u(&ws)], move |_, v| v[0].spectral_multiply(v[1], v[2], &plan2));
    let full = Arc::new(SpectralPlan::new(&[8], 5).unwrap());
    let ws = full.weight_shape(1, 1);
    case!("spectral 1-D all bins", [u(&[1, 1, 8]), u(&ws), u(&ws)], move |_, v| v[0].spectral_multiply(v[1], v[2], &full));

    let g1 = Grid::new(1, 16, Boundary::DirichletZero, 3, 6, 1.0).unwrap();
    let g2 = Grid::new(2, 8, Boundary::Periodic, 3, 6, 1.0).unwrap();
    for (g, name) in [(&g1, "1-D"), (&g2, "2-D")] {
        let op = DiscreteOperator::for_grid(g, 0.1).unwrap();
        let prop = Arc::new(Propagator::new(&op, g.dt_fine()).unwrap());
        let mut shape = vec![2];
        shape.extend(g.spatial_shape());
        let apply = OperatorApply::new(op);
        let solve = Arc::new(PropagatorSolve(prop.clone()));
        let dx = Derivative::new(g, Axis::X).unwrap();
        let names: [&'static str; 3] = if name == "1-D" {
            ["operator 1-D", "propagator 1-D", "derivative 1-D"]
        } else {
            ["operator 2-D", "propagator 2-D", "derivative 2-D"]
        };
        case!(names[0], [u(&shape)], move |_, v| v[0].linear(apply.clone()));
        case!(names[1], [u(&shape)], move |_, v| v[0].linear(solve.clone()));
        case!(names[2], [u(&shape)], move |_, v| v[0].linear(dx.clone()));
    }
    let dy = Derivative::new(&g2, Axis::Y).unwrap();
    case!("derivative 2-D y", [u(&[2, 8, 8])], move |_, v| v[0].linear(dy.clone()));

    let steps = g1.fine_steps;
    let p = g1.points();
    let prop = Arc::new(Propagator::new(&DiscreteOperator::for_grid(&g1, 0.1).unwrap(), g1.dt_fine()).unwrap());
    let semigroup = Arc::new(Semigroup {
        prop: prop.clone(),
        steps,
        spatial: g1.spatial_shape(),
    });
    case!("semigroup", [u(&[2, p])], move |_, v| v[0].linear(semigroup.clone()));
    let integral = Arc::new(TimeIntegral { prop, steps });
    case!("time_integral", [u(&[2, steps + 1, p])], move |_, v| v[0].linear(integral.clone()));
    let hold = Arc::new(HoldForcing {
        slices: 2,
        substeps: 3,
        points: p,
    });
    case!("hold_forcing", [u(&[2, 2, p])], move |_, v| v[0].linear(hold.clone()));
    let pad = Arc::new(PadTime { steps, points: p });
    case!("pad_time", [u(&[2, steps, p])], move |_, v| v[0].linear(pad.clone()));
    let sample = Arc::new(TimeSample {
        times: steps + 1,
        rows: vec![0, 3, 6],
        points: p,
    });
    case!("time_sample", [u(&[2, steps + 1, p])], move |_, v| v[0].linear(sample.clone()));

    let a = nonzero(&mut r, &[3, 4]);
    let b = nonzero(&mut r, &[3, 4]);
    case!("div", [a, b], |_, v| v[0].div(v[1]));
    let a = uniform(&mut r, &[2, 4], -1.0, 1.0);
    let b = nonzero(&mut r, &[4]);
    case!("div broadcast", [a, b], |_, v| v[0].div(v[1]));
    case!("relu", [nonzero(&mut r, &[8])], |_, v| v[0].relu());
    case!("sqrt", [uniform(&mut r, &[6], 0.5, 1.5)], |_, v| v[0].sqrt());

    let x = uniform(&mut r, &[2, 3, 8], -1.0, 1.0);
    let k = uniform(&mut r, &[3, 3, 3], -1.0, 1.0);
    let bias = uniform(&mut r, &[3], -1.0, 1.0);
    case!("conv chain", [x, k, bias], |_, v| {
        v[0].conv(v[1], Padding::Periodic)?.add_channel_bias(v[2])?.gelu()?.mul(v[0])?.tanh()
    });
    cases
}
