mod common;

use common::features::{brute_force, Field, Setup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdectl_core::grid::{Boundary, DiscreteOperator, Grid};
use spdectl_core::ndtensor::{Tape, Tensor};
use spdectl_core::regfeat::{FeatureSpec, RfBlock};
use spdectl_core::solver::{simulate_with_noise, NoiseCoupling, SpdeProblem};

const N: usize = 8;
const NU: f64 = 0.1;

fn grid() -> Grid {
    Grid::new(1, N, Boundary::DirichletZero, 3, 4, 1.0).unwrap()
}

fn random_inputs(seed: u64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut u0: Vec<f64> = (0..N).map(|_| r.random_range(-1.0..1.0)).collect();
    u0[0] = 0.0;
    u0[N - 1] = 0.0;
    let f = (0..2).map(|_| (0..N).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let xi = (0..4).map(|_| (0..N).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    (u0, f, xi)
}

fn close(a: &Field, b: &[f64]) -> bool {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().flatten().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * scale)
}

#[test]
fn features_match_the_literal_set_builder() {
    let g = grid();
    let op = DiscreteOperator::for_grid(&g, NU).unwrap();
    let setup = Setup {
        n: N,
        eps: g.eps(),
        nu: NU,
        dt: g.dt_fine(),
        steps: 4,
        substeps: 2,
    };
    let (u0, f, xi) = random_inputs(5);
    for n in 0..=2 {
        for m in 0..=2 {
            for l in 0..=2 {
                let block = RfBlock::new(&FeatureSpec::new(n, m, l).with_cap(1000), &g, &op).unwrap();
                let tape = Tape::new();
                let fine = block
                    .evaluate_fine(
                        tape.constant(Tensor::new(vec![1, N], u0.clone()).unwrap()),
                        tape.constant(Tensor::new(vec![1, 2, N], f.concat()).unwrap()),
                        tape.constant(Tensor::new(vec![1, 4, N], xi.concat()).unwrap()),
                    )
                    .unwrap();
                let ours = fine.value();
                let per = 5 * N;
                let oracle = brute_force(&setup, (n, m, l), &u0, &f, &xi);
                for (i, key) in block.keys().iter().enumerate() {
                    let field = &ours.data()[i * per..(i + 1) * per];
                    assert!(
                        oracle.iter().any(|o| close(o, field)),
                        "({n},{m},{l}) feature {key} has no oracle counterpart"
                    );
                }
                for (j, o) in oracle.iter().enumerate() {
                    let hit = (0..block.len()).any(|i| close(o, &ours.data()[i * per..(i + 1) * per]));
                    assert!(hit, "({n},{m},{l}) oracle field {j} missing from the feature set");
                }
            }
        }
    }
}

#[test]
fn feature_count_is_monotone_in_each_height() {
    let count = |n, m, l| {
        spdectl_core::regfeat::enumerate_terms(&FeatureSpec::new(n, m, l).with_cap(100_000), 1)
            .unwrap()
            .len()
    };
    for n in 0..2 {
        for m in 0..2 {
            for l in 0..2 {
                let c = count(n, m, l);
                assert!(count(n + 1, m, l) >= c);
                assert!(count(n, m + 1, l) >= c);
                assert!(count(n, m, l + 1) >= c);
            }
        }
    }
}

#[test]
fn gradients_of_summed_features_match_finite_differences() {
    let g = grid();
    let op = DiscreteOperator::for_grid(&g, NU).unwrap();
    let block = RfBlock::new(&FeatureSpec::new(2, 1, 2), &g, &op).unwrap();
    let (u0, f, xi) = random_inputs(9);
    let base = [
        Tensor::new(vec![1, N], u0).unwrap(),
        Tensor::new(vec![1, 2, N], f.concat()).unwrap(),
        Tensor::new(vec![1, 4, N], xi.concat()).unwrap(),
    ];
    let loss = |inputs: &[Tensor]| -> f64 {
        block
            .end_values(&inputs[0], &inputs[1], &inputs[2])
            .unwrap()
            .sum()
    };
    let tape = Tape::new();
    let vars = tape.params(&base);
    let root = block.end_features(vars[0], vars[1], vars[2]).unwrap().sum().unwrap();
    let grads = tape.backward(root).unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..20 {
        let dir: Vec<Tensor> = base
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0)))
            .collect();
        let shift = |c: f64| -> Vec<Tensor> {
            base.iter()
                .zip(&dir)
                .map(|(b, d)| {
                    let mut x = b.clone();
                    x.axpy(c, d);
                    x
                })
                .collect()
        };
        let numeric = (loss(&shift(h)) - loss(&shift(-h))) / (2.0 * h);
        let analytic: f64 = grads.iter().zip(&dir).map(|(gr, d)| gr.dot(d)).sum();
        let e = common::fd::rel_err(analytic, numeric);
        assert!(e < 1e-4, "relative error {e}");
    }
}

#[test]
fn linear_spde_is_the_sum_of_three_features() {
    let mut p = SpdeProblem::reaction_diffusion().with_sigma(0.7);
    p.nonlinear = false;
    p.coupling = NoiseCoupling::Additive;
    let g = p.grid.clone();
    let block = RfBlock::new(&FeatureSpec::new(1, 1, 1), &g, &p.operator().unwrap()).unwrap();
    let (iu, i_f, ix) = (
        block.index_of("u").unwrap(),
        block.index_of("I[f]").unwrap(),
        block.index_of("I[xi]").unwrap(),
    );
    let samplers = spdectl_core::solver::Samplers::default();
    for seed in 0..5 {
        let (u0, f) = spdectl_core::solver::sample_inputs(&p, &samplers, seed);
        let xi = p.noise(seed + 100).unwrap();
        let reference = simulate_with_noise(&p, &u0, &f, &xi).unwrap();
        let fs = block
            .evaluate(
                &u0.reshape(&[1, 64]).unwrap(),
                &f.reshape(&[1, 10, 64]).unwrap(),
                &xi.reshape(&[1, 200, 64]).unwrap(),
            )
            .unwrap();
        let v = fs.values.index0(0);
        let combo = v
            .index0(iu)
            .add(&v.index0(i_f))
            .unwrap()
            .add(&v.index0(ix).scale(p.sigma))
            .unwrap();
        assert!(combo.rel_l2(&reference) < 1e-10);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let g = grid();
    let op = DiscreteOperator::for_grid(&g, NU).unwrap();
    let (u0, f, xi) = random_inputs(3);
    let run = || {
        let block = RfBlock::new(&FeatureSpec::new(2, 2, 1), &g, &op).unwrap();
        block
            .evaluate(
                &Tensor::new(vec![1, N], u0.clone()).unwrap(),
                &Tensor::new(vec![1, 2, N], f.concat()).unwrap(),
                &Tensor::new(vec![1, 4, N], xi.concat()).unwrap(),
            )
            .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.keys[0], "u");
}
