mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdectl_core::bench::{make_tasks, score, TaskConfig, TaskSampler, TrackingTask};
use spdectl_core::control::{
    encode_state, noise_batch, open_loop_objective, open_loop_optimize, policy_act, policy_loss_and_gradient, replay, run_closed_loop, train_policy,
    ControlEvent, OpenLoopConfig, PolicyConfig, PolicyNet, PolicyTrainConfig,
};
use spdectl_core::ndtensor::{Tape, Tensor, Var};
use spdectl_core::regfeat::FeatureSpec;
use spdectl_core::solver::{generate_dataset, Dataset, DatasetConfig, Samplers, SpdeProblem, Split};
use spdectl_core::surrogate::{BackboneConfig, Dynamics, ModelConfig, StepOutput, SurrogateModel};

const P: usize = 64;

fn problem() -> SpdeProblem {
    SpdeProblem::reaction_diffusion()
}

fn dataset(count: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        problem: problem(),
        samplers: Samplers::default(),
        count,
        seed,
        split: Split::Train,
        keep_noise: true,
    })
    .unwrap()
}

fn small() -> PolicyConfig {
    PolicyConfig {
        hidden: vec![16, 16],
        ..PolicyConfig::default()
    }
}

fn randomize(net: &mut PolicyNet, seed: u64, std: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut net.params {
        *t = Tensor::from_fn(t.shape(), |_| r.random_range(-std..std));
    }
}

fn field(seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..P).map(|_| r.random_range(-1.0..1.0)).collect();
    v[0] = 0.0;
    v[P - 1] = 0.0;
    Tensor::from_vec(v)
}

/// `u_{t+1} = c·u_t + δt·f_t`, ignoring the noise.
struct Relax {
    problem: SpdeProblem,
    c: f64,
}

impl Dynamics for Relax {
    fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    fn transition<'t>(&self, tape: &'t Tape, u: Var<'t>, f: Var<'t>, _: Var<'t>, _: &[f64]) -> spdectl_core::Result<StepOutput<'t>> {
        let next = u.scale(self.c)?.add(f.scale(self.problem.grid.dt())?)?;
        let zero = tape.constant(Tensor::zeros(&u.shape()));
        Ok(StepOutput {
            next,
            u_rec: u,
            f_rec: f,
            linear: next,
            residual: zero,
        })
    }
}

/// Predicts `field` regardless of the inputs.
struct Constant {
    problem: SpdeProblem,
    field: Tensor,
}

impl Dynamics for Constant {
    fn problem(&self) -> &SpdeProblem {
        &self.problem
    }

    fn transition<'t>(&self, tape: &'t Tape, u: Var<'t>, f: Var<'t>, _: Var<'t>, _: &[f64]) -> spdectl_core::Result<StepOutput<'t>> {
        let b = u.shape()[0];
        let next = tape.constant(Tensor::stack(&vec![self.field.clone(); b]).unwrap());
        Ok(StepOutput {
            next,
            u_rec: u,
            f_rec: f,
            linear: next,
            residual: tape.constant(Tensor::zeros(&u.shape())),
        })
    }
}

#[test]
fn encoding_layout_and_linearity() {
    let p = problem();
    let z = Tensor::zeros(&[P]);
    let e = encode_state(&p, &z, &z, 0.7).unwrap();
    assert_eq!(e.len(), 257);
    assert!(e.data()[..256].iter().all(|&v| v == 0.0));
    assert_eq!(e.data()[256], 0.7);

    let (a, b, c, d) = (field(1), field(2), field(3), field(4));
    let combo = |x: &Tensor, y: &Tensor| {
        let mut out = x.scale(2.0);
        out.axpy(-0.5, y);
        out
    };
    let lhs = encode_state(&p, &combo(&a, &c), &combo(&b, &d), 0.0).unwrap();
    let rhs = combo(&encode_state(&p, &a, &b, 0.0).unwrap(), &encode_state(&p, &c, &d, 0.0).unwrap());
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
    }
    // second block is ν·Δu at the interior, zero at the boundary
    let lap = &e.data()[64..128];
    assert_eq!((lap[0], lap[63]), (0.0, 0.0));
    let eu = encode_state(&p, &a, &z, 0.0).unwrap();
    let eps = p.grid.eps();
    for i in 1..63 {
        let want = p.nu * (a.data()[i - 1] - 2.0 * a.data()[i] + a.data()[i + 1]) / (eps * eps);
        assert!((eu.data()[64 + i] - want).abs() < 1e-9 * want.abs().max(1.0));
    }
    assert!(encode_state(&p, &Tensor::zeros(&[63]), &z, 0.0).is_err());
}

#[test]
fn policy_widths_follow_the_grid() {
    let net = PolicyNet::new(&problem(), PolicyConfig::default()).unwrap();
    assert_eq!(net.input_width(), 257);
    assert_eq!(net.output_width(), 64);
    assert_eq!(net.params[0].shape(), &[257, 256]);
    assert_eq!(net.params.last().unwrap().shape(), &[64]);
    let large = PolicyNet::new(&problem(), PolicyConfig::large()).unwrap();
    let widths: Vec<usize> = large.params.iter().step_by(2).map(|w| w.shape()[1]).collect();
    assert_eq!(widths, vec![2048, 1024, 1024, 64]);
}

#[test]
fn fresh_policy_outputs_zero_and_is_deterministic() {
    let net = PolicyNet::new(&problem(), small().with_seed(3)).unwrap();
    let a = policy_act(&net, &field(1), &field(2), 0.3).unwrap();
    assert_eq!(a.shape(), &[P]);
    assert_eq!(a.max_abs(), 0.0);
    let mut net = net;
    randomize(&mut net, 5, 0.3);
    let a = policy_act(&net, &field(1), &field(2), 0.3).unwrap();
    let b = policy_act(&net, &field(1), &field(2), 0.3).unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs() > 0.0);
    assert_eq!((a.data()[0], a.data()[P - 1]), (0.0, 0.0));
}

#[test]
fn action_energy_gradient_matches_finite_differences() {
    let mut net = PolicyNet::new(&problem(), small()).unwrap();
    randomize(&mut net, 7, 0.2);
    let (u, target) = (field(1), field(2));
    let energy = |params: &[Tensor]| -> f64 {
        let mut n = net.clone();
        n.params = params.to_vec();
        n.act(&u, &target, 0.4).unwrap().norm().powi(2)
    };
    let tape = Tape::new();
    let vars = tape.params(&net.params);
    let lift = |x: &Tensor| tape.constant(x.reshape(&[1, P]).unwrap());
    let a = net.forward(&vars, lift(&u), lift(&target), 0.4).unwrap();
    let grads = tape.backward(a.square().unwrap().sum().unwrap()).unwrap();
    let g: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let dir: Vec<Tensor> = net.params.iter().map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0))).collect();
        let shift = |c: f64| -> Vec<Tensor> {
            net.params
                .iter()
                .zip(&dir)
                .map(|(p, d)| {
                    let mut x = p.clone();
                    x.axpy(c, d);
                    x
                })
                .collect()
        };
        let numeric = (energy(&shift(1e-6)) - energy(&shift(-1e-6))) / 2e-6;
        let analytic: f64 = g.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        assert!(common::fd::rel_err(analytic, numeric) < 1e-4);
    }
}

fn rf_surrogate(seed: u64) -> SurrogateModel {
    let mut m = SurrogateModel::new(&problem(), ModelConfig::rf(BackboneConfig::conv(), FeatureSpec::new(1, 2, 2))).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut m.params {
        *t = Tensor::from_fn(t.shape(), |_| r.random_range(-0.1..0.1));
    }
    m
}

fn loss_inputs(m: usize) -> (Tensor, Tensor, Tensor) {
    let p = problem();
    let u0 = Tensor::stack(&(0..m).map(|i| field(10 + i as u64)).collect::<Vec<_>>()).unwrap();
    let target = Tensor::stack(&(0..m).map(|i| field(20 + i as u64)).collect::<Vec<_>>()).unwrap();
    let xi = Tensor::stack(&(0..m).map(|i| p.noise(30 + i as u64).unwrap()).collect::<Vec<_>>()).unwrap();
    (u0, target, xi)
}

#[test]
fn policy_objective_gradient_matches_finite_differences() {
    let model = rf_surrogate(1);
    let mut net = PolicyNet::new(&problem(), small()).unwrap();
    randomize(&mut net, 2, 0.05);
    let (u0, target, xi) = loss_inputs(3);
    let alpha = 0.01;
    let (_, g) = policy_loss_and_gradient(&net, &net.params, &model, &u0, &target, &xi, alpha).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let dir: Vec<Tensor> = net.params.iter().map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0))).collect();
        let at = |c: f64| -> f64 {
            let shifted: Vec<Tensor> = net
                .params
                .iter()
                .zip(&dir)
                .map(|(p, d)| {
                    let mut x = p.clone();
                    x.axpy(c, d);
                    x
                })
                .collect();
            policy_loss_and_gradient(&net, &shifted, &model, &u0, &target, &xi, alpha).unwrap().0
        };
        let numeric = (at(1e-6) - at(-1e-6)) / 2e-6;
        let analytic: f64 = g.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        let e = common::fd::rel_err(analytic, numeric);
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn fresh_policy_receives_gradient_through_the_features() {
    let model = rf_surrogate(3);
    let net = PolicyNet::new(&problem(), small().with_seed(1)).unwrap();
    let (u0, target, xi) = loss_inputs(2);
    let (loss, g) = policy_loss_and_gradient(&net, &net.params, &model, &u0, &target, &xi, 0.01).unwrap();
    assert!(loss > 0.0);
    let last = g.len() - 2;
    assert!(g[last].max_abs() > 0.0);
}

#[test]
fn perfect_surrogate_and_idle_policy_give_zero_objective() {
    let p = problem();
    let goal = field(5);
    let model = Constant {
        problem: p.clone(),
        field: goal.clone(),
    };
    let net = PolicyNet::new(&p, small()).unwrap();
    let (u0, _, xi) = loss_inputs(2);
    let target = Tensor::stack(&[goal.clone(), goal]).unwrap();
    let (loss, _) = policy_loss_and_gradient(&net, &net.params, &model, &u0, &target, &xi, 0.5).unwrap();
    assert_eq!(loss, 0.0);
}

fn action_norm(net: &PolicyNet, tasks: &[TrackingTask]) -> f64 {
    tasks.iter().map(|t| policy_act(net, &t.u0, &t.target, 0.0).unwrap().norm()).sum()
}

#[test]
fn heavy_energy_weight_suppresses_actions() {
    let p = problem();
    let data = dataset(4, 1);
    let model = Relax { problem: p.clone(), c: 0.9 };
    let cfg = PolicyTrainConfig {
        iterations: 40,
        batch_tasks: 2,
        lr: 3e-3,
        final_lr_fraction: 0.01,
        ..PolicyTrainConfig::default()
    };
    let norm_for = |alpha: f64| {
        let sampler = TaskSampler::new(&data, &TaskConfig { alpha, samples: 1, ..TaskConfig::default() }).unwrap();
        let mut net = PolicyNet::new(&p, small()).unwrap();
        randomize(&mut net, 9, 0.05);
        train_policy(&mut net, &model, &sampler, &cfg).unwrap();
        action_norm(&net, &sampler.tasks(4, 77))
    };
    let free = norm_for(0.0);
    let heavy = norm_for(1e4);
    assert!(free > 0.0);
    assert!(heavy < 0.1 * free, "{heavy} vs {free}");
}

#[test]
fn policy_training_reduces_the_objective_and_is_thread_independent() {
    let p = problem();
    let data = dataset(4, 2);
    let model = Relax { problem: p.clone(), c: 0.9 };
    let sampler = TaskSampler::new(&data, &TaskConfig { samples: 5, ..TaskConfig::default() }).unwrap();
    let cfg = PolicyTrainConfig {
        iterations: 30,
        batch_tasks: 4,
        lr: 3e-3,
        ..PolicyTrainConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut net = PolicyNet::new(&p, small()).unwrap();
            let r = train_policy(&mut net, &model, &sampler, &cfg).unwrap();
            (r.losses, net.params)
        })
    };
    let (losses, params) = run(1);
    assert_eq!((losses.clone(), params), run(3));
    let head: f64 = losses[..5].iter().sum();
    let tail: f64 = losses[25..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn open_loop_keeps_zero_forcing_at_a_stationary_target() {
    let p = problem();
    let model = Relax { problem: p.clone(), c: 1.0 };
    let u = field(8);
    let task = TrackingTask {
        u0: u.clone(),
        target: u,
        alpha: 0.01,
        samples: 2,
        noise_seed: 3,
        source: 0,
    };
    let plan = open_loop_optimize(&model, &task, &OpenLoopConfig { iterations: 20, ..OpenLoopConfig::default() }).unwrap();
    assert_eq!(plan.objective, 0.0);
    assert!(!plan.improved);
    assert_eq!(plan.forcing.max_abs(), 0.0);
    assert_eq!(plan.forcing.shape(), p.forcing_shape().as_slice());
}

#[test]
fn open_loop_gradient_matches_finite_differences() {
    let p = problem();
    let model = rf_surrogate(5);
    let tasks = make_tasks(&dataset(3, 3), &TaskConfig { count: 1, ..TaskConfig::default() }, 1).unwrap();
    let xi = noise_batch(&p, &[4, 5]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut f = Tensor::from_fn(&p.forcing_shape(), |_| r.random_range(-0.5..0.5));
    p.grid.pin_boundary(f.data_mut());
    let (_, g) = open_loop_objective(&model, &tasks[0], &xi, &f).unwrap();
    for _ in 0..10 {
        let mut dir = Tensor::from_fn(f.shape(), |_| r.random_range(-1.0..1.0));
        p.grid.pin_boundary(dir.data_mut());
        let at = |c: f64| {
            let mut x = f.clone();
            x.axpy(c, &dir);
            open_loop_objective(&model, &tasks[0], &xi, &x).unwrap().0
        };
        let h = 1e-5;
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
    }
}

#[test]
fn open_loop_best_objective_never_increases() {
    let p = problem();
    let model = rf_surrogate(5);
    // a smooth objective: no energy term
    let tasks = make_tasks(&dataset(3, 3), &TaskConfig { count: 1, alpha: 0.0, samples: 2, ..TaskConfig::default() }, 1).unwrap();
    let cfg = OpenLoopConfig {
        iterations: 15,
        lr: 0.01,
        seed: 0,
    };
    let plan = open_loop_optimize(&model, &tasks[0], &cfg).unwrap();
    assert_eq!(plan.history.len(), 16);
    assert!(plan.accepted.windows(2).all(|w| w[1] <= w[0]));
    assert!(plan.improved, "{:?}", plan.history);
    assert!(plan.objective < plan.history[0]);
    assert_eq!(*plan.accepted.last().unwrap(), plan.objective);
    assert_eq!(plan.forcing.shape(), p.forcing_shape().as_slice());
}

#[test]
fn idle_policy_matches_the_uncontrolled_environment() {
    let p = problem().with_sigma(1.0);
    let tasks = make_tasks(&dataset(3, 4), &TaskConfig { count: 2, ..TaskConfig::default() }, 2).unwrap();
    let net = PolicyNet::new(&p, small()).unwrap();
    for t in &tasks {
        let r = run_closed_loop(&net, &p, t).unwrap();
        assert_eq!(r.forcing.max_abs(), 0.0);
        let free = replay(&p, &t.u0, &Tensor::zeros(&p.forcing_shape()), t.noise_seed).unwrap();
        assert_eq!(r.trajectory, free);
    }
}

#[test]
fn recorded_forcing_replays_bit_exactly() {
    let p = problem();
    let tasks = make_tasks(&dataset(3, 5), &TaskConfig { count: 2, ..TaskConfig::default() }, 3).unwrap();
    let mut net = PolicyNet::new(&p, small()).unwrap();
    randomize(&mut net, 11, 0.05);
    for t in &tasks {
        let r = run_closed_loop(&net, &p, t).unwrap();
        assert!(r.forcing.max_abs() > 0.0);
        assert_eq!(replay(&p, &t.u0, &r.forcing, t.noise_seed).unwrap(), r.trajectory);
        let lines: Vec<ControlEvent> = r.event_log().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, r.events);
        assert_eq!(lines.len(), p.grid.frames);
        assert!(lines.last().unwrap().action_norm.is_none());
        let m = score(&p, &r.trajectory, &r.forcing, t).unwrap();
        assert_eq!(m.e, m.track + m.energy);
    }
}

#[test]
fn policy_checkpoint_round_trip() {
    let p = problem();
    let mut net = PolicyNet::new(&p, small()).unwrap();
    randomize(&mut net, 12, 0.2);
    net.fit_input_scale(&[field(1)], &[field(2)]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.spdm");
    net.save(&path).unwrap();
    let back = PolicyNet::load(&path).unwrap();
    assert_eq!(back.params, net.params);
    assert_eq!(back.input_scale(), net.input_scale());
    assert_eq!(back.act(&field(3), &field(4), 0.1).unwrap(), net.act(&field(3), &field(4), 0.1).unwrap());
    let surrogate_path = dir.path().join("model.spdm");
    rf_surrogate(0).save(&surrogate_path).unwrap();
    assert!(PolicyNet::load(&surrogate_path).is_err());
}
