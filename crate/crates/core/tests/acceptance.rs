//! Acceptance criteria, one PASS/FAIL line each. `SPDECTL_CRITERIA=1,5,11`
//! runs a subset.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::features::{brute_force, Setup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdectl_core::bench::{
    generate, model_ablation, run_benchmark, run_control, run_noise_ablation, train_policies, train_surrogates,
    AblationPart, ModelEntry, RunConfig, RunDir,
};
use spdectl_core::control::{policy_loss_and_gradient, OpenLoopConfig, PolicyConfig, PolicyNet, PolicyTrainConfig};
use spdectl_core::grid::{Boundary, DiscreteOperator, Grid};
use spdectl_core::ndtensor::{Tape, Tensor};
use spdectl_core::noise::{derive_seed, sample_white_noise, smooth_fields};
use spdectl_core::regfeat::{FeatureSpec, RfBlock};
use spdectl_core::solver::{
    generate_dataset, ns_divergence, ns_velocity, sample_inputs, simulate_with_noise, DatasetConfig, FieldSampler,
    NoiseCoupling, Samplers, SpdeProblem, Split,
};
use spdectl_core::surrogate::{loss_and_gradient, BackboneConfig, LossWeights, ModelConfig, PairSet, SurrogateModel, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Central-difference check of a parameter-list objective along random directions.
fn directional_check(params: &[Tensor], grads: &[Tensor], seed: u64, directions: usize, h: f64, loss: impl Fn(&[Tensor]) -> f64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Tensor> = params
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |_| r.random_range(-1.0..1.0)))
            .collect();
        let at = |c: f64| {
            let shifted: Vec<Tensor> = params
                .iter()
                .zip(&dir)
                .map(|(p, d)| {
                    let mut x = p.clone();
                    x.axpy(c, d);
                    x
                })
                .collect();
            loss(&shifted)
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        worst = worst.max(common::fd::rel_err(analytic, numeric));
    }
    worst
}

fn randomize(params: &mut [Tensor], seed: u64, std: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in params {
        *t = Tensor::from_fn(t.shape(), |_| r.random_range(-std..std));
    }
}

fn feature_oracle() -> Outcome {
    const N: usize = 8;
    let nu = 0.1;
    let g = Grid::new(1, N, Boundary::DirichletZero, 3, 4, 1.0).unwrap();
    let op = DiscreteOperator::for_grid(&g, nu).unwrap();
    let setup = Setup {
        n: N,
        eps: g.eps(),
        nu,
        dt: g.dt_fine(),
        steps: 4,
        substeps: 2,
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut u0: Vec<f64> = (0..N).map(|_| r.random_range(-1.0..1.0)).collect();
    u0[0] = 0.0;
    u0[N - 1] = 0.0;
    let f: Vec<Vec<f64>> = (0..2).map(|_| (0..N).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let xi: Vec<Vec<f64>> = (0..4).map(|_| (0..N).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let per = 5 * N;
    let mut worst: f64 = 0.0;
    let mut fields = 0;
    for n in 0..=2 {
        for m in 0..=2 {
            for l in 0..=2 {
                let block = RfBlock::new(&FeatureSpec::new(n, m, l).with_cap(1000), &g, &op).unwrap();
                let tape = Tape::new();
                let ours = block
                    .evaluate_fine(
                        tape.constant(Tensor::new(vec![1, N], u0.clone()).unwrap()),
                        tape.constant(Tensor::new(vec![1, 2, N], f.concat()).unwrap()),
                        tape.constant(Tensor::new(vec![1, 4, N], xi.concat()).unwrap()),
                    )
                    .unwrap()
                    .value();
                let oracle = brute_force(&setup, (n, m, l), &u0, &f, &xi);
                let dist = |o: &Vec<Vec<f64>>, i: usize| {
                    let field = &ours.data()[i * per..(i + 1) * per];
                    let scale = field.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                    o.iter().flatten().zip(field).fold(0.0f64, |a, (x, y)| a.max((x - y).abs() / scale))
                };
                // every feature has an oracle twin and every oracle field a feature
                for i in 0..block.len() {
                    worst = worst.max(oracle.iter().map(|o| dist(o, i)).fold(f64::INFINITY, f64::min));
                    fields += 1;
                }
                for o in &oracle {
                    worst = worst.max((0..block.len()).map(|i| dist(o, i)).fold(f64::INFINITY, f64::min));
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("{fields} features, worst deviation {worst:.1e}"))
}

fn mild_solution() -> Outcome {
    let mut coarse = SpdeProblem::reaction_diffusion().with_sigma(0.7);
    coarse.nonlinear = false;
    coarse.coupling = NoiseCoupling::Additive;
    let mut fine = coarse.clone();
    fine.grid.fine_steps *= 2;
    let block = RfBlock::new(&FeatureSpec::new(1, 1, 1), &coarse.grid, &coarse.operator().unwrap()).unwrap();
    let idx = ["u", "I[f]", "I[xi]"].map(|k| block.index_of(k).unwrap());
    let steps = coarse.grid.fine_steps;
    let p = coarse.grid.points();
    let mut ratio: f64 = 0.0;
    for seed in 0..20 {
        let (u0, f) = sample_inputs(&coarse, &Samplers::default(), seed);
        let xi_fine = fine.noise(1000 + seed).unwrap();
        // averaging fine cell pairs keeps the white-noise variance of the coarse cells
        let xi = Tensor::from_fn(&[steps, p], |i| {
            let (k, x) = (i / p, i % p);
            0.5 * (xi_fine.data()[2 * k * p + x] + xi_fine.data()[(2 * k + 1) * p + x])
        });
        let reference = simulate_with_noise(&coarse, &u0, &f, &xi).unwrap();
        let refined = simulate_with_noise(&fine, &u0, &f, &xi_fine).unwrap();
        let fs = block
            .evaluate(&u0.reshape(&[1, p]).unwrap(), &f.reshape(&[1, 10, p]).unwrap(), &xi.reshape(&[1, steps, p]).unwrap())
            .unwrap();
        let v = fs.values.index0(0);
        let combo = v
            .index0(idx[0])
            .add(&v.index0(idx[1]))
            .unwrap()
            .add(&v.index0(idx[2]).scale(coarse.sigma))
            .unwrap();
        let err = combo.sub(&reference).unwrap().norm();
        let self_conv = refined.sub(&reference).unwrap().norm();
        ratio = ratio.max(err / self_conv);
    }
    outcome(ratio <= 2.0, format!("20 instances, worst error / self-convergence error = {ratio:.1e}"))
}

fn solver_analytics() -> Outcome {
    let mut rd = SpdeProblem::reaction_diffusion().with_sigma(0.0);
    rd.nonlinear = false;
    let u0 = rd.grid.sample(|x| (PI * x[0]).sin());
    let u = simulate_with_noise(&rd, &u0, &Tensor::zeros(&rd.forcing_shape()), &Tensor::zeros(&rd.noise_shape())).unwrap();
    let mut heat: f64 = 0.0;
    for (k, t) in rd.grid.times().iter().enumerate() {
        let exact = u0.scale((-rd.nu * PI * PI * t).exp());
        heat = heat.max(u.index0(k).rel_l2(&exact));
    }
    let ns = SpdeProblem::navier_stokes().with_sigma(0.0);
    let w0 = ns.grid.sample(|x| (2.0 * PI * x[0]).sin());
    let w = simulate_with_noise(&ns, &w0, &Tensor::zeros(&ns.forcing_shape()), &Tensor::zeros(&ns.noise_shape())).unwrap();
    let mut shear: f64 = 0.0;
    for (k, t) in ns.grid.times().iter().enumerate() {
        shear = shear.max(w.index0(k).rel_l2(&w0.scale((-ns.nu * 4.0 * PI * PI * t).exp())));
    }
    let mut r = spdectl_core::noise::rng(2);
    let mut div: f64 = 0.0;
    for _ in 0..5 {
        let w = FieldSampler::default().sample(&ns.grid, &mut r);
        let (ux, uy) = ns_velocity(&ns, &w);
        div = div.max(ns_divergence(&ns, &ux, &uy).max_abs());
    }
    outcome(
        heat < 1e-2 && shear < 1e-3 && div < 1e-10,
        format!("heat {heat:.1e}, shear {shear:.1e}, divergence {div:.1e}"),
    )
}

fn gradient_suite() -> Outcome {
    let mut worst_op = ("", 0.0f64);
    let cases = common::gradcheck::cases(1);
    for (i, case) in cases.iter().enumerate() {
        let e = case.max_rel_err(20, 1e-5, 100 + i as u64);
        if !(e <= worst_op.1) {
            worst_op = (case.name, e);
        }
    }

    let p = SpdeProblem::reaction_diffusion();
    let data = generate_dataset(&DatasetConfig {
        problem: p.clone(),
        samplers: Samplers::default(),
        count: 2,
        seed: 7,
        split: Split::Train,
        keep_noise: true,
    })
    .unwrap();
    let pairs = PairSet::from_dataset(&data).unwrap().subset(&[0, 5, 13, 19]);
    let weights = LossWeights::default();
    let spec = FeatureSpec::new(1, 3, 2);
    let mut surrogate: f64 = 0.0;
    for (i, cfg) in [
        ModelConfig::rf(BackboneConfig::conv(), spec.clone()),
        ModelConfig::plain(BackboneConfig::conv()),
        ModelConfig::rf(BackboneConfig::spectral(), spec),
        ModelConfig::plain(BackboneConfig::spectral()),
    ]
    .into_iter()
    .enumerate()
    {
        let mut m = SurrogateModel::new(&p, cfg).unwrap();
        randomize(&mut m.params, 20 + i as u64, 0.2);
        let base = m.params.clone();
        let (_, grads) = loss_and_gradient(&m, &base, &pairs, &weights).unwrap();
        let e = directional_check(&base, &grads, 6, 20, 1e-5, |ps| loss_and_gradient(&m, ps, &pairs, &weights).unwrap().0);
        surrogate = surrogate.max(e);
    }

    let mut model = SurrogateModel::new(&p, ModelConfig::rf(BackboneConfig::conv(), FeatureSpec::new(1, 2, 2))).unwrap();
    randomize(&mut model.params, 1, 0.1);
    let mut net = PolicyNet::new(
        &p,
        PolicyConfig {
            hidden: vec![16, 16],
            ..PolicyConfig::default()
        },
    )
    .unwrap();
    randomize(&mut net.params, 2, 0.05);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut field = || {
        let mut v: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
        v[0] = 0.0;
        v[63] = 0.0;
        Tensor::from_vec(v)
    };
    let u0 = Tensor::stack(&(0..3).map(|_| field()).collect::<Vec<_>>()).unwrap();
    let target = Tensor::stack(&(0..3).map(|_| field()).collect::<Vec<_>>()).unwrap();
    let xi = Tensor::stack(&(0..3).map(|i| p.noise(30 + i).unwrap()).collect::<Vec<_>>()).unwrap();
    let alpha = 0.01;
    let (_, g) = policy_loss_and_gradient(&net, &net.params, &model, &u0, &target, &xi, alpha).unwrap();
    let policy = directional_check(&net.params, &g, 4, 20, 1e-6, |ps| {
        policy_loss_and_gradient(&net, ps, &model, &u0, &target, &xi, alpha).unwrap().0
    });
    outcome(
        worst_op.1 < 1e-4 && surrogate < 1e-4 && policy < 1e-4,
        format!(
            "{} ops (worst {} {:.1e}), surrogate loss {surrogate:.1e}, policy loss {policy:.1e}",
            cases.len(),
            worst_op.0,
            worst_op.1
        ),
    )
}

fn noise_statistics() -> Outcome {
    let g = Grid::reaction_diffusion();
    let expected = 1.0 / (g.dt_fine() * g.eps());
    let cell = 100 * g.points() + 30;
    let xs: Vec<f64> = (0..10_000u64)
        .map(|i| sample_white_noise(&g, derive_seed(11, i)).values.data()[cell])
        .collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    let var_ok = (var / expected - 1.0).abs() < 0.05;
    let mean_ok = mean.abs() < 3.0 * expected.sqrt() / 100.0;

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    for (grid, unit) in [(g.clone(), 3.0), (Grid::navier_stokes(), 9.0)] {
        let n = 4 * grid.points();
        for _ in 0..10 {
            let x = Tensor::from_fn(&[n], |_| unit * r.random_range(-50..50) as f64);
            let y = Tensor::from_fn(&[n], |_| unit * r.random_range(-50..50) as f64);
            let (a, b) = (r.random_range(-9..9) as f64, r.random_range(-9..9) as f64);
            let lhs = smooth_fields(&x.scale(a).add(&y.scale(b)).unwrap(), &grid, 3).unwrap();
            let rhs = smooth_fields(&x, &grid, 3)
                .unwrap()
                .scale(a)
                .add(&smooth_fields(&y, &grid, 3).unwrap().scale(b))
                .unwrap();
            exact &= lhs == rhs;
        }
    }
    outcome(
        var_ok && mean_ok && exact,
        format!(
            "variance ratio {:.4}, mean {mean:.2} (bound {:.2}), linearity exact: {exact}",
            var / expected,
            3.0 * expected.sqrt() / 100.0
        ),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Trains the four reaction-diffusion surrogates for three seeds; the seed-0
/// run directory is kept for the control criteria.
fn surrogate_ordering(keep: &Path) -> Outcome {
    let mut errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let tmp = tempfile::tempdir().unwrap();
        let root = if seed == 0 { keep.to_path_buf() } else { tmp.path().to_path_buf() };
        let dir = RunDir::new(root);
        let cfg = RunConfig {
            seed,
            ..RunConfig::reaction_diffusion()
        };
        generate(&cfg, &dir).unwrap();
        for s in train_surrogates(&cfg, &dir).unwrap() {
            errors.entry(s.label).or_default().push(s.errors.prediction);
        }
    }
    let med: BTreeMap<String, f64> = errors.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect();
    let pass = med["rf-conv"] <= med["conv"] && med["rf-spectral"] <= med["spectral"];
    let detail = med.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("median test prediction error: {detail}"))
}

struct ControlResults {
    effectiveness: Outcome,
    timing: Outcome,
    robustness: Outcome,
}

/// One policy trained through the seed-0 RF spectral surrogate, benchmarked
/// against zero and open-loop control at σ = 0.05 and σ = 1.
fn control(run: &Path) -> ControlResults {
    let mut cfg = RunConfig::reaction_diffusion();
    cfg.models.retain(|m| m.label() == "rf-spectral");
    let dir = RunDir::new(run);
    train_policies(&cfg, &dir).unwrap();
    let b = run_noise_ablation(&cfg, &dir, AblationPart::Control).unwrap().control.unwrap();
    let t = &b.table;
    let (lo, hi) = (cfg.evaluation.sigmas[0], cfg.evaluation.sigmas[1]);
    let get = |s: f64, m: &str| t.get(s, m).unwrap_or_else(|| panic!("row {m} at {s}"));
    let (zero, pol, ol) = (get(lo, "zero"), get(lo, "rf-spectral/policy"), get(lo, "rf-spectral/open-loop"));
    let effectiveness = outcome(
        pol.e <= 0.5 * zero.e && pol.e <= 1.1 * ol.e,
        format!(
            "{} tasks: policy {:.4}, zero {:.4}, open loop {:.4}",
            pol.tasks.len(),
            pol.e,
            zero.e,
            ol.e
        ),
    );
    let timing = outcome(
        pol.seconds <= 0.1 * ol.seconds,
        format!("policy {:.2e} s per task, open loop {:.2e} s per task", pol.seconds, ol.seconds),
    );
    let (pol_hi, ol_hi) = (get(hi, "rf-spectral/policy"), get(hi, "rf-spectral/open-loop"));
    let (dp, dol) = (pol_hi.e - pol.e, ol_hi.e - ol.e);
    let robustness = outcome(
        dp < dol,
        format!(
            "policy {:.4} -> {:.4} (+{dp:.4}), open loop {:.4} -> {:.4} (+{dol:.4})",
            pol.e, pol_hi.e, ol.e, ol_hi.e
        ),
    );
    ControlResults {
        effectiveness,
        timing,
        robustness,
    }
}

fn noise_ablation() -> Outcome {
    let cfg = RunConfig::reaction_diffusion();
    let m = model_ablation(&cfg, |_| {}).unwrap();
    let (rf, plain) = (m.slope("rf-spectral").unwrap(), m.slope("spectral").unwrap());
    outcome(plain > rf, format!("median slope: spectral {plain:.4}, rf-spectral {rf:.4}"))
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::reaction_diffusion();
    cfg.data.train_count = 6;
    cfg.data.test_count = 3;
    let quick = |m: ModelConfig, t: TrainConfig| ModelEntry {
        model: m,
        training: TrainConfig { batch_size: 16, ..t.with_epochs(1) },
    };
    cfg.models = vec![
        quick(ModelConfig::rf(BackboneConfig::spectral(), FeatureSpec::new(1, 2, 1)), TrainConfig::spectral()),
        quick(ModelConfig::plain(BackboneConfig::conv()), TrainConfig::conv()),
    ];
    cfg.policy = PolicyConfig {
        hidden: vec![8],
        ..PolicyConfig::default()
    };
    cfg.policy_training = PolicyTrainConfig {
        iterations: 3,
        batch_tasks: 2,
        ..PolicyTrainConfig::default()
    };
    cfg.tasks.count = 3;
    cfg.tasks.samples = 2;
    cfg.open_loop = OpenLoopConfig {
        iterations: 3,
        ..OpenLoopConfig::default()
    };
    cfg.evaluation.sweep_tasks = 2;
    cfg.ablation.train_count = 4;
    cfg.ablation.test_count = 2;
    cfg.ablation.seeds = 2;
    cfg.ablation.models = cfg.models[..1].to_vec();
    cfg
}

/// Every artifact of a run except logs, timing tables and the text summaries,
/// which carry wall-clock columns.
fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(root).unwrap().display().to_string();
            if name.ends_with(".log") || name.ends_with(".txt") || name.contains("timing") {
                continue;
            }
            out.insert(name, std::fs::read(&p).unwrap());
        }
    }
    out
}

fn pipeline(root: &Path) {
    let cfg = tiny();
    let dir = RunDir::new(root);
    generate(&cfg, &dir).unwrap();
    train_surrogates(&cfg, &dir).unwrap();
    train_policies(&cfg, &dir).unwrap();
    run_control(&cfg, &dir).unwrap();
    run_benchmark(&cfg, &dir).unwrap();
    run_noise_ablation(&cfg, &dir, AblationPart::Both).unwrap();
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = vec![];
    for (i, threads) in [1usize, 1, 4].into_iter().enumerate() {
        let root = tmp.path().join(format!("run{i}"));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pipeline(&root));
        runs.push(artifacts(&root));
    }
    let files = runs[0].len();
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1..].iter().any(|r| r.get(*k) != Some(*v)))
        .map(|(k, _)| k)
        .collect();
    let same_set = runs.iter().all(|r| r.keys().eq(runs[0].keys()));
    outcome(
        differing.is_empty() && same_set && files > 10,
        format!("{files} artifacts compared across two serial runs and one 4-thread run; differing: {differing:?}"),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("SPDECTL_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));
    let mut all_pass = true;
    let mut report = |i: usize, name: &str, o: Outcome, seconds: f64| {
        all_pass &= o.pass;
        println!(
            "criterion {i:>2} {name}: {} ({}; {seconds:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let clock = Instant::now();
        let o = f();
        (o, clock.elapsed().as_secs_f64())
    };

    let simple: [(usize, &str, fn() -> Outcome, f64); 5] = [
        (1, "feature oracle", feature_oracle, 10.0),
        (2, "mild-solution identity", mild_solution, 30.0),
        (3, "solver analytics", solver_analytics, f64::INFINITY),
        (4, "gradient suite", gradient_suite, f64::INFINITY),
        (5, "noise statistics", noise_statistics, f64::INFINITY),
    ];
    for (i, name, f, budget) in simple {
        if wanted(i) {
            let (mut o, s) = timed(&mut || f());
            if s >= budget {
                o = outcome(false, format!("{}; over the {budget}s budget", o.detail));
            }
            report(i, name, o, s);
        }
    }

    let run = tempfile::tempdir().unwrap();
    let needs_control = (7..=9).any(wanted);
    if wanted(6) || needs_control {
        let (mut o, s) = timed(&mut || surrogate_ordering(run.path()));
        if s >= 1800.0 {
            o = outcome(false, format!("{}; over the 30 min budget", o.detail));
        }
        if wanted(6) {
            report(6, "surrogate ordering", o, s);
        }
    }
    if needs_control {
        let clock = Instant::now();
        let c = control(run.path());
        let s = clock.elapsed().as_secs_f64();
        let mut eff = c.effectiveness;
        if s >= 1800.0 {
            eff = outcome(false, format!("{}; over the 30 min budget", eff.detail));
        }
        for (i, name, o) in [
            (7, "control effectiveness", eff),
            (8, "inference timing", c.timing),
            (9, "robustness", c.robustness),
        ] {
            if wanted(i) {
                report(i, name, o, s);
            }
        }
    }
    if wanted(10) {
        let (o, s) = timed(&mut noise_ablation);
        report(10, "noise-scale ablation", o, s);
    }
    if wanted(11) {
        let (o, s) = timed(&mut determinism);
        report(11, "determinism", o, s);
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
