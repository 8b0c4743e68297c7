//! The stages behind the command-line tool, reading and writing a run directory:
//!
//! ```text
//! data/{train,test}.spdd
//! models/<label>.spdm, models/<label>.policy.spdm
//! results/…            CSV tables, text tables, JSON-lines event logs, stage logs
//! ```

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelEntry, RunConfig};
use super::eval::{evaluate_methods, BenchTable, Controller, Method};
use super::{container, score, MetricsReport, TaskSampler, TrackingTask};
use crate::control::{run_closed_loop, sweep_open_loop_lr, train_policy, OpenLoopConfig, PolicyNet, PolicyTrainReport};
use crate::error::{Error, Result};
use crate::noise::derive_seed;
use crate::solver::{generate_dataset, Dataset, Split};
use crate::surrogate::{evaluate_model, train, ErrorReport, SurrogateModel};

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root.join("data").join(match split {
            Split::Train => "train.spdd",
            Split::Test => "test.spdd",
        })
    }

    pub fn surrogate(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}.spdm"))
    }

    pub fn policy(&self, label: &str) -> PathBuf {
        self.root.join("models").join(format!("{label}.policy.spdm"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.results().join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        Ok(path)
    }

    /// Appends a line to `results/<stage>.log` and echoes it to stderr.
    pub fn log(&self, stage: &str, line: &str) -> Result<()> {
        eprintln!("[{stage}] {line}");
        fs::create_dir_all(self.results())?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.results().join(format!("{stage}.log")))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Records the resolved configuration a stage ran with.
    fn echo_config(&self, stage: &str, cfg: &RunConfig) -> Result<()> {
        self.write(&format!("{stage}.config.json"), &serde_json::to_string_pretty(cfg)?)?;
        Ok(())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Generates and writes the training and test sets.
pub fn generate(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<Dataset>> {
    cfg.validate()?;
    dir.echo_config("generate", cfg)?;
    let mut out = vec![];
    for split in [Split::Train, Split::Test] {
        let data = generate_dataset(&cfg.dataset_config(split))?;
        let path = dir.data(split);
        ensure_parent(&path)?;
        container::save(&data, &path)?;
        dir.log(
            "generate",
            &format!("{} trajectories -> {} (config {})", data.len(), path.display(), data.config_hash()),
        )?;
        out.push(data);
    }
    Ok(out)
}

/// Loads a dataset and checks it was generated from this configuration.
pub fn load_data(cfg: &RunConfig, dir: &RunDir, split: Split) -> Result<Dataset> {
    let path = dir.data(split);
    if !path.exists() {
        return Err(Error::MissingArtifacts(vec![path.display().to_string()]));
    }
    let data = container::load(&path)?;
    if data.config_hash() != cfg.dataset_config(split).hash() {
        return Err(Error::Config(format!(
            "{} was generated from a different configuration; rerun generate",
            path.display()
        )));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSummary {
    pub label: String,
    pub seconds: f64,
    pub errors: ErrorReport,
}

pub fn errors_csv(rows: &[SurrogateSummary]) -> String {
    let mut s = String::from("model,f,u0,u1,prediction,total\n");
    for r in rows {
        let e = &r.errors;
        let _ = writeln!(s, "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", r.label, e.f, e.u0, e.u1, e.prediction, e.total);
    }
    s
}

/// Trains every configured surrogate and reports its test errors.
pub fn train_surrogates(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<SurrogateSummary>> {
    cfg.validate()?;
    dir.echo_config("train-surrogate", cfg)?;
    let train_set = load_data(cfg, dir, Split::Train)?;
    let test_set = load_data(cfg, dir, Split::Test)?;
    let mut out = vec![];
    for entry in &cfg.models {
        let label = entry.label();
        let mut model = SurrogateModel::new(&cfg.problem, cfg.model_config(entry))?;
        let report = train(&mut model, &train_set, &cfg.train_config(entry))?;
        let path = dir.surrogate(&label);
        ensure_parent(&path)?;
        model.save(&path)?;
        dir.write(&format!("{label}.train.csv"), &report.to_csv())?;
        let errors = evaluate_model(&model, &test_set)?;
        dir.log(
            "train-surrogate",
            &format!(
                "{label}: {} params, {:.1}s, test prediction error {:.4} -> {}",
                model.param_count(),
                report.seconds,
                errors.prediction,
                path.display()
            ),
        )?;
        out.push(SurrogateSummary {
            label,
            seconds: report.seconds,
            errors,
        });
    }
    dir.write("surrogate_errors.csv", &errors_csv(&out))?;
    Ok(out)
}

fn load_surrogate(dir: &RunDir, entry: &ModelEntry) -> Result<Option<SurrogateModel>> {
    let path = dir.surrogate(&entry.label());
    if path.exists() {
        Ok(Some(SurrogateModel::load(&path)?))
    } else {
        Ok(None)
    }
}

/// The sampler behind training, calibration and evaluation tasks.
pub fn task_sampler(cfg: &RunConfig, dir: &RunDir) -> Result<TaskSampler> {
    TaskSampler::new(&load_data(cfg, dir, Split::Train)?, &cfg.tasks)
}

/// The evaluation tasks.
pub fn eval_tasks(cfg: &RunConfig, sampler: &TaskSampler) -> Vec<TrackingTask> {
    sampler.tasks(cfg.tasks.count, cfg.task_seed())
}

/// Trains one policy through each available surrogate.
pub fn train_policies(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<(String, PolicyTrainReport)>> {
    cfg.validate()?;
    dir.echo_config("train-policy", cfg)?;
    let sampler = task_sampler(cfg, dir)?;
    let missing: Vec<String> = cfg
        .models
        .iter()
        .map(|e| dir.surrogate(&e.label()))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let mut out = vec![];
    for entry in &cfg.models {
        let label = entry.label();
        let model = load_surrogate(dir, entry)?.expect("checked above");
        let mut policy = PolicyNet::new(&cfg.problem, cfg.policy_config())?;
        let report = train_policy(&mut policy, &model, &sampler, &cfg.policy_train_config())?;
        let path = dir.policy(&label);
        policy.save(&path)?;
        dir.write(&format!("{label}.policy.csv"), &report.to_csv())?;
        dir.log(
            "train-policy",
            &format!(
                "{label}: {:.1}s, loss {:.4} -> {:.4} -> {}",
                report.seconds,
                report.losses[0],
                report.losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            ),
        )?;
        out.push((label, report));
    }
    Ok(out)
}

/// Runs each trained policy in closed loop on the evaluation tasks, writing
/// one event log per task.
pub fn run_control(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    dir.echo_config("control", cfg)?;
    let sampler = task_sampler(cfg, dir)?;
    let tasks = eval_tasks(cfg, &sampler);
    let mut found = vec![];
    let mut missing = vec![];
    for entry in &cfg.models {
        let path = dir.policy(&entry.label());
        if path.exists() {
            found.push((entry.label(), PolicyNet::load(&path)?));
        } else {
            missing.push(path.display().to_string());
        }
    }
    if found.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    for m in &missing {
        dir.log("control", &format!("warning: skipping missing {m}"))?;
    }
    let mut reports = vec![];
    for (label, policy) in &found {
        let mut metrics = vec![];
        let mut seconds = 0.0;
        for (i, t) in tasks.iter().enumerate() {
            let run = run_closed_loop(policy, &cfg.problem, t)?;
            dir.write(&format!("control/{label}/task_{i:03}.jsonl"), &run.event_log())?;
            seconds += run.controller_seconds();
            metrics.push(score(&cfg.problem, &run.trajectory, &run.forcing, t)?);
        }
        let r = MetricsReport::new(format!("{label}/policy"), metrics, seconds / tasks.len() as f64, 0.0);
        dir.log("control", &format!("{}: e {:.4} (track {:.4}, energy {:.4})", r.method, r.e, r.track, r.energy))?;
        reports.push(r);
    }
    let mut csv = String::from("method,e,e_track,e_energy\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{:.17e},{:.17e},{:.17e}", r.method, r.e, r.track, r.energy);
    }
    dir.write("control_metrics.csv", &csv)?;
    Ok(reports)
}

#[derive(Clone, Debug, Default)]
pub struct BenchOutcome {
    pub table: BenchTable,
    /// Checkpoints that were absent; their rows are missing.
    pub skipped: Vec<String>,
    /// Open-loop learning rate chosen for each surrogate.
    pub open_loop_lrs: Vec<(String, f64)>,
}

/// Zero control, closed loop and open loop for every available model, at
/// each of `sigmas`.
fn benchmark(cfg: &RunConfig, dir: &RunDir, stage: &str, sigmas: &[f64]) -> Result<BenchOutcome> {
    let sampler = task_sampler(cfg, dir)?;
    let tasks = eval_tasks(cfg, &sampler);
    let mut skipped = vec![];
    let mut loaded = vec![];
    for entry in &cfg.models {
        let label = entry.label();
        let model = load_surrogate(dir, entry)?;
        let policy_path = dir.policy(&label);
        let policy = if policy_path.exists() {
            Some(PolicyNet::load(&policy_path)?)
        } else {
            None
        };
        if model.is_none() {
            skipped.push(dir.surrogate(&label).display().to_string());
        }
        if policy.is_none() {
            skipped.push(policy_path.display().to_string());
        }
        loaded.push((label, model, policy));
    }
    if loaded.iter().all(|(_, m, p)| m.is_none() && p.is_none()) {
        return Err(Error::MissingArtifacts(skipped));
    }
    for s in &skipped {
        dir.log(stage, &format!("warning: skipping rows of missing {s}"))?;
    }
    let calib = sampler.tasks(cfg.evaluation.sweep_tasks.max(1), cfg.stage_seed(9));
    let mut lrs = vec![];
    let mut methods = vec![];
    if cfg.evaluation.zero_control {
        methods.push(Method::new("zero", Controller::Zero));
    }
    for (label, model, policy) in &loaded {
        if let Some(p) = policy {
            methods.push(Method::new(format!("{label}/policy"), Controller::Policy(p)));
        }
        if let Some(m) = model {
            let mut config: OpenLoopConfig = cfg.open_loop_config();
            if !cfg.evaluation.open_loop_lrs.is_empty() && cfg.evaluation.sweep_tasks > 0 {
                let (lr, means) = sweep_open_loop_lr(m, &calib, &config, &cfg.evaluation.open_loop_lrs)?;
                dir.log(stage, &format!("{label}: open-loop lr {lr} (calibration objectives {means:.4?})"))?;
                config.lr = lr;
            }
            lrs.push((label.clone(), config.lr));
            methods.push(Method::new(format!("{label}/open-loop"), Controller::OpenLoop { model: m, config }));
        }
    }
    let table = evaluate_methods(&methods, &cfg.problem, &tasks, sigmas, cfg.evaluation.repeats)?;
    Ok(BenchOutcome {
        table,
        skipped,
        open_loop_lrs: lrs,
    })
}

/// The tracking benchmark at the training noise scale.
pub fn run_benchmark(cfg: &RunConfig, dir: &RunDir) -> Result<BenchOutcome> {
    cfg.validate()?;
    dir.echo_config("bench", cfg)?;
    let out = benchmark(cfg, dir, "bench", &[cfg.problem.sigma])?;
    dir.write("bench_metrics.csv", &out.table.metrics_csv())?;
    dir.write("bench_timing.csv", &out.table.timing_csv())?;
    dir.write("bench_tasks.csv", &out.table.tasks_csv())?;
    let text = out.table.text();
    dir.write("bench.txt", &text)?;
    dir.log("bench", &format!("\n{text}"))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub sigma: f64,
    pub model: String,
    pub seed: usize,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelAblation {
    pub points: Vec<AblationPoint>,
    /// Median over seeds of the least-squares slope of error against σ.
    pub slopes: Vec<(String, f64)>,
}

impl ModelAblation {
    pub fn slope(&self, model: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.0 == model).map(|s| s.1)
    }

    pub fn points_csv(&self) -> String {
        let mut s = String::from("sigma,method,seed,error\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{:.17e}", p.sigma, p.model, p.seed, p.error);
        }
        s
    }

    pub fn slopes_csv(&self) -> String {
        let mut s = String::from("method,median_slope\n");
        for (m, v) in &self.slopes {
            let _ = writeln!(s, "{m},{v:.17e}");
        }
        s
    }
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Trains and tests each ablation model at each noise scale, for several seeds.
pub fn model_ablation(cfg: &RunConfig, mut progress: impl FnMut(&AblationPoint)) -> Result<ModelAblation> {
    let a = &cfg.ablation;
    if a.sigmas.len() < 2 || a.seeds == 0 {
        return Err(Error::Config("the model ablation needs two noise scales and a seed".into()));
    }
    let mut points = vec![];
    for &sigma in &a.sigmas {
        let sets: Vec<Dataset> = [(Split::Train, a.train_count), (Split::Test, a.test_count)]
            .into_iter()
            .map(|(split, count)| {
                let mut d = cfg.dataset_config(split);
                d.problem = d.problem.with_sigma(sigma);
                d.count = count;
                generate_dataset(&d)
            })
            .collect::<Result<_>>()?;
        for entry in &a.models {
            for seed in 0..a.seeds {
                let mc = cfg.model_config(entry);
                let mut model = SurrogateModel::new(&sets[0].config.problem, mc.clone().with_seed(derive_seed(mc.seed, seed as u64)))?;
                let mut tc = cfg.train_config(entry);
                tc.seed = derive_seed(tc.seed, seed as u64);
                train(&mut model, &sets[0], &tc)?;
                let p = AblationPoint {
                    sigma,
                    model: entry.label(),
                    seed,
                    error: evaluate_model(&model, &sets[1])?.prediction,
                };
                progress(&p);
                points.push(p);
            }
        }
    }
    let slopes = a
        .models
        .iter()
        .map(|entry| {
            let label = entry.label();
            let per_seed: Vec<f64> = (0..a.seeds)
                .map(|s| {
                    let (x, y): (Vec<f64>, Vec<f64>) = points
                        .iter()
                        .filter(|p| p.model == label && p.seed == s)
                        .map(|p| (p.sigma, p.error))
                        .unzip();
                    slope(&x, &y)
                })
                .collect();
            (label, median(&per_seed))
        })
        .collect();
    Ok(ModelAblation { points, slopes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationPart {
    Control,
    Model,
    Both,
}

#[derive(Clone, Debug, Default)]
pub struct AblationOutcome {
    pub control: Option<BenchOutcome>,
    pub model: Option<ModelAblation>,
}

/// Controllers trained at the base noise scale evaluated at each of
/// `evaluation.sigmas`, and surrogates trained and tested at each of
/// `ablation.sigmas`.
pub fn run_noise_ablation(cfg: &RunConfig, dir: &RunDir, part: AblationPart) -> Result<AblationOutcome> {
    cfg.validate()?;
    dir.echo_config("ablate", cfg)?;
    let mut out = AblationOutcome::default();
    if part != AblationPart::Model {
        let b = benchmark(cfg, dir, "ablate", &cfg.evaluation.sigmas)?;
        dir.write("ablation_control.csv", &b.table.metrics_csv())?;
        dir.write("ablation_control_timing.csv", &b.table.timing_csv())?;
        let text = b.table.text();
        dir.write("ablation_control.txt", &text)?;
        dir.log("ablate", &format!("\n{text}"))?;
        out.control = Some(b);
    }
    if part != AblationPart::Control {
        let m = model_ablation(cfg, |p| {
            let _ = dir.log(
                "ablate",
                &format!("sigma {} {} seed {}: prediction error {:.4}", p.sigma, p.model, p.seed, p.error),
            );
        })?;
        dir.write("ablation_model.csv", &m.points_csv())?;
        dir.write("ablation_slopes.csv", &m.slopes_csv())?;
        out.model = Some(m);
    }
    Ok(out)
}
