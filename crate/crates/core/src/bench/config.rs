//! The JSON run configuration read by every subcommand.

use serde::{Deserialize, Serialize};

use super::TaskConfig;
use crate::control::{OpenLoopConfig, PolicyConfig, PolicyTrainConfig};
use crate::error::{invalid, Result};
use crate::noise::derive_seed;
use crate::regfeat::FeatureSpec;
use crate::solver::{DatasetConfig, Samplers, SpdeProblem, Split};
use crate::surrogate::{BackboneConfig, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub samplers: Samplers,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 500,
            test_count: 100,
            samplers: Samplers::default(),
        }
    }
}

/// One surrogate and how to train it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

impl ModelEntry {
    pub fn label(&self) -> String {
        self.model.label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Environment noise scales the controllers are evaluated at.
    pub sigmas: Vec<f64>,
    /// Environment runs per task, each under its own noise.
    pub repeats: usize,
    /// Open-loop learning rates tried on `sweep_tasks` calibration tasks;
    /// empty keeps `open_loop.lr`.
    pub open_loop_lrs: Vec<f64>,
    pub sweep_tasks: usize,
    /// Include the zero-forcing baseline.
    pub zero_control: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.05, 1.0],
            repeats: 1,
            open_loop_lrs: vec![0.03, 0.1, 0.3],
            sweep_tasks: 4,
            zero_control: true,
        }
    }
}

/// Surrogates trained and tested at several noise scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub sigmas: Vec<f64>,
    pub seeds: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub models: Vec<ModelEntry>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let epochs = 8;
        Self {
            sigmas: vec![0.05, 0.2, 0.5],
            seeds: 3,
            train_count: 500,
            test_count: 100,
            models: vec![
                ModelEntry {
                    model: ModelConfig::rf(BackboneConfig::spectral(), FeatureSpec::new(1, 3, 2)),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
                ModelEntry {
                    model: ModelConfig::plain(BackboneConfig::spectral()),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: SpdeProblem,
    /// Mixed into every stage's own seed.
    pub seed: u64,
    pub data: DataConfig,
    pub models: Vec<ModelEntry>,
    pub policy: PolicyConfig,
    pub policy_training: PolicyTrainConfig,
    pub tasks: TaskConfig,
    pub open_loop: OpenLoopConfig,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::reaction_diffusion()
    }
}

impl RunConfig {
    /// Desk-scale 1-D reaction-diffusion benchmark.
    pub fn reaction_diffusion() -> Self {
        let spec = FeatureSpec::new(1, 3, 2);
        let epochs = 20;
        Self {
            problem: SpdeProblem::reaction_diffusion(),
            seed: 0,
            data: DataConfig::default(),
            models: vec![
                ModelEntry {
                    model: ModelConfig::plain(BackboneConfig::conv()),
                    training: TrainConfig::conv().with_epochs(epochs),
                },
                ModelEntry {
                    model: ModelConfig::rf(BackboneConfig::conv(), spec.clone()),
                    training: TrainConfig::conv().with_epochs(epochs),
                },
                ModelEntry {
                    model: ModelConfig::plain(BackboneConfig::spectral()),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
                ModelEntry {
                    model: ModelConfig::rf(BackboneConfig::spectral(), spec),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
            ],
            policy: PolicyConfig::default(),
            policy_training: PolicyTrainConfig::default(),
            tasks: TaskConfig {
                samples: 4,
                ..TaskConfig::default()
            },
            open_loop: OpenLoopConfig::default(),
            evaluation: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// Desk-scale 2-D Navier–Stokes benchmark.
    pub fn navier_stokes() -> Self {
        let problem = SpdeProblem::navier_stokes();
        let spec = FeatureSpec::new(1, 2, 1);
        let epochs = 10;
        let spectral = || BackboneConfig {
            modes: 8,
            ..BackboneConfig::spectral()
        };
        Self {
            data: DataConfig {
                train_count: 200,
                test_count: 50,
                ..DataConfig::default()
            },
            models: vec![
                ModelEntry {
                    model: ModelConfig::plain(spectral()),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
                ModelEntry {
                    model: ModelConfig::rf(spectral(), spec),
                    training: TrainConfig::spectral().with_epochs(epochs),
                },
            ],
            policy_training: PolicyTrainConfig {
                iterations: 200,
                batch_tasks: 8,
                ..PolicyTrainConfig::default()
            },
            tasks: TaskConfig {
                alpha: 100.0,
                samples: 2,
                count: 20,
                ..TaskConfig::default()
            },
            evaluation: EvalConfig {
                sigmas: vec![problem.sigma],
                ..EvalConfig::default()
            },
            ablation: AblationConfig {
                models: vec![],
                ..AblationConfig::default()
            },
            problem,
            ..Self::reaction_diffusion()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        let labels: Vec<String> = self.models.iter().map(ModelEntry::label).collect();
        if (1..labels.len()).any(|i| labels[..i].contains(&labels[i])) {
            return Err(invalid("model labels must be distinct"));
        }
        for m in self.models.iter().chain(&self.ablation.models) {
            m.model.backbone.validate()?;
            m.training.validate()?;
        }
        self.policy.validate()?;
        self.policy_training.validate()?;
        let e = &self.evaluation;
        if e.repeats == 0 || e.sigmas.iter().any(|s| !(*s >= 0.0)) || e.open_loop_lrs.iter().any(|l| !(*l > 0.0)) {
            return Err(invalid("evaluation needs positive repeats, nonnegative sigmas and positive rates"));
        }
        if self.data.train_count == 0 || self.data.test_count == 0 || self.tasks.count == 0 {
            return Err(invalid("dataset and task counts must be positive"));
        }
        Ok(())
    }

    /// A stage seed mixed with the top-level seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn dataset_config(&self, split: Split) -> DatasetConfig {
        let (count, stage) = match split {
            Split::Train => (self.data.train_count, 1),
            Split::Test => (self.data.test_count, 2),
        };
        DatasetConfig {
            problem: self.problem.clone(),
            samplers: self.data.samplers.clone(),
            count,
            seed: self.stage_seed(stage),
            split,
            keep_noise: true,
        }
    }

    pub fn model_config(&self, entry: &ModelEntry) -> ModelConfig {
        let seed = derive_seed(self.stage_seed(3), entry.model.seed);
        entry.model.clone().with_seed(seed)
    }

    pub fn train_config(&self, entry: &ModelEntry) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.stage_seed(4), entry.training.seed),
            ..entry.training.clone()
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        self.policy.clone().with_seed(derive_seed(self.stage_seed(5), self.policy.seed))
    }

    pub fn policy_train_config(&self) -> PolicyTrainConfig {
        PolicyTrainConfig {
            seed: derive_seed(self.stage_seed(6), self.policy_training.seed),
            ..self.policy_training.clone()
        }
    }

    pub fn open_loop_config(&self) -> OpenLoopConfig {
        OpenLoopConfig {
            seed: derive_seed(self.stage_seed(7), self.open_loop.seed),
            ..self.open_loop.clone()
        }
    }

    pub fn task_seed(&self) -> u64 {
        self.stage_seed(8)
    }
}
