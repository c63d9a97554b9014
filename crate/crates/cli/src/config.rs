//! Strict, declarative run configuration.
//!
//! Unknown keys fail at parse time; cross-field validity (paradigm/method,
//! loss/head, schedule/denoiser pairings) is enforced before any work
//! starts, naming the offending key pair. The resolved config is written
//! next to every run's artifacts so a run can be reproduced byte-for-byte.

use anyhow::{anyhow, bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sre_core::net::{LossKind, LossSpec, LossTerm, NetConfig, Optimizer, TrainConfig};
use sre_core::oracle::GaussianMixture;
use sre_core::paradigm::{BetaSchedule, Paradigm, PredictionKind};
use sre_core::sampler::StepMethod;
use sre_core::schedule::{ScheduleKind, ScheduleSpec, VariableOrder};
use sre_core::task::{latin_square_mixture, sequence_task, TaskDomain};
use sre_core::tsample::{ScalarReweighter, TSampler, TSamplerKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub paradigm: ParadigmSection,
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub tsampler: TSamplerSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditioning: Vec<ConditioningEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    LatinSquare,
    Sequence,
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningEntry {
    pub variable: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParadigmSection {
    pub kind: ParadigmKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_schedule: Option<BetaScheduleKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParadigmKind {
    DdpmDiscrete,
    CosineFlow,
    RectifiedFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub kind: DenoiserKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunk_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pos_embed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_kind: Option<PredictionKind>,
    #[serde(default)]
    pub uncertainty_head: bool,
    #[serde(default)]
    pub variance_interp_head: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    Oracle,
    Neural,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TSamplerSection {
    pub kind: TSamplerKindConfig,
    #[serde(default = "default_reweighter")]
    pub reweighter: ReweighterKind,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "default_scale")]
    pub s: f64,
}

fn default_reweighter() -> ReweighterKind {
    ReweighterKind::Uniform
}

fn default_scale() -> f64 {
    1.0
}

impl Default for TSamplerSection {
    fn default() -> Self {
        Self {
            kind: TSamplerKindConfig::IndependentUniform,
            reweighter: ReweighterKind::Uniform,
            m: 0.0,
            s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TSamplerKindConfig {
    IndependentUniform,
    UniformTbar,
    SharedScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReweighterKind {
    Uniform,
    LogitNormal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKindConfig,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<OrderKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit_order: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKindConfig {
    Parallel,
    Sequential,
    NextK,
    RollingWindow,
    AdaptiveCertainty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderKind {
    Index,
    Random,
    Graph,
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub method: MethodKind,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub learned_variance: bool,
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default)]
    pub record: bool,
}

fn default_chains() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Ddim,
    EulerFlow,
    HeunFlow,
    DdpmAncestral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub loss: Vec<LossEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossEntry {
    pub kind: LossKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
    pub target: PredictionKind,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<FormatKind>,
}

fn default_formats() -> Vec<FormatKind> {
    vec![FormatKind::Csv, FormatKind::Json, FormatKind::Pgm]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatKind {
    Csv,
    Json,
    Pgm,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).context("config parse failed")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validity, enforced before any work starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        match self.task.kind {
            TaskKind::LatinSquare => {
                if self.task.order.is_none() || self.task.sigma.is_none() {
                    bail!("task.kind=\"latin-square\" requires task.order and task.sigma");
                }
            }
            TaskKind::Sequence => {
                if self.task.length.is_none() || self.task.phi.is_none() {
                    bail!("task.kind=\"sequence\" requires task.length and task.phi");
                }
            }
            TaskKind::Mixture => {
                if self.task.mixture.is_none() {
                    bail!("task.kind=\"mixture\" requires the task.mixture table");
                }
            }
        }

        if self.paradigm.kind == ParadigmKind::DdpmDiscrete && self.paradigm.d_steps.is_none() {
            bail!("paradigm.kind=\"ddpm-discrete\" requires paradigm.d_steps");
        }
        if self.paradigm.kind != ParadigmKind::DdpmDiscrete && self.paradigm.d_steps.is_some() {
            bail!("paradigm.d_steps is only valid with paradigm.kind=\"ddpm-discrete\"");
        }

        if self.sampler.eta < 0.0 {
            bail!("sampler.eta must be nonnegative");
        }
        if self.sampler.chains == 0 {
            bail!("sampler.chains must be at least 1");
        }
        match self.sampler.method {
            MethodKind::DdpmAncestral if self.paradigm.kind != ParadigmKind::DdpmDiscrete => {
                bail!(
                    "sampler.method=\"ddpm-ancestral\" requires paradigm.kind=\"ddpm-discrete\""
                );
            }
            MethodKind::EulerFlow | MethodKind::HeunFlow
                if self.paradigm.kind == ParadigmKind::DdpmDiscrete =>
            {
                bail!(
                    "sampler.method=\"{:?}\" is incompatible with paradigm.kind=\"ddpm-discrete\" (no coefficient derivatives)",
                    self.sampler.method
                );
            }
            _ => {}
        }
        if self.sampler.learned_variance {
            if self.sampler.method != MethodKind::DdpmAncestral {
                bail!("sampler.learned_variance requires sampler.method=\"ddpm-ancestral\"");
            }
            if self.denoiser.kind != DenoiserKind::Neural || !self.denoiser.variance_interp_head {
                bail!(
                    "sampler.learned_variance requires denoiser.kind=\"neural\" with denoiser.variance_interp_head=true"
                );
            }
        }

        if self.denoiser.kind == DenoiserKind::Neural {
            let out_kind = self
                .denoiser
                .output_kind
                .ok_or_else(|| anyhow!("denoiser.kind=\"neural\" requires denoiser.output_kind"))?;
            if out_kind == PredictionKind::Epsilon
                && self.paradigm.kind != ParadigmKind::DdpmDiscrete
            {
                bail!(
                    "denoiser.output_kind=\"epsilon\" with paradigm.kind=\"{:?}\" is singular at the all-noise start; use x0, v or u",
                    self.paradigm.kind
                );
            }
            if out_kind == PredictionKind::U && self.paradigm.kind == ParadigmKind::DdpmDiscrete {
                bail!(
                    "denoiser.output_kind=\"u\" requires a paradigm with derivatives; paradigm.kind=\"ddpm-discrete\" has none"
                );
            }
        }

        if self.schedule.kind == ScheduleKindConfig::AdaptiveCertainty
            && self.denoiser.kind == DenoiserKind::Neural
            && !self.denoiser.uncertainty_head
        {
            bail!(
                "schedule.kind=\"adaptive-certainty\" requires denoiser.uncertainty_head=true for neural denoisers"
            );
        }
        if self.schedule.order == Some(OrderKind::Graph) && self.task.kind != TaskKind::Sequence {
            bail!("schedule.order=\"graph\" requires a task with a dependency graph (task.kind=\"sequence\")");
        }
        if self.schedule.order == Some(OrderKind::Explicit) && self.schedule.explicit_order.is_none()
        {
            bail!("schedule.order=\"explicit\" requires schedule.explicit_order");
        }
        if let Some(o) = self.schedule.overlap {
            if !(0.0..=1.0).contains(&o) {
                bail!("schedule.overlap must lie in [0, 1]");
            }
        }

        if let Some(train) = &self.train {
            if self.denoiser.kind != DenoiserKind::Neural {
                bail!("the [train] section requires denoiser.kind=\"neural\"");
            }
            if train.loss.is_empty() {
                bail!("train.loss must contain at least one term");
            }
            for term in &train.loss {
                match term.kind {
                    LossKind::Vlb => {
                        if self.paradigm.kind != ParadigmKind::DdpmDiscrete {
                            bail!(
                                "train.loss kind=\"vlb\" requires paradigm.kind=\"ddpm-discrete\""
                            );
                        }
                        if !self.denoiser.variance_interp_head {
                            bail!(
                                "train.loss kind=\"vlb\" requires denoiser.variance_interp_head=true"
                            );
                        }
                    }
                    LossKind::Nll => {
                        if !self.denoiser.uncertainty_head {
                            bail!(
                                "train.loss kind=\"nll\" requires denoiser.uncertainty_head=true"
                            );
                        }
                    }
                    LossKind::Cosine => {
                        if term.target != PredictionKind::U {
                            bail!("train.loss kind=\"cosine\" requires target=\"u\"");
                        }
                        if self.paradigm.kind == ParadigmKind::DdpmDiscrete {
                            bail!(
                                "train.loss kind=\"cosine\" is incompatible with paradigm.kind=\"ddpm-discrete\""
                            );
                        }
                    }
                    LossKind::Mse => {}
                }
            }
        }
        Ok(())
    }

    pub fn build_task(&self) -> anyhow::Result<TaskDomain> {
        let task = match self.task.kind {
            TaskKind::LatinSquare => latin_square_mixture(
                self.task.order.expect("validated"),
                self.task.sigma.expect("validated"),
            )?,
            TaskKind::Sequence => sequence_task(
                self.task.length.expect("validated"),
                self.task.phi.expect("validated"),
            )?,
            TaskKind::Mixture => {
                let m = self.task.mixture.as_ref().expect("validated");
                let weights = m.weights.clone();
                let means: Vec<DVector<f64>> =
                    m.means.iter().map(|v| DVector::from_vec(v.clone())).collect();
                let covariances: Vec<DMatrix<f64>> = m
                    .covariances
                    .iter()
                    .map(|rows| {
                        let d = rows.len();
                        DMatrix::from_fn(d, d, |i, j| rows[i][j])
                    })
                    .collect();
                let mixture = GaussianMixture::new(weights, means, covariances)?;
                TaskDomain::from_mixture("mixture", mixture, self.task.dim.unwrap_or(1))?
            }
        };
        for entry in &self.task.conditioning {
            if entry.variable >= task.n {
                bail!(
                    "task.conditioning variable {} out of range (n = {})",
                    entry.variable,
                    task.n
                );
            }
            if entry.values.len() != task.dim {
                bail!(
                    "task.conditioning values for variable {} must have {} entries",
                    entry.variable,
                    task.dim
                );
            }
        }
        Ok(task)
    }

    pub fn build_paradigm(&self) -> anyhow::Result<Paradigm> {
        Ok(match self.paradigm.kind {
            ParadigmKind::RectifiedFlow => Paradigm::RectifiedFlow,
            ParadigmKind::CosineFlow => Paradigm::CosineFlow,
            ParadigmKind::DdpmDiscrete => {
                let schedule = match self.paradigm.beta_schedule.unwrap_or(BetaScheduleKind::Linear)
                {
                    BetaScheduleKind::Linear => BetaSchedule::Linear,
                    BetaScheduleKind::Cosine => BetaSchedule::Cosine,
                };
                Paradigm::ddpm_discrete(self.paradigm.d_steps.expect("validated"), schedule)?
            }
        })
    }

    pub fn build_tsampler(&self) -> anyhow::Result<TSampler> {
        let reweighter = match self.tsampler.reweighter {
            ReweighterKind::Uniform => ScalarReweighter::Uniform,
            ReweighterKind::LogitNormal => ScalarReweighter::LogitNormal {
                location: self.tsampler.m,
                scale: self.tsampler.s,
            },
        };
        let kind = match self.tsampler.kind {
            TSamplerKindConfig::IndependentUniform => TSamplerKind::IndependentUniform,
            TSamplerKindConfig::UniformTbar => TSamplerKind::UniformTbar,
            TSamplerKindConfig::SharedScalar => TSamplerKind::SharedScalar,
        };
        Ok(TSampler::new(kind, reweighter)?)
    }

    pub fn build_net_config(&self, task: &TaskDomain) -> anyhow::Result<NetConfig> {
        Ok(NetConfig {
            dim: task.dim,
            level_embed: self.denoiser.level_embed.unwrap_or(16),
            pos_embed: self.denoiser.pos_embed.unwrap_or(16),
            hidden: self.denoiser.hidden.unwrap_or(32),
            trunk_layers: self.denoiser.trunk_layers.unwrap_or(2),
            head_layers: self.denoiser.head_layers.unwrap_or(1),
            output_kind: self.denoiser.output_kind.expect("validated"),
            uncertainty_head: self.denoiser.uncertainty_head,
            variance_interp_head: self.denoiser.variance_interp_head,
        })
    }

    pub fn build_method(&self) -> StepMethod {
        match self.sampler.method {
            MethodKind::Ddim => StepMethod::Ddim {
                eta: self.sampler.eta,
            },
            MethodKind::EulerFlow => StepMethod::EulerFlow,
            MethodKind::HeunFlow => StepMethod::HeunFlow,
            MethodKind::DdpmAncestral => StepMethod::DdpmAncestral {
                learned_variance: self.sampler.learned_variance,
            },
        }
    }

    pub fn build_schedule_spec(&self, n: usize) -> anyhow::Result<ScheduleSpec> {
        let order = || -> anyhow::Result<VariableOrder> {
            Ok(match self.schedule.order.unwrap_or(OrderKind::Index) {
                OrderKind::Index => VariableOrder::index(n),
                OrderKind::Random => VariableOrder::Random {
                    seed: self.schedule.order_seed.unwrap_or(0),
                },
                OrderKind::Graph => VariableOrder::Graph,
                OrderKind::Explicit => VariableOrder::Explicit(
                    self.schedule.explicit_order.clone().expect("validated"),
                ),
            })
        };
        let kind = match self.schedule.kind {
            ScheduleKindConfig::Parallel => ScheduleKind::Parallel,
            ScheduleKindConfig::Sequential => ScheduleKind::Sequential {
                order: order()?,
                overlap: self.schedule.overlap.unwrap_or(0.0),
            },
            ScheduleKindConfig::NextK => ScheduleKind::NextK {
                k: self.schedule.k.unwrap_or(1),
                order: order()?,
            },
            ScheduleKindConfig::RollingWindow => ScheduleKind::RollingWindow {
                window: self.schedule.window.unwrap_or(1),
                stride: self.schedule.stride.unwrap_or(1),
            },
            ScheduleKindConfig::AdaptiveCertainty => ScheduleKind::AdaptiveCertainty {
                k: self.schedule.k.unwrap_or(1),
            },
        };
        Ok(ScheduleSpec {
            kind,
            steps: self.schedule.steps,
        })
    }

    pub fn build_train_config(&self) -> anyhow::Result<TrainConfig> {
        let train = self
            .train
            .as_ref()
            .ok_or_else(|| anyhow!("this run needs a [train] section"))?;
        let optimizer = match train.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: train.lr },
            OptimizerKind::Adam => Optimizer::adam(train.lr),
        };
        Ok(TrainConfig {
            optimizer,
            steps: train.steps,
            batch: train.batch,
            loss: LossSpec {
                terms: train
                    .loss
                    .iter()
                    .map(|t| LossTerm {
                        kind: t.kind,
                        weight: t.weight,
                        target: t.target,
                    })
                    .collect(),
            },
        })
    }

    pub fn wants(&self, format: FormatKind) -> bool {
        self.output.formats.contains(&format)
    }
}
