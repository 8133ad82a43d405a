//! TOML run configuration. Unknown keys are rejected; every field has a
//! documented default, and the serialized config is hashed into output
//! artifacts for reproducibility.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use rnp::npmodel::ModelConfig;
use rnp::objectives::{ObjectiveKind, ObjectiveSpec};
use rnp::taskgen::gp::{GpDatasetSpec, GpSplit, KernelFamily};
use rnp::taskgen::lv::LvDatasetSpec;
use rnp::taskgen::{CorruptionSpec, DatasetSpec};
use rnp::trainer::{AlphaSchedule, ScheduleKind, TrainConfig};
use rnp::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetCfg,
    pub model: ModelCfg,
    pub objective: ObjectiveCfg,
    pub trainer: TrainerCfg,
    pub schedule: ScheduleCfg,
    pub eval: EvalCfg,
    pub paths: PathsCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetCfg::default(),
            model: ModelCfg::default(),
            objective: ObjectiveCfg::default(),
            trainer: TrainerCfg::default(),
            schedule: ScheduleCfg::default(),
            eval: EvalCfg::default(),
            paths: PathsCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCfg {
    /// rbf | matern52 | periodic | lv
    pub kind: String,
    pub n_train_tasks: usize,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg { kind: "rbf".into(), n_train_tasks: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub hidden: usize,
    pub z_dim: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg { hidden: 64, z_dim: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveCfg {
    /// VI | ML_EXPECTED | ML_MARGINAL | RNP_VI | RNP_ML_TASK | RNP_ML_LITERAL
    pub kind: String,
    pub alpha: f64,
    pub k: usize,
    pub alpha_eps: f64,
}

impl Default for ObjectiveCfg {
    fn default() -> Self {
        ObjectiveCfg { kind: "RNP_VI".into(), alpha: 0.7, k: 32, alpha_eps: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerCfg {
    pub steps: usize,
    pub batch_tasks: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_interval: usize,
    /// A.9 context corruption during training; 0 disables it.
    pub corruption_beta: f64,
}

impl Default for TrainerCfg {
    fn default() -> Self {
        TrainerCfg {
            steps: 20_000,
            batch_tasks: 16,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_interval: 5_000,
            corruption_beta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleCfg {
    /// CONSTANT | LINEAR_ANNEAL
    pub kind: String,
    /// CONSTANT ignores start/end and uses objective.alpha unless start set.
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub anneal_steps: usize,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        ScheduleCfg { kind: "CONSTANT".into(), start: None, end: None, anneal_steps: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub k: usize,
    pub n_val_tasks: usize,
    pub n_test_tasks: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { k: 50, n_val_tasks: 100, n_test_tasks: 1_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsCfg {
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
}

impl Default for PathsCfg {
    fn default() -> Self {
        PathsCfg { out_dir: PathBuf::from("runs/run"), metrics: PathBuf::from("runs/metrics.csv") }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        rnp::npmodel::sha256_hex(json.as_bytes())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        dataset_by_name(&self.dataset.kind)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { hidden: self.model.hidden, z_dim: self.model.z_dim, ..ModelConfig::default() }
    }

    pub fn objective_spec(&self) -> Result<ObjectiveSpec> {
        let kind: ObjectiveKind = self.objective.kind.parse()?;
        let mut spec = ObjectiveSpec::new(kind, self.objective.alpha, self.objective.k);
        spec.alpha_eps = self.objective.alpha_eps;
        spec.validate()?;
        Ok(spec)
    }

    pub fn alpha_schedule(&self) -> Result<AlphaSchedule> {
        match self.schedule.kind.as_str() {
            "CONSTANT" => Ok(AlphaSchedule::constant(
                self.schedule.start.unwrap_or(self.objective.alpha),
            )),
            "LINEAR_ANNEAL" => {
                let (start, end) = match (self.schedule.start, self.schedule.end) {
                    (Some(s), Some(e)) => (s, e),
                    _ => {
                        return Err(Error::Config(
                            "LINEAR_ANNEAL needs schedule.start and schedule.end".into(),
                        ))
                    }
                };
                AlphaSchedule::linear(start, end, self.schedule.anneal_steps)
            }
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.objective_spec()?, self.seed);
        cfg.schedule = self.alpha_schedule()?;
        if matches!(cfg.schedule.kind, ScheduleKind::LinearAnneal)
            && !cfg.objective.uses_alpha()
        {
            return Err(Error::Config("alpha schedule requires a Rényi objective".into()));
        }
        cfg.batch_tasks = self.trainer.batch_tasks;
        cfg.steps = self.trainer.steps;
        cfg.lr = self.trainer.lr;
        cfg.beta1 = self.trainer.beta1;
        cfg.beta2 = self.trainer.beta2;
        cfg.adam_eps = self.trainer.adam_eps;
        cfg.checkpoint_interval = self.trainer.checkpoint_interval;
        cfg.n_train_tasks = self.dataset.n_train_tasks;
        if self.trainer.corruption_beta > 0.0 {
            cfg.corruption = Some(CorruptionSpec { beta: self.trainer.corruption_beta });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Generated dataset by name. `harelynx` is handled separately because it is
/// a single ingested task, not a generator.
pub fn dataset_by_name(name: &str) -> Result<DatasetSpec> {
    match name {
        "lv" => Ok(DatasetSpec::Lv(LvDatasetSpec::default())),
        gp => Ok(DatasetSpec::Gp(GpDatasetSpec::new(gp.parse::<KernelFamily>()?))),
    }
}

/// GP dataset with the context size pinned to `m` (for NCONTEXT sweeps).
pub fn gp_with_fixed_context(family: KernelFamily, m: usize) -> DatasetSpec {
    let mut spec = GpDatasetSpec::new(family);
    spec.split = GpSplit { m_min: m, m_max: m, ..GpSplit::default() };
    spec.split.total_max = m + 50;
    DatasetSpec::Gp(spec)
}
