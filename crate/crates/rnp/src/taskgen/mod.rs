//! Meta-learning task generation and ingestion: GP function draws,
//! Lotka-Volterra simulations, the Hare-Lynx series, and context corruption.

pub mod data;
pub mod gp;
pub mod lv;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{standard_normal, Tensor};

/// One meta-learning instance: disjoint context and target draws from the
/// same underlying function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub x_ctx: Tensor,
    pub y_ctx: Tensor,
    pub x_tgt: Tensor,
    pub y_tgt: Tensor,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.x_ctx.rows() == 0 || self.x_tgt.rows() == 0 {
            return Err(Error::Domain("task needs at least one context and one target point".into()));
        }
        if self.x_ctx.rows() != self.y_ctx.rows() || self.x_tgt.rows() != self.y_tgt.rows() {
            return Err(Error::Contract("task x/y row counts disagree".into()));
        }
        for t in [&self.x_ctx, &self.y_ctx, &self.x_tgt, &self.y_tgt] {
            if !t.all_finite() {
                return Err(Error::Domain("task contains non-finite values".into()));
            }
        }
        Ok(())
    }

    pub fn n_context(&self) -> usize {
        self.x_ctx.rows()
    }

    pub fn n_target(&self) -> usize {
        self.x_tgt.rows()
    }

    /// A copy whose target set equals the context set; used for context-split
    /// evaluation.
    pub fn with_context_as_target(&self) -> Task {
        Task {
            x_ctx: self.x_ctx.clone(),
            y_ctx: self.y_ctx.clone(),
            x_tgt: self.x_ctx.clone(),
            y_tgt: self.y_ctx.clone(),
        }
    }
}

/// Where training/evaluation tasks come from. Generated datasets are pure in
/// (seed, purpose, index); `Fixed` cycles through a pre-built list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Gp(gp::GpDatasetSpec),
    Lv(lv::LvDatasetSpec),
    Fixed { tasks: Vec<Task> },
}

impl DatasetSpec {
    pub fn task(&self, root: &crate::numkit::RngStream, purpose: &str, index: u64) -> Result<Task> {
        match self {
            DatasetSpec::Gp(spec) => spec.task(root, purpose, index),
            DatasetSpec::Lv(spec) => spec.task(root, purpose, index),
            DatasetSpec::Fixed { tasks } => {
                if tasks.is_empty() {
                    return Err(Error::Domain("fixed dataset holds no tasks".into()));
                }
                Ok(tasks[index as usize % tasks.len()].clone())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Gp(spec) => spec.family.name(),
            DatasetSpec::Lv(_) => "lv",
            DatasetSpec::Fixed { .. } => "fixed",
        }
    }
}

/// Context-label corruption y~ = (1-beta) y + beta eps, eps ~ N(0,1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub beta: f64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Domain(format!("corruption beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Mix standard-normal noise into the context labels; targets stay clean.
pub fn corrupt_context(task: &Task, spec: CorruptionSpec, rng: &mut ChaCha8Rng) -> Result<Task> {
    spec.validate()?;
    let eps = standard_normal(rng, task.y_ctx.len());
    let mut y = task.y_ctx.clone();
    for (v, e) in y.data_mut().iter_mut().zip(eps) {
        *v = (1.0 - spec.beta) * *v + spec.beta * e;
    }
    Ok(Task {
        x_ctx: task.x_ctx.clone(),
        y_ctx: y,
        x_tgt: task.x_tgt.clone(),
        y_tgt: task.y_tgt.clone(),
    })
}
