//! The meta-training loop: sample a minibatch of tasks, evaluate the chosen
//! objective on one tape, update with Adam, anneal alpha if scheduled, and
//! checkpoint periodically. Fully deterministic given the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{eval_marginal_ll, EvalContext, MetricsRecord, Split};
use crate::npmodel::{save_checkpoint, ModelConfig, NPParams};
use crate::numkit::{standard_normal, RngStream, Tape, Tensor};
use crate::objectives::{build_paths, importance_log_weights, objective_loss, ObjectiveSpec};
use crate::taskgen::{corrupt_context, CorruptionSpec, DatasetSpec, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScheduleKind {
    Constant,
    LinearAnneal,
}

/// Alpha over training steps. LINEAR_ANNEAL follows the §5.3 heuristic of
/// gradually decreasing alpha within (0, 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> Self {
        AlphaSchedule { kind: ScheduleKind::Constant, start: alpha, end: alpha, anneal_steps: 0 }
    }

    pub fn linear(start: f64, end: f64, anneal_steps: usize) -> Result<Self> {
        let s = AlphaSchedule { kind: ScheduleKind::LinearAnneal, start, end, anneal_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScheduleKind::Constant => {
                if !(self.start.is_finite() && self.start >= 0.0) {
                    return Err(Error::Config(format!("constant alpha {} invalid", self.start)));
                }
            }
            ScheduleKind::LinearAnneal => {
                let in_unit = |v: f64| v > 0.0 && v < 1.0;
                if !(in_unit(self.start) && in_unit(self.end)) {
                    return Err(Error::Config(format!(
                        "anneal endpoints ({}, {}) must lie in (0, 1)",
                        self.start, self.end
                    )));
                }
                if self.start < self.end {
                    return Err(Error::Config("anneal must decrease: start >= end".into()));
                }
                if self.anneal_steps == 0 {
                    return Err(Error::Config("anneal_steps must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.start,
            ScheduleKind::LinearAnneal => {
                let frac = (step as f64 / self.anneal_steps as f64).min(1.0);
                self.start + (self.end - self.start) * frac
            }
        }
    }
}

/// Bias-corrected Adam over the parameter tensor list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &NPParams) -> Self {
        let shapes: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam { lr, beta1, beta2, eps, m: shapes.clone(), v: shapes, t: 0 }
    }

    pub fn step(&mut self, params: &mut NPParams, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "gradient list length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub schedule: AlphaSchedule,
    pub batch_tasks: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Size of the (virtual) training set; task indices are drawn from it.
    pub n_train_tasks: usize,
    /// Optional A.9-style context corruption applied during training.
    pub corruption: Option<CorruptionSpec>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec, seed: u64) -> Self {
        TrainConfig {
            objective,
            schedule: AlphaSchedule::constant(objective.alpha),
            batch_tasks: 16,
            steps: 20_000,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            checkpoint_interval: 5_000,
            n_train_tasks: 10_000,
            corruption: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.schedule.validate()?;
        if self.steps < 1 || self.batch_tasks < 1 {
            return Err(Error::Config("steps and batch_tasks must be >= 1".into()));
        }
        if self.n_train_tasks < 1 {
            return Err(Error::Config("n_train_tasks must be >= 1".into()));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Config("checkpoint_interval must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: NPParams,
    pub metrics: Vec<MetricsRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

/// One gradient step's forward pass; returns the loss node and value.
fn batch_loss(
    tape: &mut Tape,
    mv: &crate::npmodel::ModelVars,
    tasks: &[Task],
    spec: &ObjectiveSpec,
    eps_list: &[Tensor],
) -> Result<(crate::numkit::Var, f64, f64)> {
    let mut total = None;
    let mut max_lw = f64::NEG_INFINITY;
    let mut min_lw = f64::INFINITY;
    for (task, eps) in tasks.iter().zip(eps_list) {
        let paths = build_paths(tape, mv, task, eps, spec.kind.samples_from_posterior())?;
        let loss = objective_loss(tape, &paths, spec)?;
        // log-weight diagnostics for the non-finite abort path
        if let Ok(lw) = importance_log_weights(tape, &paths) {
            for &v in tape.value(lw).data() {
                max_lw = max_lw.max(v);
                min_lw = min_lw.min(v);
            }
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss),
        });
    }
    let total = total.expect("non-empty batch");
    let mean = tape.scale(total, 1.0 / tasks.len() as f64);
    Ok((mean, tape.value(mean).item(), if max_lw.is_finite() { max_lw - min_lw } else { 0.0 }))
}

/// Algorithm-1 training loop. `val_tasks` feeds the periodic validation
/// MetricsRecord; `ckpt_dir`, when given, receives `ckpt_step_{s}.bin` at
/// every checkpoint interval plus `ckpt_final.bin`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &DatasetSpec,
    val_tasks: &[Task],
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let mut params = NPParams::init(model_cfg.clone(), &root);
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &params);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let k = cfg.objective.k;
    let dz = model_cfg.z_dim;

    for step in 0..cfg.steps {
        let mut spec = cfg.objective;
        if spec.uses_alpha() {
            spec.alpha = cfg.schedule.alpha_at(step);
        }

        // assemble the minibatch deterministically
        let mut tasks = Vec::with_capacity(cfg.batch_tasks);
        let mut eps_list = Vec::with_capacity(cfg.batch_tasks);
        for j in 0..cfg.batch_tasks {
            use rand::Rng;
            let mut pick = root.stream2("train_pick", step as u64, j as u64);
            let idx = pick.gen_range(0..cfg.n_train_tasks as u64);
            let mut task = dataset.task(&root, "train_data", idx)?;
            if let Some(c) = &cfg.corruption {
                let mut crng = root.stream2("train_corrupt", step as u64, j as u64);
                task = corrupt_context(&task, *c, &mut crng)?;
            }
            let mut erng = root.stream2("train_eps", step as u64, j as u64);
            eps_list.push(Tensor::new(k, dz, standard_normal(&mut erng, k * dz)));
            tasks.push(task);
        }

        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let (loss_node, loss, lw_spread) = batch_loss(&mut tape, &mv, &tasks, &spec, &eps_list)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!(
                    "non-finite loss {loss} (log-weight spread {lw_spread:.3} nats, alpha {})",
                    spec.alpha
                ),
            });
        }
        if step == 0 {
            initial_loss = loss;
        }
        final_loss = loss;

        let g = tape.backward(loss_node)?;
        let grads: Vec<Tensor> = mv.vars.iter().map(|&v| g.wrt(&tape, v)).collect();
        adam.step(&mut params, &grads);

        let at_interval = (step + 1) % cfg.checkpoint_interval == 0;
        if at_interval || step + 1 == cfg.steps {
            if let Some(dir) = ckpt_dir {
                let name = if step + 1 == cfg.steps {
                    "ckpt_final.bin".to_string()
                } else {
                    format!("ckpt_step_{}.bin", step + 1)
                };
                let path = dir.join(name);
                save_checkpoint(&params, cfg.seed, &path)?;
                checkpoints.push(path);
            }
            if !val_tasks.is_empty() {
                let ctx = EvalContext {
                    exp_id: format!("train_val_step{}", step + 1),
                    dataset: dataset.name().to_string(),
                    objective: cfg.objective.kind.name().to_string(),
                    alpha: spec.alpha,
                    seed: cfg.seed,
                };
                metrics.push(eval_marginal_ll(&params, val_tasks, k, Split::Target, &ctx)?);
            }
        }
    }

    Ok(TrainOutcome { params, metrics, initial_loss, final_loss, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveKind;
    use crate::taskgen::gp::{GpDatasetSpec, KernelFamily};

    #[test]
    fn alpha_schedule_values() {
        let s = AlphaSchedule::linear(0.999, 0.7, 1000).unwrap();
        assert_eq!(s.alpha_at(0), 0.999);
        assert_eq!(s.alpha_at(1000), 0.7);
        assert_eq!(s.alpha_at(5000), 0.7);
        assert!((s.alpha_at(500) - 0.8495).abs() < 1e-12);
        let c = AlphaSchedule::constant(0.7);
        assert_eq!(c.alpha_at(0), 0.7);
        assert_eq!(c.alpha_at(99_999), 0.7);
    }

    #[test]
    fn alpha_schedule_validation() {
        assert!(AlphaSchedule::linear(0.7, 0.999, 100).is_err()); // increasing
        assert!(AlphaSchedule::linear(1.2, 0.7, 100).is_err()); // outside (0,1)
        assert!(AlphaSchedule::linear(0.9, 0.0, 100).is_err());
        assert!(AlphaSchedule::linear(0.9, 0.5, 0).is_err());
        assert!(AlphaSchedule::constant(f64::NAN).validate().is_err());
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        // 10 steps on a single scalar with prescribed gradients, compared
        // against the textbook recurrence computed independently
        let cfg = ModelConfig { z_dim: 1, hidden: 1, ..ModelConfig::default() };
        let mut params = NPParams::init(cfg, &RngStream::new(0));
        // work on the first scalar of the first tensor
        let x0 = params.tensors()[0].data()[0];
        let (lr, b1, b2, eps) = (5e-4, 0.9, 0.999, 1e-8);
        let mut adam = Adam::new(lr, b1, b2, eps, &params);
        let grad_at = |t: usize| -> f64 { 0.3 + 0.1 * t as f64 * if t % 2 == 0 { 1.0 } else { -1.0 } };

        let mut x_ref = x0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=10 {
            let g = grad_at(t);
            // reference update
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            // Adam under test: zero gradients everywhere except that scalar
            let grads: Vec<Tensor> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, ten)| {
                    let mut z = Tensor::zeros(ten.rows(), ten.cols());
                    if i == 0 {
                        z.data_mut()[0] = g;
                    }
                    z
                })
                .collect();
            adam.step(&mut params, &grads);
            let x = params.tensors()[0].data()[0];
            assert!((x - x_ref).abs() < 1e-12, "step {t}: {x} vs {x_ref}");
        }
    }

    fn smoke_config(kind: ObjectiveKind, alpha: f64, seed: u64) -> (TrainConfig, ModelConfig) {
        let mut cfg = TrainConfig::new(ObjectiveSpec::new(kind, alpha, 4), seed);
        cfg.steps = 200;
        cfg.batch_tasks = 2;
        cfg.lr = 3e-3;
        cfg.checkpoint_interval = 200;
        cfg.n_train_tasks = 1; // one fixed task: overfit-able
        let model = ModelConfig { z_dim: 4, hidden: 16, ..ModelConfig::default() };
        (cfg, model)
    }

    fn one_task_dataset(seed: u64) -> DatasetSpec {
        let spec = GpDatasetSpec::new(KernelFamily::Rbf);
        let task = spec.task(&RngStream::new(seed), "smoke", 0).unwrap();
        DatasetSpec::Fixed { tasks: vec![task] }
    }

    #[test]
    fn descent_on_fixed_task_all_objectives() {
        let data = one_task_dataset(3);
        for (kind, alpha) in [
            (ObjectiveKind::Vi, 1.0),
            (ObjectiveKind::MlMarginal, 0.0),
            (ObjectiveKind::RnpVi, 0.7),
            (ObjectiveKind::RnpMlTask, 0.3),
        ] {
            let (cfg, model) = smoke_config(kind, alpha, 5);
            let out = train(&cfg, &model, &data, &[], None).unwrap();
            assert!(
                out.final_loss < out.initial_loss,
                "{kind:?}: {} !< {}",
                out.final_loss,
                out.initial_loss
            );
        }
    }

    #[test]
    fn rnp_vi_at_alpha_one_runs_via_limit_branch() {
        let data = one_task_dataset(4);
        let (cfg, model) = smoke_config(ObjectiveKind::RnpVi, 1.0, 6);
        let out = train(&cfg, &model, &data, &[], None).unwrap();
        assert!(out.final_loss.is_finite());
        assert!(out.final_loss < out.initial_loss);
    }

    #[test]
    fn identical_configs_give_bitwise_identical_checkpoints() {
        let data = one_task_dataset(5);
        let (mut cfg, model) = smoke_config(ObjectiveKind::RnpVi, 0.7, 7);
        cfg.steps = 50;
        cfg.checkpoint_interval = 50;
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        let o1 = train(&cfg, &model, &data, &[], Some(&d1)).unwrap();
        let o2 = train(&cfg, &model, &data, &[], Some(&d2)).unwrap();
        assert_eq!(o1.params, o2.params);
        let b1 = std::fs::read(&o1.checkpoints[0]).unwrap();
        let b2 = std::fs::read(&o2.checkpoints[0]).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn prior_path_ignores_target_labels() {
        // information flow: the prior distribution may depend on C only
        let data = one_task_dataset(6);
        let task = match &data {
            DatasetSpec::Fixed { tasks } => tasks[0].clone(),
            _ => unreachable!(),
        };
        let mut altered = task.clone();
        for v in altered.y_tgt.data_mut() {
            *v += 3.0;
        }
        let model = ModelConfig { z_dim: 4, hidden: 16, ..ModelConfig::default() };
        let params = NPParams::init(model, &RngStream::new(8));
        let eps = Tensor::zeros(2, 4);
        let prior_of = |t: &Task| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let mv = params.vars(&mut tape);
            let paths = build_paths(&mut tape, &mv, t, &eps, true).unwrap();
            (
                tape.value(paths.prior.mean).data().to_vec(),
                tape.value(paths.prior.std).data().to_vec(),
            )
        };
        assert_eq!(prior_of(&task), prior_of(&altered));
    }

    #[test]
    fn validation_metrics_and_checkpoints_emitted() {
        let data = one_task_dataset(7);
        let (mut cfg, model) = smoke_config(ObjectiveKind::Vi, 1.0, 9);
        cfg.steps = 40;
        cfg.checkpoint_interval = 20;
        let val = match &data {
            DatasetSpec::Fixed { tasks } => tasks.clone(),
            _ => unreachable!(),
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &model, &data, &val, Some(dir.path())).unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert_eq!(out.checkpoints.len(), 2);
        assert!(out.checkpoints[1].ends_with("ckpt_final.bin"));
        let (loaded, seed) = crate::npmodel::load_checkpoint(&out.checkpoints[1]).unwrap();
        assert_eq!(seed, cfg.seed);
        assert_eq!(loaded, out.params);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(ObjectiveSpec::new(ObjectiveKind::Vi, 1.0, 4), 0);
        assert!(cfg.validate().is_ok());
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.steps = 10;
        cfg.batch_tasks = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_tasks = 2;
        cfg.corruption = Some(CorruptionSpec { beta: 2.0 });
        assert!(cfg.validate().is_err());
    }
}
