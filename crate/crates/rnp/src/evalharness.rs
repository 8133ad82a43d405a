//! Evaluation: the Eq. 13 marginal-likelihood estimator, sweep grids,
//! misspecification protocols, and CSV emission.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npmodel::{ModelVars, NPParams};
use crate::numkit::{standard_normal, RngStream, Tape, Tensor};
use crate::objectives::build_paths;
use crate::taskgen::{corrupt_context, CorruptionSpec, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Context,
    Target,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Context => "context",
            Split::Target => "target",
        }
    }
}

/// One row of the metrics CSV. `wall_seconds` is timing metadata and is the
/// only column excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub exp_id: String,
    pub dataset: String,
    pub objective: String,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub split: String,
    pub ll_mean: f64,
    pub ll_std: f64,
    pub n_tasks: usize,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Append records to a CSV, writing the header only when the file is new.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-task per-point marginal log-likelihood estimates (Eq. 13):
/// [log_sum_exp_k log p(Y|X, z_k) - ln K] / (points * Dy), z_k ~ q(z|C).
pub fn per_task_marginal_ll(
    params: &NPParams,
    tasks: &[Task],
    k: usize,
    split: Split,
    root: &RngStream,
) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::Domain("eval_marginal_ll on an empty task list".into()));
    }
    if k < 1 {
        return Err(Error::Domain("eval needs K >= 1".into()));
    }
    let dz = params.config.z_dim;
    let dy = params.config.y_dim;
    let mut out = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let task = match split {
            Split::Target => task.clone(),
            Split::Context => task.with_context_as_target(),
        };
        let mut tape = Tape::new();
        let mv: ModelVars = params.vars(&mut tape);
        let mut rng = root.stream2("eval_eps", i as u64, 0);
        let eps = Tensor::new(k, dz, standard_normal(&mut rng, k * dz));
        let paths = build_paths(&mut tape, &mv, &task, &eps, false)?;
        let lse = tape.log_sum_exp_col_vec(paths.joint_ll);
        let log_marginal = tape.value(lse).item() - (k as f64).ln();
        out.push(log_marginal / (task.n_target() as f64 * dy as f64));
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Labels attached to every record an evaluation run emits.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub exp_id: String,
    pub dataset: String,
    pub objective: String,
    pub alpha: f64,
    pub seed: u64,
}

/// Evaluate one split and package the aggregate as a MetricsRecord.
pub fn eval_marginal_ll(
    params: &NPParams,
    tasks: &[Task],
    k: usize,
    split: Split,
    ctx: &EvalContext,
) -> Result<MetricsRecord> {
    let start = std::time::Instant::now();
    let root = RngStream::new(ctx.seed);
    let lls = per_task_marginal_ll(params, tasks, k, split, &root)?;
    let (ll_mean, ll_std) = mean_std(&lls);
    Ok(MetricsRecord {
        exp_id: ctx.exp_id.clone(),
        dataset: ctx.dataset.clone(),
        objective: ctx.objective.clone(),
        alpha: ctx.alpha,
        k,
        split: split.name().to_string(),
        ll_mean,
        ll_std,
        n_tasks: tasks.len(),
        seed: ctx.seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Alpha,
    K,
    NContext,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Alpha => "alpha",
            SweepKind::K => "k",
            SweepKind::NContext => "ncontext",
        }
    }
}

/// One grid point of a sweep: its value, the parameters to evaluate (for
/// ALPHA sweeps each point carries its own checkpoint; K and NCONTEXT share
/// one), and the evaluation tasks.
pub struct SweepPoint {
    pub value: f64,
    pub params: NPParams,
    pub tasks: Vec<Task>,
}

/// Evaluate every grid point on both splits. For the K sweep the grid value
/// overrides `k_eval`; ALPHA grid values land in the record's alpha column.
pub fn run_sweep(
    kind: SweepKind,
    points: &[SweepPoint],
    k_eval: usize,
    ctx: &EvalContext,
) -> Result<Vec<MetricsRecord>> {
    if points.is_empty() {
        return Err(Error::Domain("sweep needs a non-empty grid".into()));
    }
    let mut records = Vec::with_capacity(points.len() * 2);
    for point in points {
        let k = if kind == SweepKind::K { point.value as usize } else { k_eval };
        let mut pt_ctx = ctx.clone();
        pt_ctx.exp_id = format!("{}_{}_{}", ctx.exp_id, kind.name(), point.value);
        if kind == SweepKind::Alpha {
            pt_ctx.alpha = point.value;
        }
        for split in [Split::Context, Split::Target] {
            records.push(eval_marginal_ll(&point.params, &point.tasks, k, split, &pt_ctx)?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MisspecProtocol {
    NoisyContext { beta: f64 },
    LvToHarelynx,
}

/// Noisy-context protocol (A.9): corrupt each task's context with the given
/// beta, keep targets clean, evaluate target LL.
pub fn run_noisy_context(
    params: &NPParams,
    tasks: &[Task],
    beta: f64,
    k: usize,
    ctx: &EvalContext,
) -> Result<MetricsRecord> {
    let spec = CorruptionSpec { beta };
    spec.validate()?;
    let root = RngStream::new(ctx.seed);
    let corrupted: Result<Vec<Task>> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| corrupt_context(t, spec, &mut root.stream2("misspec_noise", i as u64, 0)))
        .collect();
    let mut pt_ctx = ctx.clone();
    pt_ctx.exp_id = format!("{}_noisy_beta{beta}", ctx.exp_id);
    eval_marginal_ll(params, &corrupted?, k, Split::Target, &pt_ctx)
}

/// Domain-shift protocol: evaluate an LV-trained model on held-out LV tasks
/// and on the real Hare-Lynx task, both splits each.
pub fn run_lv_to_harelynx(
    params: &NPParams,
    lv_test: &[Task],
    hare_lynx: &Task,
    k: usize,
    ctx: &EvalContext,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::with_capacity(4);
    for (dataset, tasks) in [("lv", lv_test.to_vec()), ("harelynx", vec![hare_lynx.clone()])] {
        let mut pt_ctx = ctx.clone();
        pt_ctx.exp_id = format!("{}_shift_{dataset}", ctx.exp_id);
        pt_ctx.dataset = dataset.to_string();
        for split in [Split::Context, Split::Target] {
            records.push(eval_marginal_ll(params, &tasks, k, split, &pt_ctx)?);
        }
    }
    Ok(records)
}

/// Write the data behind a prediction figure: per x-point predictive mean and
/// std averaged over K prior samples, with context points flagged.
pub fn emit_prediction_dump(
    params: &NPParams,
    task: &Task,
    k: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    task.validate()?;
    if params.config.x_dim != 1 || params.config.y_dim != 1 {
        return Err(Error::Contract("prediction dump is for 1-D x and y".into()));
    }
    let dz = params.config.z_dim;
    let mut tape = Tape::new();
    let mv = params.vars(&mut tape);
    let root = RngStream::new(seed);
    let eps = Tensor::new(k, dz, standard_normal(&mut root.stream("dump_eps", 0), k * dz));
    // decode over targets and contexts in one stacked pass
    let n_tgt = task.n_target();
    let n_ctx = task.n_context();
    let mut xs = task.x_tgt.data().to_vec();
    xs.extend_from_slice(task.x_ctx.data());
    let x_all = Tensor::new(n_tgt + n_ctx, 1, xs);
    let prior_emb = {
        let h = mv.encode_points(&mut tape, &task.x_ctx, &task.y_ctx)?;
        tape.mean_rows_range(h, 0, n_ctx)
    };
    let prior = mv.latent_dist(&mut tape, prior_emb)?;
    let z = mv.reparam_sample(&mut tape, prior, &eps);
    let dec = mv.decode(&mut tape, &x_all, z)?;
    let n_all = n_tgt + n_ctx;
    let mean = tape.value(dec.mean);
    let std = tape.value(dec.std);
    let avg = |t: &Tensor, p: usize| -> f64 {
        (0..k).map(|kk| t.get(kk * n_all + p, 0)).sum::<f64>() / k as f64
    };

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "mean", "std", "is_context"])?;
    for p in 0..n_all {
        let x = x_all.get(p, 0);
        let is_ctx = if p >= n_tgt { 1 } else { 0 };
        w.write_record(&[
            format!("{x}"),
            format!("{}", avg(mean, p)),
            format!("{}", avg(std, p)),
            format!("{is_ctx}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
