mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{dataset_by_name, gp_with_fixed_context, RunConfig};
use rnp::evalharness::{
    emit_prediction_dump, eval_marginal_ll, run_lv_to_harelynx, run_noisy_context, run_sweep,
    append_metrics, EvalContext, Split, SweepKind, SweepPoint,
};
use rnp::npmodel::{load_checkpoint, NPParams};
use rnp::numkit::{finite_diff_check, standard_normal, RngStream, Tape, Tensor};
use rnp::objectives::{
    build_paths, importance_log_weights, objective_loss, ObjectiveKind, ObjectiveSpec,
};
use rnp::oracles::{fit_renyi_factorized, rho_alpha, Cov2};
use rnp::taskgen::data::{load_hare_lynx, HareLynxSplit};
use rnp::taskgen::gp::KernelFamily;
use rnp::taskgen::Task;
use rnp::trainer::train;
use rnp::{Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "rnp", version, about = "Latent-variable neural processes with Rényi objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config; writes checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint's marginal log-likelihood on a dataset.
    Eval(EvalArgs),
    /// Alpha / K / context-size sweeps over a grid.
    Sweep(SweepArgs),
    /// Misspecification protocols: noisy contexts and LV -> Hare-Lynx shift.
    Misspec(MisspecArgs),
    /// Gradient checks: Eq. 8 identity and finite differences.
    Gradcheck(GradcheckArgs),
    /// Analytical-oracle suite: rho_alpha and the factorized Rényi fit.
    Oracle,
    /// Dump predictive means/stds for one task to CSV.
    Dump(DumpArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration (defaults documented in the README)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's step count
    #[arg(long)]
    steps: Option<usize>,
    /// Override the config's objective kind
    #[arg(long)]
    objective: Option<String>,
    /// Override the config's alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`
    #[arg(long)]
    ckpt: PathBuf,
    /// rbf | matern52 | periodic | lv | harelynx
    #[arg(long)]
    data: String,
    /// Monte Carlo samples for the Eq. 13 estimator
    #[arg(long = "k", alias = "K", default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    n_tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV to append to
    #[arg(long, default_value = "runs/metrics.csv")]
    out: PathBuf,
    #[arg(long, default_value = "data/hare_lynx.csv")]
    harelynx_path: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// alpha | k | ncontext
    #[arg(long)]
    kind: String,
    /// Comma-separated grid, e.g. 1,8,16,32,50
    #[arg(long)]
    grid: String,
    /// Shared checkpoint (K and NCONTEXT sweeps)
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Per-grid-point checkpoint pattern with a {value} placeholder
    /// (ALPHA sweeps), e.g. runs/alpha_{value}/ckpt_final.bin
    #[arg(long)]
    ckpt_pattern: Option<String>,
    #[arg(long, default_value = "rbf")]
    data: String,
    #[arg(long, default_value_t = 50)]
    n_tasks: usize,
    #[arg(long = "k", alias = "K", default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip the alpha grid to (0, 1) per the §5.3 heuristic
    #[arg(long, default_value_t = false)]
    restrict_unit: bool,
    #[arg(long, default_value = "runs/metrics.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct MisspecArgs {
    /// noisy | lv
    #[arg(long)]
    protocol: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Corruption level for the noisy protocol
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value = "lv")]
    data: String,
    #[arg(long, default_value_t = 100)]
    n_tasks: usize,
    #[arg(long = "k", alias = "K", default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/hare_lynx.csv")]
    harelynx_path: PathBuf,
    #[arg(long, default_value = "runs/metrics.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random small tasks per objective
    #[arg(long, default_value_t = 5)]
    n_tasks: usize,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "rbf")]
    data: String,
    /// Which generated task to dump
    #[arg(long, default_value_t = 0)]
    task_index: u64,
    #[arg(long = "k", alias = "K", default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/dump.csv")]
    out: PathBuf,
    #[arg(long, default_value = "data/hare_lynx.csv")]
    harelynx_path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one-line machine-parsable reason
            let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Misspec(a) => cmd_misspec(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Oracle => cmd_oracle(),
        Command::Dump(a) => cmd_dump(a),
    }
}

fn build_tasks(
    data: &str,
    n_tasks: usize,
    seed: u64,
    purpose: &str,
    harelynx_path: &Path,
) -> Result<Vec<Task>> {
    if data == "harelynx" {
        return Ok(vec![load_hare_lynx(harelynx_path, HareLynxSplit::default())?]);
    }
    let spec = dataset_by_name(data)?;
    let root = RngStream::new(seed);
    (0..n_tasks as u64).map(|i| spec.task(&root, purpose, i)).collect()
}

fn eval_context(exp_id: String, dataset: &str, objective: &str, alpha: f64, seed: u64) -> EvalContext {
    EvalContext {
        exp_id,
        dataset: dataset.to_string(),
        objective: objective.to_string(),
        alpha,
        seed,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.trainer.steps = s;
    }
    if let Some(o) = a.objective {
        cfg.objective.kind = o;
    }
    if let Some(al) = a.alpha {
        cfg.objective.alpha = al;
    }
    if let Some(d) = a.out_dir {
        cfg.paths.out_dir = d;
    }

    let hash = cfg.hash();
    let dataset = cfg.dataset_spec()?;
    let train_cfg = cfg.train_config()?;
    let model_cfg = cfg.model_config();
    let root = RngStream::new(cfg.seed);
    let val_tasks: Vec<Task> = (0..cfg.eval.n_val_tasks as u64)
        .map(|i| dataset.task(&root, "val_data", i))
        .collect::<Result<_>>()?;

    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    std::fs::write(
        cfg.paths.out_dir.join("run.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "seed": cfg.seed,
            "version": VERSION,
            "config": cfg,
        }))?,
    )?;

    let started = std::time::Instant::now();
    let out = train(&train_cfg, &model_cfg, &dataset, &val_tasks, Some(&cfg.paths.out_dir))?;
    let mut metrics = out.metrics;
    for m in &mut metrics {
        m.exp_id = format!("{}_{}", &hash[..8], m.exp_id);
    }
    append_metrics(&cfg.paths.metrics, &metrics)?;
    println!(
        "trained {} steps in {:.1}s: loss {:.4} -> {:.4}, checkpoint {}",
        train_cfg.steps,
        started.elapsed().as_secs_f64(),
        out.initial_loss,
        out.final_loss,
        out.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default(),
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(NPParams, u64)> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (params, train_seed) = load_ckpt(&a.ckpt)?;
    let tasks = build_tasks(&a.data, a.n_tasks, a.seed, "test_data", &a.harelynx_path)?;
    let exp = format!("eval_{}_{}_s{}", a.data, &params.config.hash()[..8], train_seed);
    let ctx = eval_context(exp, &a.data, "checkpoint", f64::NAN, a.seed);
    let mut records = Vec::new();
    for split in [Split::Context, Split::Target] {
        let rec = eval_marginal_ll(&params, &tasks, a.k, split, &ctx)?;
        println!(
            "{} split {:>7}: per-point LL {:.4} +/- {:.4} over {} tasks",
            a.data, rec.split, rec.ll_mean, rec.ll_std, rec.n_tasks
        );
        records.push(rec);
    }
    append_metrics(&a.out, &records)
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        grid.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| Error::Config(format!("bad grid '{grid}': {e}")))?;
    if vals.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(vals)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let kind = match a.kind.as_str() {
        "alpha" => SweepKind::Alpha,
        "k" => SweepKind::K,
        "ncontext" => SweepKind::NContext,
        other => return Err(Error::Config(format!("unknown sweep kind '{other}'"))),
    };
    let mut grid = parse_grid(&a.grid)?;
    if kind == SweepKind::Alpha && a.restrict_unit {
        grid.retain(|&v| v > 0.0 && v < 1.0);
        if grid.is_empty() {
            return Err(Error::Config("alpha grid empty after clipping to (0, 1)".into()));
        }
    }

    let shared_params = match (&a.ckpt, &a.ckpt_pattern) {
        (Some(p), None) => Some(load_ckpt(p)?.0),
        (None, Some(_)) => None,
        _ => {
            return Err(Error::Config(
                "provide exactly one of --ckpt (shared) or --ckpt-pattern (per point)".into(),
            ))
        }
    };

    let mut points = Vec::with_capacity(grid.len());
    for &value in &grid {
        let params = match &shared_params {
            Some(p) => p.clone(),
            None => {
                let pattern = a.ckpt_pattern.as_ref().unwrap();
                let path = PathBuf::from(pattern.replace("{value}", &value.to_string()));
                load_ckpt(&path)
                    .map_err(|e| Error::Config(format!("grid point {value}: {e}")))?
                    .0
            }
        };
        let tasks = if kind == SweepKind::NContext {
            let family: KernelFamily = a.data.parse()?;
            let spec = gp_with_fixed_context(family, value as usize);
            let root = RngStream::new(a.seed);
            (0..a.n_tasks as u64)
                .map(|i| spec.task(&root, "sweep_data", i))
                .collect::<Result<Vec<Task>>>()?
        } else {
            build_tasks(&a.data, a.n_tasks, a.seed, "sweep_data", Path::new("data/hare_lynx.csv"))?
        };
        points.push(SweepPoint { value, params, tasks });
    }

    let ctx = eval_context(format!("sweep_{}", a.kind), &a.data, "checkpoint", f64::NAN, a.seed);
    let records = run_sweep(kind, &points, a.k, &ctx)?;
    for r in &records {
        println!(
            "{} {:>8}: per-point LL {:.4} +/- {:.4}",
            r.exp_id, r.split, r.ll_mean, r.ll_std
        );
    }
    append_metrics(&a.out, &records)
}

fn cmd_misspec(a: MisspecArgs) -> Result<()> {
    let (params, _) = load_ckpt(&a.ckpt)?;
    match a.protocol.as_str() {
        "noisy" => {
            let tasks = build_tasks(&a.data, a.n_tasks, a.seed, "misspec_data", &a.harelynx_path)?;
            let ctx = eval_context("misspec".into(), &a.data, "checkpoint", f64::NAN, a.seed);
            let noisy = run_noisy_context(&params, &tasks, a.beta, a.k, &ctx)?;
            let clean = run_noisy_context(&params, &tasks, 0.0, a.k, &ctx)?;
            println!(
                "noisy-context: beta={} LL {:.4} vs beta=0 LL {:.4}",
                a.beta, noisy.ll_mean, clean.ll_mean
            );
            append_metrics(&a.out, &[clean, noisy])
        }
        "lv" => {
            let lv_tasks = build_tasks("lv", a.n_tasks, a.seed, "misspec_data", &a.harelynx_path)?;
            let hare = load_hare_lynx(&a.harelynx_path, HareLynxSplit::default())?;
            let ctx = eval_context("misspec".into(), "lv", "checkpoint", f64::NAN, a.seed);
            let records = run_lv_to_harelynx(&params, &lv_tasks, &hare, a.k, &ctx)?;
            for r in &records {
                println!("{} {:>8}: per-point LL {:.4}", r.exp_id, r.split, r.ll_mean);
            }
            append_metrics(&a.out, &records)
        }
        other => Err(Error::Config(format!("unknown misspec protocol '{other}'"))),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let root = RngStream::new(a.seed);
    let gp = dataset_by_name("rbf")?;
    let model_cfg =
        rnp::npmodel::ModelConfig { hidden: 6, z_dim: 3, ..rnp::npmodel::ModelConfig::default() };
    let mut worst_fd: f64 = 0.0;
    let mut worst_id: f64 = 0.0;

    for i in 0..a.n_tasks as u64 {
        // Small tasks keep central differences away from ReLU kinks and
        // catastrophic cancellation; the identity check below uses them too.
        let task = shrink_task(&gp.task(&root, "gradcheck", i)?, 3, 2);
        let mut params = NPParams::init(model_cfg.clone(), &RngStream::new(a.seed ^ (i + 1)));
        // He init leaves biases at exactly zero, which parks ReLU
        // pre-activations on their kink whenever a row dies in the first
        // layer; jitter everything so that coincidence has measure zero.
        let mut jrng = root.stream("gc_jitter", i);
        for t in params.tensors_mut() {
            let noise = standard_normal(&mut jrng, t.len());
            for (v, n) in t.data_mut().iter_mut().zip(noise) {
                *v += 0.05 * n;
            }
        }
        let k = 4;
        let eps = Tensor::new(
            k,
            model_cfg.z_dim,
            standard_normal(&mut root.stream("gc_eps", i), k * model_cfg.z_dim),
        );
        for (kind, alpha) in [
            (ObjectiveKind::Vi, 1.0),
            (ObjectiveKind::RnpVi, 0.7),
            (ObjectiveKind::RnpMlTask, 0.3),
        ] {
            let spec = ObjectiveSpec::new(kind, alpha, k);
            let flat: Vec<f64> =
                params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
            let eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut pr = params.clone();
                let mut off = 0;
                for t in pr.tensors_mut() {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&p[off..off + n]);
                    off += n;
                }
                let mut tape = Tape::new();
                let mv = pr.vars(&mut tape);
                let paths =
                    build_paths(&mut tape, &mv, &task, &eps, kind.samples_from_posterior())?;
                let loss = objective_loss(&mut tape, &paths, &spec)?;
                let g = tape.backward(loss)?;
                let flat_g =
                    mv.vars.iter().flat_map(|&v| g.wrt(&tape, v).data().to_vec()).collect();
                Ok((tape.value(loss).item(), flat_g))
            };
            let (_, analytic) = eval(&flat)?;
            let mut f = |p: &[f64]| eval(p).map(|(v, _)| v);
            let err = finite_diff_check(&mut f, &flat, &analytic, 1e-5)?;
            worst_fd = worst_fd.max(err);
        }
        worst_id = worst_id.max(eq8_identity_error(&params, &task, &eps, 0.7)?);
    }

    println!("gradcheck: max finite-difference relative error {worst_fd:.3e}");
    println!("gradcheck: max Eq. 8 identity relative error {worst_id:.3e}");
    if worst_fd < 1e-4 && worst_id < 1e-8 {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradcheck failed: finite-diff {worst_fd:.3e} (limit 1e-4), identity {worst_id:.3e} (limit 1e-8)"
        )))
    }
}

fn shrink_task(task: &Task, m: usize, n: usize) -> Task {
    let take = |t: &Tensor, rows: usize| {
        let rows = rows.min(t.rows());
        Tensor::new(rows, t.cols(), t.data()[..rows * t.cols()].to_vec())
    };
    Task {
        x_ctx: take(&task.x_ctx, m),
        y_ctx: take(&task.y_ctx, m),
        x_tgt: take(&task.x_tgt, n),
        y_tgt: take(&task.y_tgt, n),
    }
}

/// Max relative deviation between the autodiff gradient of loss_rnp_vi and
/// Eq. 8's explicit self-normalized-weight sum.
fn eq8_identity_error(params: &NPParams, task: &Task, eps: &Tensor, alpha: f64) -> Result<f64> {
    let k = eps.rows();
    let mut tape = Tape::new();
    let mv = params.vars(&mut tape);
    let paths = build_paths(&mut tape, &mv, task, eps, true)?;
    let spec = ObjectiveSpec::new(ObjectiveKind::RnpVi, alpha, k);
    let loss = rnp::objectives::loss_rnp_vi(&mut tape, &paths, &spec)?;
    let auto = tape.backward(loss)?;

    let log_w = importance_log_weights(&mut tape, &paths)?;
    let lw = tape.value(log_w).data().to_vec();
    let scaled: Vec<f64> = lw.iter().map(|&w| (1.0 - alpha) * w).collect();
    let lse = rnp::numkit::log_sum_exp(&scaled)?;
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - lse).exp()).collect();

    let mut manual: Vec<Vec<f64>> =
        mv.vars.iter().map(|&v| vec![0.0; tape.value(v).len()]).collect();
    for kk in 0..k {
        let mut onehot = vec![0.0; k];
        onehot[kk] = 1.0;
        let sel = tape.leaf(Tensor::new(1, k, onehot));
        let lwk = tape.matmul(sel, log_w);
        let g = tape.backward(lwk)?;
        for (slot, &v) in manual.iter_mut().zip(&mv.vars) {
            for (s, gv) in slot.iter_mut().zip(g.wrt(&tape, v).data()) {
                *s -= weights[kk] * gv;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (slot, &v) in manual.iter().zip(&mv.vars) {
        for (m, a) in slot.iter().zip(auto.wrt(&tape, v).data()) {
            worst = worst.max((m - a).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn cmd_oracle() -> Result<()> {
    // exact values
    let cov = Cov2::new(1.0, 0.6, 1.0)?;
    let checks = [
        ("rho(alpha=1) = 1", (rho_alpha(&cov, 1.0)? - 1.0).abs(), 1e-12),
        (
            "rho(s12=0) = 1",
            (rho_alpha(&Cov2::new(2.0, 0.0, 0.5)?, 0.4)? - 1.0).abs(),
            1e-12,
        ),
        ("rho(r2=0.36, alpha=0.5) = 0.8", (rho_alpha(&cov, 0.5)? - 0.8).abs(), 1e-12),
    ];
    let mut ok = true;
    for (name, err, tol) in checks {
        let pass = err < tol;
        ok &= pass;
        println!("oracle: {name}: |err| = {err:.2e} [{}]", if pass { "ok" } else { "FAIL" });
    }

    // monotonicity of rho over random PD covariances
    let root = RngStream::new(1234);
    let mut mono_ok = true;
    for i in 0..100u64 {
        use rand::Rng;
        let mut rng = root.stream("oracle_pd", i);
        let s11 = rng.gen_range(0.2..3.0);
        let s22 = rng.gen_range(0.2..3.0);
        let r = rng.gen_range(-0.95..0.95);
        let cov = Cov2::new(s11, r * (s11 * s22).sqrt(), s22)?;
        let mut prev = 0.0;
        for step in 1..=100 {
            let rho = rho_alpha(&cov, step as f64 * 0.01)?;
            if rho < prev - 1e-12 {
                mono_ok = false;
            }
            prev = rho;
        }
    }
    ok &= mono_ok;
    println!("oracle: rho non-decreasing on 100 random PD covariances [{}]", if mono_ok { "ok" } else { "FAIL" });

    // gradient-descent fit tracks rho_alpha
    let cov = Cov2::new(1.0, 0.6, 1.0)?;
    let (p11, _) = cov.precision_diag();
    let mut fit_ok = true;
    for alpha in [0.2, 0.5, 0.8] {
        let fit = fit_renyi_factorized(&cov, alpha, 20_000, 1e-2)?;
        let predicted = rho_alpha(&cov, alpha)? * p11;
        let rel = (fit.precision[0] - predicted).abs() / predicted;
        let pass = fit.converged && rel < 0.01;
        fit_ok &= pass;
        println!(
            "oracle: fit alpha={alpha}: precision {:.5} vs rho*prec {:.5} (rel {:.2e}) [{}]",
            fit.precision[0],
            predicted,
            rel,
            if pass { "ok" } else { "FAIL" }
        );
    }
    ok &= fit_ok;

    if ok {
        println!("oracle: PASS");
        Ok(())
    } else {
        Err(Error::Numeric("oracle suite failed".into()))
    }
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let (params, _) = load_ckpt(&a.ckpt)?;
    let task = if a.data == "harelynx" {
        load_hare_lynx(&a.harelynx_path, HareLynxSplit::default())?
    } else {
        let spec = dataset_by_name(&a.data)?;
        spec.task(&RngStream::new(a.seed), "dump_data", a.task_index)?
    };
    emit_prediction_dump(&params, &task, a.k, a.seed, &a.out)?;
    println!(
        "wrote {} rows to {}",
        task.n_target() + task.n_context(),
        a.out.display()
    );
    Ok(())
}
