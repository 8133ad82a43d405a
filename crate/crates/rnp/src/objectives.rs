//! Training losses and divergences: VI, maximum likelihood (both readings),
//! the Rényi bound RNP-VI with its self-normalized gradient identity, and
//! RNP-ML in both the task-level and literal forms. Closed-form KL/Rényi
//! between diagonal Gaussians double as test oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npmodel::{DiagGaussian, LatentVars, ModelVars};
use crate::numkit::{Tape, Tensor, Var};
use crate::taskgen::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectiveKind {
    Vi,
    MlExpected,
    MlMarginal,
    RnpVi,
    RnpMlTask,
    RnpMlLiteral,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Vi => "VI",
            ObjectiveKind::MlExpected => "ML_EXPECTED",
            ObjectiveKind::MlMarginal => "ML_MARGINAL",
            ObjectiveKind::RnpVi => "RNP_VI",
            ObjectiveKind::RnpMlTask => "RNP_ML_TASK",
            ObjectiveKind::RnpMlLiteral => "RNP_ML_LITERAL",
        }
    }

    /// Whether the z samples come from the posterior q(z|C,T) (VI family)
    /// or the conditional prior q(z|C) (ML family).
    pub fn samples_from_posterior(self) -> bool {
        matches!(self, ObjectiveKind::Vi | ObjectiveKind::RnpVi)
    }

    pub fn uses_alpha(self) -> bool {
        matches!(
            self,
            ObjectiveKind::RnpVi | ObjectiveKind::RnpMlTask | ObjectiveKind::RnpMlLiteral
        )
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VI" => Ok(ObjectiveKind::Vi),
            "ML_EXPECTED" => Ok(ObjectiveKind::MlExpected),
            "ML_MARGINAL" => Ok(ObjectiveKind::MlMarginal),
            "RNP_VI" => Ok(ObjectiveKind::RnpVi),
            "RNP_ML_TASK" => Ok(ObjectiveKind::RnpMlTask),
            "RNP_ML_LITERAL" => Ok(ObjectiveKind::RnpMlLiteral),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub alpha: f64,
    pub k: usize,
    /// Within this distance of alpha = 1 the exact limit branch is used.
    pub alpha_eps: f64,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, alpha: f64, k: usize) -> Self {
        ObjectiveSpec { kind, alpha, k, alpha_eps: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("objective needs K >= 1 samples".into()));
        }
        if self.uses_alpha() && !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a finite float >= 0, got {}", self.alpha)));
        }
        if self.alpha_eps <= 0.0 {
            return Err(Error::Config("alpha_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_alpha(&self) -> bool {
        self.kind.uses_alpha()
    }

    fn at_alpha_one(&self, alpha: f64) -> bool {
        (alpha - 1.0).abs() < self.alpha_eps
    }
}

// ---------------------------------------------------------------------------
// Closed-form divergences between diagonal Gaussians (oracle grade).
// ---------------------------------------------------------------------------

/// KL(q || p) for diagonal Gaussians, summed over dimensions.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "kl_diag dimension mismatch: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut total = 0.0;
    for d in 0..q.dim() {
        let (mq, sq) = (q.mean[d], q.std[d]);
        let (mp, sp) = (p.mean[d], p.std[d]);
        total += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total)
}

/// Rényi divergence D_alpha(q || p) for diagonal Gaussians, summed over
/// dimensions. Requires the mixed variance alpha*sp^2 + (1-alpha)*sq^2 > 0
/// in every dimension (automatic for alpha in (0,1)).
pub fn renyi_diag(q: &DiagGaussian, p: &DiagGaussian, alpha: f64) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "renyi_diag dimension mismatch: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::Domain("renyi_diag: alpha must be finite".into()));
    }
    if alpha == 1.0 {
        return kl_diag(q, p);
    }
    let mut total = 0.0;
    for d in 0..q.dim() {
        let (mq, vq) = (q.mean[d], q.std[d] * q.std[d]);
        let (mp, vp) = (p.mean[d], p.std[d] * p.std[d]);
        let v_mix = alpha * vp + (1.0 - alpha) * vq;
        if v_mix <= 0.0 {
            return Err(Error::Domain(format!(
                "renyi_diag: mixed variance {v_mix} <= 0 in dimension {d} (alpha = {alpha})"
            )));
        }
        let quad = alpha * (mq - mp) * (mq - mp) / (2.0 * v_mix);
        let log_det = (v_mix.ln() - (1.0 - alpha) * vq.ln() - alpha * vp.ln()) / (2.0 * (alpha - 1.0));
        total += quad - log_det;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Forward graph shared by all objectives.
// ---------------------------------------------------------------------------

/// All the tape nodes an objective may need for one task: both latent paths,
/// the z samples, the decoder log-likelihoods, and the latent log-densities.
pub struct TaskPaths {
    pub prior: LatentVars,
    pub posterior: LatentVars,
    pub z: Var,
    /// (K, 1) joint target log-likelihood per sample.
    pub joint_ll: Var,
    /// (K, N) per-(sample, point) log-likelihoods.
    pub per_point_ll: Var,
    /// (K, 1) log q(z_k | C).
    pub log_prior: Var,
    /// (K, 1) log q(z_k | C, T).
    pub log_post: Var,
    pub k: usize,
    pub n: usize,
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.cols(), "stack_rows column mismatch");
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(a.rows() + b.rows(), a.cols(), data)
}

/// Build the full forward graph. The per-point encoder runs once over C and
/// T together; the prior embedding averages the first M rows, the posterior
/// all M+N (the two paths share every parameter). `eps` is a (K, Dz) matrix
/// of standard normals supplied by the caller; z is reparameterized from the
/// posterior or the prior depending on `from_posterior`.
pub fn build_paths(
    tape: &mut Tape,
    mv: &ModelVars,
    task: &Task,
    eps: &Tensor,
    from_posterior: bool,
) -> Result<TaskPaths> {
    task.validate()?;
    let k = eps.rows();
    if eps.cols() != mv.config.z_dim {
        return Err(Error::Contract(format!(
            "eps has {} columns, z_dim is {}",
            eps.cols(),
            mv.config.z_dim
        )));
    }
    let m = task.n_context();
    let n = task.n_target();
    let xs = stack_rows(&task.x_ctx, &task.x_tgt);
    let ys = stack_rows(&task.y_ctx, &task.y_tgt);
    let h = mv.encode_points(tape, &xs, &ys)?;
    let prior_emb = tape.mean_rows_range(h, 0, m);
    let post_emb = tape.mean_rows_range(h, 0, m + n);
    let prior = mv.latent_dist(tape, prior_emb)?;
    let posterior = mv.latent_dist(tape, post_emb)?;
    let z = mv.reparam_sample(tape, if from_posterior { posterior } else { prior }, eps);
    let dec = mv.decode(tape, &task.x_tgt, z)?;
    let per_point_ll = mv.per_point_log_lik(tape, dec, &task.y_tgt);
    let joint_ll = tape.sum_rows(per_point_ll);
    let log_prior = mv.latent_log_pdf(tape, prior, z);
    let log_post = mv.latent_log_pdf(tape, posterior, z);
    Ok(TaskPaths { prior, posterior, z, joint_ll, per_point_ll, log_prior, log_post, k, n })
}

/// log w_k = log p(Y_T | X_T, z_k) + log q(z_k|C) - log q(z_k|C,T), (K, 1).
pub fn importance_log_weights(tape: &mut Tape, paths: &TaskPaths) -> Result<Var> {
    let ratio = tape.sub(paths.log_prior, paths.log_post);
    let lw = tape.add(paths.joint_ll, ratio);
    if !tape.value(lw).all_finite() {
        return Err(Error::Numeric("non-finite importance log-weights".into()));
    }
    Ok(lw)
}

/// KL(posterior || prior) as a scalar tape node (analytic, sample-free).
pub fn kl_diag_node(tape: &mut Tape, q: LatentVars, p: LatentVars) -> Var {
    let ln_p = tape.ln(p.std);
    let ln_q = tape.ln(q.std);
    let log_ratio = tape.sub(ln_p, ln_q);
    let mean_diff = tape.sub(q.mean, p.mean);
    let num_a = tape.square(q.std);
    let num_b = tape.square(mean_diff);
    let num = tape.add(num_a, num_b);
    let den = tape.square(p.std);
    let den = tape.scale(den, 2.0);
    let frac = tape.div(num, den);
    let per_dim = tape.add(log_ratio, frac);
    let per_dim = tape.add_scalar(per_dim, -0.5);
    tape.sum_all(per_dim)
}

fn mean_col(tape: &mut Tape, col: Var) -> Var {
    let k = tape.value(col).rows() as f64;
    let s = tape.sum_all(col);
    tape.scale(s, 1.0 / k)
}

/// Standard NP loss: -[ (1/K) sum_k log p(Y_T|X_T,z_k) - KL(post || prior) ],
/// z_k from the posterior.
pub fn loss_vi(tape: &mut Tape, paths: &TaskPaths) -> Var {
    let mean_ll = mean_col(tape, paths.joint_ll);
    let kl = kl_diag_node(tape, paths.posterior, paths.prior);
    let elbo = tape.sub(mean_ll, kl);
    tape.neg(elbo)
}

/// Rényi bound loss -B(alpha) with
/// B(alpha) = 1/(1-alpha) * [log_sum_exp((1-alpha) log w) - ln K].
/// Within alpha_eps of 1 the exact limit (1/K) sum log w is used.
pub fn loss_rnp_vi(tape: &mut Tape, paths: &TaskPaths, spec: &ObjectiveSpec) -> Result<Var> {
    let log_w = importance_log_weights(tape, paths)?;
    if spec.at_alpha_one(spec.alpha) {
        let mean_lw = mean_col(tape, log_w);
        return Ok(tape.neg(mean_lw));
    }
    let one_minus = 1.0 - spec.alpha;
    let scaled = tape.scale(log_w, one_minus);
    let lse = tape.log_sum_exp_col_vec(scaled);
    let centered = tape.add_scalar(lse, -(paths.k as f64).ln());
    let bound = tape.scale(centered, 1.0 / one_minus);
    Ok(tape.neg(bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlVariant {
    Expected,
    Marginal,
}

/// Maximum-likelihood losses, z_k from the prior. EXPECTED is the expected
/// log-likelihood; MARGINAL the importance-free log-marginal estimate.
pub fn loss_ml(tape: &mut Tape, paths: &TaskPaths, variant: MlVariant) -> Var {
    match variant {
        MlVariant::Expected => {
            let mean_ll = mean_col(tape, paths.joint_ll);
            tape.neg(mean_ll)
        }
        MlVariant::Marginal => {
            let lse = tape.log_sum_exp_col_vec(paths.joint_ll);
            let log_marginal = tape.add_scalar(lse, -(paths.k as f64).ln());
            tape.neg(log_marginal)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnpMlForm {
    /// Log outside the point sum; gives the likelihood-based per-point
    /// reweighting and is the operative RNP-ML.
    Task,
    /// Eq. 12 exactly as typeset; the alpha-dependence cancels and the value
    /// reduces to the plain mean log-marginal for every alpha.
    Literal,
}

/// Per-point log marginal estimates log m_n = log[(1/K) sum_k p(y_n|z_k,x_n)],
/// as a (1, N) node.
pub fn log_point_marginals(tape: &mut Tape, paths: &TaskPaths) -> Var {
    let lse = tape.log_sum_exp_cols(paths.per_point_ll);
    tape.add_scalar(lse, -(paths.k as f64).ln())
}

/// RNP-ML loss, z_k from the prior.
pub fn loss_rnp_ml(
    tape: &mut Tape,
    paths: &TaskPaths,
    spec: &ObjectiveSpec,
    form: RnpMlForm,
) -> Result<Var> {
    let log_m = log_point_marginals(tape, paths);
    let n = paths.n as f64;
    if spec.at_alpha_one(spec.alpha) {
        // both forms collapse to -(1/N) sum_n log m_n
        let mean = tape.sum_all(log_m);
        let mean = tape.scale(mean, 1.0 / n);
        return Ok(tape.neg(mean));
    }
    match form {
        RnpMlForm::Task => {
            let scaled = tape.scale(log_m, 1.0 - spec.alpha);
            let lse = tape.log_sum_exp_rows(scaled);
            let lse = tape.reshape(lse, 1, 1);
            let centered = tape.add_scalar(lse, -n.ln());
            Ok(tape.scale(centered, 1.0 / (spec.alpha - 1.0)))
        }
        RnpMlForm::Literal => {
            let powered = tape.scale(log_m, 1.0 - spec.alpha);
            let total = tape.sum_all(powered);
            Ok(tape.scale(total, 1.0 / ((spec.alpha - 1.0) * n)))
        }
    }
}

/// Dispatch a spec to its loss on an already-built graph.
pub fn objective_loss(tape: &mut Tape, paths: &TaskPaths, spec: &ObjectiveSpec) -> Result<Var> {
    spec.validate()?;
    Ok(match spec.kind {
        ObjectiveKind::Vi => loss_vi(tape, paths),
        ObjectiveKind::MlExpected => loss_ml(tape, paths, MlVariant::Expected),
        ObjectiveKind::MlMarginal => loss_ml(tape, paths, MlVariant::Marginal),
        ObjectiveKind::RnpVi => loss_rnp_vi(tape, paths, spec)?,
        ObjectiveKind::RnpMlTask => loss_rnp_ml(tape, paths, spec, RnpMlForm::Task)?,
        ObjectiveKind::RnpMlLiteral => loss_rnp_ml(tape, paths, spec, RnpMlForm::Literal)?,
    })
}

/// B(alpha) on a fixed log-weight vector (no model involved); the power-mean
/// bound of Theorem 3.1. alpha = 1 takes the exact limit.
pub fn rnp_bound(log_w: &[f64], alpha: f64) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::Domain("rnp_bound on empty weights".into()));
    }
    let k = log_w.len() as f64;
    if (alpha - 1.0).abs() < 1e-12 {
        return Ok(log_w.iter().sum::<f64>() / k);
    }
    let scaled: Vec<f64> = log_w.iter().map(|&w| (1.0 - alpha) * w).collect();
    let lse = crate::numkit::log_sum_exp(&scaled)?;
    Ok((lse - k.ln()) / (1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npmodel::{ModelConfig, NPParams};
    use crate::numkit::{standard_normal, RngStream};
    use rand::Rng;

    fn dg(mean: &[f64], std: &[f64]) -> DiagGaussian {
        DiagGaussian { mean: mean.to_vec(), std: std.to_vec() }
    }

    // Simpson quadrature of f over [lo, hi] with an even number of panels.
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
        let h = (hi - lo) / panels as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(lo + i as f64 * h);
        }
        s * h / 3.0
    }

    fn pdf(x: f64, m: f64, s: f64) -> f64 {
        (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn kl_diag_matches_known_values() {
        let q = dg(&[0.0], &[1.0]);
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        let p = dg(&[1.0], &[1.0]);
        assert!((kl_diag(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        let p = dg(&[0.0], &[2.0]);
        let expected = 2f64.ln() + 0.125 - 0.5; // ~0.318147
        assert!((kl_diag(&q, &p).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_diag_matches_quadrature() {
        let q = dg(&[0.3], &[0.8]);
        let p = dg(&[-0.5], &[1.7]);
        let integrand = |x: f64| {
            let qx = pdf(x, 0.3, 0.8);
            qx * (qx / pdf(x, -0.5, 1.7)).ln()
        };
        let quad = simpson(integrand, -30.0, 30.0, 200_000);
        assert!((kl_diag(&q, &p).unwrap() - quad).abs() < 1e-8);
    }

    #[test]
    fn kl_diag_rejects_dimension_mismatch() {
        let q = dg(&[0.0, 0.0], &[1.0, 1.0]);
        let p = dg(&[0.0], &[1.0]);
        assert!(kl_diag(&q, &p).is_err());
    }

    #[test]
    fn renyi_diag_zero_for_equal_distributions() {
        let q = dg(&[0.4, -1.0], &[0.5, 2.0]);
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
            assert!(renyi_diag(&q, &q, alpha).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn renyi_diag_matches_quadrature() {
        // N(0,1) vs N(1, 2^2) at alpha = 0.5
        let q = dg(&[0.0], &[1.0]);
        let p = dg(&[1.0], &[2.0]);
        let alpha = 0.5;
        let integrand =
            |x: f64| pdf(x, 0.0, 1.0).powf(alpha) * pdf(x, 1.0, 2.0).powf(1.0 - alpha);
        let quad = (1.0 / (alpha - 1.0)) * simpson(integrand, -40.0, 40.0, 200_000).ln();
        assert!((renyi_diag(&q, &p, alpha).unwrap() - quad).abs() < 1e-6);
    }

    #[test]
    fn renyi_approaches_kl_on_random_pairs() {
        let root = RngStream::new(11);
        for i in 0..100u64 {
            let mut rng = root.stream("rk", i);
            let d = 1 + (i % 4) as usize;
            // the alpha -> 1 gap scales with Var_q(log q/p), so the pairs
            // stay moderately separated for the 1e-3 absolute tolerance
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect()
            };
            let stds = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(0.85..1.2)).collect()
            };
            let q = dg(&draw(&mut rng, d), &stds(&mut rng, d));
            let p = dg(&draw(&mut rng, d), &stds(&mut rng, d));
            let r = renyi_diag(&q, &p, 0.999).unwrap();
            let k = kl_diag(&q, &p).unwrap();
            assert!((r - k).abs() < 1e-3, "pair {i}: renyi {r} vs kl {k}");
        }
    }

    #[test]
    fn renyi_reports_violated_variance_condition() {
        // alpha > 1 can make the mixed variance negative
        let q = dg(&[0.0], &[2.0]);
        let p = dg(&[0.0], &[0.1]);
        let err = renyi_diag(&q, &p, 3.0).unwrap_err();
        assert!(err.to_string().contains("dimension 0"), "{err}");
    }

    #[test]
    fn rnp_bound_fixed_weights_decreasing() {
        // w = [1, e^2]: B(0) = ln((1+e^2)/2), B(1) = 1, B(2) = -ln((1+e^-2)/2)
        let lw = [0.0, 2.0];
        let b0 = rnp_bound(&lw, 0.0).unwrap();
        let b1 = rnp_bound(&lw, 1.0).unwrap();
        let b2 = rnp_bound(&lw, 2.0).unwrap();
        assert!((b0 - ((1.0 + 2f64.exp()) / 2.0).ln()).abs() < 1e-12);
        assert!((b0 - 1.43378).abs() < 1e-5);
        assert!((b1 - 1.0).abs() < 1e-12);
        assert!((b2 + ((1.0 + (-2f64).exp()) / 2.0).ln()).abs() < 1e-12);
        assert!((b2 - 0.56622).abs() < 1e-5);
        assert!(b0 > b1 && b1 > b2);
    }

    #[test]
    fn rnp_bound_nonincreasing_in_alpha() {
        let root = RngStream::new(13);
        let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.999, 1.0, 1.5, 2.0];
        for i in 0..100u64 {
            let mut rng = root.stream("mono", i);
            let k = 2 + (i % 15) as usize;
            let lw: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut prev = f64::INFINITY;
            for &a in &grid {
                let b = rnp_bound(&lw, a).unwrap();
                assert!(b <= prev + 1e-10, "weights {i}: B({a}) = {b} > {prev}");
                prev = b;
            }
        }
    }

    #[test]
    fn rnp_bound_stable_at_extreme_log_weights() {
        let lw = [-1e4, -1e4 + 1.0, -1e4 - 3.0];
        for a in [0.0, 0.5, 0.999, 1.0] {
            let b = rnp_bound(&lw, a).unwrap();
            assert!(b.is_finite(), "B({a}) = {b}");
        }
    }

    // -- model-based tests ---------------------------------------------------

    fn tiny_setup(seed: u64) -> (NPParams, Task) {
        let cfg = ModelConfig { z_dim: 3, hidden: 6, ..ModelConfig::default() };
        let params = NPParams::init(cfg, &RngStream::new(seed));
        let task = Task {
            x_ctx: Tensor::new(3, 1, vec![-0.5, 0.0, 0.6]),
            y_ctx: Tensor::new(3, 1, vec![0.2, -0.3, 0.8]),
            x_tgt: Tensor::new(2, 1, vec![0.3, -1.0]),
            y_tgt: Tensor::new(2, 1, vec![0.1, -0.6]),
        };
        (params, task)
    }

    fn eps_for(seed: u64, k: usize, dz: usize) -> Tensor {
        let root = RngStream::new(seed);
        Tensor::new(k, dz, standard_normal(&mut root.stream("eps", 0), k * dz))
    }

    #[test]
    fn weights_reduce_to_loglik_when_target_duplicates_context() {
        // T = C makes the posterior set a duplicated context set, so the
        // density ratio is exactly 1 and log w = joint log-likelihood.
        let (params, task) = tiny_setup(0);
        let task = Task {
            x_tgt: task.x_ctx.clone(),
            y_tgt: task.y_ctx.clone(),
            ..task
        };
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(1, 5, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        let lw = importance_log_weights(&mut tape, &paths).unwrap();
        assert_eq!(tape.value(lw).data(), tape.value(paths.joint_ll).data());
    }

    #[test]
    fn self_normalized_weights_sum_to_one() {
        let (params, task) = tiny_setup(2);
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(3, 8, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        let lw = importance_log_weights(&mut tape, &paths).unwrap();
        let vals = tape.value(lw).data().to_vec();
        let lse = crate::numkit::log_sum_exp(&vals).unwrap();
        let total: f64 = vals.iter().map(|&w| (w - lse).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vi_kl_term_is_sample_free() {
        let (params, task) = tiny_setup(4);
        let run = |k: usize| -> f64 {
            let mut tape = Tape::new();
            let mv = params.vars(&mut tape);
            let eps = eps_for(5, k, 3);
            let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
            let kl = kl_diag_node(&mut tape, paths.posterior, paths.prior);
            tape.value(kl).item()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let (params, task) = tiny_setup(5);
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(6, 2, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        let node = kl_diag_node(&mut tape, paths.posterior, paths.prior);
        let q = DiagGaussian {
            mean: tape.value(paths.posterior.mean).data().to_vec(),
            std: tape.value(paths.posterior.std).data().to_vec(),
        };
        let p = DiagGaussian {
            mean: tape.value(paths.prior.mean).data().to_vec(),
            std: tape.value(paths.prior.std).data().to_vec(),
        };
        assert!((tape.value(node).item() - kl_diag(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ml_variants_identical_at_k1_and_jensen_ordered() {
        let (params, task) = tiny_setup(6);
        let run = |k: usize, variant: MlVariant| -> f64 {
            let mut tape = Tape::new();
            let mv = params.vars(&mut tape);
            let eps = eps_for(7, k, 3);
            let paths = build_paths(&mut tape, &mv, &task, &eps, false).unwrap();
            let l = loss_ml(&mut tape, &paths, variant);
            tape.value(l).item()
        };
        assert_eq!(run(1, MlVariant::Expected), run(1, MlVariant::Marginal));
        // log-mean-exp >= mean, so the negated marginal loss is <= expected
        assert!(run(16, MlVariant::Marginal) <= run(16, MlVariant::Expected) + 1e-12);
    }

    #[test]
    fn marginal_ml_equals_rnp_vi_alpha0_when_ratio_is_one() {
        let (params, task) = tiny_setup(7);
        let task = Task { x_tgt: task.x_ctx.clone(), y_tgt: task.y_ctx.clone(), ..task };
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(8, 6, 3);
        // same eps, and prior == posterior on the duplicated set
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        let ml = loss_ml(&mut tape, &paths, MlVariant::Marginal);
        let spec = ObjectiveSpec::new(ObjectiveKind::RnpVi, 0.0, 6);
        let rnp = loss_rnp_vi(&mut tape, &paths, &spec).unwrap();
        assert!((tape.value(ml).item() - tape.value(rnp).item()).abs() < 1e-12);
    }

    /// Shrink all weights; keeps the log-weight dispersion small enough for
    /// the (1-alpha)/2 * Var(log w) limit gap to stay under 1e-3.
    fn damp(mut params: NPParams, factor: f64) -> NPParams {
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
        params
    }

    #[test]
    fn rnp_vi_near_one_matches_sample_limit() {
        let (params, task) = tiny_setup(8);
        let params = damp(params, 0.3);
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(9, 32, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        // alpha = 0.9995 is within alpha_eps of 1, so the limit branch fires
        let spec_limit = ObjectiveSpec::new(ObjectiveKind::RnpVi, 1.0, 32);
        let limit = loss_rnp_vi(&mut tape, &paths, &spec_limit).unwrap();
        let mut spec_near = ObjectiveSpec::new(ObjectiveKind::RnpVi, 0.999, 32);
        spec_near.alpha_eps = 1e-6; // force the general formula at 0.999
        let near = loss_rnp_vi(&mut tape, &paths, &spec_near).unwrap();
        let gap = (tape.value(limit).item() - tape.value(near).item()).abs();
        assert!(gap < 1e-3, "limit gap {gap}");
    }

    #[test]
    fn objective_chain_ordering() {
        // -B(0) <= -B(alpha) <= -B(1) with common random numbers
        let root = RngStream::new(21);
        for i in 0..50u64 {
            let (params, task) = tiny_setup(100 + i);
            let mut tape = Tape::new();
            let mv = params.vars(&mut tape);
            let mut rng = root.stream("chain", i);
            let eps = Tensor::new(8, 3, standard_normal(&mut rng, 24));
            let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
            let value = |tape: &mut Tape, alpha: f64| -> f64 {
                let spec = ObjectiveSpec::new(ObjectiveKind::RnpVi, alpha, 8);
                let l = loss_rnp_vi(tape, &paths, &spec).unwrap();
                tape.value(l).item()
            };
            let l0 = value(&mut tape, 0.0);
            let lmid = value(&mut tape, 0.5);
            let l1 = value(&mut tape, 1.0);
            assert!(l0 <= lmid + 1e-10 && lmid <= l1 + 1e-10, "task {i}: {l0} {lmid} {l1}");
        }
    }

    #[test]
    fn rnp_ml_literal_is_alpha_invariant() {
        let (params, task) = tiny_setup(9);
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(10, 8, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, false).unwrap();
        let value = |tape: &mut Tape, alpha: f64| -> f64 {
            let spec = ObjectiveSpec::new(ObjectiveKind::RnpMlLiteral, alpha, 8);
            let l = loss_rnp_ml(tape, &paths, &spec, RnpMlForm::Literal).unwrap();
            tape.value(l).item()
        };
        let a = value(&mut tape, 0.3);
        let b = value(&mut tape, 0.7);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        // and both equal the plain mean log-marginal
        let log_m = log_point_marginals(&mut tape, &paths);
        let mean: f64 =
            tape.value(log_m).data().iter().sum::<f64>() / paths.n as f64;
        assert!((a + mean).abs() < 1e-12);
    }

    #[test]
    fn rnp_ml_task_limits() {
        let (params, task) = tiny_setup(10);
        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let eps = eps_for(11, 8, 3);
        let paths = build_paths(&mut tape, &mv, &task, &eps, false).unwrap();
        let log_m_node = log_point_marginals(&mut tape, &paths);
        let log_m = tape.value(log_m_node).data().to_vec();
        let n = log_m.len() as f64;

        // alpha = 0: -log[(1/N) sum m_n]
        let spec0 = ObjectiveSpec::new(ObjectiveKind::RnpMlTask, 0.0, 8);
        let l0 = loss_rnp_ml(&mut tape, &paths, &spec0, RnpMlForm::Task).unwrap();
        let expected0 = -((log_m.iter().map(|v| v.exp()).sum::<f64>() / n).ln());
        assert!((tape.value(l0).item() - expected0).abs() < 1e-12);

        // alpha -> 1: -(1/N) sum log m_n, within 1e-3 at 0.999
        let mean_log = log_m.iter().sum::<f64>() / n;
        let mut spec_near = ObjectiveSpec::new(ObjectiveKind::RnpMlTask, 0.999, 8);
        spec_near.alpha_eps = 1e-6;
        let lnear = loss_rnp_ml(&mut tape, &paths, &spec_near, RnpMlForm::Task).unwrap();
        assert!((tape.value(lnear).item() + mean_log).abs() < 1e-3);
        let spec1 = ObjectiveSpec::new(ObjectiveKind::RnpMlTask, 1.0, 8);
        let l1 = loss_rnp_ml(&mut tape, &paths, &spec1, RnpMlForm::Task).unwrap();
        assert!((tape.value(l1).item() + mean_log).abs() < 1e-14);
    }

    #[test]
    fn vi_loss_gradient_matches_finite_diff() {
        gradient_check(ObjectiveKind::Vi, 0.0);
    }

    #[test]
    fn rnp_vi_loss_gradient_matches_finite_diff() {
        gradient_check(ObjectiveKind::RnpVi, 0.7);
    }

    #[test]
    fn rnp_ml_task_gradient_matches_finite_diff() {
        gradient_check(ObjectiveKind::RnpMlTask, 0.3);
    }

    fn gradient_check(kind: ObjectiveKind, alpha: f64) {
        let (params, task) = tiny_setup(12);
        let spec = ObjectiveSpec::new(kind, alpha, 4);
        let eps = eps_for(13, 4, 3);

        let flat: Vec<f64> =
            params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        let rebuild = |p: &[f64]| -> NPParams {
            let mut out = params.clone();
            let mut off = 0;
            for t in out.tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            out
        };
        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let pr = rebuild(p);
            let mut tape = Tape::new();
            let mv = pr.vars(&mut tape);
            let paths =
                build_paths(&mut tape, &mv, &task, &eps, spec.kind.samples_from_posterior())
                    .unwrap();
            let loss = objective_loss(&mut tape, &paths, &spec).unwrap();
            let g = tape.backward(loss).unwrap();
            let flat_g: Vec<f64> = mv
                .vars
                .iter()
                .flat_map(|&v| g.wrt(&tape, v).data().to_vec())
                .collect();
            (tape.value(loss).item(), flat_g)
        };
        let (_, analytic) = eval(&flat);
        let mut f = |p: &[f64]| Ok(eval(p).0);
        let err = crate::numkit::finite_diff_check(&mut f, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-4, "{kind:?}: finite-diff error {err}");
    }

    #[test]
    fn rnp_vi_gradient_matches_eq8_identity() {
        // autodiff grad of -B(alpha) must equal
        // -sum_k softmax((1-alpha) log w)_k * grad log w_k
        let (params, task) = tiny_setup(14);
        let alpha = 0.7;
        let k = 4;
        let eps = eps_for(15, k, 3);

        let mut tape = Tape::new();
        let mv = params.vars(&mut tape);
        let paths = build_paths(&mut tape, &mv, &task, &eps, true).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveKind::RnpVi, alpha, k);
        let loss = loss_rnp_vi(&mut tape, &paths, &spec).unwrap();
        let auto = tape.backward(loss).unwrap();

        let log_w = importance_log_weights(&mut tape, &paths).unwrap();
        let lw = tape.value(log_w).data().to_vec();
        let scaled: Vec<f64> = lw.iter().map(|&w| (1.0 - alpha) * w).collect();
        let lse = crate::numkit::log_sum_exp(&scaled).unwrap();
        let weights: Vec<f64> = scaled.iter().map(|&s| (s - lse).exp()).collect();

        // per-sample gradients via one-hot row selection on the same tape
        let mut manual: Vec<Vec<f64>> = mv
            .vars
            .iter()
            .map(|&v| vec![0.0; tape.value(v).len()])
            .collect();
        for kk in 0..k {
            let mut onehot = vec![0.0; k];
            onehot[kk] = 1.0;
            let sel = tape.leaf(Tensor::new(1, k, onehot));
            let lwk = tape.matmul(sel, log_w);
            let g = tape.backward(lwk).unwrap();
            for (slot, &v) in manual.iter_mut().zip(&mv.vars) {
                for (s, gv) in slot.iter_mut().zip(g.wrt(&tape, v).data()) {
                    *s -= weights[kk] * gv;
                }
            }
        }
        for (slot, &v) in manual.iter().zip(&mv.vars) {
            for (m, a) in slot.iter().zip(auto.wrt(&tape, v).data()) {
                let denom = a.abs().max(1e-12);
                assert!((m - a).abs() / denom.max(1.0) < 1e-8, "{m} vs {a}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec::new(ObjectiveKind::RnpVi, 0.7, 0).validate().is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::RnpVi, -0.1, 8).validate().is_err());
        assert!(ObjectiveSpec::new(ObjectiveKind::Vi, f64::NAN, 8).validate().is_ok());
        assert!(ObjectiveSpec::new(ObjectiveKind::RnpVi, f64::NAN, 8).validate().is_err());
        assert!("RNP_VI".parse::<ObjectiveKind>().unwrap() == ObjectiveKind::RnpVi);
        assert!("bogus".parse::<ObjectiveKind>().is_err());
    }
}
