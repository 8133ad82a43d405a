//! Analytical ground truth for the bivariate-Gaussian Rényi posterior:
//! the variance-ratio formula rho_alpha and a small gradient-descent fit of
//! a factorized Gaussian that must reproduce it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Tape, Var};

/// 2x2 symmetric covariance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    pub fn new(s11: f64, s12: f64, s22: f64) -> Result<Self> {
        let c = Cov2 { s11, s12, s22 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s11 > 0.0 && self.s22 > 0.0 && self.det() > 0.0) {
            return Err(Error::Domain(format!(
                "Cov2({}, {}, {}) is not positive definite",
                self.s11, self.s12, self.s22
            )));
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    /// Squared correlation r^2 = s12^2 / (s11 s22); in [0, 1) when PD.
    pub fn r2(&self) -> f64 {
        self.s12 * self.s12 / (self.s11 * self.s22)
    }

    /// Diagonal of the precision matrix Sigma^{-1}.
    pub fn precision_diag(&self) -> (f64, f64) {
        let d = self.det();
        (self.s22 / d, self.s11 / d)
    }
}

/// rho_alpha = (1/2a) * [(2a - 1) + sqrt(1 - 4a(1-a) r^2)] for alpha in (0, 1].
pub fn rho_alpha(cov: &Cov2, alpha: f64) -> Result<f64> {
    cov.validate()?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("rho_alpha needs alpha in (0, 1], got {alpha}")));
    }
    let disc = 1.0 - 4.0 * alpha * (1.0 - alpha) * cov.r2();
    // disc >= (1 - 2a(1-a))^2's lower bound territory: for PD Sigma, r^2 < 1
    // and 4a(1-a) <= 1, so disc > 0 always holds here
    Ok(((2.0 * alpha - 1.0) + disc.sqrt()) / (2.0 * alpha))
}

/// Result of the factorized-Gaussian Rényi fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenyiFit {
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub precision: [f64; 2],
    pub divergence: f64,
    pub grad_norm: f64,
    pub steps_used: usize,
    pub converged: bool,
}

/// D_alpha( N(mu, diag(v1, v2)) || N(0, Sigma) ) as a scalar tape node, via
/// the closed form for Gaussians with the mixed covariance
/// Sigma_alpha = alpha * Sigma + (1 - alpha) * diag(v).
fn renyi_factorized_node(
    tape: &mut Tape,
    cov: &Cov2,
    alpha: f64,
    mu1: Var,
    mu2: Var,
    lv1: Var,
    lv2: Var,
) -> Var {
    let v1 = tape.exp(lv1);
    let v2 = tape.exp(lv2);
    let oma = 1.0 - alpha;
    // Sigma_alpha entries
    let a11 = tape.scale(v1, oma);
    let a11 = tape.add_scalar(a11, alpha * cov.s11);
    let a22 = tape.scale(v2, oma);
    let a22 = tape.add_scalar(a22, alpha * cov.s22);
    let b = alpha * cov.s12;
    // det = a11 * a22 - b^2
    let prod = tape.mul(a11, a22);
    let det = tape.add_scalar(prod, -b * b);
    // quadratic form mu^T Sigma_alpha^{-1} mu
    let m1sq = tape.square(mu1);
    let m2sq = tape.square(mu2);
    let t1 = tape.mul(a22, m1sq);
    let t2 = tape.mul(a11, m2sq);
    let cross = tape.mul(mu1, mu2);
    let cross = tape.scale(cross, -2.0 * b);
    let num = tape.add(t1, t2);
    let num = tape.add(num, cross);
    let quad = tape.div(num, det);
    let quad = tape.scale(quad, 0.5 * alpha);
    // log-determinant term: -1/(2(a-1)) * [ln det - (1-a) ln(v1 v2) - a ln det(Sigma)]
    let ln_det = tape.ln(det);
    let lnv = tape.add(lv1, lv2);
    let lnv = tape.scale(lnv, -oma);
    let combined = tape.add(ln_det, lnv);
    let combined = tape.add_scalar(combined, -alpha * cov.det().ln());
    let logdet_term = tape.scale(combined, -0.5 / (alpha - 1.0));
    tape.add(quad, logdet_term)
}

/// Fit a factorized Gaussian to N(0, Sigma) under D_alpha by plain gradient
/// descent on (mu, log-variances). Deterministic; reports non-convergence
/// instead of accepting it silently.
pub fn fit_renyi_factorized(cov: &Cov2, alpha: f64, steps: usize, step_size: f64) -> Result<RenyiFit> {
    cov.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "fit_renyi_factorized needs alpha in (0, 1), got {alpha}"
        )));
    }
    if steps == 0 || step_size <= 0.0 {
        return Err(Error::Domain("fit needs steps >= 1 and step_size > 0".into()));
    }
    // start from the marginal fit
    let mut p = [0.0, 0.0, cov.s11.ln(), cov.s22.ln()];
    let mut grad_norm = f64::INFINITY;
    let mut divergence = f64::NAN;
    let mut steps_used = 0;
    for step in 1..=steps {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|&x| tape.scalar(x)).collect();
        let d = renyi_factorized_node(&mut tape, cov, alpha, vars[0], vars[1], vars[2], vars[3]);
        divergence = tape.value(d).item();
        if !divergence.is_finite() {
            return Err(Error::Numeric(format!(
                "divergence became non-finite at step {step}"
            )));
        }
        let g = tape.backward(d)?;
        let grads: Vec<f64> = vars.iter().map(|&v| g.wrt(&tape, v).item()).collect();
        grad_norm = grads.iter().map(|x| x * x).sum::<f64>().sqrt();
        steps_used = step;
        if grad_norm <= 1e-6 {
            break;
        }
        for (x, gr) in p.iter_mut().zip(&grads) {
            *x -= step_size * gr;
        }
    }
    let var = [p[2].exp(), p[3].exp()];
    Ok(RenyiFit {
        mean: [p[0], p[1]],
        var,
        precision: [1.0 / var[0], 1.0 / var[1]],
        divergence,
        grad_norm,
        steps_used,
        converged: grad_norm <= 1e-6,
    })
}
