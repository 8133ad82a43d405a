//! GP-prior function draws for the 1-D regression tasks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::numkit::{standard_normal, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Rbf,
    Matern52,
    Periodic,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern52" | "matern" => Ok(KernelFamily::Matern52),
            "periodic" => Ok(KernelFamily::Periodic),
            other => Err(Error::Config(format!("unknown kernel family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub output_scale: f64,
    pub lengthscale: f64,
    /// Only read for the periodic family.
    pub period: f64,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_scale <= 0.0 || self.lengthscale <= 0.0 {
            return Err(Error::Domain("kernel scale and lengthscale must be positive".into()));
        }
        if self.family == KernelFamily::Periodic && self.period <= 0.0 {
            return Err(Error::Domain("periodic kernel needs period > 0".into()));
        }
        if self.jitter < 0.0 {
            return Err(Error::Domain("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Covariance between two scalar inputs.
pub fn kernel_eval(spec: &KernelSpec, x: f64, x2: f64) -> Result<f64> {
    spec.validate()?;
    let r = (x - x2).abs();
    let s2 = spec.output_scale * spec.output_scale;
    let l = spec.lengthscale;
    Ok(match spec.family {
        KernelFamily::Rbf => s2 * (-r * r / (2.0 * l * l)).exp(),
        KernelFamily::Matern52 => {
            let a = 5f64.sqrt() * r / l;
            s2 * (1.0 + a + 5.0 * r * r / (3.0 * l * l)) * (-a).exp()
        }
        KernelFamily::Periodic => {
            let s = (std::f64::consts::PI * r / spec.period).sin();
            s2 * (-2.0 * s * s / (l * l)).exp()
        }
    })
}

/// Context/target sizing and input range for GP tasks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpSplit {
    pub m_min: usize,
    pub m_max: usize,
    pub n_min: usize,
    /// N ~ U(n_min, max(n_min, total_max - M))
    pub total_max: usize,
    pub x_range: (f64, f64),
}

impl Default for GpSplit {
    fn default() -> Self {
        GpSplit { m_min: 3, m_max: 50, n_min: 3, total_max: 50, x_range: (-2.0, 2.0) }
    }
}

/// In-place lower Cholesky; errors if the matrix is not positive definite.
fn cholesky(a: &mut Tensor) -> Result<()> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if d <= 0.0 {
            return Err(Error::Generation(format!("Cholesky pivot {j} non-positive ({d:.3e})")));
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, v / d);
        }
        for i in 0..j {
            a.set(i, j, 0.0);
        }
    }
    Ok(())
}

/// Draw one joint GP sample at M+N uniform inputs and split it into disjoint
/// context and target sets.
pub fn sample_gp_task(spec: &KernelSpec, rng: &mut ChaCha8Rng, split: &GpSplit) -> Result<Task> {
    spec.validate()?;
    let m = rng.gen_range(split.m_min..=split.m_max);
    let n_max = split.total_max.saturating_sub(m).max(split.n_min);
    let n = rng.gen_range(split.n_min..=n_max);
    let total = m + n;

    let (lo, hi) = split.x_range;
    let xs: Vec<f64> = (0..total).map(|_| rng.gen_range(lo..hi)).collect();

    // Gram + escalating jitter; three retries with x10 each.
    let base_jitter = if spec.jitter > 0.0 { spec.jitter } else { 1e-8 };
    let mut chol = None;
    let mut jitter = base_jitter;
    for _ in 0..=3 {
        let mut gram = Tensor::zeros(total, total);
        for i in 0..total {
            for j in 0..=i {
                let v = kernel_eval(spec, xs[i], xs[j])?;
                gram.set(i, j, v);
                gram.set(j, i, v);
            }
            let d = gram.get(i, i) + jitter;
            gram.set(i, i, d);
        }
        match cholesky(&mut gram) {
            Ok(()) => {
                chol = Some(gram);
                break;
            }
            Err(_) => jitter *= 10.0,
        }
    }
    let l = chol.ok_or_else(|| {
        Error::Generation(format!("Cholesky failed after jitter escalation to {jitter:.1e}"))
    })?;

    let eps = Tensor::new(total, 1, standard_normal(rng, total));
    let ys = l.matmul(&eps);

    let x_col = |idx: std::ops::Range<usize>| {
        Tensor::new(idx.len(), 1, idx.clone().map(|i| xs[i]).collect())
    };
    let y_col = |idx: std::ops::Range<usize>| {
        Tensor::new(idx.len(), 1, idx.clone().map(|i| ys.get(i, 0)).collect())
    };
    Ok(Task {
        x_ctx: x_col(0..m),
        y_ctx: y_col(0..m),
        x_tgt: x_col(m..total),
        y_tgt: y_col(m..total),
    })
}

/// Per-task GP hyperpriors. The defaults follow the NP-literature convention
/// (the reference protocol leaves the ranges open).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpDatasetSpec {
    pub family: KernelFamily,
    pub lengthscale_range: (f64, f64),
    pub output_scale_range: (f64, f64),
    pub period_range: (f64, f64),
    pub jitter: f64,
    pub split: GpSplit,
}

impl GpDatasetSpec {
    pub fn new(family: KernelFamily) -> Self {
        let lengthscale_range = match family {
            KernelFamily::Periodic => (0.6, 1.0),
            _ => (0.1, 0.6),
        };
        GpDatasetSpec {
            family,
            lengthscale_range,
            output_scale_range: (0.1, 1.0),
            period_range: (0.3, 0.5),
            jitter: 1e-8,
            split: GpSplit::default(),
        }
    }

    fn draw_kernel(&self, rng: &mut ChaCha8Rng) -> KernelSpec {
        KernelSpec {
            family: self.family,
            lengthscale: rng.gen_range(self.lengthscale_range.0..self.lengthscale_range.1),
            output_scale: rng.gen_range(self.output_scale_range.0..self.output_scale_range.1),
            period: rng.gen_range(self.period_range.0..self.period_range.1),
            jitter: self.jitter,
        }
    }

    /// Task `index` of split `purpose` is a pure function of (spec, seed,
    /// purpose, index).
    pub fn task(&self, root: &RngStream, purpose: &str, index: u64) -> Result<Task> {
        let mut rng = root.stream(purpose, index);
        let spec = self.draw_kernel(&mut rng);
        sample_gp_task(&spec, &mut rng, &self.split)
    }
}
