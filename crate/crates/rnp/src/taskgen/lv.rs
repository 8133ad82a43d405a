//! Lotka-Volterra predator-prey simulation and task extraction.
//!
//! dx/dt = th1 x - th2 x y, dy/dt = -th3 y + th4 x y.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::numkit::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LVConfig {
    pub theta: [f64; 4],
    pub x0: f64,
    pub y0: f64,
    pub horizon: f64,
    pub grid_size: usize,
    pub dt: f64,
}

impl Default for LVConfig {
    fn default() -> Self {
        // theta per the reference setup; horizon covers ~3 natural periods
        LVConfig {
            theta: [1.0, 0.01, 0.5, 0.01],
            x0: 50.0,
            y0: 100.0,
            horizon: 25.0,
            grid_size: 256,
            dt: 0.01,
        }
    }
}

impl LVConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta.iter().any(|&t| t <= 0.0) {
            return Err(Error::Domain("LV parameters must be positive".into()));
        }
        if self.x0 <= 0.0 || self.y0 <= 0.0 {
            return Err(Error::Domain("LV initial populations must be positive".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Domain("LV grid needs at least 2 points".into()));
        }
        if self.dt <= 0.0 || self.dt > self.horizon / self.grid_size as f64 {
            return Err(Error::Domain(format!(
                "dt {} must lie in (0, horizon/grid_size = {}]",
                self.dt,
                self.horizon / self.grid_size as f64
            )));
        }
        Ok(())
    }
}

fn derivs(theta: &[f64; 4], x: f64, y: f64) -> (f64, f64) {
    (theta[0] * x - theta[1] * x * y, -theta[2] * y + theta[3] * x * y)
}

/// Classic RK4, sampled at `grid_size` equally spaced times on [0, horizon].
/// Rows are (time, prey, predator).
pub fn simulate_lv(cfg: &LVConfig) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    let spacing = cfg.horizon / (cfg.grid_size - 1) as f64;
    let substeps = (spacing / cfg.dt).ceil() as usize;
    let h = spacing / substeps as f64;

    let mut x = cfg.x0;
    let mut y = cfg.y0;
    let mut out = Vec::with_capacity(cfg.grid_size);
    out.push([0.0, x, y]);
    for g in 1..cfg.grid_size {
        for _ in 0..substeps {
            let (k1x, k1y) = derivs(&cfg.theta, x, y);
            let (k2x, k2y) = derivs(&cfg.theta, x + 0.5 * h * k1x, y + 0.5 * h * k1y);
            let (k3x, k3y) = derivs(&cfg.theta, x + 0.5 * h * k2x, y + 0.5 * h * k2y);
            let (k4x, k4y) = derivs(&cfg.theta, x + h * k3x, y + h * k3y);
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            if x <= 0.0 || y <= 0.0 || !x.is_finite() || !y.is_finite() {
                return Err(Error::Simulation(format!(
                    "population left the positive quadrant at t ~ {:.3}",
                    g as f64 * spacing
                )));
            }
        }
        out.push([g as f64 * spacing, x, y]);
    }
    Ok(out)
}

/// Context/target sizing for LV tasks: M ~ U(15, 100), N ~ U(15, 100 - M).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LvSplit {
    pub m_min: usize,
    pub m_max: usize,
    pub n_min: usize,
    pub total_max: usize,
}

impl Default for LvSplit {
    fn default() -> Self {
        LvSplit { m_min: 15, m_max: 100, n_min: 15, total_max: 100 }
    }
}

fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Domain("zero-variance series cannot be z-scored".into()));
    }
    let std = var.sqrt();
    Ok(v.iter().map(|x| (x - mean) / std).collect())
}

/// Subsample disjoint context/target indices from a trajectory. Inputs are
/// the z-scored time axis, outputs the z-scored predator series.
pub fn make_lv_task(traj: &[[f64; 3]], rng: &mut ChaCha8Rng, split: &LvSplit) -> Result<Task> {
    if traj.len() < 200 {
        return Err(Error::Generation(format!(
            "LV trajectory has {} points, need at least 200",
            traj.len()
        )));
    }
    let m = rng.gen_range(split.m_min..=split.m_max);
    let n_max = split.total_max.saturating_sub(m).max(split.n_min);
    let n = rng.gen_range(split.n_min..=n_max);
    if m + n > traj.len() {
        return Err(Error::Generation(format!(
            "M + N = {} exceeds grid size {}",
            m + n,
            traj.len()
        )));
    }

    let times: Vec<f64> = traj.iter().map(|r| r[0]).collect();
    let predator: Vec<f64> = traj.iter().map(|r| r[2]).collect();
    let xs = zscore(&times)?;
    let ys = zscore(&predator)?;

    let mut idx: Vec<usize> = (0..traj.len()).collect();
    idx.shuffle(rng);
    let mut ctx: Vec<usize> = idx[..m].to_vec();
    let mut tgt: Vec<usize> = idx[m..m + n].to_vec();
    ctx.sort_unstable();
    tgt.sort_unstable();

    let take = |ids: &[usize], v: &[f64]| Tensor::new(ids.len(), 1, ids.iter().map(|&i| v[i]).collect());
    Ok(Task {
        x_ctx: take(&ctx, &xs),
        y_ctx: take(&ctx, &ys),
        x_tgt: take(&tgt, &xs),
        y_tgt: take(&tgt, &ys),
    })
}

/// LV dataset: one simulated trajectory per task with random initial
/// populations, subsampled into context/target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LvDatasetSpec {
    pub base: LVConfig,
    pub init_range: (f64, f64),
    pub split: LvSplit,
}

impl Default for LvDatasetSpec {
    fn default() -> Self {
        LvDatasetSpec { base: LVConfig::default(), init_range: (50.0, 150.0), split: LvSplit::default() }
    }
}

impl LvDatasetSpec {
    pub fn task(&self, root: &RngStream, purpose: &str, index: u64) -> Result<Task> {
        let mut rng = root.stream(purpose, index);
        let cfg = LVConfig {
            x0: rng.gen_range(self.init_range.0..self.init_range.1),
            y0: rng.gen_range(self.init_range.0..self.init_range.1),
            ..self.base
        };
        let traj = simulate_lv(&cfg)?;
        make_lv_task(&traj, &mut rng, &self.split)
    }
}

/// Conserved quantity of the LV flow; constant along exact trajectories.
pub fn lv_invariant(theta: &[f64; 4], x: f64, y: f64) -> f64 {
    theta[3] * x - theta[2] * x.ln() + theta[1] * y - theta[0] * y.ln()
}
