//! Monte Carlo power study of the tail mean tests on Gaussian-process curves.
//!
//! Each run draws one latent curve z(x) from a zero-mean GP with a squared
//! exponential kernel on a shared random design x. Group 1 curves are
//! z + ε, group 2 curves are z + δ + ε. Group 2 plays the earlier stage
//! (higher peaks near x = 0, deeper valleys near x = 1), so a detection
//! means both tail tests reject.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::{test_lower_tail, test_upper_tail, DecisionConfig};
use crate::error::{Error, Result};
use crate::permutation::PermutationConfig;
use crate::roughness::{QuantileGrid, StageSample};
use crate::stats::{mean_and_variance, MeanStatistic};

pub const DEFAULT_SIM_PERMUTATIONS: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_curves_per_group: usize,
    pub n_input_points: usize,
    pub sigma_f: f64,
    pub theta: f64,
    pub sigma_eps: f64,
    /// Per-test rejection level.
    pub alpha: f64,
    pub tau: f64,
    pub runs: usize,
    /// Multiplier on δ(x); 0 gives the null model.
    pub delta_scale: f64,
    pub mean_statistic: MeanStatistic,
    pub perm: PermutationConfig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_curves_per_group: 9,
            n_input_points: 100,
            sigma_f: 5.0,
            theta: 0.2,
            sigma_eps: 0.5,
            alpha: 0.03,
            tau: 0.25,
            runs: 1000,
            delta_scale: 1.0,
            mean_statistic: MeanStatistic::Welch,
            perm: PermutationConfig::sampled(DEFAULT_SIM_PERMUTATIONS, 0),
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_f", self.sigma_f),
            ("theta", self.theta),
            ("sigma_eps", self.sigma_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
        if self.runs == 0 {
            return Err(Error::invalid("runs must be at least 1"));
        }
        if self.n_curves_per_group < 2 {
            return Err(Error::invalid("need at least 2 curves per group"));
        }
        if self.n_input_points < 2 {
            return Err(Error::invalid("need at least 2 input points"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.delta_scale.is_finite() {
            return Err(Error::invalid("delta_scale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub n_curves_per_group: usize,
    pub type2_upper: f64,
    pub type2_lower: f64,
    pub avg_l2_pct: f64,
    pub runs_used: usize,
}

impl SimResult {
    pub fn rejection_rate_upper(&self) -> f64 {
        1.0 - self.type2_upper
    }

    pub fn rejection_rate_lower(&self) -> f64 {
        1.0 - self.type2_lower
    }
}

/// σ_f² · exp(−½ ((x − x′)/θ)²)
pub fn se_kernel(x: f64, x2: f64, sigma_f: f64, theta: f64) -> f64 {
    let r = (x - x2) / theta;
    sigma_f * sigma_f * (-0.5 * r * r).exp()
}

/// Tail perturbation: −⅓ sin(π(x−0.2)/0.6) for x ≤ 0.25, 0 in between,
/// +⅓ sin(π(x−0.2)/0.6) for x ≥ 0.75.
pub fn perturbation(x: f64) -> f64 {
    let wave = (std::f64::consts::PI * (x - 0.2) / 0.6).sin() / 3.0;
    if x <= 0.25 {
        -wave
    } else if x >= 0.75 {
        wave
    } else {
        0.0
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// 100 · ‖μ₁ − μ₂‖ / ‖μ₁‖ with L² norms by the trapezoid rule on `x`.
pub fn l2_distance_pct(x: &[f64], mu1: &[f64], mu2: &[f64]) -> Result<f64> {
    if x.len() != mu1.len() || x.len() != mu2.len() || x.len() < 2 {
        return Err(Error::invalid("L2 distance needs equal-length samples on at least 2 points"));
    }
    let sq1: Vec<f64> = mu1.iter().map(|v| v * v).collect();
    let sqd: Vec<f64> = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).collect();
    let norm1 = trapezoid(x, &sq1).sqrt();
    if norm1 == 0.0 {
        return Err(Error::invalid("reference mean function has zero L2 norm"));
    }
    Ok(100.0 * trapezoid(x, &sqd).sqrt() / norm1)
}

/// Cholesky factor of K(x, x) + jitter·I, escalating the jitter from
/// 1e-10·σ_f² to 1e-6·σ_f² until the factorization succeeds.
pub fn kernel_cholesky(x: &[f64], sigma_f: f64, theta: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(x[i], x[j], sigma_f, theta));
    let var = sigma_f * sigma_f;
    let mut jitter = 1e-10 * var;
    while jitter <= 1e-6 * var * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(ch) = kj.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "kernel matrix on {n} points is not positive definite even with jitter 1e-6·σ_f²"
    )))
}

/// One draw of the latent GP at `x`.
pub fn sample_latent<R: Rng + ?Sized>(
    x: &[f64],
    sigma_f: f64,
    theta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let l = kernel_cholesky(x, sigma_f, theta)?;
    let w = DVector::from_iterator(x.len(), (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok((l * w).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimGroups {
    /// Sorted design points in [0, 1].
    pub x: Vec<f64>,
    pub latent: Vec<f64>,
    /// z + ε
    pub group1: Vec<Vec<f64>>,
    /// z + δ + ε
    pub group2: Vec<Vec<f64>>,
}

pub fn sample_gp_groups<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<SimGroups> {
    cfg.validate()?;
    let mut x: Vec<f64> = (0..cfg.n_input_points).map(|_| rng.gen::<f64>()).collect();
    x.sort_by(f64::total_cmp);
    let latent = sample_latent(&x, cfg.sigma_f, cfg.theta, rng)?;
    let delta: Vec<f64> = x.iter().map(|&v| cfg.delta_scale * perturbation(v)).collect();
    let mut noisy = |shift: Option<&[f64]>| -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let eps: f64 = rng.sample(StandardNormal);
                latent[k] + shift.map_or(0.0, |d| d[k]) + cfg.sigma_eps * eps
            })
            .collect()
    };
    let group1 = (0..cfg.n_curves_per_group).map(|_| noisy(None)).collect();
    let group2 = (0..cfg.n_curves_per_group).map(|_| noisy(Some(&delta))).collect();
    Ok(SimGroups {
        x,
        latent,
        group1,
        group2,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Data generator for run `run` under `seed`.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub p_upper: f64,
    pub p_lower: f64,
    pub l2_pct: f64,
}

/// Draws the groups of run `run` and tests both tails (group 2 as the earlier stage).
pub fn simulate_run(cfg: &SimConfig, run: u64) -> Result<RunOutcome> {
    let mut rng = run_rng(cfg.seed, run);
    let groups = sample_gp_groups(cfg, &mut rng)?;
    let grid = QuantileGrid::new(groups.x.clone(), cfg.tau)?;
    let (mu1, _) = mean_and_variance(&groups.group1);
    let (mu2, _) = mean_and_variance(&groups.group2);
    let l2_pct = l2_distance_pct(&groups.x, &mu1, &mu2)?;
    let prev = StageSample::new(groups.group2, grid.clone(), "group2")?;
    let curr = StageSample::new(groups.group1, grid.clone(), "group1")?;
    let dcfg = DecisionConfig {
        alpha: cfg.alpha,
        perm: cfg.perm.with_seed(splitmix64(cfg.seed ^ splitmix64(run))),
        grid,
        mean_statistic: cfg.mean_statistic,
        ..Default::default()
    };
    let p_upper = test_upper_tail(&prev, &curr, &dcfg)?.corrected_p;
    let p_lower = test_lower_tail(&prev, &curr, &dcfg)?.corrected_p;
    Ok(RunOutcome {
        p_upper,
        p_lower,
        l2_pct,
    })
}

/// Type II error of each tail test over `cfg.runs` independent runs.
pub fn estimate_type2(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let outcomes = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|run| simulate_run(cfg, run))
        .collect::<Result<Vec<_>>>()?;
    let runs = outcomes.len() as f64;
    let miss_upper = outcomes.iter().filter(|o| o.p_upper > cfg.alpha).count() as f64;
    let miss_lower = outcomes.iter().filter(|o| o.p_lower > cfg.alpha).count() as f64;
    let l2_total: f64 = outcomes.iter().map(|o| o.l2_pct).sum();
    Ok(SimResult {
        n_curves_per_group: cfg.n_curves_per_group,
        type2_upper: miss_upper / runs,
        type2_lower: miss_lower / runs,
        avg_l2_pct: l2_total / runs,
        runs_used: outcomes.len(),
    })
}

/// `estimate_type2` for each group size on one master seed.
pub fn type2_table(cfg: &SimConfig, sizes: &[usize]) -> Result<Vec<SimResult>> {
    sizes
        .iter()
        .map(|&n| {
            estimate_type2(&SimConfig {
                n_curves_per_group: n,
                ..cfg.clone()
            })
        })
        .collect()
}
