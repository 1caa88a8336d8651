//! Monte Carlo comparison of `Pr{d_in < d_out}` with and without clamping of
//! the training feature.
//!
//! Each trial draws an `m`-dimensional training feature from `N(0, sigma_in^2)`
//! per dimension, its clamped copy, an ID feature from the same Gaussian and
//! an OOD feature from an epsilon-skew-normal `ESN(0, sigma_out^2, epsilon)`.
//! The training feature and its clamped copy are compared against the same
//! ID/OOD pair, so the two probability estimates are paired.
//!
//! Every grid point draws from its own ChaCha stream, keyed by the seed and
//! the point's parameters, so results do not depend on grid order or on how
//! many threads evaluate the grid.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp radius that leaves 5% of a standard normal outside `[-r, r]`.
pub const DEFAULT_CLAMP: f64 = 1.96;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_TRIALS: u64 = 100_000;
/// Below this many trials the standard error tends to swamp the delta.
pub const MIN_RECOMMENDED_TRIALS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsnParams {
    mu: f64,
    sigma: f64,
    epsilon: f64,
}

impl EsnParams {
    pub fn new(mu: f64, sigma: f64, epsilon: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::invalid(format!(
                "ESN location must be finite, got {mu}"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!(
                "ESN scale must be positive, got {sigma}"
            )));
        }
        if !(-1.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "ESN skewness must lie in [-1, 1], got {epsilon}"
            )));
        }
        Ok(EsnParams { mu, sigma, epsilon })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Probability mass below `mu`, `(1 + epsilon) / 2`.
    pub fn left_mass(&self) -> f64 {
        (1.0 + self.epsilon) / 2.0
    }

    /// One draw: `mu - sigma (1 + eps) |Z|` with probability `(1 + eps) / 2`,
    /// otherwise `mu + sigma (1 - eps) |Z|`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        if u < self.left_mass() {
            self.mu - self.sigma * (1.0 + self.epsilon) * z
        } else {
            self.mu + self.sigma * (1.0 - self.epsilon) * z
        }
    }
}

pub fn sample_esn(p: &EsnParams, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| p.draw(&mut rng)).collect()
}

pub fn sample_normal(mu: f64, sigma: f64, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn check_clamp(clamp: f64) -> Result<()> {
    // An infinite radius disables clamping.
    if clamp.is_nan() || clamp <= 0.0 {
        return Err(Error::invalid(format!(
            "clamp radius must be positive, got {clamp}"
        )));
    }
    Ok(())
}

/// Gaussian draws clipped to `[mu - clamp, mu + clamp]`. Uses the same
/// stream as [`sample_normal`] for the same seed.
pub fn sample_clamped_normal(
    mu: f64,
    sigma: f64,
    clamp: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_clamp(clamp)?;
    Ok(sample_normal(mu, sigma, count, seed)
        .into_iter()
        .map(|x| x.clamp(mu - clamp, mu + clamp))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sigma_out: f64,
    pub epsilon: f64,
}

/// The default surface: epsilon in {-0.8, ..., -0.1}, sigma_out in
/// {1.25, ..., 3.0}.
pub fn default_grid() -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for e in 1..=8 {
        for s in 0..8 {
            grid.push(GridPoint {
                sigma_out: 1.25 + 0.25 * s as f64,
                epsilon: -0.1 * (9 - e) as f64,
            });
        }
    }
    grid
}

fn default_sigma_in() -> f64 {
    1.0
}
fn default_clamp() -> f64 {
    DEFAULT_CLAMP
}
fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_trials() -> u64 {
    DEFAULT_TRIALS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_sigma_in")]
    pub sigma_in: f64,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_trials")]
    pub trials: u64,
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub grid: Vec<GridPoint>,
    /// Permits grid points with `sigma_out <= sigma_in`, for control runs.
    #[serde(default)]
    pub control: bool,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig {
            sigma_in: 1.0,
            clamp: DEFAULT_CLAMP,
            dim: DEFAULT_DIM,
            trials: DEFAULT_TRIALS,
            seed,
            grid: default_grid(),
            control: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_in.is_finite() && self.sigma_in > 0.0) {
            return Err(Error::invalid(format!(
                "sigma_in must be positive, got {}",
                self.sigma_in
            )));
        }
        check_clamp(self.clamp)?;
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.grid.is_empty() {
            return Err(Error::invalid("simulation grid is empty"));
        }
        for p in &self.grid {
            self.check_point(p.sigma_out, p.epsilon)?;
        }
        Ok(())
    }

    fn check_point(&self, sigma_out: f64, epsilon: f64) -> Result<EsnParams> {
        let esn = EsnParams::new(0.0, sigma_out, epsilon)?;
        if !self.control && sigma_out <= self.sigma_in {
            return Err(Error::invalid(format!(
                "sigma_out = {sigma_out} must exceed sigma_in = {} (set control = true for control runs)",
                self.sigma_in
            )));
        }
        Ok(esn)
    }
}

/// Paired probability estimates at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    /// Fraction of trials with `d_in < d_out` against the raw training feature.
    pub p_base: f64,
    /// The same fraction against the clamped training feature.
    pub p_fbe: f64,
    /// Binomial standard error `sqrt(p (1 - p) / trials)`, taking the larger
    /// of the two estimates' values.
    pub stderr: f64,
    /// Standard error of the paired difference `p_fbe - p_base`.
    pub delta_stderr: f64,
}

impl PairEstimate {
    pub fn delta(&self) -> f64 {
        self.p_fbe - self.p_base
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn point_rng(seed: u64, sigma_out: f64, epsilon: f64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(
        sigma_out.to_bits() ^ splitmix64(epsilon.to_bits()),
    ));
    rng
}

fn binomial_stderr(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

pub fn prob_pair(cfg: &SimConfig, sigma_out: f64, epsilon: f64) -> Result<PairEstimate> {
    let esn = cfg.check_point(sigma_out, epsilon)?;
    if !(cfg.sigma_in.is_finite() && cfg.sigma_in > 0.0) || cfg.dim == 0 || cfg.trials == 0 {
        cfg.validate()?;
    }
    check_clamp(cfg.clamp)?;

    let mut rng = point_rng(cfg.seed, sigma_out, epsilon);
    let (sigma_in, clamp) = (cfg.sigma_in, cfg.clamp);
    let mut base_wins = 0u64;
    let mut fbe_wins = 0u64;
    let mut disagreements = 0u64;
    for _ in 0..cfg.trials {
        let (mut din, mut dout, mut din_c, mut dout_c) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..cfg.dim {
            let train = sigma_in * rng.sample::<f64, _>(StandardNormal);
            let train_c = train.clamp(-clamp, clamp);
            let z_in = sigma_in * rng.sample::<f64, _>(StandardNormal);
            let z_out = esn.draw(&mut rng);
            din += (train - z_in) * (train - z_in);
            dout += (train - z_out) * (train - z_out);
            din_c += (train_c - z_in) * (train_c - z_in);
            dout_c += (train_c - z_out) * (train_c - z_out);
        }
        let base = din < dout;
        let fbe = din_c < dout_c;
        base_wins += base as u64;
        fbe_wins += fbe as u64;
        disagreements += (base != fbe) as u64;
    }
    let t = cfg.trials as f64;
    let p_base = base_wins as f64 / t;
    let p_fbe = fbe_wins as f64 / t;
    let delta = p_fbe - p_base;
    let second_moment = disagreements as f64 / t;
    Ok(PairEstimate {
        p_base,
        p_fbe,
        stderr: binomial_stderr(p_base, cfg.trials).max(binomial_stderr(p_fbe, cfg.trials)),
        delta_stderr: ((second_moment - delta * delta).max(0.0) / t).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub sigma_out: f64,
    pub epsilon: f64,
    pub p_base: f64,
    pub p_fbe: f64,
    pub delta: f64,
    pub stderr: f64,
    pub delta_stderr: f64,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub sigma_in: f64,
    pub clamp: f64,
    pub dim: usize,
    pub rows: Vec<SurfaceRow>,
}

pub const SURFACE_CSV_HEADER: &str = "sigma_out,epsilon,p_base,p_fbe,delta,stderr,trials,seed";

impl Surface {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SURFACE_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.sigma_out, r.epsilon, r.p_base, r.p_fbe, r.delta, r.stderr, r.trials, r.seed
            ));
        }
        out
    }
}

pub fn sweep_surface(cfg: &SimConfig) -> Result<Surface> {
    cfg.validate()?;
    let rows = cfg
        .grid
        .par_iter()
        .map(|p| {
            let est = prob_pair(cfg, p.sigma_out, p.epsilon)?;
            Ok(SurfaceRow {
                sigma_out: p.sigma_out,
                epsilon: p.epsilon,
                p_base: est.p_base,
                p_fbe: est.p_fbe,
                delta: est.delta(),
                stderr: est.stderr,
                delta_stderr: est.delta_stderr,
                trials: cfg.trials,
                seed: cfg.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Surface {
        sigma_in: cfg.sigma_in,
        clamp: cfg.clamp,
        dim: cfg.dim,
        rows,
    })
}
