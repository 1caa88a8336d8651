//! Seeded Gaussian-cluster benchmark with near- and far-OOD query sets.
//!
//! Class means sit around a common offset (`center_offset * class_spread`
//! in every coordinate) with `mean_scale * class_spread` Gaussian jitter.
//! Training rows are Gaussian around their class mean; a `heavy_tail_frac`
//! subset is drawn with 4x the standard deviation. Each near-OOD cluster is
//! a class mean moved `near_shift * class_spread` along one random axis.
//! Far-OOD rows are a wider Gaussian, centred `far_shift * class_spread`
//! away along a random unit direction.
//!
//! Streams: 0 = structure (means and shift directions), 1 = train,
//! 2 = ID test, 3 = near-OOD, 4 = far-OOD.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::{FeatureBank, LinearHead};
use crate::error::{Error, Result};

/// Standard-deviation multiplier for the heavy-tailed training rows.
pub const HEAVY_TAIL_SCALE: f64 = 4.0;
/// Ridge term for the least-squares head.
pub const HEAD_RIDGE: f64 = 1e-6;

const STRUCTURE: u64 = 0;
const TRAIN: u64 = 1;
const ID_TEST: u64 = 2;
const NEAR: u64 = 3;
const FAR: u64 = 4;

fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    16
}
fn d_per_class() -> usize {
    200
}
fn d_test_per_class() -> usize {
    50
}
fn d_spread() -> f64 {
    1.0
}
fn d_near() -> f64 {
    3.0
}
fn d_far() -> f64 {
    20.0
}
fn d_heavy() -> f64 {
    0.05
}
fn d_offset() -> f64 {
    2.0
}
fn d_mean_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    /// Rows per class in the ID test set and per near-OOD cluster; the
    /// far-OOD set has `classes * test_per_class` rows.
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_spread")]
    pub class_spread: f64,
    #[serde(default = "d_near")]
    pub near_shift: f64,
    #[serde(default = "d_far")]
    pub far_shift: f64,
    #[serde(default = "d_heavy")]
    pub heavy_tail_frac: f64,
    #[serde(default = "d_offset")]
    pub center_offset: f64,
    #[serde(default = "d_mean_scale")]
    pub mean_scale: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        SynthConfig {
            classes: d_classes(),
            dim: d_dim(),
            per_class: d_per_class(),
            test_per_class: d_test_per_class(),
            class_spread: d_spread(),
            near_shift: d_near(),
            far_shift: d_far(),
            heavy_tail_frac: d_heavy(),
            center_offset: d_offset(),
            mean_scale: d_mean_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(msg));
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.per_class < 10 {
            return fail(format!(
                "per_class must be at least 10, got {}",
                self.per_class
            ));
        }
        if self.test_per_class == 0 {
            return fail("test_per_class must be at least 1".into());
        }
        if !(self.class_spread.is_finite() && self.class_spread > 0.0) {
            return fail(format!(
                "class_spread must be positive, got {}",
                self.class_spread
            ));
        }
        if !(self.near_shift.is_finite() && self.near_shift > 0.0) {
            return fail(format!(
                "near_shift must be positive, got {}",
                self.near_shift
            ));
        }
        if !(self.far_shift.is_finite() && self.far_shift > self.near_shift) {
            return fail(format!(
                "far_shift ({}) must exceed near_shift ({})",
                self.far_shift, self.near_shift
            ));
        }
        if !(0.0..1.0).contains(&self.heavy_tail_frac) {
            return fail(format!(
                "heavy_tail_frac must lie in [0, 1), got {}",
                self.heavy_tail_frac
            ));
        }
        if !self.center_offset.is_finite() {
            return fail(format!(
                "center_offset must be finite, got {}",
                self.center_offset
            ));
        }
        if !(self.mean_scale.is_finite() && self.mean_scale >= 0.0) {
            return fail(format!(
                "mean_scale must be non-negative, got {}",
                self.mean_scale
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: FeatureBank,
    pub id_test: FeatureBank,
    pub near_ood: FeatureBank,
    pub far_ood: FeatureBank,
    pub head: LinearHead,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Rows `center + scale * N(0, I)`, one per entry of `centers`.
fn gaussian_rows(rng: &mut ChaCha8Rng, centers: &[&[f64]], scale: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(centers.len() * centers.first().map_or(0, |c| c.len()));
    for c in centers {
        for &x in c.iter() {
            out.push((x + scale * normal(rng)) as f32);
        }
    }
    out
}

struct Structure {
    means: Vec<Vec<f64>>,
    near_means: Vec<Vec<f64>>,
    far_center: Vec<f64>,
}

fn structure(cfg: &SynthConfig) -> Structure {
    let mut rng = stream(cfg.seed, STRUCTURE);
    let s = cfg.class_spread;
    let base = cfg.center_offset * s;
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| base + cfg.mean_scale * s * normal(&mut rng))
                .collect()
        })
        .collect();
    let near_means = means
        .iter()
        .map(|mu| {
            let axis = rng.gen_range(0..cfg.dim);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut v = mu.clone();
            v[axis] += sign * cfg.near_shift * s;
            v
        })
        .collect();
    let mut u: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut rng)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        u.iter_mut().for_each(|x| *x /= norm);
    } else {
        u[0] = 1.0;
    }
    let far_center = u.iter().map(|x| base + cfg.far_shift * s * x).collect();
    Structure {
        means,
        near_means,
        far_center,
    }
}

fn repeat_each(centers: &[Vec<f64>], times: usize) -> Vec<&[f64]> {
    centers
        .iter()
        .flat_map(|mu| std::iter::repeat(mu.as_slice()).take(times))
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let st = structure(cfg);
    let s = cfg.class_spread;
    let (c, m) = (cfg.classes, cfg.dim);

    let mut rng = stream(cfg.seed, TRAIN);
    let mut data = Vec::with_capacity(c * cfg.per_class * m);
    let mut labels = Vec::with_capacity(c * cfg.per_class);
    for (class, mu) in st.means.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let heavy = rng.gen::<f64>() < cfg.heavy_tail_frac;
            let scale = if heavy { HEAVY_TAIL_SCALE * s } else { s };
            data.extend(gaussian_rows(&mut rng, &[mu], scale));
            labels.push(class as i32);
        }
    }
    let train = FeatureBank::new(c * cfg.per_class, m, data, Some(labels))?;

    let q = c * cfg.test_per_class;
    let id_test = FeatureBank::new(
        q,
        m,
        gaussian_rows(
            &mut stream(cfg.seed, ID_TEST),
            &repeat_each(&st.means, cfg.test_per_class),
            s,
        ),
        None,
    )?;
    let near_ood = FeatureBank::new(
        q,
        m,
        gaussian_rows(
            &mut stream(cfg.seed, NEAR),
            &repeat_each(&st.near_means, cfg.test_per_class),
            s,
        ),
        None,
    )?;
    let far_centers = vec![st.far_center.as_slice(); q];
    let far_ood = FeatureBank::new(
        q,
        m,
        gaussian_rows(&mut stream(cfg.seed, FAR), &far_centers, 2.0 * s),
        None,
    )?;
    let head = fit_linear_head(&train, c)?;
    Ok(SynthData {
        train,
        id_test,
        near_ood,
        far_ood,
        head,
    })
}

/// Ridge least squares on one-hot targets, with a bias column.
pub fn fit_linear_head(train: &FeatureBank, classes: usize) -> Result<LinearHead> {
    let labels = train
        .labels()
        .ok_or(Error::MissingLabels("least-squares head"))?;
    train.check_labels(classes)?;
    let (n, m) = (train.n(), train.m());
    let x = DMatrix::from_fn(
        n,
        m + 1,
        |i, j| {
            if j < m {
                train.get(i, j) as f64
            } else {
                1.0
            }
        },
    );
    let y = DMatrix::from_fn(n, classes, |i, k| (labels[i] as usize == k) as u8 as f64);
    let mut gram = x.transpose() * &x;
    for d in 0..=m {
        gram[(d, d)] += HEAD_RIDGE;
    }
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("least-squares head normal equations".into()))?;
    let w = chol.solve(&rhs);
    let mut weights = Vec::with_capacity(classes * m);
    let mut bias = Vec::with_capacity(classes);
    for k in 0..classes {
        let col: DVector<f64> = w.column(k).into_owned();
        weights.extend(col.iter().take(m).map(|&v| v as f32));
        bias.push(col[m] as f32);
    }
    LinearHead::new(classes, m, weights, bias)
}

/// Manifest written next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: SynthConfig,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub role: String,
    pub path: String,
    pub rows: usize,
    pub sha256: String,
}
