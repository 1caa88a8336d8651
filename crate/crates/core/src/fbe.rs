//! Feature bank enhancement: per-dimension percentile boundaries around the
//! bank mean, and clamping of extreme training features onto them.
//!
//! Fitting computes the column means `mu`, the absolute deviations
//! `|z_ij - mu_j|`, and the `lambda`-th percentile `d*_j` of each deviation
//! column. Applying clamps every entry into `[mu_j - d*_j, mu_j + d*_j]`.
//!
//! Boundaries are stored as `f32` (as in the `FBDY` file). `mu` is rounded to
//! nearest and `d*` is rounded up, so that at `lambda = 100` every entry of
//! the fitting bank still lies inside its bounds and clamping is the identity.
//!
//! Boundaries file layout (little-endian):
//! `"FBDY" | version u32 = 1 | m u32 | lambda f64 | m f32 mu | m f32 d_star`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::bank::{self, mean_vector, FeatureBank, FeatureVector};
use crate::error::{Error, Result};

pub const BOUNDARIES_MAGIC: &[u8; 4] = b"FBDY";

/// Absolute deviations `|z_ij - mu_j|` of a bank from a center vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationBank {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl DeviationBank {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.m).copied().collect()
    }
}

/// Per-dimension center and radius of the typical-feature region.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationBoundaries {
    mu: Vec<f32>,
    d_star: Vec<f32>,
    lambda: f64,
}

impl DeviationBoundaries {
    pub fn new(mu: Vec<f32>, d_star: Vec<f32>, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if mu.is_empty() {
            return Err(Error::invalid(
                "boundaries must have at least one dimension",
            ));
        }
        if mu.len() != d_star.len() {
            return Err(Error::DimensionMismatch {
                what: "boundary radius length",
                expected: mu.len(),
                found: d_star.len(),
            });
        }
        if let Some(col) = mu.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        if let Some(col) = d_star.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "boundary radius d*[{col}] = {} must be finite and non-negative",
                d_star[col]
            )));
        }
        Ok(DeviationBoundaries { mu, d_star, lambda })
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn d_star(&self) -> &[f32] {
        &self.d_star
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Lower clamp bound of dimension `j`, `mu_j - d*_j` rounded to `f32`.
    pub fn lower(&self, j: usize) -> f32 {
        (self.mu[j] as f64 - self.d_star[j] as f64) as f32
    }

    /// Upper clamp bound of dimension `j`, `mu_j + d*_j` rounded to `f32`.
    pub fn upper(&self, j: usize) -> f32 {
        (self.mu[j] as f64 + self.d_star[j] as f64) as f32
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "percentile lambda must lie in [0, 100], got {lambda}"
        )));
    }
    Ok(())
}

pub fn deviation_bank(bank: &FeatureBank, mu: &FeatureVector) -> Result<DeviationBank> {
    bank.ensure_dim("center vector", mu.len())?;
    let data = bank
        .rows()
        .flat_map(|row| {
            row.iter()
                .zip(mu.iter())
                .map(|(&z, &c)| (z as f64 - c).abs())
        })
        .collect();
    Ok(DeviationBank {
        n: bank.n(),
        m: bank.m(),
        data,
    })
}

/// Linearly interpolated order statistic at fractional rank
/// `lambda / 100 * (len - 1)`. Reorders `values`.
pub fn percentile_in_place(values: &mut [f64], lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    let rank = lambda / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return Ok(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((lo_val + frac * (hi_val - lo_val)).min(hi_val))
}

pub fn percentile_per_dim(dev: &DeviationBank, lambda: f64) -> Result<FeatureVector> {
    check_lambda(lambda)?;
    let values = (0..dev.m)
        .into_par_iter()
        .map(|j| percentile_in_place(&mut dev.column(j), lambda))
        .collect::<Result<Vec<_>>>()?;
    FeatureVector::new(values)
}

/// Smallest `f32` that is not below `x` (for `x >= 0`).
fn round_up_f32(x: f64) -> f32 {
    let r = x as f32;
    if (r as f64) < x {
        f32::from_bits(r.to_bits() + 1)
    } else {
        r
    }
}

pub fn fit_boundaries(bank: &FeatureBank, lambda: f64) -> Result<DeviationBoundaries> {
    check_lambda(lambda)?;
    let mu: Vec<f32> = mean_vector(bank).iter().map(|&v| v as f32).collect();
    let m = bank.m();
    let data = bank.data();
    let d_star = (0..m)
        .into_par_iter()
        .map(|j| {
            let c = mu[j] as f64;
            let mut col: Vec<f64> = data
                .iter()
                .skip(j)
                .step_by(m)
                .map(|&z| (z as f64 - c).abs())
                .collect();
            percentile_in_place(&mut col, lambda).map(round_up_f32)
        })
        .collect::<Result<Vec<_>>>()?;
    DeviationBoundaries::new(mu, d_star, lambda)
}

/// A clamped bank plus per-dimension counts of entries that were moved.
#[derive(Debug, Clone)]
pub struct ClampOutcome {
    pub bank: FeatureBank,
    pub clamped_per_dim: Vec<usize>,
}

impl ClampOutcome {
    pub fn total_clamped(&self) -> usize {
        self.clamped_per_dim.iter().sum()
    }

    pub fn fraction_per_dim(&self) -> Vec<f64> {
        let n = self.bank.n() as f64;
        self.clamped_per_dim.iter().map(|&c| c as f64 / n).collect()
    }

    pub fn overall_fraction(&self) -> f64 {
        self.total_clamped() as f64 / self.bank.data().len() as f64
    }
}

pub fn clamp_bank_with_stats(bank: &FeatureBank, b: &DeviationBoundaries) -> Result<ClampOutcome> {
    bank.ensure_dim("boundaries", b.m())?;
    let m = bank.m();
    let lower: Vec<f32> = (0..m).map(|j| b.lower(j)).collect();
    let upper: Vec<f32> = (0..m).map(|j| b.upper(j)).collect();
    let mut data = bank.data().to_vec();
    let mut counts = vec![0usize; m];
    for row in data.chunks_exact_mut(m) {
        for (j, z) in row.iter_mut().enumerate() {
            if *z > upper[j] {
                *z = upper[j];
                counts[j] += 1;
            } else if *z < lower[j] {
                *z = lower[j];
                counts[j] += 1;
            }
        }
    }
    Ok(ClampOutcome {
        bank: bank.with_data(data),
        clamped_per_dim: counts,
    })
}

/// Clamps every entry of `bank` into its dimension's boundaries. Labels are
/// carried through.
pub fn clamp_bank(bank: &FeatureBank, b: &DeviationBoundaries) -> Result<FeatureBank> {
    clamp_bank_with_stats(bank, b).map(|o| o.bank)
}

/// Fits boundaries on `bank` and clamps the same bank onto them.
pub fn enhance(bank: &FeatureBank, lambda: f64) -> Result<(FeatureBank, DeviationBoundaries)> {
    let b = fit_boundaries(bank, lambda)?;
    let enhanced = clamp_bank(bank, &b)?;
    Ok((enhanced, b))
}

// ---------------------------------------------------------------------------
// I/O

pub fn read_boundaries(r: &mut impl Read) -> Result<DeviationBoundaries> {
    const WHAT: &str = "boundaries file";
    let mut header = [0u8; 20];
    r.read_exact(&mut header)
        .map_err(|e| Error::format(WHAT, format!("truncated header: {e}")))?;
    if &header[0..4] != BOUNDARIES_MAGIC {
        return Err(Error::format(WHAT, "bad magic, expected \"FBDY\""));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != bank::FORMAT_VERSION {
        return Err(Error::format(
            WHAT,
            format!("unsupported version {version}"),
        ));
    }
    let m = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let lambda = f64::from_le_bytes(header[12..20].try_into().unwrap());
    let mu = bank::read_f32s(r, m, WHAT)?;
    let d_star = bank::read_f32s(r, m, WHAT)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)
        .map_err(|e| Error::format(WHAT, e.to_string()))?
        != 0
    {
        return Err(Error::format(WHAT, "trailing bytes after payload"));
    }
    DeviationBoundaries::new(mu, d_star, lambda).map_err(|e| Error::format(WHAT, e.to_string()))
}

pub fn write_boundaries(b: &DeviationBoundaries, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(BOUNDARIES_MAGIC)?;
    w.write_all(&bank::FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(b.m() as u32).to_le_bytes())?;
    w.write_all(&b.lambda.to_le_bytes())?;
    bank::write_f32s(w, &b.mu)?;
    bank::write_f32s(w, &b.d_star)
}

pub fn load_boundaries(path: impl AsRef<Path>) -> Result<DeviationBoundaries> {
    let path = path.as_ref();
    read_boundaries(&mut bank::open(path)?)
}

pub fn save_boundaries(b: &DeviationBoundaries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = bank::create(path)?;
    write_boundaries(b, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
