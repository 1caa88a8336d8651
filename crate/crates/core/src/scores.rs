//! Post-hoc OOD score functions. Every score is oriented so that a higher
//! value means "more in-distribution".
//!
//! Distance-based scores (`knn`, `mahalanobis`, `nnguide`) depend on the
//! feature bank and are therefore affected by feature bank enhancement.
//! Head-based scores (`energy`, `msp`, `maxlogit`) only use the linear head.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{l2_normalize, l2_normalize_rows, FeatureBank, LinearHead};
use crate::error::{Error, Result};
use crate::fbe::percentile_in_place;
use crate::kernel;

/// Relative shrinkage added to the pooled covariance diagonal,
/// scaled by `trace / m`.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

/// Queries scored together against one pass over the bank.
const QUERY_BLOCK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Knn,
    Mahalanobis,
    Nnguide,
    Energy,
    Msp,
    Maxlogit,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Knn,
        ScoreKind::Mahalanobis,
        ScoreKind::Nnguide,
        ScoreKind::Energy,
        ScoreKind::Msp,
        ScoreKind::Maxlogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Knn => "knn",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::Nnguide => "nnguide",
            ScoreKind::Energy => "energy",
            ScoreKind::Msp => "msp",
            ScoreKind::Maxlogit => "maxlogit",
        }
    }

    pub fn needs_k(self) -> bool {
        matches!(self, ScoreKind::Knn | ScoreKind::Nnguide)
    }

    pub fn needs_head(self) -> bool {
        matches!(
            self,
            ScoreKind::Nnguide | ScoreKind::Energy | ScoreKind::Msp | ScoreKind::Maxlogit
        )
    }

    /// Whether the score reads the feature bank (and so changes under FBE).
    pub fn uses_bank(self) -> bool {
        matches!(
            self,
            ScoreKind::Knn | ScoreKind::Mahalanobis | ScoreKind::Nnguide
        )
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown score kind {s:?}")))
    }
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub react_percentile: Option<f64>,
}

impl ScoreSpec {
    pub fn new(kind: ScoreKind) -> Self {
        ScoreSpec {
            kind,
            k: None,
            temperature: 1.0,
            react_percentile: None,
        }
    }

    pub fn knn(k: usize) -> Self {
        ScoreSpec {
            k: Some(k),
            ..ScoreSpec::new(ScoreKind::Knn)
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_react(mut self, p: f64) -> Self {
        self.react_percentile = Some(p);
        self
    }

    /// Checks the spec against a bank of `n` rows.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kind.needs_k() {
            check_k(self.k, n)?;
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(p) = self.react_percentile {
            check_react_percentile(p)?;
        }
        Ok(())
    }
}

fn check_k(k: Option<usize>, n: usize) -> Result<usize> {
    match k {
        Some(k) if (1..=n).contains(&k) => Ok(k),
        Some(k) => Err(Error::invalid(format!("k must lie in [1, {n}], got {k}"))),
        None => Err(Error::invalid("k is required for knn and nnguide scores")),
    }
}

fn check_react_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!(
            "ReAct percentile must lie in (0, 100], got {p}"
        )));
    }
    Ok(())
}

/// Scores for a batch of queries, with the spec that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub spec: ScoreSpec,
}

impl ScoreBatch {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `index,score` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i},{s}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Head-based scores

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `T * logsumexp(logits / T)`, the negated free energy.
pub fn energy_from_logits(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    temperature * logsumexp(&scaled)
}

pub fn msp_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - logsumexp(logits)).exp()
}

pub fn maxlogit_from_logits(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn head_scores(
    head: &LinearHead,
    queries: &FeatureBank,
    f: impl Fn(&[f64]) -> f64 + Sync,
) -> Result<Vec<f64>> {
    queries.ensure_dim("queries vs head", head.m())?;
    Ok(queries
        .data()
        .par_chunks_exact(queries.m())
        .map(|q| f(&head.logits(q)))
        .collect())
}

pub fn energy_score(
    head: &LinearHead,
    queries: &FeatureBank,
    temperature: f64,
) -> Result<ScoreBatch> {
    let spec = ScoreSpec {
        temperature,
        ..ScoreSpec::new(ScoreKind::Energy)
    };
    spec.validate(queries.n())?;
    let scores = head_scores(head, queries, |l| energy_from_logits(l, temperature))?;
    Ok(ScoreBatch { scores, spec })
}

pub fn msp_score(head: &LinearHead, queries: &FeatureBank) -> Result<ScoreBatch> {
    let scores = head_scores(head, queries, msp_from_logits)?;
    Ok(ScoreBatch {
        scores,
        spec: ScoreSpec::new(ScoreKind::Msp),
    })
}

pub fn maxlogit_score(head: &LinearHead, queries: &FeatureBank) -> Result<ScoreBatch> {
    let scores = head_scores(head, queries, maxlogit_from_logits)?;
    Ok(ScoreBatch {
        scores,
        spec: ScoreSpec::new(ScoreKind::Maxlogit),
    })
}

// ---------------------------------------------------------------------------
// ReAct

/// The `p`-th percentile over every entry of `bank`, rounded down to `f32`.
pub fn react_threshold(bank: &FeatureBank, p: f64) -> Result<f32> {
    check_react_percentile(p)?;
    let mut all: Vec<f64> = bank.data().iter().map(|&v| v as f64).collect();
    let tau = percentile_in_place(&mut all, p)?;
    let r = tau as f32;
    Ok(if (r as f64) > tau {
        f32::from_bits(if r > 0.0 {
            r.to_bits() - 1
        } else {
            r.to_bits() + 1
        })
    } else {
        r
    })
}

/// Replaces every entry above `tau` with `tau`.
pub fn clip_above(bank: &FeatureBank, tau: f32) -> FeatureBank {
    bank.with_data(bank.data().iter().map(|&v| v.min(tau)).collect())
}

/// Clips query activations at the `p`-th percentile of all bank entries.
pub fn react_clip(queries: &FeatureBank, bank: &FeatureBank, p: f64) -> Result<FeatureBank> {
    let tau = react_threshold(bank, p)?;
    Ok(clip_above(queries, tau))
}

// ---------------------------------------------------------------------------
// Nearest-neighbor scores

fn normalized_queries(queries: &FeatureBank) -> Vec<f32> {
    let mut data = queries.data().to_vec();
    for row in data.chunks_exact_mut(queries.m()) {
        l2_normalize(row);
    }
    data
}

/// For each query, evaluates `pair(query, bank_row)` against every bank row
/// and reduces the resulting column with `reduce`. Queries are processed in
/// blocks so each bank row is read once per block.
fn blocked_scan(
    bank: &[f32],
    queries: &[f32],
    m: usize,
    pair: impl Fn(&[f32], &[f32]) -> f32 + Sync,
    reduce: impl Fn(&mut [f32]) -> f64 + Sync,
) -> Vec<f64> {
    let n = bank.len() / m;
    queries
        .par_chunks(QUERY_BLOCK * m)
        .flat_map_iter(|block| {
            let nq = block.len() / m;
            let mut cols = vec![0.0f32; nq * n];
            for (i, row) in bank.chunks_exact(m).enumerate() {
                for (qi, q) in block.chunks_exact(m).enumerate() {
                    cols[qi * n + i] = pair(q, row);
                }
            }
            cols.chunks_exact_mut(n).map(&reduce).collect::<Vec<_>>()
        })
        .collect()
}

fn kth_smallest(values: &mut [f32], k: usize) -> f32 {
    *values.select_nth_unstable_by(k - 1, f32::total_cmp).1
}

/// Mean of the `k` largest values, summed in descending order.
fn mean_top_k(values: &mut [f32], k: usize) -> f64 {
    if k < values.len() {
        values.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut values[..k];
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    top.iter().map(|&v| v as f64).sum::<f64>() / k as f64
}

/// Negative Euclidean distance from each L2-normalized query to its `k`-th
/// nearest L2-normalized bank row (exact search).
pub fn knn_score(bank: &FeatureBank, queries: &FeatureBank, k: usize) -> Result<ScoreBatch> {
    KnnModel::fit(bank, k)?.score(queries)
}

struct KnnModel {
    bank: FeatureBank,
    k: usize,
}

impl KnnModel {
    fn fit(bank: &FeatureBank, k: usize) -> Result<Self> {
        let k = check_k(Some(k), bank.n())?;
        Ok(KnnModel {
            bank: l2_normalize_rows(bank),
            k,
        })
    }

    fn score(&self, queries: &FeatureBank) -> Result<ScoreBatch> {
        queries.ensure_dim("queries vs bank", self.bank.m())?;
        let q = normalized_queries(queries);
        let k = self.k;
        let scores = blocked_scan(
            self.bank.data(),
            &q,
            self.bank.m(),
            kernel::squared_distance,
            |col| -(kth_smallest(col, k) as f64).sqrt(),
        );
        Ok(ScoreBatch {
            scores,
            spec: ScoreSpec::knn(k),
        })
    }
}

/// Nearest-neighbor guidance with explicit per-row confidences: each bank
/// row is L2-normalized and scaled by its confidence; the score is the mean
/// of the `k` largest inner products with the normalized query.
pub fn nnguide_score_with_confidence(
    bank: &FeatureBank,
    confidences: &[f64],
    queries: &FeatureBank,
    k: usize,
) -> Result<ScoreBatch> {
    NnGuideModel::from_confidences(bank, confidences, k)?.score(queries)
}

/// Confidence of one bank row: softplus of its energy score at `T = 1`.
pub fn guidance_confidence(head: &LinearHead, row: &[f32]) -> f64 {
    softplus(energy_from_logits(&head.logits(row), 1.0))
}

pub fn nnguide_score(
    bank: &FeatureBank,
    head: &LinearHead,
    queries: &FeatureBank,
    k: usize,
) -> Result<ScoreBatch> {
    NnGuideModel::fit(bank, head, k)?.score(queries)
}

struct NnGuideModel {
    scaled: FeatureBank,
    k: usize,
}

impl NnGuideModel {
    fn fit(bank: &FeatureBank, head: &LinearHead, k: usize) -> Result<Self> {
        bank.ensure_dim("bank vs head", head.m())?;
        let confidences: Vec<f64> = bank
            .data()
            .par_chunks_exact(bank.m())
            .map(|row| guidance_confidence(head, row))
            .collect();
        NnGuideModel::from_confidences(bank, &confidences, k)
    }

    fn from_confidences(bank: &FeatureBank, confidences: &[f64], k: usize) -> Result<Self> {
        let k = check_k(Some(k), bank.n())?;
        if confidences.len() != bank.n() {
            return Err(Error::DimensionMismatch {
                what: "confidence count",
                expected: bank.n(),
                found: confidences.len(),
            });
        }
        let mut data = l2_normalize_rows(bank).data().to_vec();
        for (row, &c) in data.chunks_exact_mut(bank.m()).zip(confidences) {
            if !c.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite guidance confidence {c}"
                )));
            }
            for v in row {
                *v = (*v as f64 * c) as f32;
            }
        }
        let scaled = FeatureBank::new(bank.n(), bank.m(), data, None)?;
        Ok(NnGuideModel { scaled, k })
    }

    fn score(&self, queries: &FeatureBank) -> Result<ScoreBatch> {
        queries.ensure_dim("queries vs bank", self.scaled.m())?;
        let q = normalized_queries(queries);
        let k = self.k;
        let scores = blocked_scan(
            self.scaled.data(),
            &q,
            self.scaled.m(),
            kernel::dot,
            |col| mean_top_k(col, k),
        );
        Ok(ScoreBatch {
            scores,
            spec: ScoreSpec::new(ScoreKind::Nnguide).with_k(k),
        })
    }
}

// ---------------------------------------------------------------------------
// Mahalanobis

/// Class-conditional Gaussian model with a shared, shrunk covariance.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    /// Inverse Cholesky factor `L^-1` of the shrunk covariance.
    whitening: DMatrix<f64>,
    /// Class means mapped through `L^-1`.
    whitened_means: Vec<DVector<f64>>,
}

impl MahalanobisModel {
    pub fn fit(bank: &FeatureBank) -> Result<Self> {
        let labels = bank
            .labels()
            .ok_or(Error::MissingLabels("mahalanobis scoring"))?;
        let classes = bank.num_classes().unwrap_or(0);
        let m = bank.m();
        let mut counts = vec![0usize; classes];
        let mut sums = vec![vec![0.0f64; m]; classes];
        for (row, &y) in bank.rows().zip(labels) {
            counts[y as usize] += 1;
            for (s, &v) in sums[y as usize].iter_mut().zip(row) {
                *s += v as f64;
            }
        }
        let mut means = Vec::new();
        let mut class_of = vec![usize::MAX; classes];
        for (c, (&count, sum)) in counts.iter().zip(&sums).enumerate() {
            match count {
                0 => continue,
                1 => {
                    return Err(Error::invalid(format!(
                    "class {c} has a single sample; mahalanobis scoring needs at least 2 per class"
                )))
                }
                _ => {
                    class_of[c] = means.len();
                    means.push(DVector::from_iterator(
                        m,
                        sum.iter().map(|s| s / count as f64),
                    ));
                }
            }
        }

        let mut cov = DMatrix::<f64>::zeros(m, m);
        let mut centered = DVector::<f64>::zeros(m);
        for (row, &y) in bank.rows().zip(labels) {
            let mean = &means[class_of[y as usize]];
            for j in 0..m {
                centered[j] = row[j] as f64 - mean[j];
            }
            cov.syger(1.0, &centered, &centered, 1.0);
        }
        cov /= bank.n() as f64;
        cov.fill_upper_triangle_with_lower_triangle();

        let ridge = COVARIANCE_SHRINKAGE * cov.trace() / m as f64;
        for j in 0..m {
            cov[(j, j)] += ridge;
        }
        let chol = cov.cholesky().ok_or_else(|| {
            Error::Singular(format!(
                "pooled covariance ({m}x{m}, shrinkage {ridge:e}) is not positive definite"
            ))
        })?;
        let l = chol.l();
        let whitening = l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or_else(|| Error::Singular("Cholesky factor is not invertible".into()))?;
        if whitening.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("whitening matrix is not finite".into()));
        }
        let whitened_means = means.iter().map(|mu| &whitening * mu).collect();
        Ok(MahalanobisModel {
            whitening,
            whitened_means,
        })
    }

    pub fn m(&self) -> usize {
        self.whitening.ncols()
    }

    /// Minimum Mahalanobis distance from `z` to any class mean.
    pub fn min_distance(&self, z: &[f32]) -> f64 {
        let x = DVector::from_iterator(z.len(), z.iter().map(|&v| v as f64));
        let w = &self.whitening * x;
        self.whitened_means
            .iter()
            .map(|mu| (&w - mu).norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn score(&self, queries: &FeatureBank) -> Result<ScoreBatch> {
        queries.ensure_dim("queries vs bank", self.m())?;
        let scores = queries
            .data()
            .par_chunks_exact(queries.m())
            .map(|q| -self.min_distance(q))
            .collect();
        Ok(ScoreBatch {
            scores,
            spec: ScoreSpec::new(ScoreKind::Mahalanobis),
        })
    }
}

pub fn mahalanobis_score(bank: &FeatureBank, queries: &FeatureBank) -> Result<ScoreBatch> {
    MahalanobisModel::fit(bank)?.score(queries)
}

// ---------------------------------------------------------------------------
// Prepared scorer

enum Prepared {
    Knn(KnnModel),
    NnGuide(NnGuideModel),
    Mahalanobis(MahalanobisModel),
    Head(LinearHead),
}

/// A score function fitted to one bank (and head), reusable across query
/// sets.
pub struct Scorer {
    spec: ScoreSpec,
    react_threshold: Option<f32>,
    prepared: Prepared,
}

impl Scorer {
    /// Fits `spec` against `bank`. When the spec carries a ReAct percentile,
    /// the clipping threshold is taken from `bank`.
    pub fn fit(spec: &ScoreSpec, bank: &FeatureBank, head: Option<&LinearHead>) -> Result<Self> {
        let tau = spec
            .react_percentile
            .map(|p| react_threshold(bank, p))
            .transpose()?;
        Scorer::fit_with_threshold(spec, bank, head, tau)
    }

    /// Like [`Scorer::fit`], with an explicit ReAct threshold (or none).
    pub fn fit_with_threshold(
        spec: &ScoreSpec,
        bank: &FeatureBank,
        head: Option<&LinearHead>,
        react_threshold: Option<f32>,
    ) -> Result<Self> {
        spec.validate(bank.n())?;
        let head = if spec.kind.needs_head() {
            let head = head.ok_or_else(|| {
                Error::invalid(format!("{} scoring requires a linear head", spec.kind))
            })?;
            bank.ensure_dim("bank vs head", head.m())?;
            Some(head)
        } else {
            None
        };
        let prepared = match spec.kind {
            ScoreKind::Knn => Prepared::Knn(KnnModel::fit(bank, spec.k.unwrap_or(0))?),
            ScoreKind::Nnguide => Prepared::NnGuide(NnGuideModel::fit(
                bank,
                head.expect("checked above"),
                spec.k.unwrap_or(0),
            )?),
            ScoreKind::Mahalanobis => Prepared::Mahalanobis(MahalanobisModel::fit(bank)?),
            ScoreKind::Energy | ScoreKind::Msp | ScoreKind::Maxlogit => {
                Prepared::Head(head.expect("checked above").clone())
            }
        };
        Ok(Scorer {
            spec: spec.clone(),
            react_threshold,
            prepared,
        })
    }

    pub fn spec(&self) -> &ScoreSpec {
        &self.spec
    }

    pub fn react_threshold(&self) -> Option<f32> {
        self.react_threshold
    }

    pub fn score(&self, queries: &FeatureBank) -> Result<ScoreBatch> {
        let clipped;
        let queries = match self.react_threshold {
            Some(tau) => {
                clipped = clip_above(queries, tau);
                &clipped
            }
            None => queries,
        };
        let scores = match &self.prepared {
            Prepared::Knn(model) => model.score(queries)?.scores,
            Prepared::NnGuide(model) => model.score(queries)?.scores,
            Prepared::Mahalanobis(model) => model.score(queries)?.scores,
            Prepared::Head(head) => match self.spec.kind {
                ScoreKind::Energy => {
                    let t = self.spec.temperature;
                    head_scores(head, queries, |l| energy_from_logits(l, t))?
                }
                ScoreKind::Msp => head_scores(head, queries, msp_from_logits)?,
                _ => head_scores(head, queries, maxlogit_from_logits)?,
            },
        };
        Ok(ScoreBatch {
            scores,
            spec: self.spec.clone(),
        })
    }
}

/// One-shot scoring of `queries` against `bank` under `spec`.
pub fn score(
    spec: &ScoreSpec,
    bank: &FeatureBank,
    head: Option<&LinearHead>,
    queries: &FeatureBank,
) -> Result<ScoreBatch> {
    Scorer::fit(spec, bank, head)?.score(queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f32]]) -> FeatureBank {
        FeatureBank::from_rows(r).unwrap()
    }

    fn head_with_bias(bias: &[f32]) -> (LinearHead, FeatureBank) {
        // Zero weights: the logits are exactly the bias.
        let c = bias.len();
        let head = LinearHead::new(c, 1, vec![0.0; c], bias.to_vec()).unwrap();
        (head, rows(&[&[1.0]]))
    }

    #[test]
    fn knn_examples() {
        let bank = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = rows(&[&[1.0, 0.0]]);
        assert_eq!(knn_score(&bank, &q, 1).unwrap().scores, vec![0.0]);
        let s = knn_score(&bank, &q, 2).unwrap().scores[0];
        assert!((s + 2f64.sqrt()).abs() < 1e-7, "{s}");
        let bank = rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        assert_eq!(knn_score(&bank, &q, 1).unwrap().scores, vec![0.0]);
    }

    #[test]
    fn knn_rejects_bad_k_and_dims() {
        let bank = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(knn_score(&bank, &rows(&[&[1.0, 0.0]]), 0)
            .unwrap_err()
            .is_usage());
        assert!(knn_score(&bank, &rows(&[&[1.0, 0.0]]), 3)
            .unwrap_err()
            .is_usage());
        assert!(matches!(
            knn_score(&bank, &rows(&[&[1.0]]), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mahalanobis_examples() {
        // Two classes whose pooled covariance is the identity.
        let r = std::f32::consts::SQRT_2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, cx) in [(0, 0.0f32), (1, 4.0)] {
            for (dx, dy) in [(r, 0.0), (-r, 0.0), (0.0, r), (0.0, -r)] {
                data.extend_from_slice(&[cx + dx, dy]);
                labels.push(c);
            }
        }
        let bank = FeatureBank::new(8, 2, data, Some(labels)).unwrap();
        let q = rows(&[&[0.0, 0.0], &[2.0, 0.0], &[4.0, 0.0]]);
        let s = mahalanobis_score(&bank, &q).unwrap().scores;
        assert!(s[0].abs() < 1e-9 && s[2].abs() < 1e-9, "{s:?}");
        assert!((s[1] + 2.0).abs() < 1e-5, "{s:?}");
    }

    #[test]
    fn mahalanobis_errors() {
        let bank = rows(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(
            mahalanobis_score(&bank, &bank),
            Err(Error::MissingLabels(_))
        ));
        let single = bank.clone().with_labels(vec![0, 1]).unwrap();
        assert!(mahalanobis_score(&single, &single).is_err());
        let flat = rows(&[&[1.0, 1.0], &[1.0, 1.0]])
            .with_labels(vec![0, 0])
            .unwrap();
        assert!(matches!(
            mahalanobis_score(&flat, &flat),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn nnguide_examples() {
        let one = rows(&[&[1.0, 0.0]]);
        let q = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let s = nnguide_score_with_confidence(&one, &[1.0], &q, 1)
            .unwrap()
            .scores;
        assert_eq!(s, vec![1.0, 0.0]);
        let two = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = nnguide_score_with_confidence(&two, &[2.0, 1.0], &rows(&[&[1.0, 0.0]]), 1)
            .unwrap()
            .scores;
        assert_eq!(s, vec![2.0]);
        let s = nnguide_score_with_confidence(&two, &[2.0, 1.0], &rows(&[&[1.0, 0.0]]), 2)
            .unwrap()
            .scores;
        assert_eq!(s, vec![1.0]);
    }

    #[test]
    fn nnguide_uses_softplus_energy() {
        let head = LinearHead::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let bank = rows(&[&[1.0, 0.0]]);
        let c = guidance_confidence(&head, bank.row(0));
        let expected = (1.0 + (1f64.exp() + 1.0)).ln();
        assert!((c - expected).abs() < 1e-12);
        let s = nnguide_score(&bank, &head, &rows(&[&[2.0, 0.0]]), 1)
            .unwrap()
            .scores;
        assert!((s[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn energy_examples() {
        let (head, q) = head_with_bias(&[0.0, 0.0]);
        let s = energy_score(&head, &q, 1.0).unwrap().scores[0];
        assert!((s - 2f64.ln()).abs() < 1e-12);
        let (head, q) = head_with_bias(&[1.5]);
        assert!((energy_score(&head, &q, 0.3).unwrap().scores[0] - 1.5).abs() < 1e-12);
        let (head, q) = head_with_bias(&[1.0, 2.0, 3.0]);
        let s = energy_score(&head, &q, 1.0).unwrap().scores[0];
        assert!((s - 3.4076059644443806).abs() < 1e-12, "{s}");
        assert!(energy_score(&head, &q, 0.0).is_err());
    }

    #[test]
    fn msp_examples() {
        let (head, q) = head_with_bias(&[0.0, 0.0]);
        assert_eq!(msp_score(&head, &q).unwrap().scores, vec![0.5]);
        let (head, q) = head_with_bias(&[1000.0, 0.0]);
        let s = msp_score(&head, &q).unwrap().scores[0];
        assert!((s - 1.0).abs() < 1e-12);
        let (head, q) = head_with_bias(&[1.0, 2.0]);
        let s = msp_score(&head, &q).unwrap().scores[0];
        assert!((s - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn maxlogit_examples() {
        for (bias, expected) in [
            (&[0.0f32, 0.0][..], 0.0),
            (&[-1.0, 3.0], 3.0),
            (&[1.5, 1.4, -2.0], 1.5),
        ] {
            let (head, q) = head_with_bias(bias);
            assert_eq!(maxlogit_score(&head, &q).unwrap().scores, vec![expected]);
        }
    }

    #[test]
    fn react_examples() {
        let bank = FeatureBank::new(10, 1, (0..10).map(|v| v as f32).collect(), None).unwrap();
        let q = rows(&[&[100.0]]);
        let out = react_clip(&q, &bank, 90.0).unwrap();
        assert!((out.data()[0] - 8.1).abs() < 1e-6);
        assert!((out.data()[0] as f64) <= 8.1);

        let inside = rows(&[&[3.0], &[9.0]]);
        assert_eq!(react_clip(&inside, &bank, 100.0).unwrap(), inside);
        assert_eq!(
            react_clip(&rows(&[&[1.0]]), &bank, 90.0).unwrap(),
            rows(&[&[1.0]])
        );
        assert!(react_clip(&q, &bank, 0.0).is_err());
        assert!(react_clip(&q, &bank, 100.1).is_err());
    }

    #[test]
    fn react_applies_inside_scorer() {
        let bank = FeatureBank::new(10, 1, (0..10).map(|v| v as f32).collect(), None).unwrap();
        let head = LinearHead::new(2, 1, vec![1.0, -1.0], vec![0.0, 0.0]).unwrap();
        let spec = ScoreSpec::new(ScoreKind::Maxlogit).with_react(90.0);
        let s = score(&spec, &bank, Some(&head), &rows(&[&[100.0]])).unwrap();
        assert!((s.scores[0] - 8.1).abs() < 1e-6);
    }

    #[test]
    fn spec_validation_and_serde() {
        assert!(ScoreSpec::new(ScoreKind::Knn).validate(5).is_err());
        assert!(ScoreSpec::knn(6).validate(5).is_err());
        assert!(ScoreSpec::knn(5).validate(5).is_ok());
        assert!(ScoreSpec::new(ScoreKind::Energy).validate(1).is_ok());
        let spec = ScoreSpec::knn(7).with_react(90.0);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"knn","k":7,"temperature":1.0,"react_percentile":90.0}"#
        );
        assert_eq!(serde_json::from_str::<ScoreSpec>(&json).unwrap(), spec);
        let minimal: ScoreSpec = toml::from_str("kind = \"energy\"").unwrap();
        assert_eq!(minimal, ScoreSpec::new(ScoreKind::Energy));
        assert_eq!("MSP".parse::<ScoreKind>().unwrap(), ScoreKind::Msp);
    }

    #[test]
    fn head_scores_need_head() {
        let bank = rows(&[&[1.0]]);
        let err = Scorer::fit(&ScoreSpec::new(ScoreKind::Energy), &bank, None)
            .err()
            .unwrap();
        assert!(err.is_usage());
    }

    #[test]
    fn batch_csv() {
        let b = ScoreBatch {
            scores: vec![0.5, -1.0],
            spec: ScoreSpec::new(ScoreKind::Msp),
        };
        assert_eq!(b.to_csv(), "index,score\n0,0.5\n1,-1\n");
    }
}
