//! AUROC and FPR-at-TPR over paired ID / OOD score lists.
//!
//! Scores follow the "higher means in-distribution" convention, so a sample
//! is accepted as ID when its score is at least the threshold.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bank::{FeatureBank, LinearHead};
use crate::error::{Error, Result};
use crate::scores::{ScoreSpec, Scorer};

/// True positive rate at which FPR95 is measured.
pub const TPR95: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
}

impl EvalSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::invalid(format!(
                "evaluation needs at least one ID and one OOD score, got {} and {}",
                id_scores.len(),
                ood_scores.len()
            )));
        }
        for (row, v) in id_scores.iter().chain(&ood_scores).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: 0 });
            }
        }
        Ok(EvalSet {
            id_scores,
            ood_scores,
        })
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id_scores
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood_scores
    }

    /// The same scores with the roles of ID and OOD exchanged.
    pub fn swapped(&self) -> EvalSet {
        EvalSet {
            id_scores: self.ood_scores.clone(),
            ood_scores: self.id_scores.clone(),
        }
    }
}

/// Probability that a random ID score exceeds a random OOD score, counting
/// ties as one half. Computed from midranks of the pooled sample.
pub fn auroc(e: &EvalSet) -> f64 {
    let p = e.id_scores.len();
    let q = e.ood_scores.len();
    let mut pooled: Vec<(f64, bool)> = e
        .id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(e.ood_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled midranks over ID samples keeps the arithmetic integral.
    let mut id_rank_sum2: u128 = 0;
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start + 1;
        while end < pooled.len() && pooled[end].0 == pooled[start].0 {
            end += 1;
        }
        // Ranks start+1 ..= end, doubled midrank = start + 1 + end.
        let doubled_midrank = (start + 1 + end) as u128;
        let ids = pooled[start..end].iter().filter(|x| x.1).count() as u128;
        id_rank_sum2 += ids * doubled_midrank;
        start = end;
    }
    let p128 = p as u128;
    let u2 = id_rank_sum2 - p128 * (p128 + 1);
    u2 as f64 / (2.0 * p as f64 * q as f64)
}

/// Smallest count `c` of ID samples with `c / p >= tpr`.
fn required_id_count(p: usize, tpr: f64) -> usize {
    let pf = p as f64;
    let mut c = ((tpr * pf).ceil() as usize).clamp(1, p);
    while c < p && (c as f64 / pf) < tpr {
        c += 1;
    }
    while c > 1 && ((c - 1) as f64 / pf) >= tpr {
        c -= 1;
    }
    c
}

/// Decision threshold and false positive rate at a target TPR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FprAtTpr {
    pub threshold: f64,
    pub fpr: f64,
}

/// Picks the largest attained ID score `t` with `#{id >= t} / p >= tpr` and
/// returns it with the fraction of OOD scores `>= t`.
pub fn fpr_at_tpr_detail(e: &EvalSet, tpr: f64) -> Result<FprAtTpr> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::invalid(format!(
            "target TPR must lie in (0, 1], got {tpr}"
        )));
    }
    let mut id = e.id_scores.clone();
    id.sort_unstable_by(|a, b| b.total_cmp(a));
    let c = required_id_count(id.len(), tpr);
    let threshold = id[c - 1];
    let accepted = e.ood_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(FprAtTpr {
        threshold,
        fpr: accepted as f64 / e.ood_scores.len() as f64,
    })
}

pub fn fpr_at_tpr(e: &EvalSet, tpr: f64) -> Result<f64> {
    fpr_at_tpr_detail(e, tpr).map(|r| r.fpr)
}

/// One scored evaluation, serialized as the report entry for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub score: ScoreSpec,
    pub auroc: f64,
    pub fpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub wall_ms: u64,
}

impl Report {
    pub fn from_scores(spec: &ScoreSpec, e: &EvalSet, wall_ms: u64) -> Result<Self> {
        Ok(Report {
            score: spec.clone(),
            auroc: auroc(e),
            fpr95: fpr_at_tpr(e, TPR95)?,
            n_id: e.id_scores.len(),
            n_ood: e.ood_scores.len(),
            wall_ms,
        })
    }
}

/// Scores both query sets against `bank` and reports AUROC and FPR95.
pub fn evaluate(
    spec: &ScoreSpec,
    bank: &FeatureBank,
    head: Option<&LinearHead>,
    id_queries: &FeatureBank,
    ood_queries: &FeatureBank,
) -> Result<Report> {
    let start = Instant::now();
    let scorer = Scorer::fit(spec, bank, head)?;
    let e = EvalSet::new(
        scorer.score(id_queries)?.scores,
        scorer.score(ood_queries)?.scores,
    )?;
    Report::from_scores(spec, &e, start.elapsed().as_millis() as u64)
}
