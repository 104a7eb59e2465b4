//! Classification and OOD-detection metrics, plus synthetic noise OOD sets.
//!
//! ID samples are the positive class throughout: a higher score means "more
//! in-distribution".

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_TPR: f64 = 0.95;

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(invalid(format!("{name} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid(format!("{name} scores contain NaN")));
    }
    Ok(())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(invalid("accuracy needs equally many non-zero predictions and labels"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Largest threshold with at least a `tpr` fraction of ID scores at or above it.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(invalid(format!("TPR must be in (0, 1], got {tpr}")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // the tolerance keeps 0.95 * 20 from rounding up to 20 samples
    let k = ((tpr * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[k - 1])
}

/// Error rate with equal priors on ID and OOD.
pub fn detection_error(tpr: f64, fpr: f64) -> f64 {
    0.5 * (1.0 - tpr) + 0.5 * fpr
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Fraction of ID scores at or above the threshold.
    pub tpr: f64,
    /// Fraction of OOD scores at or above the threshold.
    pub fpr: f64,
    pub detection_error: f64,
}

/// FPR and detection error at the threshold calibrated to `target_tpr`
/// on the ID scores. The detection error uses the TPR actually achieved.
pub fn fpr_detection_error(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<OperatingPoint> {
    check_scores("OOD", ood_scores)?;
    let threshold = threshold_at_tpr(id_scores, target_tpr)?;
    let frac = |s: &[f64]| s.iter().filter(|&&v| v >= threshold).count() as f64 / s.len() as f64;
    let tpr = frac(id_scores);
    let fpr = frac(ood_scores);
    Ok(OperatingPoint {
        threshold,
        tpr,
        fpr,
        detection_error: detection_error(tpr, fpr),
    })
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut ood = ood_scores.to_vec();
    ood.sort_by(f64::total_cmp);
    // twice the Mann-Whitney U statistic, kept in integers
    let mut doubled: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * id_scores.len() as u128 * ood_scores.len() as u128;
    Ok(doubled as f64 / pairs as f64)
}

/// Average precision with ID as the positive class; tied scores enter the
/// curve together.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = id_scores.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Which side AUPR treats as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuprPositive {
    #[default]
    Id,
    /// OOD samples positive, ranked by descending negated score.
    Ood,
}

pub fn aupr_with(id_scores: &[f64], ood_scores: &[f64], positive: AuprPositive) -> Result<f64> {
    match positive {
        AuprPositive::Id => aupr(id_scores, ood_scores),
        AuprPositive::Ood => {
            let neg = |s: &[f64]| s.iter().map(|v| -v).collect::<Vec<f64>>();
            aupr(&neg(ood_scores), &neg(id_scores))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fpr_at_95tpr: f64,
    pub detection_error_at_95tpr: f64,
    pub auroc: f64,
    pub aupr: f64,
}

impl MetricsReport {
    pub fn compute(
        predicted: &[usize],
        labels: &[usize],
        id_scores: &[f64],
        ood_scores: &[f64],
    ) -> Result<Self> {
        let op = fpr_detection_error(id_scores, ood_scores, DEFAULT_TPR)?;
        Ok(Self {
            accuracy: accuracy(predicted, labels)?,
            fpr_at_95tpr: op.fpr,
            detection_error_at_95tpr: op.detection_error,
            auroc: auroc(id_scores, ood_scores)?,
            aupr: aupr(id_scores, ood_scores)?,
        })
    }

    /// Every field scaled to percent.
    pub fn as_percent(&self) -> Self {
        Self {
            accuracy: 100.0 * self.accuracy,
            fpr_at_95tpr: 100.0 * self.fpr_at_95tpr,
            detection_error_at_95tpr: 100.0 * self.detection_error_at_95tpr,
            auroc: 100.0 * self.auroc,
            aupr: 100.0 * self.aupr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Per-pixel `N(0.5, 0.25²)` clipped to `[0, 1]`.
    Gaussian,
    /// Per-pixel `U[0, 1]`.
    Uniform,
}

/// `count` noise images of `pixels` values each, deterministic in `seed`.
pub fn gen_noise_ood(kind: NoiseKind, pixels: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 || pixels == 0 {
        return Err(invalid("noise set needs at least one image and one pixel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = Normal::new(0.5f64, 0.25).expect("valid parameters");
    let uniform = Uniform::new_inclusive(0.0, 1.0);
    Ok((0..count)
        .map(|_| {
            (0..pixels)
                .map(|_| match kind {
                    NoiseKind::Gaussian => gaussian.sample(&mut rng).clamp(0.0, 1.0),
                    NoiseKind::Uniform => uniform.sample(&mut rng),
                })
                .collect()
        })
        .collect())
}
