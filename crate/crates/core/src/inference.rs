//! Ensemble prediction and the OOD score.
//!
//! Classification is the argmax of the concatenated ID logits. The
//! uncertainty score of class `y`, owned by submodel `i`, is the softmax
//! probability of `y` within submodel `i` times the probability that `i`
//! does not consider the input OOD; the sample's score is the maximum over
//! classes.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Mode, Tensor};
use crate::task_split::{concatenate_id_logits, SubtaskSpec};
use crate::tree_model::TreeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub concatenated_id_logits: Vec<f64>,
    pub per_submodel_ood_prob: Vec<f64>,
    pub predicted_class: usize,
    pub uncertainty_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodDecision {
    Id,
    Ood,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(submodel_logits: &[Vec<f64>], spec: &SubtaskSpec) -> Result<EnsembleOutput> {
    let concatenated = concatenate_id_logits(spec, submodel_logits)?;
    if concatenated.iter().any(|z| z.is_nan()) {
        return Err(invalid("logits contain NaN"));
    }
    let mut ood = Vec::with_capacity(submodel_logits.len());
    let mut score = 0.0f64;
    for (i, logits) in submodel_logits.iter().enumerate() {
        let p = softmax(logits);
        let p_ood = spec.ood_slot(i).map_or(0.0, |s| p[s]);
        let keep = 1.0 - p_ood;
        for &pc in &p[..spec.group_size(i)] {
            score = score.max(pc * keep);
        }
        ood.push(p_ood);
    }
    Ok(EnsembleOutput {
        predicted_class: argmax(&concatenated),
        concatenated_id_logits: concatenated,
        per_submodel_ood_prob: ood,
        uncertainty_score: score.clamp(0.0, 1.0),
    })
}

/// OOD exactly when the score is below the threshold.
pub fn ood_decision(score: f64, threshold: f64) -> OodDecision {
    if score < threshold {
        OodDecision::Ood
    } else {
        OodDecision::Id
    }
}

/// Eval-mode prediction for every sample of a batch.
pub fn predict_batch(model: &TreeModel, x: &Tensor) -> Result<Vec<EnsembleOutput>> {
    let pass = model.forward(x, Mode::Eval)?;
    (0..pass.batch())
        .map(|b| predict(&pass.sample_logits(b), model.spec()))
        .collect()
}

/// Runs [`predict_batch`] over `images` in chunks of `batch_size`.
pub fn predict_all(model: &TreeModel, images: &[Vec<f64>], batch_size: usize) -> Result<Vec<EnsembleOutput>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let x = Tensor::from_samples(model.input_dims(), chunk)?;
        out.extend(predict_batch(model, &x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_submodel_reduces_to_msp() {
        let spec = SubtaskSpec::single(3, 10).unwrap();
        let logits = vec![1.0, 3.0, 2.0];
        let out = predict(&[logits.clone()], &spec).unwrap();
        let p = softmax(&logits);
        assert_eq!(out.predicted_class, 1);
        assert_eq!(out.uncertainty_score, p[1]);
        assert_eq!(out.per_submodel_ood_prob, vec![0.0]);
    }

    #[test]
    fn two_binary_submodels_example() {
        let spec = SubtaskSpec::new(2, vec![vec![0], vec![1]], 10).unwrap();
        let out = predict(&[vec![2.0, 0.0], vec![0.0, 2.0]], &spec).unwrap();
        let s = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((out.uncertainty_score - s * s).abs() < 1e-15);
        assert!((out.uncertainty_score - 0.7758).abs() < 1e-4);
        assert_eq!(out.predicted_class, 0);
    }

    #[test]
    fn uniform_logits_give_closed_form() {
        let spec = SubtaskSpec::new(5, vec![vec![0, 1, 2], vec![3, 4]], 10).unwrap();
        let out = predict(&[vec![0.0; 4], vec![0.0; 3]], &spec).unwrap();
        let best = f64::max(0.25 * 0.75, (1.0 / 3.0) * (2.0 / 3.0));
        assert!((out.uncertainty_score - best).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let spec = SubtaskSpec::new(2, vec![vec![0], vec![1]], 10).unwrap();
        assert!(predict(&[vec![0.0; 2], vec![0.0; 3]], &spec).is_err());
    }

    #[test]
    fn decision_boundary_is_id() {
        assert_eq!(ood_decision(0.9, 0.5), OodDecision::Id);
        assert_eq!(ood_decision(0.5, 0.5), OodDecision::Id);
        assert_eq!(ood_decision(0.4, 0.5), OodDecision::Ood);
    }
}
