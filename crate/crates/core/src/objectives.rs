//! Composite training objectives: the weighted detection loss over
//! filtered proposals, a generic cross-entropy head, and weighted-sum
//! composition of all enabled terms into one report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::FilterResult;
use crate::geom::{diou_grad, diou_loss, Aabb3, BoxGrad};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("filter result covers {weights} proposals but {proposals} were given")]
    LengthMismatch { weights: usize, proposals: usize },
    #[error("scores must be nonempty")]
    EmptyScores,
    #[error("target length {target} does not match {scores} scores")]
    TargetLengthMismatch { scores: usize, target: usize },
    #[error("target must be nonnegative and sum to 1 within 1e-6, got sum {0}")]
    TargetNotNormalized(f64),
    #[error("loss weights must be nonnegative with at least one positive")]
    BadWeights,
}

/// Detection loss plus per-proposal box gradients.
#[derive(Debug, Clone)]
pub struct OidOutput<T> {
    pub loss: T,
    /// One gradient per proposal; zero where the target weight is zero.
    pub grads: Vec<BoxGrad<T>>,
}

/// Weighted sum of per-proposal distance-IoU losses, using the target
/// weights from the filter. Gradients flow only into proposals carrying
/// nonzero weight.
pub fn oid_loss<T: Real>(
    proposals: &[Aabb3<T>],
    gt: &Aabb3<T>,
    fr: &FilterResult<T>,
) -> Result<OidOutput<T>, ObjectiveError> {
    if fr.weights.len() != proposals.len() {
        return Err(ObjectiveError::LengthMismatch {
            weights: fr.weights.len(),
            proposals: proposals.len(),
        });
    }
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(proposals.len());
    for (b, &w) in proposals.iter().zip(&fr.weights) {
        if w == T::zero() {
            grads.push(BoxGrad::zero());
            continue;
        }
        loss += w * diou_loss(b, gt).loss;
        grads.push(diou_grad(b, gt).scaled(w));
    }
    Ok(OidOutput { loss, grads })
}

/// Cross-entropy output: loss plus the gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropyOutput<T> {
    pub loss: T,
    pub d_scores: Vec<T>,
    /// Softmax probabilities, kept for callers that rank by them.
    pub probs: Vec<T>,
}

/// Cross-entropy of a softmax over `scores` against a normalized target
/// distribution, scaled by 1/len. The division is by the vector length,
/// not the batch size, so longer score vectors see proportionally smaller
/// per-coordinate gradients.
pub fn cross_entropy<T: Real>(
    scores: &[T],
    target: &[T],
) -> Result<CrossEntropyOutput<T>, ObjectiveError> {
    if scores.is_empty() {
        return Err(ObjectiveError::EmptyScores);
    }
    if target.len() != scores.len() {
        return Err(ObjectiveError::TargetLengthMismatch {
            scores: scores.len(),
            target: target.len(),
        });
    }
    let mut target_sum = T::zero();
    for &t in target {
        if !(t >= T::zero()) || !t.is_finite() {
            return Err(ObjectiveError::TargetNotNormalized(
                t.to_f64().unwrap_or(f64::NAN),
            ));
        }
        target_sum += t;
    }
    if (target_sum - T::one()).abs() > T::lit(1e-6) {
        return Err(ObjectiveError::TargetNotNormalized(
            target_sum.to_f64().unwrap_or(f64::NAN),
        ));
    }

    let n = T::from_usize(scores.len()).expect("length fits");
    let max = scores
        .iter()
        .copied()
        .fold(T::neg_infinity(), |acc, x| acc.max(x));
    let exp_sum: T = scores.iter().map(|&s| (s - max).exp()).sum();
    let log_z = max + exp_sum.ln();

    // loss = -(1/n) sum t_i (s_i - log_z)
    let mut loss = T::zero();
    for (&s, &t) in scores.iter().zip(target) {
        if t > T::zero() {
            loss -= t * (s - log_z);
        }
    }
    loss /= n;

    let probs: Vec<T> = scores.iter().map(|&s| (s - log_z).exp()).collect();
    // d loss / d s_j = (p_j * sum(t) - t_j) / n; the exact target sum is
    // kept so the gradient is correct even at the normalization tolerance.
    let d_scores = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p * target_sum - t) / n)
        .collect();

    Ok(CrossEntropyOutput {
        loss,
        d_scores,
        probs,
    })
}

/// Per-term coefficients for the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights<T> {
    pub w_vg: T,
    pub w_oid: T,
    pub w_occ: T,
    pub w_osc: T,
    pub w_qa: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            w_vg: T::one(),
            w_oid: T::one(),
            w_occ: T::one(),
            w_osc: T::one(),
            w_qa: T::one(),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let all = [self.w_vg, self.w_oid, self.w_occ, self.w_osc, self.w_qa];
        if all.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(ObjectiveError::BadWeights);
        }
        if all.iter().all(|&w| w == T::zero()) {
            return Err(ObjectiveError::BadWeights);
        }
        Ok(())
    }

    pub fn weight_for(&self, term: &str) -> Option<T> {
        match term {
            "vg" => Some(self.w_vg),
            "oid" => Some(self.w_oid),
            "occ" => Some(self.w_occ),
            "osc" => Some(self.w_osc),
            "qa" => Some(self.w_qa),
            _ => None,
        }
    }
}

/// One enabled term: its name and unweighted value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm<T> {
    pub name: String,
    pub value: T,
}

impl<T> LossTerm<T> {
    pub fn new(name: impl Into<String>, value: T) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Weighted total plus the raw per-term values for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub total: T,
    pub per_term: BTreeMap<String, T>,
}

/// Weighted sum of the supplied terms. Terms absent from `weights` keep
/// weight 1; disabled terms are simply not passed in.
pub fn total_loss<T: Real>(
    terms: &[LossTerm<T>],
    weights: &LossWeights<T>,
) -> Result<LossReport<T>, ObjectiveError> {
    weights.validate()?;
    let mut total = T::zero();
    let mut per_term = BTreeMap::new();
    for term in terms {
        let w = weights.weight_for(&term.name).unwrap_or_else(T::one);
        total += w * term.value;
        per_term.insert(term.name.clone(), term.value);
    }
    Ok(LossReport { total, per_term })
}
