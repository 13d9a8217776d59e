//! Evaluation metrics: grounding accuracy at an IoU threshold, the gated
//! quality aggregate over IoU-qualified predictions, and top-K answer
//! exact match. All thresholds are non-strict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Aabb3;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric input must be nonempty")]
    Empty,
    #[error("ranked answers and ground-truth sets have different lengths: {ranked} vs {gt}")]
    LengthMismatch { ranked: usize, gt: usize },
    #[error("k must be a positive rank")]
    BadRank,
    #[error("threshold must be finite, got {0}")]
    BadThreshold(f64),
}

/// Scene category a sample belongs to: whether the target's class appears
/// once or several times in its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Unique,
    Multiple,
}

/// One grounding prediction to score.
#[derive(Debug, Clone)]
pub struct GroundingOutcome<T> {
    pub predicted_box: Aabb3<T>,
    pub gt_box: Aabb3<T>,
    pub split_tag: SplitTag,
}

/// A metric value broken down by scene split. Splits with no samples are
/// absent rather than zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitValues<T> {
    pub overall: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unique: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiple: Option<T>,
}

fn fraction<T: Real>(hits: usize, total: usize) -> Option<T> {
    if total == 0 {
        None
    } else {
        Some(T::from_usize(hits).expect("count fits") / T::from_usize(total).expect("count fits"))
    }
}

/// Fraction of outcomes whose predicted box overlaps its ground truth
/// with IoU >= k, overall and per split.
pub fn acc_at_k<T: Real>(
    outcomes: &[GroundingOutcome<T>],
    k: T,
) -> Result<SplitValues<T>, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    if !k.is_finite() {
        return Err(MetricError::BadThreshold(k.to_f64().unwrap_or(f64::NAN)));
    }
    let mut hits = 0usize;
    let mut split_hits = BTreeMap::from([(SplitTag::Unique, 0usize), (SplitTag::Multiple, 0)]);
    let mut split_totals = split_hits.clone();
    for outcome in outcomes {
        let iou = crate::geom::iou(&outcome.predicted_box, &outcome.gt_box);
        let hit = iou >= k;
        if hit {
            hits += 1;
            *split_hits.get_mut(&outcome.split_tag).expect("seeded") += 1;
        }
        *split_totals.get_mut(&outcome.split_tag).expect("seeded") += 1;
    }
    Ok(SplitValues {
        overall: fraction(hits, outcomes.len()).expect("nonempty"),
        unique: fraction(split_hits[&SplitTag::Unique], split_totals[&SplitTag::Unique]),
        multiple: fraction(
            split_hits[&SplitTag::Multiple],
            split_totals[&SplitTag::Multiple],
        ),
    })
}

/// One externally supplied quality score and the IoU that gates it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedScore<T> {
    pub metric_value: T,
    pub iou: T,
}

/// Mean over all samples of the quality score gated by IoU >= k. Samples
/// failing the gate contribute zero but stay in the denominator.
pub fn m_at_k_iou<T: Real>(scores: &[GatedScore<T>], k: T) -> Result<T, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if !k.is_finite() {
        return Err(MetricError::BadThreshold(k.to_f64().unwrap_or(f64::NAN)));
    }
    let total: T = scores
        .iter()
        .map(|s| if s.iou >= k { s.metric_value } else { T::zero() })
        .sum();
    Ok(total / T::from_usize(scores.len()).expect("count fits"))
}

/// Fraction of samples where any of the first `k` ranked answers appears
/// in the ground-truth set. Rankings shorter than `k` are scored on what
/// they have.
pub fn em_at_k(
    ranked_answers: &[Vec<usize>],
    gt_answers: &[Vec<usize>],
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::BadRank);
    }
    if ranked_answers.is_empty() {
        return Err(MetricError::Empty);
    }
    if ranked_answers.len() != gt_answers.len() {
        return Err(MetricError::LengthMismatch {
            ranked: ranked_answers.len(),
            gt: gt_answers.len(),
        });
    }
    let hits = ranked_answers
        .iter()
        .zip(gt_answers)
        .filter(|(ranked, gt)| ranked.iter().take(k).any(|a| gt.contains(a)))
        .count();
    Ok(hits as f64 / ranked_answers.len() as f64)
}

/// Metric report keyed by metric name, serialized as a JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricReport<T> {
    pub metrics: BTreeMap<String, SplitValues<T>>,
}

impl<T: Real> MetricReport<T> {
    pub fn insert(&mut self, name: impl Into<String>, values: SplitValues<T>) {
        self.metrics.insert(name.into(), values);
    }

    /// Adds a metric that has no split breakdown.
    pub fn insert_overall(&mut self, name: impl Into<String>, overall: T) {
        self.metrics.insert(
            name.into(),
            SplitValues {
                overall,
                unique: None,
                multiple: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&SplitValues<T>> {
        self.metrics.get(name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}
