//! IoU-gated proposal partition and smoothed matching targets.
//!
//! Proposals are split into positives (IoU with the ground-truth box at or
//! above a threshold `delta`) and negatives. The matching target puts
//! `1 - epsilon` on the best proposal and spreads `epsilon` uniformly over
//! the remaining positives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Aabb3};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("delta must lie in (0, 1], got {0}")]
    BadDelta(f64),
    #[error("epsilon must lie in [0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("at least one proposal is required")]
    Empty,
    #[error("IoU value at index {index} is outside [0, 1]: {value}")]
    BadIou { index: usize, value: f64 },
}

/// Threshold used when a config does not override it.
pub fn default_delta<T: Real>() -> T {
    T::lit(0.25)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig<T> {
    /// Positive/negative IoU threshold (membership is non-strict: IoU >= delta).
    pub delta: T,
    /// Smoothing mass spread over the non-argmax positives.
    pub epsilon: T,
}

impl<T: Real> Default for FilterConfig<T> {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            epsilon: T::lit(0.1),
        }
    }
}

impl<T: Real> FilterConfig<T> {
    pub fn new(delta: T, epsilon: T) -> Result<Self, FilterError> {
        let cfg = Self { delta, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.delta > T::zero() && self.delta <= T::one()) {
            return Err(FilterError::BadDelta(self.delta.to_f64().unwrap_or(f64::NAN)));
        }
        if !(self.epsilon >= T::zero() && self.epsilon < T::one()) {
            return Err(FilterError::BadEpsilon(
                self.epsilon.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(())
    }
}

/// Partition of a proposal set against one ground-truth box, with the
/// smoothed target weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult<T> {
    /// IoU of each proposal with the ground-truth box.
    pub ious: Vec<T>,
    /// Indices with IoU >= delta, ascending.
    pub pos_indices: Vec<usize>,
    /// Complement of `pos_indices`, ascending.
    pub neg_indices: Vec<usize>,
    /// Index of the best proposal; ties go to the lowest index.
    pub argmax_index: usize,
    /// Number of positives excluding the argmax (the `K` in the weights).
    pub k_count: usize,
    /// Target weights: `1 - epsilon` on the argmax, `epsilon / K` on the
    /// other positives, 0 on negatives. The argmax gets full weight 1 when
    /// there is nothing to smooth over (`K = 0`, including an empty
    /// positive set).
    pub weights: Vec<T>,
}

impl<T: Real> FilterResult<T> {
    /// Builds the partition and weights from precomputed IoU values.
    pub fn from_ious(ious: Vec<T>, cfg: &FilterConfig<T>) -> Result<Self, FilterError> {
        cfg.validate()?;
        if ious.is_empty() {
            return Err(FilterError::Empty);
        }
        for (index, &value) in ious.iter().enumerate() {
            if !(value >= T::zero() && value <= T::one()) {
                return Err(FilterError::BadIou {
                    index,
                    value: value.to_f64().unwrap_or(f64::NAN),
                });
            }
        }

        let mut argmax_index = 0;
        for (index, &value) in ious.iter().enumerate() {
            if value > ious[argmax_index] {
                argmax_index = index;
            }
        }

        let mut pos_indices = Vec::new();
        let mut neg_indices = Vec::new();
        for (index, &value) in ious.iter().enumerate() {
            if value >= cfg.delta {
                pos_indices.push(index);
            } else {
                neg_indices.push(index);
            }
        }

        // A nonempty positive set always contains the argmax.
        let k_count = pos_indices.len().saturating_sub(1);
        let mut weights = vec![T::zero(); ious.len()];
        if k_count == 0 {
            weights[argmax_index] = T::one();
        } else {
            weights[argmax_index] = T::one() - cfg.epsilon;
            let share = cfg.epsilon / T::from_usize(k_count).expect("count fits");
            for &index in &pos_indices {
                if index != argmax_index {
                    weights[index] = share;
                }
            }
        }

        Ok(Self {
            ious,
            pos_indices,
            neg_indices,
            argmax_index,
            k_count,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ious.is_empty()
    }
}

/// Partitions `proposals` against `gt` by IoU and builds the target weights.
pub fn filter<T: Real>(
    proposals: &[Aabb3<T>],
    gt: &Aabb3<T>,
    cfg: &FilterConfig<T>,
) -> Result<FilterResult<T>, FilterError> {
    let ious = proposals.iter().map(|p| geom::iou(p, gt)).collect();
    FilterResult::from_ious(ious, cfg)
}
