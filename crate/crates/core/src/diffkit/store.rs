//! Named parameter arrays with paired gradient accumulators, a momentum
//! SGD step, and a JSON checkpoint format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("parameter {0:?} is already registered")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name:?} expects {expected} values, got {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("coordinate {index} is out of bounds for parameter {name:?} of length {len}")]
    CoordOutOfBounds {
        name: String,
        index: usize,
        len: usize,
    },
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("input has dimension {got}, spec expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache is stale: parameters changed since it was built")]
    StaleCache,
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error("closure is not deterministic: repeated evaluation disagreed")]
    NonDeterministic,
    #[error("loss evaluation failed: {0}")]
    EvalFailed(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// One named array: shape, values, and same-shape gradient and velocity
/// buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Collection of named parameters. The version counter bumps whenever any
/// parameter value changes, letting forward caches detect staleness.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
    version: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Registers a new parameter. The value length must equal the shape
    /// product; gradient and velocity start at zero.
    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<T>,
    ) -> Result<(), DiffError> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if expected == 0 || value.len() != expected {
            return Err(DiffError::ShapeMismatch {
                name: name.to_string(),
                expected,
                got: value.len(),
            });
        }
        let len = value.len();
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                value,
                grad: vec![T::zero(); len],
                velocity: vec![T::zero(); len],
            },
        );
        self.version += 1;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    fn get(&self, name: &str) -> Result<&Param<T>, DiffError> {
        self.params
            .get(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>, DiffError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize], DiffError> {
        Ok(&self.get(name)?.shape)
    }

    pub fn value(&self, name: &str) -> Result<&[T], DiffError> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&[T], DiffError> {
        Ok(&self.get(name)?.grad)
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: &[T]) -> Result<(), DiffError> {
        let param = self.get_mut(name)?;
        if value.len() != param.value.len() {
            return Err(DiffError::ShapeMismatch {
                name: name.to_string(),
                expected: param.value.len(),
                got: value.len(),
            });
        }
        param.value.copy_from_slice(value);
        self.version += 1;
        Ok(())
    }

    /// Sets one scalar coordinate; used by the gradient checker.
    pub fn set_coord(&mut self, name: &str, index: usize, value: T) -> Result<(), DiffError> {
        let param = self.get_mut(name)?;
        let len = param.value.len();
        let slot = param
            .value
            .get_mut(index)
            .ok_or(DiffError::CoordOutOfBounds {
                name: name.to_string(),
                index,
                len,
            })?;
        *slot = value;
        self.version += 1;
        Ok(())
    }

    pub fn coord(&self, name: &str, index: usize) -> Result<T, DiffError> {
        let param = self.get(name)?;
        param
            .value
            .get(index)
            .copied()
            .ok_or(DiffError::CoordOutOfBounds {
                name: name.to_string(),
                index,
                len: param.value.len(),
            })
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[T]) -> Result<(), DiffError> {
        let param = self.get_mut(name)?;
        if delta.len() != param.grad.len() {
            return Err(DiffError::ShapeMismatch {
                name: name.to_string(),
                expected: param.grad.len(),
                got: delta.len(),
            });
        }
        for (g, &d) in param.grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for param in self.params.values_mut() {
            for g in &mut param.grad {
                *g = T::zero();
            }
        }
    }

    /// Momentum SGD over every parameter: `v <- momentum*v + g`,
    /// `p <- p - lr*v`, then gradients are zeroed.
    pub fn sgd_step(&mut self, lr: T, momentum: T) -> Result<(), DiffError> {
        self.sgd_step_filtered(lr, momentum, |_| true)
    }

    /// Momentum SGD restricted to parameters whose name passes the
    /// predicate. Gradients of every parameter are zeroed afterward so a
    /// frozen parameter's gradient cannot leak into a later step.
    pub fn sgd_step_filtered(
        &mut self,
        lr: T,
        momentum: T,
        mut include: impl FnMut(&str) -> bool,
    ) -> Result<(), DiffError> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(DiffError::BadHyper(format!("learning rate {lr} not in (0, inf)")));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(DiffError::BadHyper(format!("momentum {momentum} not in [0, 1)")));
        }
        for (name, param) in self.params.iter_mut() {
            if include(name) {
                for ((v, g), p) in param
                    .velocity
                    .iter_mut()
                    .zip(&param.grad)
                    .zip(&mut param.value)
                {
                    *v = momentum * *v + *g;
                    *p -= lr * *v;
                }
            }
            for g in &mut param.grad {
                *g = T::zero();
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Serializes all parameter values (not gradients or velocities) as a
    /// JSON object mapping names to shape plus flat data. Numbers use the
    /// shortest decimal form that parses back to the identical bits.
    pub fn to_checkpoint_json(&self) -> String {
        let doc: BTreeMap<&str, CheckpointEntry<T>> = self
            .params
            .iter()
            .map(|(name, p)| {
                (
                    name.as_str(),
                    CheckpointEntry {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                )
            })
            .collect();
        serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
    }

    /// Rebuilds a store from checkpoint JSON. Gradients and velocities
    /// start at zero.
    pub fn from_checkpoint_json(json: &str) -> Result<Self, DiffError> {
        let doc: BTreeMap<String, CheckpointEntry<T>> =
            serde_json::from_str(json).map_err(|e| DiffError::BadCheckpoint(e.to_string()))?;
        let mut store = Self::new();
        for (name, entry) in doc {
            store.register(&name, entry.shape, entry.data)?;
        }
        Ok(store)
    }
}
