//! Object-level contrastive losses over proposal and text embeddings.
//!
//! Two losses share the IoU partition from the filter module:
//! a cross-modal loss pulling positive proposal embeddings toward the text
//! embedding (multi-positive, both match directions averaged), and a
//! self-contrastive loss pulling positive proposals toward each other over
//! ordered proposal pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::FilterResult;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("temperature must be strictly positive, got {0}")]
    BadTemperature(f64),
    #[error("embedding dimensions disagree: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embeddings must be nonempty")]
    Empty,
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("partition covers {partition} proposals but the set has {proposals}")]
    PartitionMismatch { partition: usize, proposals: usize },
    #[error("every sample in the batch was skipped; the loss is undefined")]
    DegenerateBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Dot,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig<T> {
    pub kind: SimilarityKind,
    /// Scores are divided by the temperature before exponentiation.
    pub temperature: T,
}

impl<T: Real> Default for SimilarityConfig<T> {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Dot,
            temperature: T::one(),
        }
    }
}

impl<T: Real> SimilarityConfig<T> {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.temperature > T::zero() && self.temperature.is_finite()) {
            return Err(ContrastiveError::BadTemperature(
                self.temperature.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(())
    }
}

fn check_dims<T>(u: &[T], v: &[T]) -> Result<(), ContrastiveError> {
    if u.is_empty() {
        return Err(ContrastiveError::Empty);
    }
    if u.len() != v.len() {
        return Err(ContrastiveError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(())
}

fn dot<T: Real>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Real>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// Temperature-scaled similarity score between two vectors.
pub fn similarity<T: Real>(
    u: &[T],
    v: &[T],
    cfg: &SimilarityConfig<T>,
) -> Result<T, ContrastiveError> {
    cfg.validate()?;
    check_dims(u, v)?;
    match cfg.kind {
        SimilarityKind::Dot => Ok(dot(u, v) / cfg.temperature),
        SimilarityKind::Cosine => {
            let nu = norm(u);
            let nv = norm(v);
            if nu == T::zero() || nv == T::zero() {
                return Err(ContrastiveError::ZeroNorm);
            }
            Ok(dot(u, v) / (nu * nv * cfg.temperature))
        }
    }
}

/// Similarity score plus its gradients with respect to both arguments.
pub fn similarity_grad<T: Real>(
    u: &[T],
    v: &[T],
    cfg: &SimilarityConfig<T>,
) -> Result<(T, Vec<T>, Vec<T>), ContrastiveError> {
    cfg.validate()?;
    check_dims(u, v)?;
    let tau = cfg.temperature;
    match cfg.kind {
        SimilarityKind::Dot => {
            let score = dot(u, v) / tau;
            let du = v.iter().map(|&x| x / tau).collect();
            let dv = u.iter().map(|&x| x / tau).collect();
            Ok((score, du, dv))
        }
        SimilarityKind::Cosine => {
            let nu = norm(u);
            let nv = norm(v);
            if nu == T::zero() || nv == T::zero() {
                return Err(ContrastiveError::ZeroNorm);
            }
            let c = dot(u, v);
            let score = c / (nu * nv * tau);
            let du = u
                .iter()
                .zip(v)
                .map(|(&ui, &vi)| (vi - ui * c / (nu * nu)) / (nu * nv * tau))
                .collect();
            let dv = u
                .iter()
                .zip(v)
                .map(|(&ui, &vi)| (ui - vi * c / (nv * nv)) / (nu * nv * tau))
                .collect();
            Ok((score, du, dv))
        }
    }
}

/// Embeddings of one sample's proposals and description, with the IoU
/// partition that supplies the positive and negative proposal sets.
#[derive(Debug, Clone)]
pub struct EmbeddingSet<T> {
    pub proposal_embeddings: Vec<Vec<T>>,
    pub text_embedding: Vec<T>,
    pub partition: FilterResult<T>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if self.proposal_embeddings.is_empty() || self.text_embedding.is_empty() {
            return Err(ContrastiveError::Empty);
        }
        let dim = self.text_embedding.len();
        for e in &self.proposal_embeddings {
            if e.len() != dim {
                return Err(ContrastiveError::DimensionMismatch {
                    expected: dim,
                    got: e.len(),
                });
            }
        }
        if self.partition.len() != self.proposal_embeddings.len() {
            return Err(ContrastiveError::PartitionMismatch {
                partition: self.partition.len(),
                proposals: self.proposal_embeddings.len(),
            });
        }
        Ok(())
    }
}

fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::neg_infinity(), |acc, x| acc.max(x));
    let sum: T = values.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Per-sample gradients of the cross-modal loss; zero-filled for skipped
/// samples.
#[derive(Debug, Clone)]
pub struct OccSampleGrad<T> {
    pub skipped: bool,
    pub d_proposals: Vec<Vec<T>>,
    pub d_text: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct OccOutput<T> {
    /// Mean loss over the non-skipped samples.
    pub loss: T,
    /// Gradients of that mean, aligned with the input batch.
    pub sample_grads: Vec<OccSampleGrad<T>>,
    pub used_samples: usize,
}

/// Cross-modal contrastive loss. Per sample, both match directions
/// (proposals against the text anchor, text against the proposal pool) are
/// scored with a multi-positive softmax ratio and averaged with weight 1/2.
/// Samples with an empty positive set are skipped; a batch where every
/// sample is skipped is an error rather than a silent zero.
pub fn occ_loss<T: Real>(
    batch: &[EmbeddingSet<T>],
    cfg: &SimilarityConfig<T>,
) -> Result<OccOutput<T>, ContrastiveError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ContrastiveError::Empty);
    }
    for set in batch {
        set.validate()?;
    }

    let mut total = T::zero();
    let mut used_samples = 0usize;
    let mut raw: Vec<Option<OccSampleGrad<T>>> = Vec::with_capacity(batch.len());

    for set in batch {
        let n = set.proposal_embeddings.len();
        let dim = set.text_embedding.len();
        if set.partition.pos_indices.is_empty() {
            raw.push(None);
            continue;
        }

        let mut d_proposals = vec![vec![T::zero(); dim]; n];
        let mut d_text = vec![T::zero(); dim];
        let mut sample_loss = T::zero();

        // Direction 1 scores s(H_p, T); direction 2 scores s(T, H_p).
        for direction in 0..2 {
            let mut scores = Vec::with_capacity(n);
            let mut d_props: Vec<Vec<T>> = Vec::with_capacity(n);
            let mut d_texts: Vec<Vec<T>> = Vec::with_capacity(n);
            for e in &set.proposal_embeddings {
                let (score, d_prop, d_text_part) = if direction == 0 {
                    let (s, du, dv) = similarity_grad(e, &set.text_embedding, cfg)?;
                    (s, du, dv)
                } else {
                    let (s, du, dv) = similarity_grad(&set.text_embedding, e, cfg)?;
                    (s, dv, du)
                };
                scores.push(score);
                d_props.push(d_prop);
                d_texts.push(d_text_part);
            }

            let lse_all = log_sum_exp(&scores);
            let pos_scores: Vec<T> = set
                .partition
                .pos_indices
                .iter()
                .map(|&p| scores[p])
                .collect();
            let lse_pos = log_sum_exp(&pos_scores);
            sample_loss += (lse_all - lse_pos) * T::half();

            // d loss / d score_p = softmax_all(p) - softmax_pos(p), the
            // latter only on positives; halved for the direction average.
            let mut coeff: Vec<T> = scores.iter().map(|&s| (s - lse_all).exp()).collect();
            for &p in &set.partition.pos_indices {
                coeff[p] -= (scores[p] - lse_pos).exp();
            }
            for p in 0..n {
                let c = coeff[p] * T::half();
                for i in 0..dim {
                    d_proposals[p][i] += c * d_props[p][i];
                    d_text[i] += c * d_texts[p][i];
                }
            }
        }

        total += sample_loss;
        used_samples += 1;
        raw.push(Some(OccSampleGrad {
            skipped: false,
            d_proposals,
            d_text,
        }));
    }

    if used_samples == 0 {
        return Err(ContrastiveError::DegenerateBatch);
    }
    let scale = T::one() / T::from_usize(used_samples).expect("count fits");

    let sample_grads = raw
        .into_iter()
        .zip(batch)
        .map(|(entry, set)| match entry {
            Some(mut g) => {
                for row in &mut g.d_proposals {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                for v in g.d_text.iter_mut() {
                    *v *= scale;
                }
                g
            }
            None => OccSampleGrad {
                skipped: true,
                d_proposals: vec![
                    vec![T::zero(); set.text_embedding.len()];
                    set.proposal_embeddings.len()
                ],
                d_text: vec![T::zero(); set.text_embedding.len()],
            },
        })
        .collect();

    Ok(OccOutput {
        loss: total * scale,
        sample_grads,
        used_samples,
    })
}

/// Per-sample gradients of the self-contrastive loss.
#[derive(Debug, Clone)]
pub struct OscSampleGrad<T> {
    pub skipped: bool,
    pub d_proposals: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct OscOutput<T> {
    pub loss: T,
    pub sample_grads: Vec<OscSampleGrad<T>>,
    pub used_samples: usize,
}

/// Self-contrastive loss over ordered proposal pairs (self-pairs excluded):
/// the softmax mass of positive-positive pairs against all pairs. Samples
/// with fewer than two positives are skipped.
pub fn osc_loss<T: Real>(
    batch: &[EmbeddingSet<T>],
    cfg: &SimilarityConfig<T>,
) -> Result<OscOutput<T>, ContrastiveError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ContrastiveError::Empty);
    }
    for set in batch {
        set.validate()?;
    }

    let mut total = T::zero();
    let mut used_samples = 0usize;
    let mut raw: Vec<Option<OscSampleGrad<T>>> = Vec::with_capacity(batch.len());

    for set in batch {
        let n = set.proposal_embeddings.len();
        let dim = set.text_embedding.len();
        if set.partition.pos_indices.len() < 2 || n < 2 {
            raw.push(None);
            continue;
        }

        let mut is_pos = vec![false; n];
        for &p in &set.partition.pos_indices {
            is_pos[p] = true;
        }

        let mut all_scores = Vec::with_capacity(n * (n - 1));
        let mut pos_scores = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let s = similarity(
                    &set.proposal_embeddings[i],
                    &set.proposal_embeddings[j],
                    cfg,
                )?;
                all_scores.push(s);
                if is_pos[i] && is_pos[j] {
                    pos_scores.push(s);
                }
            }
        }
        let lse_all = log_sum_exp(&all_scores);
        let lse_pos = log_sum_exp(&pos_scores);
        total += lse_all - lse_pos;
        used_samples += 1;

        let mut d_proposals = vec![vec![T::zero(); dim]; n];
        let mut pair = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let s = all_scores[pair];
                pair += 1;
                let mut coeff = (s - lse_all).exp();
                if is_pos[i] && is_pos[j] {
                    coeff -= (s - lse_pos).exp();
                }
                if coeff == T::zero() {
                    continue;
                }
                let (_, du, dv) = similarity_grad(
                    &set.proposal_embeddings[i],
                    &set.proposal_embeddings[j],
                    cfg,
                )?;
                for k in 0..dim {
                    d_proposals[i][k] += coeff * du[k];
                    d_proposals[j][k] += coeff * dv[k];
                }
            }
        }
        raw.push(Some(OscSampleGrad {
            skipped: false,
            d_proposals,
        }));
    }

    if used_samples == 0 {
        return Err(ContrastiveError::DegenerateBatch);
    }
    let scale = T::one() / T::from_usize(used_samples).expect("count fits");

    let sample_grads = raw
        .into_iter()
        .zip(batch)
        .map(|(entry, set)| match entry {
            Some(mut g) => {
                for row in &mut g.d_proposals {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                g
            }
            None => OscSampleGrad {
                skipped: true,
                d_proposals: vec![
                    vec![T::zero(); set.text_embedding.len()];
                    set.proposal_embeddings.len()
                ],
            },
        })
        .collect();

    Ok(OscOutput {
        loss: total * scale,
        sample_grads,
        used_samples,
    })
}
