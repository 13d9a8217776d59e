//! Benchmark harness for the grounding toolkit: a synthetic scene
//! generator, a small referring-expression model wired together from the
//! core numerical pieces, a seeded training loop, and ablation and
//! threshold-sweep drivers. Everything is deterministic per seed.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod sweep;
pub mod synthworld;
pub mod train;

use groundkit_core::contrastive::ContrastiveError;
use groundkit_core::diffkit::DiffError;
use groundkit_core::filter::FilterError;
use groundkit_core::metrics::MetricError;
use groundkit_core::objectives::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Synth(#[from] synthworld::SynthError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("diff engine: {0}")]
    Diff(#[from] DiffError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("contrastive: {0}")]
    Contrastive(#[from] ContrastiveError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("{0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
