//! Run configuration: one JSON document that pins everything a training
//! run depends on, plus a content hash so checkpoints can refuse to be
//! evaluated under a different configuration.

use groundkit_core::contrastive::SimilarityConfig;
use groundkit_core::diffkit::{MlpSpec, Nonlinearity};
use groundkit_core::filter::FilterConfig;
use groundkit_core::objectives::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("bad config: {0}")]
    Invalid(String),
    #[error("config file: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which auxiliary objectives train alongside the grounding term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub oid: bool,
    pub occ: bool,
    pub osc: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            oid: true,
            occ: true,
            osc: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
        }
    }
}

/// Answer-head fine-tuning stage that runs after pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    pub enabled: bool,
    pub epochs: usize,
    /// Freeze the encoders and fusion head while tuning the answer head.
    pub freeze_encoders: bool,
    pub learning_rate: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            enabled: true,
            epochs: 10,
            freeze_encoders: true,
            learning_rate: 0.05,
        }
    }
}

/// Full run configuration. Every field has a default, so a config file
/// only needs to state what it overrides. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training dataset path. The CLI `--data` flag takes precedence.
    pub data_path: Option<String>,
    /// Held-out dataset for evaluation; defaults to the training data.
    pub eval_data_path: Option<String>,
    pub proposal_encoder: MlpSpec,
    pub text_encoder: MlpSpec,
    pub fusion_head: MlpSpec,
    pub filter: FilterConfig<f64>,
    pub similarity: SimilarityConfig<f64>,
    pub loss_weights: LossWeights<f64>,
    pub modules: ModuleToggles,
    pub optimizer: OptimConfig,
    pub qa: QaConfig,
    pub seed: u64,
    pub eval_thresholds: Vec<f64>,
}

/// Embedding width shared by both encoders under the default config.
pub const DEFAULT_EMBED_DIM: usize = 16;

impl Default for RunConfig {
    fn default() -> Self {
        // Sized for the reference dataset: 8 classes, 6 colors.
        RunConfig::default_for(8, 6)
    }
}

impl RunConfig {
    /// Default architecture for a dataset with `classes` classes and
    /// `colors` colors, which fix both encoder input widths.
    pub fn default_for(classes: usize, colors: usize) -> Self {
        let d = DEFAULT_EMBED_DIM;
        let feature_dim = 6 + classes + colors;
        let description_dim = 2 * classes + colors + crate::synthworld::RELATION_KINDS;
        RunConfig {
            data_path: None,
            eval_data_path: None,
            proposal_encoder: MlpSpec::new(vec![feature_dim, 24, d], Nonlinearity::Tanh, true),
            text_encoder: MlpSpec::new(vec![description_dim, 24, d], Nonlinearity::Tanh, true),
            fusion_head: MlpSpec::new(vec![3 * d, 1], Nonlinearity::Tanh, false),
            filter: FilterConfig::default(),
            similarity: SimilarityConfig::default(),
            loss_weights: LossWeights::default(),
            modules: ModuleToggles::default(),
            optimizer: OptimConfig::default(),
            qa: QaConfig::default(),
            seed: 7,
            eval_thresholds: vec![0.25, 0.5],
        }
    }

    pub fn embed_dim(&self) -> usize {
        *self
            .proposal_encoder
            .layer_dims
            .last()
            .expect("validated spec has dims")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.proposal_encoder
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("proposal_encoder: {e}")))?;
        self.text_encoder
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("text_encoder: {e}")))?;
        self.fusion_head
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("fusion_head: {e}")))?;
        let d_p = *self.proposal_encoder.layer_dims.last().unwrap();
        let d_t = *self.text_encoder.layer_dims.last().unwrap();
        if d_p != d_t {
            return bad(format!(
                "encoder output widths disagree: proposal {d_p}, text {d_t}"
            ));
        }
        if self.fusion_head.input_dim() != 3 * d_p {
            return bad(format!(
                "fusion head input must be 3 * embed dim = {}, got {}",
                3 * d_p,
                self.fusion_head.input_dim()
            ));
        }
        if self.fusion_head.output_dim() != 1 {
            return bad("fusion head must produce a single matching logit".into());
        }
        if self.fusion_head.output_normalize {
            return bad("fusion head output must not be normalized".into());
        }
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.similarity
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss_weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} not in (0, inf)", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("momentum {} not in [0, 1)", o.momentum));
        }
        if o.epochs == 0 || o.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.qa.enabled {
            if self.qa.epochs == 0 {
                return bad("qa.epochs must be positive when the stage is enabled".into());
            }
            if !(self.qa.learning_rate > 0.0 && self.qa.learning_rate.is_finite()) {
                return bad(format!("qa.learning_rate {} not in (0, inf)", self.qa.learning_rate));
            }
        }
        if self.eval_thresholds.is_empty() {
            return bad("eval_thresholds must be nonempty".into());
        }
        for &k in &self.eval_thresholds {
            if !(k > 0.0 && k <= 1.0) {
                return bad(format!("eval threshold {k} not in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Hash of everything that affects the numbers a run produces. The
    /// dataset paths are excluded: the same configuration may point at
    /// files living in different places, and the dataset carries its own
    /// identity (seed and generator parameters) in its header.
    pub fn integrity_hash(&self) -> String {
        let mut scrubbed = self.clone();
        scrubbed.data_path = None;
        scrubbed.eval_data_path = None;
        let doc = serde_json::to_string(&scrubbed).expect("config serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(doc.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults_match_the_documented_reference_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.filter.delta, 0.25);
        assert_eq!(cfg.filter.epsilon, 0.1);
        assert_eq!(cfg.optimizer.learning_rate, 0.05);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.optimizer.epochs, 30);
        assert_eq!(cfg.optimizer.batch_size, 8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.eval_thresholds, vec![0.25, 0.5]);
    }

    #[test]
    fn partial_config_files_extend_the_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 42, "modules": {"occ": false}}"#).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(!cfg.modules.occ);
        assert!(cfg.modules.oid);
        assert_eq!(cfg.optimizer.epochs, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"sed": 42}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn bad_thresholds_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.eval_thresholds = vec![0.5, 1.5];
        assert!(cfg.validate().is_err());
        cfg.eval_thresholds = vec![0.0];
        assert!(cfg.validate().is_err());
        cfg.eval_thresholds = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_fusion_width_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.fusion_head.layer_dims[0] = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_data_paths_but_sees_everything_else() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        b.data_path = Some("elsewhere.jsonl".into());
        assert_eq!(a.integrity_hash(), b.integrity_hash());
        a.seed = 8;
        assert_ne!(a.integrity_hash(), b.integrity_hash());
        let mut c = RunConfig::default();
        c.filter.delta = 0.5;
        assert_ne!(c.integrity_hash(), b.integrity_hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }
}
