//! Training loop, evaluation, and checkpoint handling.

use crate::config::RunConfig;
use crate::model::{
    batch_step, predict_oracle, predict_sample, prepare_samples, qa_batch_step, EvalPrediction,
    ModelSpecs, PreparedSample, QA_PREFIX,
};
use crate::synthworld::{DatasetHeader, SceneSample};
use crate::HarnessError;
use groundkit_core::diffkit::ParamStore;
use groundkit_core::geom::iou;
use groundkit_core::metrics::{
    acc_at_k, em_at_k, m_at_k_iou, GatedScore, GroundingOutcome, MetricReport, SplitTag,
    SplitValues,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Mean loss values for one epoch. `terms` holds the unweighted per-term
/// means over the batches where the term was active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Everything a run records. Two runs with the same seed and config match
/// exactly except for `wall_clock_secs`; compare through [`TrainLog::comparable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochLog>,
    pub qa_epochs: Vec<EpochLog>,
    pub final_metrics: MetricReport<f64>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Copy with the wall clock zeroed, for determinism comparisons.
    pub fn comparable(&self) -> TrainLog {
        TrainLog {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Data(format!("train log: {e}")))
    }
}

pub struct TrainOutcome {
    pub store: ParamStore<f64>,
    pub specs: ModelSpecs,
    pub log: TrainLog,
}

struct TermAccumulator {
    total_sum: f64,
    batches: usize,
    term_sums: BTreeMap<String, (f64, usize)>,
}

impl TermAccumulator {
    fn new() -> Self {
        TermAccumulator {
            total_sum: 0.0,
            batches: 0,
            term_sums: BTreeMap::new(),
        }
    }

    fn add(&mut self, total: f64, terms: &BTreeMap<String, f64>) {
        self.total_sum += total;
        self.batches += 1;
        for (name, &v) in terms {
            let e = self.term_sums.entry(name.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    fn finish(self, epoch: usize) -> EpochLog {
        EpochLog {
            epoch,
            total: self.total_sum / self.batches.max(1) as f64,
            terms: self
                .term_sums
                .into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect(),
        }
    }
}

/// Pre-train the grounding model, then fine-tune the answer head. The
/// returned log carries per-epoch losses and metrics on `eval_samples`
/// (the training set when absent).
pub fn train(
    cfg: &RunConfig,
    header: &DatasetHeader,
    train_samples: &[SceneSample],
    eval_samples: Option<&[SceneSample]>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let prepared = prepare_samples(train_samples, header, cfg)?;
    if prepared.is_empty() {
        return Err(HarnessError::Data("training dataset is empty".into()));
    }
    let specs = ModelSpecs::new(cfg, header.colors);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    specs.init(&mut store, &mut rng)?;

    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        let mut acc = TermAccumulator::new();
        for (step, chunk) in order.chunks(cfg.optimizer.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            let report = batch_step(&mut store, &specs, cfg, &batch)?;
            if !report.total.is_finite() {
                return Err(HarnessError::Diverged { epoch, step });
            }
            store.sgd_step(cfg.optimizer.learning_rate, cfg.optimizer.momentum)?;
            acc.add(report.total, &report.per_term);
        }
        epochs.push(acc.finish(epoch));
    }

    let mut qa_epochs = Vec::new();
    if cfg.qa.enabled {
        let train_encoders = !cfg.qa.freeze_encoders;
        for epoch in 0..cfg.qa.epochs {
            order.shuffle(&mut rng);
            let mut acc = TermAccumulator::new();
            for (step, chunk) in order.chunks(cfg.optimizer.batch_size).enumerate() {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
                let loss =
                    qa_batch_step(&mut store, &specs, cfg, &batch, header.colors, train_encoders)?;
                if !loss.is_finite() {
                    return Err(HarnessError::Diverged { epoch, step });
                }
                store.sgd_step_filtered(cfg.qa.learning_rate, cfg.optimizer.momentum, |name| {
                    name.starts_with(QA_PREFIX) || train_encoders && is_encoder_param(name)
                })?;
                acc.add(loss, &BTreeMap::from([("qa".to_string(), loss)]));
            }
            qa_epochs.push(acc.finish(epoch));
        }
    }

    let final_metrics = match eval_samples {
        Some(es) => evaluate(&store, &specs, cfg, header, es)?,
        None => evaluate_prepared(&store, &specs, cfg, header, &prepared)?,
    };

    Ok(TrainOutcome {
        store,
        specs,
        log: TrainLog {
            seed: cfg.seed,
            config_hash: cfg.integrity_hash(),
            epochs,
            qa_epochs,
            final_metrics,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

fn is_encoder_param(name: &str) -> bool {
    name.starts_with(crate::model::PROP_PREFIX) || name.starts_with(crate::model::TEXT_PREFIX)
}

/// Model metrics on a dataset.
pub fn evaluate(
    store: &ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
) -> Result<MetricReport<f64>, HarnessError> {
    let prepared = prepare_samples(samples, header, cfg)?;
    evaluate_prepared(store, specs, cfg, header, &prepared)
}

fn evaluate_prepared(
    store: &ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    header: &DatasetHeader,
    prepared: &[PreparedSample],
) -> Result<MetricReport<f64>, HarnessError> {
    let predictions = prepared
        .iter()
        .map(|s| predict_sample(store, specs, cfg, s, header.classes, header.colors))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_metrics(&predictions, &cfg.eval_thresholds)
}

/// Ceiling metrics from perfect proposal selection, for calibrating the
/// dataset rather than the model.
pub fn evaluate_oracle(
    cfg: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
) -> Result<MetricReport<f64>, HarnessError> {
    let prepared = prepare_samples(samples, header, cfg)?;
    let predictions: Vec<EvalPrediction> = prepared
        .iter()
        .map(|s| predict_oracle(s, header.colors))
        .collect();
    aggregate_metrics(&predictions, &cfg.eval_thresholds)
}

fn split_subset<'a>(preds: &'a [EvalPrediction], tag: SplitTag) -> Vec<&'a EvalPrediction> {
    preds.iter().filter(|p| p.split == tag).collect()
}

fn gated_scores(preds: &[&EvalPrediction]) -> Vec<GatedScore<f64>> {
    preds
        .iter()
        .map(|p| GatedScore {
            metric_value: p.m_score,
            iou: iou(&p.predicted_box, &p.gt),
        })
        .collect()
}

fn em_inputs(preds: &[&EvalPrediction]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let ranked = preds.iter().map(|p| p.ranked_answers.clone()).collect();
    let gt = preds.iter().map(|p| vec![p.gt_answer]).collect();
    (ranked, gt)
}

/// Builds the full metric report: grounding accuracy and the gated
/// attribute metric at every configured threshold, answer exact-match at
/// ranks 1 and 10, each broken down by scene split.
pub fn aggregate_metrics(
    preds: &[EvalPrediction],
    thresholds: &[f64],
) -> Result<MetricReport<f64>, HarnessError> {
    if preds.is_empty() {
        return Err(HarnessError::Data("nothing to evaluate".into()));
    }
    let mut report = MetricReport::default();

    let outcomes: Vec<GroundingOutcome<f64>> = preds
        .iter()
        .map(|p| GroundingOutcome {
            predicted_box: p.predicted_box,
            gt_box: p.gt,
            split_tag: p.split,
        })
        .collect();

    let all: Vec<&EvalPrediction> = preds.iter().collect();
    let uniq = split_subset(preds, SplitTag::Unique);
    let mult = split_subset(preds, SplitTag::Multiple);

    for &k in thresholds {
        report.insert(format!("acc@{k}"), acc_at_k(&outcomes, k)?);

        let m_for = |subset: &[&EvalPrediction]| -> Result<Option<f64>, HarnessError> {
            if subset.is_empty() {
                return Ok(None);
            }
            Ok(Some(m_at_k_iou(&gated_scores(subset), k)?))
        };
        report.insert(
            format!("m@{k}iou"),
            SplitValues {
                overall: m_for(&all)?.expect("preds nonempty"),
                unique: m_for(&uniq)?,
                multiple: m_for(&mult)?,
            },
        );
    }

    for k in [1usize, 10] {
        let em_for = |subset: &[&EvalPrediction]| -> Result<Option<f64>, HarnessError> {
            if subset.is_empty() {
                return Ok(None);
            }
            let (ranked, gt) = em_inputs(subset);
            Ok(Some(em_at_k(&ranked, &gt, k)?))
        };
        report.insert(
            format!("em@{k}"),
            SplitValues {
                overall: em_for(&all)?.expect("preds nonempty"),
                unique: em_for(&uniq)?,
                multiple: em_for(&mult)?,
            },
        );
    }

    Ok(report)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint file: the parameter snapshot plus the exact configuration
/// that produced it and that configuration's hash.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub params: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f64>,
    cfg: &RunConfig,
) -> Result<(), HarnessError> {
    let params: serde_json::Value = serde_json::from_str(&store.to_checkpoint_json())
        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    let doc = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config_hash: cfg.integrity_hash(),
        config: cfg.clone(),
        params,
    };
    let text =
        serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a checkpoint, re-deriving and verifying the stored config hash.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f64>, RunConfig), HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let doc: Checkpoint =
        serde_json::from_str(&text).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(HarnessError::Checkpoint(format!(
            "unsupported checkpoint version {} (reader supports {CHECKPOINT_VERSION})",
            doc.format_version
        )));
    }
    doc.config
        .validate()
        .map_err(|e| HarnessError::Checkpoint(format!("embedded config invalid: {e}")))?;
    let expect = doc.config.integrity_hash();
    if expect != doc.config_hash {
        return Err(HarnessError::Checkpoint(format!(
            "config hash mismatch: file says {}, config hashes to {expect}",
            doc.config_hash
        )));
    }
    let params_text = serde_json::to_string(&doc.params)
        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    let store = ParamStore::from_checkpoint_json(&params_text)?;
    Ok((store, doc.config))
}
