//! Model assembly: encoders, fusion, box refinement, and the answer head,
//! with hand-propagated gradients between them.
//!
//! The grounding model embeds each proposal's feature vector and the
//! description code with two dense encoders, scores every proposal with an
//! affine fusion head over `[H_p, T, H_p * T]`, refines boxes with a small
//! offset head, and answers attribute questions from the top-scored
//! proposal embedding. All parameters live in one store under fixed name
//! prefixes, so freezing and checkpointing work by name.

use crate::config::RunConfig;
use crate::synthworld::{DatasetHeader, SceneSample};
use crate::HarnessError;
use groundkit_core::contrastive::{occ_loss, osc_loss, ContrastiveError, EmbeddingSet};
use groundkit_core::diffkit::{
    init_mlp_params, mlp_backward, mlp_forward, MlpCache, MlpSpec, Nonlinearity, ParamStore,
};
use groundkit_core::filter::{filter, FilterResult};
use groundkit_core::geom::{iou, Aabb3};
use groundkit_core::metrics::SplitTag;
use groundkit_core::objectives::{
    cross_entropy, oid_loss, total_loss, CrossEntropyOutput, LossReport, LossTerm, OidOutput,
};
use groundkit_core::Aabb3d;
use rand::Rng;

pub const PROP_PREFIX: &str = "prop_enc";
pub const TEXT_PREFIX: &str = "text_enc";
pub const FUSION_PREFIX: &str = "fusion";
pub const OFFSET_PREFIX: &str = "offset";
pub const QA_PREFIX: &str = "qa";

/// Scale on the raw offset-head outputs. Center deltas move the box in
/// units of its own size; size deltas act in log space, which keeps the
/// refined box positive for any head output.
pub const OFFSET_GAIN: f64 = 0.2;

/// Concrete layer specs for every trainable piece.
#[derive(Debug, Clone)]
pub struct ModelSpecs {
    pub prop: MlpSpec,
    pub text: MlpSpec,
    pub fusion: MlpSpec,
    pub offset: MlpSpec,
    pub qa: MlpSpec,
}

impl ModelSpecs {
    /// Heads are derived from the encoder widths: the offset head maps an
    /// embedding to 6 box deltas, the answer head maps the top proposal
    /// embedding concatenated with the text embedding to answer logits.
    pub fn new(cfg: &RunConfig, answers: usize) -> Self {
        let d = cfg.embed_dim();
        ModelSpecs {
            prop: cfg.proposal_encoder.clone(),
            text: cfg.text_encoder.clone(),
            fusion: cfg.fusion_head.clone(),
            offset: MlpSpec::new(vec![d, 6], Nonlinearity::Tanh, false),
            qa: MlpSpec::new(vec![2 * d, answers], Nonlinearity::Tanh, false),
        }
    }

    pub fn init<R: Rng>(
        &self,
        store: &mut ParamStore<f64>,
        rng: &mut R,
    ) -> Result<(), HarnessError> {
        init_mlp_params(store, PROP_PREFIX, &self.prop, rng)?;
        init_mlp_params(store, TEXT_PREFIX, &self.text, rng)?;
        init_mlp_params(store, FUSION_PREFIX, &self.fusion, rng)?;
        init_mlp_params(store, OFFSET_PREFIX, &self.offset, rng)?;
        init_mlp_params(store, QA_PREFIX, &self.qa, rng)?;
        Ok(())
    }
}

/// One dataset sample converted to model inputs. The IoU partition is
/// computed once, against the proposals as generated; refinement never
/// feeds back into the target weights.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub features: Vec<Vec<f64>>,
    pub text_code: Vec<f64>,
    pub boxes: Vec<Aabb3d>,
    pub gt: Aabb3d,
    pub fr: FilterResult<f64>,
    pub split: SplitTag,
    pub qa_answer: usize,
    pub target_class: usize,
    pub target_color: usize,
}

/// Converts raw samples and checks that the dataset geometry matches the
/// configured encoder widths.
pub fn prepare_samples(
    samples: &[SceneSample],
    header: &DatasetHeader,
    cfg: &RunConfig,
) -> Result<Vec<PreparedSample>, HarnessError> {
    if cfg.proposal_encoder.input_dim() != header.feature_dim() {
        return Err(HarnessError::Data(format!(
            "proposal encoder expects {} inputs but the dataset provides {} features",
            cfg.proposal_encoder.input_dim(),
            header.feature_dim()
        )));
    }
    if cfg.text_encoder.input_dim() != header.description_dim() {
        return Err(HarnessError::Data(format!(
            "text encoder expects {} inputs but descriptions have {} entries",
            cfg.text_encoder.input_dim(),
            header.description_dim()
        )));
    }
    samples
        .iter()
        .map(|s| {
            let boxes: Vec<Aabb3d> = s
                .proposals
                .iter()
                .map(|p| p.to_box())
                .collect::<Result<_, _>>()?;
            let gt = s.target().bounds.to_box()?;
            let fr = filter(&boxes, &gt, &cfg.filter)?;
            Ok(PreparedSample {
                features: s.proposal_features.clone(),
                text_code: s.description_code.clone(),
                boxes,
                gt,
                fr,
                split: s.split_tag,
                qa_answer: s.qa_answer_id,
                target_class: s.target().class_id,
                target_color: s.target().color_id,
            })
        })
        .collect()
}

/// Forward state of one sample, kept around for backward.
pub struct SampleForward {
    pub prop_caches: Vec<MlpCache<f64>>,
    pub text_cache: MlpCache<f64>,
    pub fusion_caches: Vec<MlpCache<f64>>,
    pub scores: Vec<f64>,
    pub vg: CrossEntropyOutput<f64>,
    pub offset_caches: Vec<MlpCache<f64>>,
    pub refined: Vec<Aabb3d>,
    pub oid: Option<OidOutput<f64>>,
}

impl SampleForward {
    pub fn embedding(&self, p: usize) -> &[f64] {
        self.prop_caches[p].output()
    }

    pub fn text_embedding(&self) -> &[f64] {
        self.text_cache.output()
    }

    /// Highest-scoring proposal; ties resolve to the lowest index.
    pub fn top_index(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

fn fusion_input(h: &[f64], t: &[f64]) -> Vec<f64> {
    let mut cat = Vec::with_capacity(3 * h.len());
    cat.extend_from_slice(h);
    cat.extend_from_slice(t);
    cat.extend(h.iter().zip(t).map(|(&a, &b)| a * b));
    cat
}

/// Applies the offset head outputs to a proposal box. Center deltas are
/// scaled by the box size per axis; size deltas are exponentiated.
pub fn refine_box(src: &Aabb3d, deltas: &[f64]) -> Aabb3d {
    let c = src.center();
    let s = src.size();
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = c[a] + OFFSET_GAIN * deltas[a] * s[a];
        size[a] = s[a] * (OFFSET_GAIN * deltas[3 + a]).exp();
    }
    Aabb3::new(center, size).expect("refined box stays positive")
}

/// Runs every head on one sample. The detection term is computed on the
/// refined boxes against the weights from the original proposals.
pub fn forward_sample(
    store: &ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    sample: &PreparedSample,
) -> Result<SampleForward, HarnessError> {
    let n = sample.features.len();
    let mut prop_caches = Vec::with_capacity(n);
    for f in &sample.features {
        prop_caches.push(mlp_forward(&specs.prop, store, PROP_PREFIX, f)?);
    }
    let text_cache = mlp_forward(&specs.text, store, TEXT_PREFIX, &sample.text_code)?;

    let t = text_cache.output().to_vec();
    let mut fusion_caches = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for cache in &prop_caches {
        let cat = fusion_input(cache.output(), &t);
        let fc = mlp_forward(&specs.fusion, store, FUSION_PREFIX, &cat)?;
        scores.push(fc.output()[0]);
        fusion_caches.push(fc);
    }

    let vg = cross_entropy(&scores, &sample.fr.weights)?;

    let mut offset_caches = Vec::with_capacity(n);
    let mut refined = Vec::with_capacity(n);
    for (p, cache) in prop_caches.iter().enumerate() {
        let oc = mlp_forward(&specs.offset, store, OFFSET_PREFIX, cache.output())?;
        refined.push(refine_box(&sample.boxes[p], oc.output()));
        offset_caches.push(oc);
    }

    let oid = if cfg.modules.oid {
        Some(oid_loss(&refined, &sample.gt, &sample.fr)?)
    } else {
        None
    };

    Ok(SampleForward {
        prop_caches,
        text_cache,
        fusion_caches,
        scores,
        vg,
        offset_caches,
        refined,
        oid,
    })
}

fn add_scaled(acc: &mut [f64], src: &[f64], scale: f64) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += scale * s;
    }
}

/// Forward + backward over one mini-batch. Parameter gradients are
/// accumulated into the store; the caller decides when to step. Contrast
/// terms that skip every sample in the batch are simply absent from the
/// returned report for that batch.
pub fn batch_step(
    store: &mut ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    batch: &[&PreparedSample],
) -> Result<LossReport<f64>, HarnessError> {
    assert!(!batch.is_empty(), "batches are never empty");
    let b = batch.len() as f64;
    let d = cfg.embed_dim();

    let mut forwards = Vec::with_capacity(batch.len());
    for sample in batch {
        forwards.push(forward_sample(store, specs, cfg, sample)?);
    }

    let mut terms = Vec::new();
    let vg_mean = forwards.iter().map(|f| f.vg.loss).sum::<f64>() / b;
    terms.push(LossTerm::new("vg", vg_mean));
    if cfg.modules.oid {
        let oid_mean = forwards
            .iter()
            .map(|f| f.oid.as_ref().expect("oid enabled").loss)
            .sum::<f64>()
            / b;
        terms.push(LossTerm::new("oid", oid_mean));
    }

    let sets: Vec<EmbeddingSet<f64>> = batch
        .iter()
        .zip(&forwards)
        .map(|(sample, f)| EmbeddingSet {
            proposal_embeddings: f.prop_caches.iter().map(|c| c.output().to_vec()).collect(),
            text_embedding: f.text_cache.output().to_vec(),
            partition: sample.fr.clone(),
        })
        .collect();
    let occ = if cfg.modules.occ {
        match occ_loss(&sets, &cfg.similarity) {
            Ok(out) => {
                terms.push(LossTerm::new("occ", out.loss));
                Some(out)
            }
            Err(ContrastiveError::DegenerateBatch) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let osc = if cfg.modules.osc {
        match osc_loss(&sets, &cfg.similarity) {
            Ok(out) => {
                terms.push(LossTerm::new("osc", out.loss));
                Some(out)
            }
            Err(ContrastiveError::DegenerateBatch) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    let report = total_loss(&terms, &cfg.loss_weights)?;
    let w = &cfg.loss_weights;

    for (i, (sample, f)) in batch.iter().zip(&forwards).enumerate() {
        let n = f.scores.len();
        let mut d_embed = vec![vec![0.0; d]; n];
        let mut d_text = vec![0.0; d];
        let t = f.text_cache.output().to_vec();

        // Grounding: fusion head backward, then split the concatenated
        // input gradient into its embedding and text parts.
        for p in 0..n {
            let upstream = [w.w_vg / b * f.vg.d_scores[p]];
            let d_cat = mlp_backward(&specs.fusion, store, FUSION_PREFIX, &f.fusion_caches[p], &upstream)?;
            let h = f.prop_caches[p].output();
            for j in 0..d {
                d_embed[p][j] += d_cat[j] + d_cat[2 * d + j] * t[j];
                d_text[j] += d_cat[d + j] + d_cat[2 * d + j] * h[j];
            }
        }

        // Detection: box gradients chain through the refinement map into
        // the offset head. Zero-weight proposals carry zero gradient.
        if let Some(oid) = &f.oid {
            for (p, g) in oid.grads.iter().enumerate() {
                if sample.fr.weights[p] == 0.0 {
                    continue;
                }
                let s0 = sample.boxes[p].size();
                let rs = f.refined[p].size();
                let mut upstream = [0.0; 6];
                for a in 0..3 {
                    upstream[a] = w.w_oid / b * g.d_center[a] * OFFSET_GAIN * s0[a];
                    upstream[3 + a] = w.w_oid / b * g.d_size[a] * OFFSET_GAIN * rs[a];
                }
                let dh = mlp_backward(&specs.offset, store, OFFSET_PREFIX, &f.offset_caches[p], &upstream)?;
                add_scaled(&mut d_embed[p], &dh, 1.0);
            }
        }

        // Contrastive terms: their gradients are already means over the
        // batch, so only the loss weight is applied here.
        if let Some(occ) = &occ {
            let sg = &occ.sample_grads[i];
            if !sg.skipped {
                for p in 0..n {
                    add_scaled(&mut d_embed[p], &sg.d_proposals[p], w.w_occ);
                }
                add_scaled(&mut d_text, &sg.d_text, w.w_occ);
            }
        }
        if let Some(osc) = &osc {
            let sg = &osc.sample_grads[i];
            if !sg.skipped {
                for p in 0..n {
                    add_scaled(&mut d_embed[p], &sg.d_proposals[p], w.w_osc);
                }
            }
        }

        for p in 0..n {
            mlp_backward(&specs.prop, store, PROP_PREFIX, &f.prop_caches[p], &d_embed[p])?;
        }
        mlp_backward(&specs.text, store, TEXT_PREFIX, &f.text_cache, &d_text)?;
    }

    Ok(report)
}

/// Answer-head pass for one mini-batch during fine-tuning. The top
/// proposal is selected by the frozen-in-place fusion scores; selection is
/// treated as a constant, so gradients flow through the selected
/// embedding only (and into the encoders when they are not frozen).
pub fn qa_batch_step(
    store: &mut ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    batch: &[&PreparedSample],
    answers: usize,
    train_encoders: bool,
) -> Result<f64, HarnessError> {
    assert!(!batch.is_empty(), "batches are never empty");
    let b = batch.len() as f64;
    let d = cfg.embed_dim();
    let w_qa = cfg.loss_weights.w_qa;
    let mut mean_loss = 0.0;

    for sample in batch {
        let f = forward_sample(store, specs, cfg, sample)?;
        let top = f.top_index();
        let mut qa_in = Vec::with_capacity(2 * d);
        qa_in.extend_from_slice(f.embedding(top));
        qa_in.extend_from_slice(f.text_embedding());
        let qa_cache = mlp_forward(&specs.qa, store, QA_PREFIX, &qa_in)?;

        let mut target = vec![0.0; answers];
        target[sample.qa_answer] = 1.0;
        let ce = cross_entropy(qa_cache.output(), &target)?;
        mean_loss += ce.loss / b;

        let upstream: Vec<f64> = ce.d_scores.iter().map(|&g| w_qa / b * g).collect();
        let d_in = mlp_backward(&specs.qa, store, QA_PREFIX, &qa_cache, &upstream)?;
        if train_encoders {
            mlp_backward(&specs.prop, store, PROP_PREFIX, &f.prop_caches[top], &d_in[..d])?;
            mlp_backward(&specs.text, store, TEXT_PREFIX, &f.text_cache, &d_in[d..])?;
        }
    }
    Ok(w_qa * mean_loss)
}

/// Everything evaluation needs from one sample.
pub struct EvalPrediction {
    pub predicted_box: Aabb3d,
    pub gt: Aabb3d,
    pub split: SplitTag,
    /// Attribute-match surrogate in [0, 1] for the gated metric.
    pub m_score: f64,
    pub ranked_answers: Vec<usize>,
    pub gt_answer: usize,
}

fn argmax(block: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in block.iter().enumerate() {
        if v > block[best] {
            best = i;
        }
    }
    best
}

/// Attribute agreement between the chosen proposal's (noisy) one-hot
/// feature blocks and the described target: half a point per attribute.
fn attribute_match(
    features: &[f64],
    classes: usize,
    colors: usize,
    target_class: usize,
    target_color: usize,
) -> f64 {
    let class_block = &features[6..6 + classes];
    let color_block = &features[6 + classes..6 + classes + colors];
    let mut m = 0.0;
    if argmax(class_block) == target_class {
        m += 0.5;
    }
    if argmax(color_block) == target_color {
        m += 0.5;
    }
    m
}

/// Rank answers by descending logit; ties resolve to the lower answer id.
fn rank_answers(logits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Model predictions for one sample: the refined top-scored proposal, the
/// attribute surrogate, and the ranked answers.
pub fn predict_sample(
    store: &ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    sample: &PreparedSample,
    classes: usize,
    colors: usize,
) -> Result<EvalPrediction, HarnessError> {
    let f = forward_sample(store, specs, cfg, sample)?;
    let top = f.top_index();
    let d = cfg.embed_dim();
    let mut qa_in = Vec::with_capacity(2 * d);
    qa_in.extend_from_slice(f.embedding(top));
    qa_in.extend_from_slice(f.text_embedding());
    let qa_cache = mlp_forward(&specs.qa, store, QA_PREFIX, &qa_in)?;

    Ok(EvalPrediction {
        predicted_box: f.refined[top],
        gt: sample.gt,
        split: sample.split,
        m_score: attribute_match(
            &sample.features[top],
            classes,
            colors,
            sample.target_class,
            sample.target_color,
        ),
        ranked_answers: rank_answers(qa_cache.output()),
        gt_answer: sample.qa_answer,
    })
}

/// Ceiling predictions: pick the proposal with the best true IoU, keep its
/// box unrefined, score attributes and answers perfectly. Accuracy under
/// these predictions equals the generator's coverage audit.
pub fn predict_oracle(sample: &PreparedSample, answers: usize) -> EvalPrediction {
    let mut best = 0;
    let mut best_iou = -1.0;
    for (p, bx) in sample.boxes.iter().enumerate() {
        let v = iou(bx, &sample.gt);
        if v > best_iou {
            best_iou = v;
            best = p;
        }
    }
    let mut ranked: Vec<usize> = Vec::with_capacity(answers);
    ranked.push(sample.qa_answer);
    ranked.extend((0..answers).filter(|&a| a != sample.qa_answer));
    EvalPrediction {
        predicted_box: sample.boxes[best],
        gt: sample.gt,
        split: sample.split,
        m_score: 1.0,
        ranked_answers: ranked,
        gt_answer: sample.qa_answer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate, DatasetHeader, GenConfig};
    use groundkit_core::diffkit::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup() -> (RunConfig, ModelSpecs, ParamStore<f64>, Vec<PreparedSample>, GenConfig) {
        let gen = GenConfig {
            scenes: 3,
            seed: 21,
            ..GenConfig::default()
        };
        let (samples, _) = generate(&gen).unwrap();
        let header = DatasetHeader::from_config(&gen);
        let cfg = RunConfig::default_for(gen.classes, gen.colors);
        let prepared = prepare_samples(&samples, &header, &cfg).unwrap();
        let specs = ModelSpecs::new(&cfg, gen.colors);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        specs.init(&mut store, &mut rng).unwrap();
        (cfg, specs, store, prepared, gen)
    }

    #[test]
    fn forward_produces_one_score_per_proposal() {
        let (cfg, specs, store, prepared, _) = tiny_setup();
        let f = forward_sample(&store, &specs, &cfg, &prepared[0]).unwrap();
        assert_eq!(f.scores.len(), prepared[0].features.len());
        assert!(f.scores.iter().all(|s| s.is_finite()));
        assert_eq!(f.refined.len(), f.scores.len());
    }

    #[test]
    fn zero_offsets_leave_boxes_unchanged() {
        let (_, _, _, prepared, _) = tiny_setup();
        let b = prepared[0].boxes[0];
        let r = refine_box(&b, &[0.0; 6]);
        assert_eq!(iou(&b, &r), 1.0);
    }

    #[test]
    fn batch_step_reports_every_enabled_term() {
        let (cfg, specs, mut store, prepared, _) = tiny_setup();
        let batch: Vec<&PreparedSample> = prepared.iter().take(4).collect();
        let report = batch_step(&mut store, &specs, &cfg, &batch).unwrap();
        assert!(report.per_term.contains_key("vg"));
        assert!(report.per_term.contains_key("oid"));
        assert!(report.per_term.contains_key("occ"));
        assert!(report.per_term.contains_key("osc"));
        assert!(report.total.is_finite());
        let some_grad = store.grad(&specs.prop.weight_name(PROP_PREFIX, 0)).unwrap();
        assert!(some_grad.iter().any(|&g| g != 0.0), "gradients must reach the encoder");
    }

    #[test]
    fn disabled_modules_leave_no_term_and_no_gradient() {
        let (mut cfg, specs, mut store, prepared, _) = tiny_setup();
        cfg.modules.oid = false;
        cfg.modules.occ = false;
        cfg.modules.osc = false;
        let batch: Vec<&PreparedSample> = prepared.iter().take(2).collect();
        let report = batch_step(&mut store, &specs, &cfg, &batch).unwrap();
        assert_eq!(report.per_term.len(), 1);
        assert!(report.per_term.contains_key("vg"));
        let offset_grad = store.grad(&specs.offset.weight_name(OFFSET_PREFIX, 0)).unwrap();
        assert!(offset_grad.iter().all(|&g| g == 0.0), "offset head is idle without the detection term");
    }

    #[test]
    fn qa_step_moves_only_the_answer_head_when_frozen() {
        let (cfg, specs, mut store, prepared, gen) = tiny_setup();
        let batch: Vec<&PreparedSample> = prepared.iter().take(2).collect();
        let loss = qa_batch_step(&mut store, &specs, &cfg, &batch, gen.colors, false).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let qa_grad = store.grad(&specs.qa.weight_name(QA_PREFIX, 0)).unwrap();
        assert!(qa_grad.iter().any(|&g| g != 0.0));
        let enc_grad = store.grad(&specs.prop.weight_name(PROP_PREFIX, 0)).unwrap();
        assert!(enc_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn oracle_predictions_score_perfect_attributes_and_answers() {
        let (_, _, _, prepared, gen) = tiny_setup();
        for s in &prepared {
            let p = predict_oracle(s, gen.colors);
            assert_eq!(p.m_score, 1.0);
            assert_eq!(p.ranked_answers[0], s.qa_answer);
            assert_eq!(p.ranked_answers.len(), gen.colors);
        }
    }

    #[test]
    fn prepare_rejects_mismatched_encoder_widths() {
        let gen = GenConfig {
            scenes: 2,
            seed: 9,
            ..GenConfig::default()
        };
        let (samples, _) = generate(&gen).unwrap();
        let header = DatasetHeader::from_config(&gen);
        let cfg = RunConfig::default_for(gen.classes + 1, gen.colors);
        assert!(prepare_samples(&samples, &header, &cfg).is_err());
    }
}
