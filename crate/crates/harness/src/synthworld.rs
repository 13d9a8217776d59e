//! Synthetic referring-expression scenes.
//!
//! A scene is a unit room holding a handful of well-separated boxes, each
//! tagged with a class and a color. Every identifiable object becomes one
//! sample: a referring description (class + color + optional spatial
//! relation), a pool of box proposals (noisy jitters of every object plus
//! uniform clutter), per-proposal feature vectors, and a QA answer. The
//! generator is fully deterministic per seed and audits its own proposal
//! coverage so downstream accuracy numbers have a known ceiling.

use groundkit_core::geom::{iou, Aabb3};
use groundkit_core::metrics::SplitTag;
use groundkit_core::Aabb3d;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Dataset schema version written into every header line.
pub const DATASET_VERSION: u32 = 1;

/// Relation kinds encoded in a description (none, leftmost, rightmost,
/// nearest-to-class).
pub const RELATION_KINDS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error("placement budget exhausted in scene {scene} (seed {seed}); room too crowded")]
    PlacementBudget { scene: u64, seed: u64 },
    #[error("coverage audit failed: {got:.4} of samples reach IoU >= 0.25, need >= {required:.2}")]
    Coverage { required: f64, got: f64 },
    #[error("no identifiable samples were produced (seed {seed})")]
    NoSamples { seed: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("bad description code: {0}")]
    BadCode(String),
}

/// Generator knobs. `Default` is the reference configuration used by the
/// benchmark harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: usize,
    pub objects_per_scene: usize,
    pub jitters_per_object: usize,
    pub clutter_per_scene: usize,
    pub noise_scale: f64,
    pub classes: usize,
    pub colors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            scenes: 200,
            objects_per_scene: 6,
            jitters_per_object: 4,
            clutter_per_scene: 8,
            noise_scale: 0.05,
            classes: 8,
            colors: 6,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.scenes == 0 || self.objects_per_scene == 0 {
            return Err(SynthError::BadConfig(
                "scenes and objects_per_scene must be positive".into(),
            ));
        }
        if self.classes < 2 || self.colors < 2 {
            return Err(SynthError::BadConfig(
                "need at least two classes and two colors".into(),
            ));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(SynthError::BadConfig(
                "noise_scale must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Length of one proposal feature vector: center, size, then noisy
    /// class and color one-hots.
    pub fn feature_dim(&self) -> usize {
        6 + self.classes + self.colors
    }

    /// Length of a description code: class and color one-hots, relation
    /// kind one-hot, reference-class one-hot.
    pub fn description_dim(&self) -> usize {
        2 * self.classes + self.colors + RELATION_KINDS
    }
}

/// Serializable axis-aligned box (center + size). Mirrors the geometry
/// type, which keeps its fields private behind validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl BoxRecord {
    pub fn from_box(b: &Aabb3d) -> Self {
        BoxRecord {
            center: b.center(),
            size: b.size(),
        }
    }

    pub fn to_box(&self) -> Result<Aabb3d, SynthError> {
        Aabb3::new(self.center, self.size)
            .map_err(|e| SynthError::BadCode(format!("invalid box record: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    pub class_id: usize,
    pub color_id: usize,
    #[serde(rename = "box")]
    pub bounds: BoxRecord,
}

/// One referring-expression sample. `proposals[i]` and
/// `proposal_features[i]` describe the same candidate box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<BoxRecord>,
    pub proposal_features: Vec<Vec<f64>>,
    pub target_object_id: usize,
    pub description_code: Vec<f64>,
    pub qa_answer_id: usize,
    pub split_tag: SplitTag,
}

impl SceneSample {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_object_id]
    }
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "A")]
    pub colors: usize,
    pub scenes: usize,
    pub objects_per_scene: usize,
    pub jitters_per_object: usize,
    pub clutter_per_scene: usize,
    pub noise_scale: f64,
}

impl DatasetHeader {
    pub fn from_config(cfg: &GenConfig) -> Self {
        DatasetHeader {
            version: DATASET_VERSION,
            seed: cfg.seed,
            classes: cfg.classes,
            colors: cfg.colors,
            scenes: cfg.scenes,
            objects_per_scene: cfg.objects_per_scene,
            jitters_per_object: cfg.jitters_per_object,
            clutter_per_scene: cfg.clutter_per_scene,
            noise_scale: cfg.noise_scale,
        }
    }

    pub fn feature_dim(&self) -> usize {
        6 + self.classes + self.colors
    }

    pub fn description_dim(&self) -> usize {
        2 * self.classes + self.colors + RELATION_KINDS
    }
}

/// Self-audit recorded during generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenAudit {
    pub candidate_targets: usize,
    pub emitted_samples: usize,
    pub dropped_unidentifiable: usize,
    pub unique_samples: usize,
    pub multiple_samples: usize,
    /// Fraction of samples whose best proposal reaches IoU >= 0.25 / 0.5
    /// with the target box.
    pub coverage_at_025: f64,
    pub coverage_at_05: f64,
}

/// Spatial relation used to disambiguate a description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    None,
    Leftmost,
    Rightmost,
    NearestToClass(usize),
}

/// Encode a description as concatenated one-hot blocks. The code is an
/// exact function of its inputs; no noise is added.
pub fn encode_description(
    class_id: usize,
    color_id: usize,
    relation: Relation,
    classes: usize,
    colors: usize,
) -> Vec<f64> {
    let mut code = vec![0.0; 2 * classes + colors + RELATION_KINDS];
    code[class_id] = 1.0;
    code[classes + color_id] = 1.0;
    let kind_base = classes + colors;
    match relation {
        Relation::None => code[kind_base] = 1.0,
        Relation::Leftmost => code[kind_base + 1] = 1.0,
        Relation::Rightmost => code[kind_base + 2] = 1.0,
        Relation::NearestToClass(c) => {
            code[kind_base + 3] = 1.0;
            code[kind_base + RELATION_KINDS + c] = 1.0;
        }
    }
    code
}

fn one_hot_index(block: &[f64], what: &str) -> Result<usize, SynthError> {
    let mut hit = None;
    for (i, &v) in block.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return Err(SynthError::BadCode(format!("{what}: multiple hot entries")));
            }
            hit = Some(i);
        } else if v != 0.0 {
            return Err(SynthError::BadCode(format!("{what}: non-binary entry {v}")));
        }
    }
    hit.ok_or_else(|| SynthError::BadCode(format!("{what}: no hot entry")))
}

/// Decode a description code back into (class, color, relation).
pub fn decode_description(
    code: &[f64],
    classes: usize,
    colors: usize,
) -> Result<(usize, usize, Relation), SynthError> {
    let want = 2 * classes + colors + RELATION_KINDS;
    if code.len() != want {
        return Err(SynthError::BadCode(format!(
            "length {} (expected {want})",
            code.len()
        )));
    }
    let class_id = one_hot_index(&code[..classes], "class block")?;
    let color_id = one_hot_index(&code[classes..classes + colors], "color block")?;
    let kind_base = classes + colors;
    let kind = one_hot_index(&code[kind_base..kind_base + RELATION_KINDS], "relation block")?;
    let ref_block = &code[kind_base + RELATION_KINDS..];
    let relation = match kind {
        0 | 1 | 2 => {
            if ref_block.iter().any(|&v| v != 0.0) {
                return Err(SynthError::BadCode(
                    "reference class set without nearest-to relation".into(),
                ));
            }
            [Relation::None, Relation::Leftmost, Relation::Rightmost][kind]
        }
        _ => Relation::NearestToClass(one_hot_index(ref_block, "reference class block")?),
    };
    Ok((class_id, color_id, relation))
}

fn center_dist(a: &SceneObject, b: &SceneObject) -> f64 {
    let ca = a.bounds.center;
    let cb = b.bounds.center;
    (0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>().sqrt()
}

/// Objects matched by a description, as object ids. Relations select among
/// the objects that already match the class and color; distance ties keep
/// every tied object, which marks the description ambiguous.
pub fn matches_description(
    objects: &[SceneObject],
    class_id: usize,
    color_id: usize,
    relation: Relation,
) -> Vec<usize> {
    let candidates: Vec<&SceneObject> = objects
        .iter()
        .filter(|o| o.class_id == class_id && o.color_id == color_id)
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let by_key = |key: &dyn Fn(&SceneObject) -> f64, pick_min: bool| -> Vec<usize> {
        let mut best = f64::INFINITY;
        for c in &candidates {
            let k = if pick_min { key(c) } else { -key(c) };
            if k < best {
                best = k;
            }
        }
        if !best.is_finite() {
            return Vec::new();
        }
        candidates
            .iter()
            .filter(|c| {
                let k = if pick_min { key(c) } else { -key(c) };
                k == best
            })
            .map(|c| c.object_id)
            .collect()
    };
    match relation {
        Relation::None => candidates.iter().map(|c| c.object_id).collect(),
        Relation::Leftmost => by_key(&|o| o.bounds.center[0], true),
        Relation::Rightmost => by_key(&|o| o.bounds.center[0], false),
        Relation::NearestToClass(ref_class) => by_key(
            &|o| {
                objects
                    .iter()
                    .filter(|r| r.class_id == ref_class && r.object_id != o.object_id)
                    .map(|r| center_dist(o, r))
                    .fold(f64::INFINITY, f64::min)
            },
            true,
        ),
    }
}

/// Pick the first relation (none, leftmost, rightmost, nearest-to-class in
/// ascending class order) whose match set is exactly the target.
fn pick_relation(objects: &[SceneObject], target_id: usize, classes: usize) -> Option<Relation> {
    let t = &objects[target_id];
    let mut options = vec![Relation::None, Relation::Leftmost, Relation::Rightmost];
    options.extend((0..classes).map(Relation::NearestToClass));
    options
        .into_iter()
        .find(|&rel| matches_description(objects, t.class_id, t.color_id, rel) == [target_id])
}

const ROOM: f64 = 1.0;
const MIN_SIZE: f64 = 0.08;
const MAX_SIZE: f64 = 0.22;
const MAX_PAIR_IOU: f64 = 0.05;
const PLACE_BUDGET: usize = 10_000;

/// Per-axis growth applied to every jittered proposal, in units of
/// noise_scale. Proposals therefore start systematically oversized (at the
/// reference noise of 0.05 the box volume grows by 1.35^3, putting raw
/// IoU near 0.4), so clearing the strict overlap thresholds requires a
/// learned shrink; at zero noise the factor is exactly one.
const INFLATE_PER_NOISE: f64 = 7.0;

fn sample_box(rng: &mut ChaCha8Rng) -> Aabb3d {
    let mut size = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        size[a] = rng.gen_range(MIN_SIZE..=MAX_SIZE);
        let half = size[a] / 2.0;
        center[a] = rng.gen_range(half..=(ROOM - half));
    }
    Aabb3::new(center, size).expect("sampled box is finite and positive")
}

fn place_objects(
    rng: &mut ChaCha8Rng,
    cfg: &GenConfig,
    scene: u64,
) -> Result<Vec<Aabb3d>, SynthError> {
    let mut placed: Vec<Aabb3d> = Vec::with_capacity(cfg.objects_per_scene);
    let mut attempts = 0;
    while placed.len() < cfg.objects_per_scene {
        if attempts >= PLACE_BUDGET {
            return Err(SynthError::PlacementBudget {
                scene,
                seed: cfg.seed,
            });
        }
        attempts += 1;
        let cand = sample_box(rng);
        if placed.iter().all(|p| iou(p, &cand) <= MAX_PAIR_IOU) {
            placed.push(cand);
        }
    }
    Ok(placed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Jitter a source box. Center moves by a Gaussian step proportional to
/// noise and the box size; size grows by a systematic inflation plus
/// Gaussian spread, truncated to stay positive. noise = 0 reproduces the
/// source box exactly.
fn jitter_box(rng: &mut ChaCha8Rng, src: &Aabb3d, noise: f64) -> Aabb3d {
    let c = src.center();
    let s = src.size();
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = c[a] + noise * s[a] * normal(rng);
        let factor = (1.0 + INFLATE_PER_NOISE * noise + noise * normal(rng)).max(0.2);
        size[a] = s[a] * factor;
    }
    Aabb3::new(center, size).expect("jittered box stays positive")
}

fn noisy_one_hot(rng: &mut ChaCha8Rng, index: usize, len: usize, noise: f64) -> Vec<f64> {
    (0..len)
        .map(|i| (if i == index { 1.0 } else { 0.0 }) + noise * normal(rng))
        .collect()
}

fn feature_vector(
    rng: &mut ChaCha8Rng,
    b: &Aabb3d,
    class_id: usize,
    color_id: usize,
    cfg: &GenConfig,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(cfg.feature_dim());
    f.extend_from_slice(&b.center());
    f.extend_from_slice(&b.size());
    f.extend(noisy_one_hot(rng, class_id, cfg.classes, cfg.noise_scale));
    f.extend(noisy_one_hot(rng, color_id, cfg.colors, cfg.noise_scale));
    f
}

/// Generate the full dataset. Deterministic in the seed: the same config
/// always yields byte-identical samples.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<SceneSample>, GenAudit), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    let mut candidate_targets = 0;
    let mut dropped = 0;

    for scene_id in 0..cfg.scenes as u64 {
        let boxes = place_objects(&mut rng, cfg, scene_id)?;

        let mut class_ids: Vec<usize> =
            (0..cfg.objects_per_scene).map(|_| rng.gen_range(0..cfg.classes)).collect();
        // Odd scenes get a forced class collision so the "multiple" split
        // is always populated; even scenes keep their random draw.
        if scene_id % 2 == 1 && cfg.objects_per_scene >= 2 {
            class_ids[1] = class_ids[0];
        }
        let color_ids: Vec<usize> =
            (0..cfg.objects_per_scene).map(|_| rng.gen_range(0..cfg.colors)).collect();

        let objects: Vec<SceneObject> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| SceneObject {
                object_id: i,
                class_id: class_ids[i],
                color_id: color_ids[i],
                bounds: BoxRecord::from_box(b),
            })
            .collect();

        let mut proposals = Vec::new();
        let mut features = Vec::new();
        for obj in &objects {
            let src = boxes[obj.object_id];
            for _ in 0..cfg.jitters_per_object {
                let jb = jitter_box(&mut rng, &src, cfg.noise_scale);
                features.push(feature_vector(&mut rng, &jb, obj.class_id, obj.color_id, cfg));
                proposals.push(BoxRecord::from_box(&jb));
            }
        }
        for _ in 0..cfg.clutter_per_scene {
            let cb = sample_box(&mut rng);
            let class_id = rng.gen_range(0..cfg.classes);
            let color_id = rng.gen_range(0..cfg.colors);
            features.push(feature_vector(&mut rng, &cb, class_id, color_id, cfg));
            proposals.push(BoxRecord::from_box(&cb));
        }

        for target_id in 0..cfg.objects_per_scene {
            candidate_targets += 1;
            let relation = match pick_relation(&objects, target_id, cfg.classes) {
                Some(r) => r,
                None => {
                    dropped += 1;
                    continue;
                }
            };
            let t = &objects[target_id];
            let class_count = objects.iter().filter(|o| o.class_id == t.class_id).count();
            let split_tag = if class_count == 1 {
                SplitTag::Unique
            } else {
                SplitTag::Multiple
            };
            samples.push(SceneSample {
                scene_id,
                objects: objects.clone(),
                proposals: proposals.clone(),
                proposal_features: features.clone(),
                target_object_id: target_id,
                description_code: encode_description(
                    t.class_id,
                    t.color_id,
                    relation,
                    cfg.classes,
                    cfg.colors,
                ),
                qa_answer_id: t.color_id,
                split_tag,
            });
        }
    }

    if samples.is_empty() {
        return Err(SynthError::NoSamples { seed: cfg.seed });
    }

    let mut hits_025 = 0usize;
    let mut hits_05 = 0usize;
    let mut unique = 0usize;
    for s in &samples {
        let gt = s.target().bounds.to_box()?;
        let best = s
            .proposals
            .iter()
            .map(|p| p.to_box().map(|b| iou(&b, &gt)))
            .collect::<Result<Vec<f64>, _>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        if best >= 0.25 {
            hits_025 += 1;
        }
        if best >= 0.5 {
            hits_05 += 1;
        }
        if s.split_tag == SplitTag::Unique {
            unique += 1;
        }
    }
    let audit = GenAudit {
        candidate_targets,
        emitted_samples: samples.len(),
        dropped_unidentifiable: dropped,
        unique_samples: unique,
        multiple_samples: samples.len() - unique,
        coverage_at_025: hits_025 as f64 / samples.len() as f64,
        coverage_at_05: hits_05 as f64 / samples.len() as f64,
    };

    // With mild noise and several jitters per object nearly every target
    // must be covered by a decent proposal; a miss here means the jitter
    // model regressed, so fail instead of shipping an unusable dataset.
    if cfg.noise_scale <= 0.05 && cfg.jitters_per_object >= 4 && audit.coverage_at_025 < 0.99 {
        return Err(SynthError::Coverage {
            required: 0.99,
            got: audit.coverage_at_025,
        });
    }

    Ok((samples, audit))
}

/// Write header + samples as JSON lines.
pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    samples: &[SceneSample],
) -> Result<(), SynthError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, header).map_err(|e| SynthError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for (i, s) in samples.iter().enumerate() {
        serde_json::to_writer(&mut w, s).map_err(|e| SynthError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset back. Errors name the offending line; the serde message
/// names the field.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>), SynthError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(SynthError::Parse {
        line: 1,
        message: "empty file, expected header".into(),
    })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| SynthError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    if header.version != DATASET_VERSION {
        return Err(SynthError::Parse {
            line: 1,
            message: format!(
                "unsupported dataset version {} (reader supports {DATASET_VERSION})",
                header.version
            ),
        });
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let sample: SceneSample = serde_json::from_str(&text).map_err(|e| SynthError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_sample(&sample, &header, line_no)?;
        samples.push(sample);
    }
    Ok((header, samples))
}

fn validate_sample(
    s: &SceneSample,
    header: &DatasetHeader,
    line: usize,
) -> Result<(), SynthError> {
    let fail = |message: String| SynthError::Parse { line, message };
    if s.target_object_id >= s.objects.len() {
        return Err(fail(format!(
            "field target_object_id: {} out of range for {} objects",
            s.target_object_id,
            s.objects.len()
        )));
    }
    if s.proposals.len() != s.proposal_features.len() {
        return Err(fail(format!(
            "field proposal_features: {} rows for {} proposals",
            s.proposal_features.len(),
            s.proposals.len()
        )));
    }
    if s.proposals.is_empty() {
        return Err(fail("field proposals: empty".into()));
    }
    let fdim = header.feature_dim();
    for (i, f) in s.proposal_features.iter().enumerate() {
        if f.len() != fdim {
            return Err(fail(format!(
                "field proposal_features[{i}]: length {} (expected {fdim})",
                f.len()
            )));
        }
    }
    if s.description_code.len() != header.description_dim() {
        return Err(fail(format!(
            "field description_code: length {} (expected {})",
            s.description_code.len(),
            header.description_dim()
        )));
    }
    if s.qa_answer_id >= header.colors {
        return Err(fail(format!(
            "field qa_answer_id: {} out of range for {} answers",
            s.qa_answer_id, header.colors
        )));
    }
    for (i, o) in s.objects.iter().enumerate() {
        if o.class_id >= header.classes || o.color_id >= header.colors {
            return Err(fail(format!(
                "field objects[{i}]: class {} / color {} out of range",
                o.class_id, o.color_id
            )));
        }
        o.bounds.to_box().map_err(|e| fail(format!("field objects[{i}].box: {e}")))?;
    }
    for (i, p) in s.proposals.iter().enumerate() {
        p.to_box().map_err(|e| fail(format!("field proposals[{i}]: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            seed: 11,
            scenes: 12,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = small_config();
        let (a, audit_a) = generate(&cfg).unwrap();
        let (b, audit_b) = generate(&cfg).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(audit_a.emitted_samples, audit_b.emitted_samples);
    }

    #[test]
    fn different_seeds_differ() {
        let mut cfg = small_config();
        let (a, _) = generate(&cfg).unwrap();
        cfg.seed = 12;
        let (b, _) = generate(&cfg).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn objects_are_well_separated() {
        let (samples, _) = generate(&small_config()).unwrap();
        for s in &samples {
            for i in 0..s.objects.len() {
                for j in (i + 1)..s.objects.len() {
                    let a = s.objects[i].bounds.to_box().unwrap();
                    let b = s.objects[j].bounds.to_box().unwrap();
                    assert!(iou(&a, &b) <= MAX_PAIR_IOU + 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_noise_jitters_reproduce_their_source_boxes() {
        let cfg = GenConfig {
            noise_scale: 0.0,
            scenes: 4,
            seed: 3,
            ..GenConfig::default()
        };
        let (samples, _) = generate(&cfg).unwrap();
        for s in &samples {
            let gt = s.target().bounds.to_box().unwrap();
            let n_jitter = cfg.jitters_per_object;
            let base = s.target_object_id * n_jitter;
            for k in 0..n_jitter {
                let p = s.proposals[base + k].to_box().unwrap();
                assert_eq!(iou(&p, &gt), 1.0, "zero-noise jitter must match exactly");
            }
        }
    }

    #[test]
    fn default_config_passes_the_coverage_gate() {
        let cfg = GenConfig {
            scenes: 40,
            ..GenConfig::default()
        };
        let (_, audit) = generate(&cfg).unwrap();
        assert!(audit.coverage_at_025 >= 0.99);
        assert!(
            audit.coverage_at_05 < 0.25,
            "raw proposals are oversized on purpose; clearing 0.5 should need refinement"
        );
    }

    #[test]
    fn both_splits_are_populated() {
        let (_, audit) = generate(&small_config()).unwrap();
        assert!(audit.unique_samples > 0);
        assert!(audit.multiple_samples > 0);
    }

    #[test]
    fn every_description_identifies_exactly_its_target() {
        let cfg = small_config();
        let (samples, _) = generate(&cfg).unwrap();
        for s in &samples {
            let (class_id, color_id, relation) =
                decode_description(&s.description_code, cfg.classes, cfg.colors).unwrap();
            let matched = matches_description(&s.objects, class_id, color_id, relation);
            assert_eq!(matched, vec![s.target_object_id]);
        }
    }

    #[test]
    fn description_codes_round_trip() {
        for class_id in 0..4 {
            for relation in [
                Relation::None,
                Relation::Leftmost,
                Relation::Rightmost,
                Relation::NearestToClass(2),
            ] {
                let code = encode_description(class_id, 1, relation, 4, 3);
                assert_eq!(code.len(), 2 * 4 + 3 + RELATION_KINDS);
                let (c, col, r) = decode_description(&code, 4, 3).unwrap();
                assert_eq!((c, col, r), (class_id, 1, relation));
            }
        }
    }

    #[test]
    fn malformed_description_codes_are_rejected() {
        let mut code = encode_description(0, 0, Relation::None, 4, 3);
        code[1] = 1.0;
        assert!(decode_description(&code, 4, 3).is_err());
        let code = encode_description(0, 0, Relation::None, 4, 3);
        assert!(decode_description(&code[1..], 4, 3).is_err());
    }

    #[test]
    fn dataset_files_round_trip_bit_exactly() {
        let cfg = small_config();
        let (samples, _) = generate(&cfg).unwrap();
        let header = DatasetHeader::from_config(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_dataset(&path, &header, &samples).unwrap();
        let (h2, s2) = read_dataset(&path).unwrap();
        assert_eq!(header, h2);
        let path2 = dir.path().join("data2.jsonl");
        write_dataset(&path2, &h2, &s2).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2, "write/read/write must be byte-stable");
    }

    #[test]
    fn read_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let cfg = GenConfig {
            scenes: 2,
            seed: 5,
            ..GenConfig::default()
        };
        let (samples, _) = generate(&cfg).unwrap();
        let header = DatasetHeader::from_config(&cfg);
        write_dataset(&path, &header, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let broken = lines[1].replace("\"target_object_id\"", "\"target_objekt_id\"");
        lines[1] = &broken;
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            SynthError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("target_object_id"), "message: {message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("versioned.jsonl");
        let cfg = GenConfig {
            scenes: 2,
            seed: 5,
            ..GenConfig::default()
        };
        let (samples, _) = generate(&cfg).unwrap();
        let mut header = DatasetHeader::from_config(&cfg);
        header.version = 99;
        write_dataset(&path, &header, &samples).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, SynthError::Parse { line: 1, .. }));
    }
}
