//! Release gate: one test per acceptance criterion. Each test prints a
//! single `ACCEPTANCE criterion N: PASS (...)` line on success (visible
//! with `--nocapture`); a failure panics with a matching FAIL message.
//! The tests share a lock so the per-criterion wall-clock budgets are
//! measured one criterion at a time.

use groundkit_core::contrastive::{
    occ_loss, osc_loss, EmbeddingSet, SimilarityConfig, SimilarityKind,
};
use groundkit_core::diffkit::{GradcheckConfig, MlpSpec, Nonlinearity};
use groundkit_core::filter::{FilterConfig, FilterResult};
use groundkit_core::geom::{diou_grad, diou_loss, iou, iou_oracle, Aabb3};
use groundkit_core::metrics::{
    acc_at_k, em_at_k, m_at_k_iou, GatedScore, GroundingOutcome, SplitTag,
};
use groundkit_core::objectives::cross_entropy;
use groundkit_harness::ablate::run_ablation;
use groundkit_harness::config::RunConfig;
use groundkit_harness::gradcheck::{composite_gradcheck, tie_free_pair};
use groundkit_harness::sweep::{run_delta_sweep, write_sweep_csv};
use groundkit_harness::synthworld::{generate, read_dataset, write_dataset, DatasetHeader, GenConfig};
use groundkit_harness::train::{load_checkpoint, save_checkpoint, train};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn pass(criterion: usize, detail: String) {
    println!("ACCEPTANCE criterion {criterion}: PASS ({detail})");
}

/// Relative error convention shared by every differencing check here.
fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

const FD_H: f64 = 1e-5;

/// A randomly drawn configuration is discarded, not judged, when any
/// coordinate has both the analytic and the numeric derivative below
/// this floor: the central difference of an O(1) loss at h = 1e-5
/// carries roundoff noise around 1e-11, so such coordinates cannot be
/// resolved to 1e-5 relative. A wrong gradient that should be large
/// still fails, because the numeric side alone keeps the pair above the
/// floor.
const DEGENERATE_FLOOR: f64 = 1e-4;

struct FdProbe {
    /// (analytic, numeric) per checked coordinate.
    pairs: Vec<(f64, f64)>,
}

impl FdProbe {
    fn degenerate(&self) -> bool {
        self.pairs
            .iter()
            .any(|&(a, n)| a.abs().max(n.abs()) < DEGENERATE_FLOOR)
    }

    fn worst(&self) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for &(a, n) in &self.pairs {
            let err = fd_rel_err(a, n);
            if err >= out.2 {
                out = (a, n, err);
            }
        }
        out
    }
}

fn random_box(rng: &mut ChaCha8Rng, center_span: f64, size_lo: f64, size_hi: f64) -> Aabb3<f64> {
    let c = [
        rng.gen_range(-center_span..center_span),
        rng.gen_range(-center_span..center_span),
        rng.gen_range(-center_span..center_span),
    ];
    let s = [
        rng.gen_range(size_lo..size_hi),
        rng.gen_range(size_lo..size_hi),
        rng.gen_range(size_lo..size_hi),
    ];
    Aabb3::new(c, s).expect("sampled sizes are positive")
}

#[test]
fn criterion_1_closed_form_iou_matches_a_sampling_oracle() {
    let _guard = serial();
    let start = Instant::now();

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_dev = 0.0f64;
    for pair in 0..100u64 {
        let a = random_box(&mut rng, 0.8, 0.4, 1.6);
        let b = random_box(&mut rng, 0.8, 0.4, 1.6);
        let closed = iou(&a, &b);
        let sampled = iou_oracle(&a, &b, 1_000_000, 9_000 + pair).expect("oracle runs");
        let dev = (closed - sampled).abs();
        assert!(
            dev <= 0.01,
            "ACCEPTANCE criterion 1: FAIL (pair {pair}: closed form {closed} vs oracle {sampled})"
        );
        max_dev = max_dev.max(dev);
    }

    let own = Aabb3::new([0.3, -0.2, 0.5], [1.0, 0.7, 0.4]).unwrap();
    assert_eq!(
        iou(&own, &own),
        1.0,
        "ACCEPTANCE criterion 1: FAIL (a box against itself must score exactly 1)"
    );
    let unit: Aabb3<f64> = Aabb3::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
    let far = Aabb3::new([5.0, 5.0, 5.0], [1.0, 1.0, 1.0]).unwrap();
    assert_eq!(
        iou(&unit, &far),
        0.0,
        "ACCEPTANCE criterion 1: FAIL (disjoint boxes must score exactly 0)"
    );
    let shifted = Aabb3::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
    let half = iou(&unit, &shifted);
    assert!(
        (half - 1.0 / 3.0).abs() <= 1e-12,
        "ACCEPTANCE criterion 1: FAIL (half-shifted unit cubes scored {half}, want 1/3)"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "ACCEPTANCE criterion 1: FAIL (took {elapsed:?}, budget 30s)"
    );
    pass(
        1,
        format!(
            "100 random pairs within 0.01 of a 1e6-sample oracle, max deviation {max_dev:.2e}; \
             identity, disjoint, and half-overlap cases exact; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Random embeddings with norms bounded away from zero so the cosine
/// score stays smooth under perturbation.
fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut e: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 0.5 {
        e[0] += 1.5;
    }
    e
}

/// Partition over `n` proposals with the first `positives` indices (after
/// a shuffle) above the threshold and the rest below it.
fn random_partition(
    rng: &mut ChaCha8Rng,
    n: usize,
    positives: usize,
    cfg: &FilterConfig<f64>,
) -> FilterResult<f64> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut ious = vec![0.0; n];
    for (rank, &i) in indices.iter().enumerate() {
        ious[i] = if rank < positives {
            rng.gen_range(cfg.delta + 0.05..0.98)
        } else {
            rng.gen_range(0.0..cfg.delta - 0.05)
        };
    }
    FilterResult::from_ious(ious, cfg).expect("crafted ious are valid")
}

fn random_similarity(rng: &mut ChaCha8Rng) -> SimilarityConfig<f64> {
    SimilarityConfig {
        kind: if rng.gen_bool(0.5) {
            SimilarityKind::Dot
        } else {
            SimilarityKind::Cosine
        },
        temperature: [0.6, 1.0, 1.7][rng.gen_range(0..3)],
    }
}

#[test]
fn criterion_2_analytic_gradients_match_central_differences() {
    let _guard = serial();
    let start = Instant::now();
    let tol = 1e-5;

    // One term at a time: draw a random configuration, difference every
    // coordinate, and either judge it against the tolerance or discard
    // the draw as unresolvable (see DEGENERATE_FLOOR). Each term must
    // accumulate 100 judged configurations.
    let judge = |term: &str, probes: &mut dyn FnMut(&mut ChaCha8Rng) -> FdProbe, seed: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut judged = 0;
        let mut attempts = 0;
        let mut max_err = 0.0f64;
        while judged < 100 {
            attempts += 1;
            assert!(
                attempts <= 2000,
                "ACCEPTANCE criterion 2: FAIL ({term}: too many degenerate draws)"
            );
            let probe = probes(&mut rng);
            if probe.degenerate() {
                continue;
            }
            let (analytic, numeric, err) = probe.worst();
            assert!(
                err <= tol,
                "ACCEPTANCE criterion 2: FAIL ({term} config {judged}: analytic {analytic} vs \
                 numeric {numeric}, rel err {err:.2e})"
            );
            max_err = max_err.max(err);
            judged += 1;
        }
        max_err
    };

    // Detection regression gradient, screened away from min/max
    // breakpoints where the subgradient convention makes differencing
    // first-order inaccurate.
    let diou_max = judge(
        "diou",
        &mut |rng| {
            let (pred, gt) = loop {
                let pred = random_box(rng, 0.5, 0.3, 1.2);
                let gt = random_box(rng, 0.5, 0.3, 1.2);
                if tie_free_pair(&pred, &gt, 1e-3) {
                    break (pred, gt);
                }
            };
            let g = diou_grad(&pred, &gt);
            let analytic = [
                g.d_center[0],
                g.d_center[1],
                g.d_center[2],
                g.d_size[0],
                g.d_size[1],
                g.d_size[2],
            ];
            let mut p = [0.0f64; 6];
            p[..3].copy_from_slice(&pred.center());
            p[3..].copy_from_slice(&pred.size());
            let eval = |params: &[f64; 6]| {
                let b = Aabb3::new(
                    [params[0], params[1], params[2]],
                    [params[3], params[4], params[5]],
                )
                .expect("perturbed size stays positive");
                diou_loss(&b, &gt).loss
            };
            let mut pairs = Vec::with_capacity(6);
            for coord in 0..6 {
                let mut plus = p;
                plus[coord] += FD_H;
                let mut minus = p;
                minus[coord] -= FD_H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                pairs.push((analytic[coord], numeric));
            }
            FdProbe { pairs }
        },
        202,
    );

    // Cross-modal contrastive term: difference every proposal and text
    // coordinate of the batch.
    let occ_max = judge(
        "occ",
        &mut |rng| {
            let sim = random_similarity(rng);
            let fcfg = FilterConfig::new(
                [0.2, 0.3, 0.4][rng.gen_range(0..3)],
                [0.0, 0.1, 0.3][rng.gen_range(0..3)],
            )
            .unwrap();
            let batch_len = rng.gen_range(1..=3);
            let dim = rng.gen_range(3..=6);
            let mut batch: Vec<EmbeddingSet<f64>> = (0..batch_len)
                .map(|_| {
                    let n = rng.gen_range(3..=5);
                    let positives = rng.gen_range(1..=2.min(n));
                    EmbeddingSet {
                        proposal_embeddings: (0..n).map(|_| random_embedding(rng, dim)).collect(),
                        text_embedding: random_embedding(rng, dim),
                        partition: random_partition(rng, n, positives, &fcfg),
                    }
                })
                .collect();
            let out = occ_loss(&batch, &sim).expect("batch has positives");
            let mut pairs = Vec::new();
            for s in 0..batch_len {
                let n = batch[s].proposal_embeddings.len();
                for p in 0..=n {
                    for i in 0..dim {
                        let analytic = if p < n {
                            out.sample_grads[s].d_proposals[p][i]
                        } else {
                            out.sample_grads[s].d_text[i]
                        };
                        let slot = |b: &mut Vec<EmbeddingSet<f64>>, v: f64| {
                            if p < n {
                                b[s].proposal_embeddings[p][i] += v;
                            } else {
                                b[s].text_embedding[i] += v;
                            }
                        };
                        slot(&mut batch, FD_H);
                        let up = occ_loss(&batch, &sim).unwrap().loss;
                        slot(&mut batch, -2.0 * FD_H);
                        let down = occ_loss(&batch, &sim).unwrap().loss;
                        slot(&mut batch, FD_H);
                        let numeric = (up - down) / (2.0 * FD_H);
                        pairs.push((analytic, numeric));
                    }
                }
            }
            FdProbe { pairs }
        },
        303,
    );

    // Self-contrastive term: needs two positives per sample to be active.
    let osc_max = judge(
        "osc",
        &mut |rng| {
            let sim = random_similarity(rng);
            let fcfg = FilterConfig::new(
                [0.2, 0.3, 0.4][rng.gen_range(0..3)],
                [0.0, 0.1, 0.3][rng.gen_range(0..3)],
            )
            .unwrap();
            let batch_len = rng.gen_range(1..=2);
            let dim = rng.gen_range(3..=6);
            let mut batch: Vec<EmbeddingSet<f64>> = (0..batch_len)
                .map(|_| {
                    let n = rng.gen_range(3..=5);
                    let positives = rng.gen_range(2..=3.min(n));
                    EmbeddingSet {
                        proposal_embeddings: (0..n).map(|_| random_embedding(rng, dim)).collect(),
                        text_embedding: random_embedding(rng, dim),
                        partition: random_partition(rng, n, positives, &fcfg),
                    }
                })
                .collect();
            let out = osc_loss(&batch, &sim).expect("batch has pair positives");
            let mut pairs = Vec::new();
            for s in 0..batch_len {
                let n = batch[s].proposal_embeddings.len();
                for p in 0..n {
                    for i in 0..dim {
                        let analytic = out.sample_grads[s].d_proposals[p][i];
                        batch[s].proposal_embeddings[p][i] += FD_H;
                        let up = osc_loss(&batch, &sim).unwrap().loss;
                        batch[s].proposal_embeddings[p][i] -= 2.0 * FD_H;
                        let down = osc_loss(&batch, &sim).unwrap().loss;
                        batch[s].proposal_embeddings[p][i] += FD_H;
                        let numeric = (up - down) / (2.0 * FD_H);
                        pairs.push((analytic, numeric));
                    }
                }
            }
            FdProbe { pairs }
        },
        404,
    );

    // Cross-entropy against both one-hot and soft targets.
    let mut soft = false;
    let ce_max = judge(
        "cross-entropy",
        &mut |rng| {
            soft = !soft;
            let n = rng.gen_range(3..=8);
            let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target: Vec<f64> = if soft {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|v| v / total).collect()
            } else {
                let hot = rng.gen_range(0..n);
                (0..n).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
            };
            let out = cross_entropy(&scores, &target).unwrap();
            let mut pairs = Vec::with_capacity(n);
            for coord in 0..n {
                scores[coord] += FD_H;
                let up = cross_entropy(&scores, &target).unwrap().loss;
                scores[coord] -= 2.0 * FD_H;
                let down = cross_entropy(&scores, &target).unwrap().loss;
                scores[coord] += FD_H;
                let numeric = (up - down) / (2.0 * FD_H);
                pairs.push((out.d_scores[coord], numeric));
            }
            FdProbe { pairs }
        },
        505,
    );

    // Full composite objective through the whole model, on small
    // architectures so differencing every parameter stays cheap.
    let gc = GradcheckConfig { h: FD_H, tol: 1e-4 };
    let mut checked = 0u64;
    let mut attempt = 0u64;
    let mut max_err = 0.0f64;
    while checked < 100 {
        assert!(
            attempt < 140,
            "ACCEPTANCE criterion 2: FAIL (could not assemble 100 composite configs)"
        );
        let gen = GenConfig {
            scenes: 2,
            objects_per_scene: 4,
            jitters_per_object: 2,
            clutter_per_scene: 3,
            seed: 9_000 + attempt,
            ..GenConfig::default()
        };
        attempt += 1;
        let Ok((samples, _)) = generate(&gen) else {
            continue;
        };
        let header = DatasetHeader::from_config(&gen);
        let mut cfg = RunConfig::default();
        cfg.proposal_encoder = MlpSpec::new(vec![20, 10, 6], Nonlinearity::Tanh, true);
        cfg.text_encoder = MlpSpec::new(vec![26, 10, 6], Nonlinearity::Tanh, true);
        cfg.fusion_head = MlpSpec::new(vec![18, 1], Nonlinearity::Tanh, false);
        cfg.similarity = SimilarityConfig {
            kind: if checked % 2 == 0 {
                SimilarityKind::Dot
            } else {
                SimilarityKind::Cosine
            },
            temperature: [0.7, 1.0, 1.3][(checked % 3) as usize],
        };
        cfg.filter = FilterConfig::new(
            [0.2, 0.25, 0.3, 0.35][(checked % 4) as usize],
            [0.0, 0.1, 0.2][((checked / 2) % 3) as usize],
        )
        .unwrap();
        let report = match composite_gradcheck(&cfg, &header, &samples, 300 + attempt, 2, false, &gc)
        {
            Ok(r) => r,
            // No breakpoint-free batch under this seed; draw another.
            Err(_) => continue,
        };
        if !report.pass {
            // Same resolvability question as the per-term loops, at the
            // composite tolerance: a coordinate whose derivative is tiny
            // on both sides is differencing noise, not a wrong gradient.
            let noise_only = report
                .entries
                .iter()
                .filter(|e| e.rel_err > report.tol)
                .all(|e| e.analytic.abs().max(e.numeric.abs()) < 1e-6);
            if noise_only {
                continue;
            }
            let worst = report
                .entries
                .iter()
                .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
                .unwrap();
            panic!(
                "ACCEPTANCE criterion 2: FAIL (composite config {checked}: {}[{}] analytic {} \
                 vs numeric {}, rel err {:.2e}, tol 1e-4)",
                worst.name, worst.coord, worst.analytic, worst.numeric, worst.rel_err
            );
        }
        max_err = max_err.max(report.max_rel_err);
        checked += 1;
    }

    // Negative control: an injected gradient error must be caught.
    let gen = GenConfig {
        scenes: 2,
        objects_per_scene: 4,
        jitters_per_object: 2,
        clutter_per_scene: 3,
        seed: 9_000,
        ..GenConfig::default()
    };
    let (samples, _) = generate(&gen).unwrap();
    let header = DatasetHeader::from_config(&gen);
    let mut cfg = RunConfig::default();
    cfg.proposal_encoder = MlpSpec::new(vec![20, 10, 6], Nonlinearity::Tanh, true);
    cfg.text_encoder = MlpSpec::new(vec![26, 10, 6], Nonlinearity::Tanh, true);
    cfg.fusion_head = MlpSpec::new(vec![18, 1], Nonlinearity::Tanh, false);
    let corrupted = composite_gradcheck(&cfg, &header, &samples, 301, 2, true, &gc).unwrap();
    assert!(
        !corrupted.pass,
        "ACCEPTANCE criterion 2: FAIL (corrupted gradients slipped through the check)"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "ACCEPTANCE criterion 2: FAIL (took {elapsed:?}, budget 120s)"
    );
    pass(
        2,
        format!(
            "100 configs per term at rel tol 1e-5 (max rel err: diou {diou_max:.1e}, \
             occ {occ_max:.1e}, osc {osc_max:.1e}, ce {ce_max:.1e}); 100 composite configs at \
             1e-4 (max {max_err:.1e}) plus a caught corruption; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn ref_similarity(u: &[f64], v: &[f64], cfg: &SimilarityConfig<f64>) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    match cfg.kind {
        SimilarityKind::Dot => dot / cfg.temperature,
        SimilarityKind::Cosine => {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * nv * cfg.temperature)
        }
    }
}

fn ref_log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn criterion_3_single_positive_contrastive_reduces_to_the_pairwise_form() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let fcfg = FilterConfig::new(0.25, 0.1).unwrap();
    let mut max_gap = 0.0f64;
    for case in 0..1000 {
        let n = rng.gen_range(2..=7);
        let dim = rng.gen_range(2..=7);
        let sim = random_similarity(&mut rng);
        let positive = rng.gen_range(0..n);
        let ious: Vec<f64> = (0..n).map(|i| if i == positive { 0.9 } else { 0.01 }).collect();
        let set = EmbeddingSet {
            proposal_embeddings: (0..n).map(|_| random_embedding(&mut rng, dim)).collect(),
            text_embedding: random_embedding(&mut rng, dim),
            partition: FilterResult::from_ious(ious, &fcfg).unwrap(),
        };

        // Independent restatement: with one positive, each direction is
        // the plain softmax cross-entropy of the positive against the
        // pool, and the two directions average with weight 1/2.
        let forward: Vec<f64> = set
            .proposal_embeddings
            .iter()
            .map(|e| ref_similarity(e, &set.text_embedding, &sim))
            .collect();
        let backward: Vec<f64> = set
            .proposal_embeddings
            .iter()
            .map(|e| ref_similarity(&set.text_embedding, e, &sim))
            .collect();
        let reference = 0.5 * (ref_log_sum_exp(&forward) - forward[positive])
            + 0.5 * (ref_log_sum_exp(&backward) - backward[positive]);

        let core = occ_loss(&[set], &sim).unwrap().loss;
        let gap = (core - reference).abs();
        assert!(
            gap <= 1e-12,
            "ACCEPTANCE criterion 3: FAIL (case {case}: core {core} vs reference {reference}, \
             gap {gap:.2e})"
        );
        max_gap = max_gap.max(gap);
    }
    pass(
        3,
        format!("1000 single-positive instances match the pairwise reference, max gap {max_gap:.1e}"),
    );
}

#[test]
fn criterion_4_filter_weights_form_the_stated_distribution() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut one_hot_cases = 0usize;
    let mut spread_cases = 0usize;
    for case in 0..1000 {
        let n = rng.gen_range(1..=16);
        let delta = rng.gen_range(0.05..0.95);
        let epsilon = if case % 5 == 0 { 0.0 } else { rng.gen_range(0.0..0.5) };
        let cfg = FilterConfig::new(delta, epsilon).unwrap();
        let mut ious: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        if case % 7 == 0 {
            // Force an empty positive set.
            for v in &mut ious {
                *v *= 0.9 * delta;
            }
        }
        let fr = FilterResult::from_ious(ious.clone(), &cfg).unwrap();

        let best = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(
            ious[fr.argmax_index], best,
            "ACCEPTANCE criterion 4: FAIL (case {case}: argmax does not maximize)"
        );
        assert!(
            fr.weights.iter().all(|&w| w >= 0.0),
            "ACCEPTANCE criterion 4: FAIL (case {case}: negative weight)"
        );
        let total: f64 = fr.weights.iter().sum();
        assert!(
            (total - 1.0).abs() <= 1e-12,
            "ACCEPTANCE criterion 4: FAIL (case {case}: weights sum to {total})"
        );

        if epsilon == 0.0 || fr.k_count == 0 {
            one_hot_cases += 1;
            for (i, &w) in fr.weights.iter().enumerate() {
                let want = if i == fr.argmax_index { 1.0 } else { 0.0 };
                assert_eq!(
                    w, want,
                    "ACCEPTANCE criterion 4: FAIL (case {case}: expected one-hot, weight {i} = {w})"
                );
            }
        } else {
            spread_cases += 1;
            assert!(
                (fr.weights[fr.argmax_index] - (1.0 - epsilon)).abs() <= 1e-12,
                "ACCEPTANCE criterion 4: FAIL (case {case}: argmax weight {} vs 1 - epsilon {})",
                fr.weights[fr.argmax_index],
                1.0 - epsilon
            );
            let share = epsilon / fr.k_count as f64;
            for &i in &fr.pos_indices {
                if i != fr.argmax_index {
                    assert!(
                        (fr.weights[i] - share).abs() <= 1e-12,
                        "ACCEPTANCE criterion 4: FAIL (case {case}: positive {i} weight {} vs \
                         share {share})",
                        fr.weights[i]
                    );
                }
            }
            for &i in &fr.neg_indices {
                assert_eq!(
                    fr.weights[i], 0.0,
                    "ACCEPTANCE criterion 4: FAIL (case {case}: negative {i} carries weight)"
                );
            }
        }
    }
    pass(
        4,
        format!(
            "1000 inputs: nonnegative weights summing to 1, {spread_cases} spread cases put \
             1 - epsilon on the argmax, {one_hot_cases} collapse to one-hot"
        ),
    );
}

#[test]
fn criterion_5_gated_metrics_agree_and_move_the_right_way() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let thresholds: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    for set in 0..100 {
        let n = rng.gen_range(1..=40);
        let outcomes: Vec<GroundingOutcome<f64>> = (0..n)
            .map(|_| GroundingOutcome {
                predicted_box: random_box(&mut rng, 0.4, 0.3, 1.2),
                gt_box: random_box(&mut rng, 0.4, 0.3, 1.2),
                split_tag: if rng.gen_bool(0.5) {
                    SplitTag::Unique
                } else {
                    SplitTag::Multiple
                },
            })
            .collect();
        let gated: Vec<GatedScore<f64>> = outcomes
            .iter()
            .map(|o| GatedScore {
                metric_value: 1.0,
                iou: iou(&o.predicted_box, &o.gt_box),
            })
            .collect();

        let mut last_acc = f64::INFINITY;
        let mut last_gated = f64::INFINITY;
        for &k in &thresholds {
            let acc = acc_at_k(&outcomes, k).unwrap().overall;
            let m = m_at_k_iou(&gated, k).unwrap();
            assert!(
                (acc - m).abs() <= 1e-12,
                "ACCEPTANCE criterion 5: FAIL (set {set} k {k}: gated mean {m} vs accuracy {acc})"
            );
            assert!(
                acc <= last_acc && m <= last_gated,
                "ACCEPTANCE criterion 5: FAIL (set {set}: metric rose when k tightened to {k})"
            );
            last_acc = acc;
            last_gated = m;
        }

        let answers = 6;
        let ranked: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut order: Vec<usize> = (0..answers).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        let gt: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let count = rng.gen_range(1..=2);
                (0..count).map(|_| rng.gen_range(0..answers)).collect()
            })
            .collect();
        let mut last_em = 0.0;
        for k in 1..=answers {
            let em = em_at_k(&ranked, &gt, k).unwrap();
            assert!(
                em >= last_em,
                "ACCEPTANCE criterion 5: FAIL (set {set}: exact-match rate fell at depth {k})"
            );
            last_em = em;
        }
        assert_eq!(
            last_em, 1.0,
            "ACCEPTANCE criterion 5: FAIL (set {set}: full-depth ranking must always hit)"
        );
    }
    pass(
        5,
        "100 random sets: unit-score gated mean equals accuracy at every threshold, both \
         nonincreasing in the threshold, exact match nondecreasing in depth"
            .to_string(),
    );
}

#[test]
fn criterion_6_auxiliary_objectives_beat_the_bare_model() {
    let _guard = serial();
    let start = Instant::now();
    let gen = GenConfig::default();
    let (samples, _) = generate(&gen).expect("reference dataset generates");
    let header = DatasetHeader::from_config(&gen);
    let cfg = RunConfig::default();
    let table = run_ablation(&cfg, &header, &samples, &[1, 2, 3, 4, 5]);

    let median_for = |name: &str| -> f64 {
        let row = table
            .rows
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("ACCEPTANCE criterion 6: FAIL (missing row {name})"));
        assert!(
            row.failures.is_empty(),
            "ACCEPTANCE criterion 6: FAIL (row {name} had failures: {:?})",
            row.failures
        );
        row.metrics
            .get("acc@0.5")
            .unwrap_or_else(|| panic!("ACCEPTANCE criterion 6: FAIL (row {name} lacks acc@0.5)"))
            .median
    };
    let none = median_for("none");
    let oid = median_for("oid");
    let all = median_for("all");
    assert!(
        all > none,
        "ACCEPTANCE criterion 6: FAIL (all modules {all} not above none {none} at acc@0.5)"
    );
    assert!(
        oid > none,
        "ACCEPTANCE criterion 6: FAIL (detection term alone {oid} not above none {none} at acc@0.5)"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed < Duration::from_secs(600),
        "ACCEPTANCE criterion 6: FAIL (grid took {elapsed:?}, budget 600s)"
    );
    pass(
        6,
        format!(
            "median acc@0.5 over seeds 1..5: none {none:.3}, oid alone {oid:.3}, all {all:.3}; \
             25-cell grid in {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_threshold_sweep_completes_with_a_monotonicity_report() {
    let _guard = serial();
    let gen = GenConfig::default();
    let (samples, _) = generate(&gen).expect("reference dataset generates");
    let header = DatasetHeader::from_config(&gen);
    let cfg = RunConfig::default();
    let report = run_delta_sweep(&cfg, &header, &samples, &[0.1, 0.25, 0.5, 0.75], &[1, 2]);

    assert_eq!(
        report.deltas,
        vec![0.1, 0.25, 0.5, 0.75],
        "ACCEPTANCE criterion 7: FAIL (sweep did not cover the requested thresholds)"
    );
    for point in report.full.iter().chain(report.oid_only.iter()) {
        assert!(
            point.failures.is_empty(),
            "ACCEPTANCE criterion 7: FAIL (threshold {} had failures: {:?})",
            point.delta,
            point.failures
        );
        assert!(
            point.acc_at_05.median.is_finite() && point.acc_at_025.median.is_finite(),
            "ACCEPTANCE criterion 7: FAIL (threshold {} produced no numbers)",
            point.delta
        );
    }
    let mono = report
        .monotonicity
        .as_ref()
        .expect("ACCEPTANCE criterion 7: FAIL (no monotonicity report emitted)");
    assert!(
        mono.value_at_highest.is_finite() && mono.best_below.is_finite(),
        "ACCEPTANCE criterion 7: FAIL (monotonicity report is empty of numbers)"
    );
    if !mono.holds {
        // A violation is reported, not fatal.
        println!("monotonicity violation logged: {}", mono.note);
    }

    let dir = tempfile::tempdir().unwrap();
    let files = write_sweep_csv(dir.path(), &report).unwrap();
    assert_eq!(
        files.len(),
        4,
        "ACCEPTANCE criterion 7: FAIL (expected 4 summary files, got {})",
        files.len()
    );

    pass(
        7,
        format!(
            "4 thresholds x 2 variants x 2 seeds trained; monotonicity {}: {}",
            if mono.holds { "holds" } else { "violated (logged)" },
            mono.note
        ),
    );
}

#[test]
fn criterion_8_reruns_are_bit_identical_and_files_round_trip() {
    let _guard = serial();
    let gen = GenConfig {
        scenes: 20,
        seed: 42,
        ..GenConfig::default()
    };
    let (first, _) = generate(&gen).unwrap();
    let (second, _) = generate(&gen).unwrap();
    let header = DatasetHeader::from_config(&gen);

    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.jsonl");
    let path_b = dir.path().join("b.jsonl");
    write_dataset(&path_a, &header, &first).unwrap();
    write_dataset(&path_b, &header, &second).unwrap();
    let bytes_a = std::fs::read(&path_a).unwrap();
    assert_eq!(
        bytes_a,
        std::fs::read(&path_b).unwrap(),
        "ACCEPTANCE criterion 8: FAIL (same-seed datasets differ)"
    );

    let (header_back, samples_back) = read_dataset(&path_a).unwrap();
    let path_c = dir.path().join("c.jsonl");
    write_dataset(&path_c, &header_back, &samples_back).unwrap();
    assert_eq!(
        bytes_a,
        std::fs::read(&path_c).unwrap(),
        "ACCEPTANCE criterion 8: FAIL (dataset read/write round trip is lossy)"
    );

    let mut cfg = RunConfig::default();
    cfg.optimizer.epochs = 8;
    cfg.qa.epochs = 4;
    cfg.seed = 11;
    let run_a = train(&cfg, &header, &first, None).unwrap();
    let run_b = train(&cfg, &header, &first, None).unwrap();
    assert_eq!(
        run_a.log.comparable(),
        run_b.log.comparable(),
        "ACCEPTANCE criterion 8: FAIL (same-seed training logs differ beyond the wall clock)"
    );
    assert_eq!(
        run_a.log.comparable().to_json(),
        run_b.log.comparable().to_json(),
        "ACCEPTANCE criterion 8: FAIL (serialized logs differ)"
    );
    assert_eq!(
        run_a.log.final_metrics.to_json(),
        run_b.log.final_metrics.to_json(),
        "ACCEPTANCE criterion 8: FAIL (same-seed metric reports differ)"
    );

    let ckpt_a = dir.path().join("a.ckpt.json");
    let ckpt_b = dir.path().join("b.ckpt.json");
    save_checkpoint(&ckpt_a, &run_a.store, &cfg).unwrap();
    save_checkpoint(&ckpt_b, &run_b.store, &cfg).unwrap();
    let ckpt_bytes = std::fs::read(&ckpt_a).unwrap();
    assert_eq!(
        ckpt_bytes,
        std::fs::read(&ckpt_b).unwrap(),
        "ACCEPTANCE criterion 8: FAIL (same-seed checkpoints differ)"
    );

    let (store_back, cfg_back) = load_checkpoint(&ckpt_a).unwrap();
    let ckpt_c = dir.path().join("c.ckpt.json");
    save_checkpoint(&ckpt_c, &store_back, &cfg_back).unwrap();
    assert_eq!(
        ckpt_bytes,
        std::fs::read(&ckpt_c).unwrap(),
        "ACCEPTANCE criterion 8: FAIL (checkpoint load/save round trip is lossy)"
    );

    // Guard against the trivial way to satisfy all of the above.
    let mut other = cfg.clone();
    other.seed = 12;
    let run_c = train(&other, &header, &first, None).unwrap();
    assert_ne!(
        run_a.log.comparable().to_json(),
        run_c.log.comparable().to_json(),
        "ACCEPTANCE criterion 8: FAIL (changing the seed changed nothing)"
    );

    pass(
        8,
        "datasets, checkpoints, logs (modulo wall clock), and reports are bit-identical across \
         same-seed reruns; dataset and checkpoint files round-trip byte for byte"
            .to_string(),
    );
}
