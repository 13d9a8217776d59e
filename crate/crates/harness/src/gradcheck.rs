//! Finite-difference verification of the assembled training loss.
//!
//! The composite objective is smooth in the parameters except where two
//! box corners coincide exactly, where the detection term has a kink.
//! Random scenes land on those breakpoints with probability zero, but a
//! near-tie within the difference step still poisons the numeric
//! derivative, so check batches are screened to keep every gradient-
//! carrying box comfortably away from a breakpoint.

use crate::config::RunConfig;
use crate::model::{batch_step, forward_sample, prepare_samples, ModelSpecs, PreparedSample};
use crate::synthworld::{DatasetHeader, SceneSample};
use crate::HarnessError;
use groundkit_core::diffkit::{gradcheck, DiffError, GradcheckConfig, GradcheckReport, ParamStore};
use groundkit_core::Aabb3d;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Minimum distance every corner pair and axis overlap must keep from
/// zero for a box pair to count as breakpoint-free.
pub const TIE_MARGIN: f64 = 1e-3;

fn corners(b: &Aabb3d) -> ([f64; 3], [f64; 3]) {
    let c = b.center();
    let s = b.size();
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        lo[a] = c[a] - s[a] / 2.0;
        hi[a] = c[a] + s[a] / 2.0;
    }
    (lo, hi)
}

/// True when `pred` vs `gt` sits away from every min/max breakpoint of
/// the intersection and enclosing-box expressions.
pub fn tie_free_pair(pred: &Aabb3d, gt: &Aabb3d, margin: f64) -> bool {
    let (plo, phi) = corners(pred);
    let (glo, ghi) = corners(gt);
    for a in 0..3 {
        let gaps = [
            plo[a] - glo[a],
            phi[a] - ghi[a],
            plo[a] - ghi[a],
            phi[a] - glo[a],
        ];
        if gaps.iter().any(|g| g.abs() <= margin) {
            return false;
        }
        let overlap = phi[a].min(ghi[a]) - plo[a].max(glo[a]);
        if overlap.abs() <= margin {
            return false;
        }
    }
    true
}

/// A sample is safe for differencing when every proposal that carries
/// detection weight refines to a box clear of breakpoints against the
/// ground truth.
fn sample_is_tie_free(
    store: &ParamStore<f64>,
    specs: &ModelSpecs,
    cfg: &RunConfig,
    sample: &PreparedSample,
) -> Result<bool, HarnessError> {
    let f = forward_sample(store, specs, cfg, sample)?;
    for (p, &w) in sample.fr.weights.iter().enumerate() {
        if w > 0.0 && !tie_free_pair(&f.refined[p], &sample.gt, TIE_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks the analytic gradients of the full pre-training objective on a
/// screened batch drawn from `samples`. `corrupt` injects a deliberate
/// gradient error as a negative control; the check must then fail.
pub fn composite_gradcheck(
    cfg: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
    model_seed: u64,
    batch_limit: usize,
    corrupt: bool,
    gc: &GradcheckConfig<f64>,
) -> Result<GradcheckReport<f64>, HarnessError> {
    cfg.validate()?;
    let prepared = prepare_samples(samples, header, cfg)?;
    let specs = ModelSpecs::new(cfg, header.colors);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
    specs.init(&mut store, &mut rng)?;

    let mut batch: Vec<&PreparedSample> = Vec::new();
    for s in &prepared {
        if batch.len() >= batch_limit {
            break;
        }
        if sample_is_tie_free(&store, &specs, cfg, s)? {
            batch.push(s);
        }
    }
    if batch.is_empty() {
        return Err(HarnessError::Data(
            "no breakpoint-free samples available for gradient checking".into(),
        ));
    }

    let corrupt_target = store.names().next().map(str::to_string);
    let report = gradcheck(
        |st: &mut ParamStore<f64>| {
            let total = batch_step(st, &specs, cfg, &batch)
                .map_err(|e| DiffError::EvalFailed(e.to_string()))?
                .total;
            if corrupt {
                let name = corrupt_target.as_deref().expect("model has parameters");
                let len = st.value(name)?.len();
                let mut bump = vec![0.0; len];
                bump[0] = 0.5;
                st.accumulate_grad(name, &bump)?;
            }
            Ok(total)
        },
        &mut store,
        gc,
    )?;
    Ok(report)
}
