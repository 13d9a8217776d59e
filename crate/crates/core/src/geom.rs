//! Axis-aligned 3D box geometry: volume, IoU, enclosing boxes, the
//! distance-IoU loss with analytic gradients, and a Monte-Carlo IoU oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("box size must be strictly positive on axis {axis}, got {size}")]
    NonPositiveSize { axis: usize, size: f64 },
    #[error("box has a non-finite coordinate")]
    NonFinite,
    #[error("sampling oracle needs at least one sample")]
    NoSamples,
}

/// Axis-aligned box stored as center and full extent per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb3<T> {
    center: [T; 3],
    size: [T; 3],
}

impl<T: Real> Aabb3<T> {
    /// Builds a box; every coordinate must be finite and every size
    /// component strictly positive.
    pub fn new(center: [T; 3], size: [T; 3]) -> Result<Self, GeomError> {
        for axis in 0..3 {
            if !center[axis].is_finite() || !size[axis].is_finite() {
                return Err(GeomError::NonFinite);
            }
            if size[axis] <= T::zero() {
                return Err(GeomError::NonPositiveSize {
                    axis,
                    size: size[axis].to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(Self { center, size })
    }

    /// Builds a box from opposite corners; `max` must exceed `min` on every axis.
    pub fn from_corners(min: [T; 3], max: [T; 3]) -> Result<Self, GeomError> {
        let mut center = [T::zero(); 3];
        let mut size = [T::zero(); 3];
        for axis in 0..3 {
            center[axis] = (min[axis] + max[axis]) * T::half();
            size[axis] = max[axis] - min[axis];
        }
        Self::new(center, size)
    }

    pub fn center(&self) -> [T; 3] {
        self.center
    }

    pub fn size(&self) -> [T; 3] {
        self.size
    }

    pub fn min_corner(&self) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for axis in 0..3 {
            out[axis] = self.center[axis] - self.size[axis] * T::half();
        }
        out
    }

    pub fn max_corner(&self) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for axis in 0..3 {
            out[axis] = self.center[axis] + self.size[axis] * T::half();
        }
        out
    }

    pub fn volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Closed-box membership test.
    pub fn contains_point(&self, point: [T; 3]) -> bool {
        let lo = self.min_corner();
        let hi = self.max_corner();
        (0..3).all(|axis| point[axis] >= lo[axis] && point[axis] <= hi[axis])
    }
}

/// Intersection-over-union of two boxes, clamped to [0, 1]. Boxes that only
/// touch on a face, edge, or corner intersect with measure zero and score 0.
///
/// All three measures (both volumes and the intersection) are computed
/// from corner differences so that identical boxes cancel exactly and
/// score IoU 1 with no rounding residue.
pub fn iou<T: Real>(a: &Aabb3<T>, b: &Aabb3<T>) -> T {
    let amin = a.min_corner();
    let amax = a.max_corner();
    let bmin = b.min_corner();
    let bmax = b.max_corner();
    let mut inter = T::one();
    let mut vol_a = T::one();
    let mut vol_b = T::one();
    for axis in 0..3 {
        let overlap = (amax[axis].min(bmax[axis]) - amin[axis].max(bmin[axis])).max(T::zero());
        inter = inter * overlap;
        vol_a = vol_a * (amax[axis] - amin[axis]);
        vol_b = vol_b * (bmax[axis] - bmin[axis]);
    }
    let union = vol_a + vol_b - inter;
    (inter / union).max(T::zero()).min(T::one())
}

/// Smallest box covering both inputs.
pub fn enclosing_box<T: Real>(a: &Aabb3<T>, b: &Aabb3<T>) -> Aabb3<T> {
    let amin = a.min_corner();
    let amax = a.max_corner();
    let bmin = b.min_corner();
    let bmax = b.max_corner();
    let mut lo = [T::zero(); 3];
    let mut hi = [T::zero(); 3];
    for axis in 0..3 {
        lo[axis] = amin[axis].min(bmin[axis]);
        hi[axis] = amax[axis].max(bmax[axis]);
    }
    Aabb3::from_corners(lo, hi).expect("cover of valid boxes is valid")
}

/// Distance-IoU loss value with its intermediate quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiouBreakdown<T> {
    pub loss: T,
    pub iou: T,
    /// Squared Euclidean distance between the two box centers.
    pub center_dist_sq: T,
    /// Squared diagonal of the enclosing box.
    pub enclosing_diag_sq: T,
}

/// Distance-IoU loss: `1 - IoU + rho^2 / c^2`, where `rho` is the center
/// distance and `c` the diagonal of the smallest enclosing box.
pub fn diou_loss<T: Real>(pred: &Aabb3<T>, gt: &Aabb3<T>) -> DiouBreakdown<T> {
    let overlap = iou(pred, gt);
    let pc = pred.center();
    let gc = gt.center();
    let mut center_dist_sq = T::zero();
    for axis in 0..3 {
        let d = pc[axis] - gc[axis];
        center_dist_sq += d * d;
    }
    let cover = enclosing_box(pred, gt);
    let ext = cover.size();
    let mut enclosing_diag_sq = T::zero();
    for axis in 0..3 {
        enclosing_diag_sq += ext[axis] * ext[axis];
    }
    DiouBreakdown {
        loss: T::one() - overlap + center_dist_sq / enclosing_diag_sq,
        iou: overlap,
        center_dist_sq,
        enclosing_diag_sq,
    }
}

/// Gradient of [`diou_loss`] with respect to the predicted box parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxGrad<T> {
    pub d_center: [T; 3],
    pub d_size: [T; 3],
}

impl<T: Real> BoxGrad<T> {
    pub fn zero() -> Self {
        Self {
            d_center: [T::zero(); 3],
            d_size: [T::zero(); 3],
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = Self::zero();
        for axis in 0..3 {
            out.d_center[axis] = self.d_center[axis] * factor;
            out.d_size[axis] = self.d_size[axis] * factor;
        }
        out
    }
}

// Branch derivative of min(x, c) with respect to x. Exact ties split the
// derivative between the two branches; this keeps the gradient zero at
// pred == gt (the loss has a symmetric kink there) and agrees with the
// one-sided derivatives everywhere else.
fn d_min<T: Real>(x: T, c: T) -> T {
    if x < c {
        T::one()
    } else if x > c {
        T::zero()
    } else {
        T::half()
    }
}

fn d_max<T: Real>(x: T, c: T) -> T {
    if x > c {
        T::one()
    } else if x < c {
        T::zero()
    } else {
        T::half()
    }
}

/// Analytic partial derivatives of [`diou_loss`] with respect to
/// `pred.center` and `pred.size`. Piecewise boundaries (touching faces,
/// equal corners) use the tie-splitting subgradient documented on the
/// branch helpers above.
pub fn diou_grad<T: Real>(pred: &Aabb3<T>, gt: &Aabb3<T>) -> BoxGrad<T> {
    let pmin = pred.min_corner();
    let pmax = pred.max_corner();
    let gmin = gt.min_corner();
    let gmax = gt.max_corner();

    // Per-axis overlap widths and their derivatives w.r.t. pred
    // parameters. Box widths are taken from corner differences, matching
    // `iou`, so the quotient-rule numerators cancel exactly at pred == gt.
    let mut w = [T::zero(); 3];
    let mut wp = [T::zero(); 3];
    let mut dw_dc = [T::zero(); 3];
    let mut dw_ds = [T::zero(); 3];
    let mut vol_gt = T::one();
    for axis in 0..3 {
        let hi = pmax[axis].min(gmax[axis]);
        let lo = pmin[axis].max(gmin[axis]);
        let raw = hi - lo;
        w[axis] = raw.max(T::zero());
        wp[axis] = pmax[axis] - pmin[axis];
        vol_gt = vol_gt * (gmax[axis] - gmin[axis]);
        let gate = if raw > T::zero() {
            T::one()
        } else if raw < T::zero() {
            T::zero()
        } else {
            T::half()
        };
        let d_hi = d_min(pmax[axis], gmax[axis]);
        let d_lo = d_max(pmin[axis], gmin[axis]);
        // pmax = c + s/2 and pmin = c - s/2.
        dw_dc[axis] = gate * (d_hi - d_lo);
        dw_ds[axis] = gate * (d_hi + d_lo) * T::half();
    }

    let inter = w[0] * w[1] * w[2];
    let vol_pred = wp[0] * wp[1] * wp[2];
    let union = vol_pred + vol_gt - inter;

    let pc = pred.center();
    let gc = gt.center();
    let mut rho_sq = T::zero();
    for axis in 0..3 {
        let d = pc[axis] - gc[axis];
        rho_sq += d * d;
    }
    let mut ext = [T::zero(); 3];
    let mut c_sq = T::zero();
    for axis in 0..3 {
        ext[axis] = pmax[axis].max(gmax[axis]) - pmin[axis].min(gmin[axis]);
        c_sq += ext[axis] * ext[axis];
    }

    let mut grad = BoxGrad::zero();
    for axis in 0..3 {
        let others = w[(axis + 1) % 3] * w[(axis + 2) % 3];
        let d_inter_dc = others * dw_dc[axis];
        let d_inter_ds = others * dw_ds[axis];
        let d_vol_ds = wp[(axis + 1) % 3] * wp[(axis + 2) % 3];

        // IoU term: d(inter/union), with d union = d vol_pred - d inter.
        let d_union_dc = -d_inter_dc;
        let d_union_ds = d_vol_ds - d_inter_ds;
        let usq = union * union;
        let d_iou_dc = (d_inter_dc * union - inter * d_union_dc) / usq;
        let d_iou_ds = (d_inter_ds * union - inter * d_union_ds) / usq;

        // Penalty term rho^2 / c^2.
        let d_rho_dc = T::two() * (pc[axis] - gc[axis]);
        let d_m_hi = d_max(pmax[axis], gmax[axis]);
        let d_m_lo = d_min(pmin[axis], gmin[axis]);
        let d_ext_dc = d_m_hi - d_m_lo;
        let d_ext_ds = (d_m_hi + d_m_lo) * T::half();
        let d_csq_dc = T::two() * ext[axis] * d_ext_dc;
        let d_csq_ds = T::two() * ext[axis] * d_ext_ds;
        let csq_sq = c_sq * c_sq;
        let d_pen_dc = (d_rho_dc * c_sq - rho_sq * d_csq_dc) / csq_sq;
        let d_pen_ds = (-rho_sq * d_csq_ds) / csq_sq;

        grad.d_center[axis] = -d_iou_dc + d_pen_dc;
        grad.d_size[axis] = -d_iou_ds + d_pen_ds;
    }
    grad
}

/// Monte-Carlo IoU estimate: uniform samples in the enclosing box, counting
/// membership in `a`, `b`, and both. Deterministic for a fixed seed.
pub fn iou_oracle<T: Real>(
    a: &Aabb3<T>,
    b: &Aabb3<T>,
    samples: u64,
    seed: u64,
) -> Result<T, GeomError> {
    if samples == 0 {
        return Err(GeomError::NoSamples);
    }
    let cover = enclosing_box(a, b);
    let lo = cover.min_corner();
    let hi = cover.max_corner();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut in_both = 0u64;
    for _ in 0..samples {
        let point = [
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        ];
        let hit_a = a.contains_point(point);
        let hit_b = b.contains_point(point);
        if hit_a {
            in_a += 1;
        }
        if hit_b {
            in_b += 1;
        }
        if hit_a && hit_b {
            in_both += 1;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        return Ok(T::zero());
    }
    Ok(T::from_u64(in_both).expect("count fits") / T::from_u64(union).expect("count fits"))
}
