//! Central finite-difference verification of analytic gradients.

use super::store::{DiffError, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig<T> {
    /// Central-difference step.
    pub h: T,
    /// Maximum accepted relative error.
    pub tol: T,
}

impl<T: Real> Default for GradcheckConfig<T> {
    fn default() -> Self {
        Self {
            h: T::lit(1e-5),
            tol: T::lit(1e-5),
        }
    }
}

/// Worst coordinate of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry<T> {
    pub name: String,
    pub coord: usize,
    pub analytic: T,
    pub numeric: T,
    pub rel_err: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport<T> {
    pub pass: bool,
    pub tol: T,
    pub max_rel_err: T,
    /// One entry per parameter, carrying its worst coordinate.
    pub entries: Vec<GradcheckEntry<T>>,
    pub coords_checked: usize,
}

fn rel_err<T: Real>(a: T, n: T) -> T {
    (a - n).abs() / a.abs().max(n.abs()).max(T::lit(1e-8))
}

/// Verifies that the gradients `eval` accumulates into `store` match
/// central finite differences of the loss it returns.
///
/// The protocol: `eval` must zero nothing itself; this checker zeroes the
/// gradients, calls `eval` once to collect the loss and analytic
/// gradients, re-evaluates to confirm determinism (bitwise equal loss and
/// gradients), then perturbs every coordinate of every parameter in turn.
/// Parameters are restored exactly afterward.
///
/// relu networks have a kink at zero pre-activation; callers should
/// choose check configurations whose pre-activations stay at least 1e-3
/// away from zero, since finite differences straddling the kink disagree
/// with the one-sided analytic derivative.
pub fn gradcheck<T, F>(
    mut eval: F,
    store: &mut ParamStore<T>,
    cfg: &GradcheckConfig<T>,
) -> Result<GradcheckReport<T>, DiffError>
where
    T: Real,
    F: FnMut(&mut ParamStore<T>) -> Result<T, DiffError>,
{
    if !(cfg.h > T::zero()) || !(cfg.tol > T::zero()) {
        return Err(DiffError::BadHyper("gradcheck h and tol must be positive".into()));
    }

    store.zero_grads();
    let loss_a = eval(store)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let analytic: Vec<Vec<T>> = names
        .iter()
        .map(|n| store.grad(n).map(<[T]>::to_vec))
        .collect::<Result<_, _>>()?;

    store.zero_grads();
    let loss_b = eval(store)?;
    if loss_a.to_bits_ne(loss_b) {
        return Err(DiffError::NonDeterministic);
    }
    for (name, grads) in names.iter().zip(&analytic) {
        let again = store.grad(name)?;
        if grads.iter().zip(again).any(|(a, b)| a.to_bits_ne(*b)) {
            return Err(DiffError::NonDeterministic);
        }
    }

    let two_h = cfg.h * T::two();
    let mut entries = Vec::with_capacity(names.len());
    let mut max_rel = T::zero();
    let mut coords_checked = 0usize;

    for (name, grads) in names.iter().zip(&analytic) {
        let mut worst = GradcheckEntry {
            name: name.clone(),
            coord: 0,
            analytic: T::zero(),
            numeric: T::zero(),
            rel_err: T::zero(),
        };
        for (coord, &a) in grads.iter().enumerate() {
            let original = store.coord(name, coord)?;
            store.set_coord(name, coord, original + cfg.h)?;
            store.zero_grads();
            let plus = eval(store);
            store.set_coord(name, coord, original - cfg.h)?;
            store.zero_grads();
            let minus = eval(store);
            store.set_coord(name, coord, original)?;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / two_h;
            let err = rel_err(a, numeric);
            coords_checked += 1;
            if err >= worst.rel_err {
                worst = GradcheckEntry {
                    name: name.clone(),
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: err,
                };
            }
        }
        max_rel = max_rel.max(worst.rel_err);
        entries.push(worst);
    }
    store.zero_grads();

    Ok(GradcheckReport {
        pass: max_rel <= cfg.tol,
        tol: cfg.tol,
        max_rel_err: max_rel,
        entries,
        coords_checked,
    })
}

trait BitsNe {
    fn to_bits_ne(self, other: Self) -> bool;
}

impl<T: Real> BitsNe for T {
    /// Bitwise inequality via exact float comparison; NaN counts as
    /// unequal to everything including itself, which is the conservative
    /// choice for a determinism probe.
    fn to_bits_ne(self, other: Self) -> bool {
        !(self == other && self.is_sign_positive() == other.is_sign_positive())
    }
}
