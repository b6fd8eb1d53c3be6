//! Central finite-difference verification of recorded gradients.
//!
//! [`finite_diff_check`] compares an analytic gradient against central
//! differences of a black-box scalar function, coordinate by coordinate on a
//! seeded sample of at most `max_coords` positions. [`check_builder`] wraps
//! the common case: a closure that rebuilds the same graph on a fresh tape,
//! checked against the gradients of one recorded backward pass, once per
//! input tensor.

use super::{Tape, TensorId};
use crate::dtype::Real;
use crate::error::XhvedError;
use crate::rng::substream;

/// Differences at or below this absolute size pass outright. They are
/// indistinguishable from central-difference rounding noise, and dividing
/// them by a near-zero gradient would manufacture failures where nothing
/// is wrong.
const ABS_FLOOR: f64 = 1e-6;

/// Safety multiplier on the per-coordinate rounding-noise estimate
/// ε·|f|/span. Evaluations sum thousands of terms with cancellation, so
/// realized noise reaches tens of ulps of the final value; 16 keeps the
/// bound above it while an f64 floor of ~1e-8 still resolves 1e-6 checks.
const NOISE_SAFETY: f64 = 16.0;

/// A coordinate is decisive when its measured uncertainty could not have
/// hidden a gradient error of this relative size.
const DECISIVE_REL: f64 = 0.01;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Number of coordinates actually compared.
    pub checked: usize,
    /// Coordinates whose uncertainty was below 1% of the gradient scale —
    /// positions where a ≥1% analytic error could not have slipped past.
    pub decisive: usize,
    /// Flat coordinate of the worst error, if any coordinate was checked.
    pub worst_coord: Option<usize>,
}

impl FdReport {
    fn empty() -> Self {
        FdReport {
            max_rel_err: 0.0,
            pass: true,
            checked: 0,
            decisive: 0,
            worst_coord: None,
        }
    }

    fn merge(&mut self, other: &FdReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_coord = other.worst_coord;
        }
        self.pass &= other.pass;
        self.checked += other.checked;
        self.decisive += other.decisive;
    }
}

/// Compare `analytic` against central differences of `f` around `theta`.
///
/// Samples min(max_coords, len) coordinates uniformly without replacement
/// (seeded, so reruns check the same set). Fails with a numeric error if `f`
/// evaluates to a non-finite value at any probe point.
pub fn finite_diff_check<T, F>(
    mut f: F,
    theta: &[T],
    analytic: &[T],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport, XhvedError>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    assert!(h > 0.0, "contract violation: finite_diff_check needs h > 0");
    assert!(
        theta.len() == analytic.len(),
        "contract violation: analytic gradient length {} != parameter length {}",
        analytic.len(),
        theta.len()
    );
    let n = theta.len();
    let k = max_coords.min(n);
    let mut rng = substream(seed, "fd-coords");
    let coords = rand::seq::index::sample(&mut rng, n, k);

    let mut buf = theta.to_vec();
    let f0 = f(&buf).to_f64();
    if !f0.is_finite() {
        return Err(XhvedError::numeric(
            "finite_diff_check: non-finite function value at the base point".to_string(),
        ));
    }
    let mut report = FdReport::empty();
    report.checked = k;
    for ci in coords {
        let orig = theta[ci];
        let xp = orig + T::from_f64(h);
        let xm = orig - T::from_f64(h);
        let xp2 = orig + T::from_f64(h / 2.0);
        let xm2 = orig - T::from_f64(h / 2.0);

        buf[ci] = xp;
        let fp = f(&buf).to_f64();
        buf[ci] = xm;
        let fm = f(&buf).to_f64();
        buf[ci] = xp2;
        let fp2 = f(&buf).to_f64();
        buf[ci] = xm2;
        let fm2 = f(&buf).to_f64();
        buf[ci] = orig;
        if !fp.is_finite() || !fm.is_finite() || !fp2.is_finite() || !fm2.is_finite() {
            return Err(XhvedError::numeric(format!(
                "finite_diff_check: non-finite function value at coordinate {ci}"
            )));
        }

        // Use the steps the float format actually realized, not the nominal h.
        let span = xp.to_f64() - xm.to_f64();
        let span2 = xp2.to_f64() - xm2.to_f64();
        let s1 = (fp - fm) / span;
        let fd = (fp2 - fm2) / span2;
        let a = analytic[ci].to_f64();
        let diff = (a - fd).abs();

        // Per-coordinate error bar on the half-step quotient, from three
        // sources the probe itself can measure.
        //
        //   |s1 − fd|: slope disagreement between the full-step and
        //   half-step stencils. For smooth f it equals 3× the half-step
        //   quotient's own truncation error; when the outer step straddles
        //   a kink the inner one missed (or two kinks whose slope changes
        //   cancel in the second difference) it measures the inconsistency
        //   directly.
        //
        //   q = f₊+f₋−2f₀: h²·f″ for smooth f, but h·|slope change| when
        //   the step straddles a kink — and for a kink near the base point
        //   |q|/span bounds the quotient's error, so kinked coordinates
        //   self-report instead of failing the case.
        //
        //   ε·|f|: evaluation rounding. Below it the element type cannot
        //   resolve the difference at all (an f32 evaluation of a
        //   small-gradient coordinate returns bit-identical f₊ and f₋).
        let q = (fp + fm - 2.0 * f0).abs();
        let noise = T::EPSILON
            * fp.abs().max(fm.abs()).max(fp2.abs()).max(fm2.abs()).max(1.0)
            * NOISE_SAFETY;
        let uncertainty = 2.0 * (s1 - fd).abs() + (4.0 * q + noise) / span;

        let scale = a.abs().max(fd.abs());
        if uncertainty <= DECISIVE_REL * scale {
            report.decisive += 1;
        }
        let rel = if diff <= ABS_FLOOR.max(uncertainty) {
            0.0
        } else {
            diff / scale
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = Some(ci);
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Gradient-check a graph builder against every one of its input tensors.
///
/// `build` must construct the same scalar from the given inputs on any tape
/// it is handed. The analytic gradients come from one recorded backward
/// pass; each input is then perturbed independently with the other inputs
/// held at their original values.
pub fn check_builder<T, F>(
    build: F,
    inputs: &[(Vec<usize>, Vec<T>)],
    h: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport, XhvedError>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[TensorId]) -> TensorId,
{
    let mut tape: Tape<T> = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, vals)| tape.param(vals.clone(), shape))
        .collect();
    let root = build(&mut tape, &ids);
    assert!(
        tape.numel(root) == 1,
        "contract violation: check_builder root must be scalar, got {:?}",
        tape.shape(root)
    );
    if let Some(p) = tape.poison() {
        return Err(XhvedError::numeric(format!(
            "check_builder: op {} produced a non-finite value",
            p.op
        )));
    }
    tape.backward(root);
    let grads: Vec<Vec<T>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, (_, vals))| {
            tape.grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); vals.len()])
        })
        .collect();

    let mut report = FdReport::empty();
    for (k, (_, vals)) in inputs.iter().enumerate() {
        let f = |theta: &[T]| -> T {
            let mut t2: Tape<T> = Tape::new();
            let ids2: Vec<TensorId> = inputs
                .iter()
                .enumerate()
                .map(|(j, (shape, orig))| {
                    let v = if j == k { theta.to_vec() } else { orig.clone() };
                    t2.leaf(v, shape)
                })
                .collect();
            let r = build(&mut t2, &ids2);
            t2.scalar_value(r)
        };
        let rep = finite_diff_check(f, vals, &grads[k], h, tol, max_coords, seed ^ (k as u64) << 32)?;
        report.merge(&rep);
    }
    Ok(report)
}
