//! Central finite-difference verification of hand-derived gradients.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative:
/// |a - n| / max(1e-8, |a| + |n|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Check `analytic` (one gradient tensor per input, same shapes) against a
/// central finite difference of the scalar function `f` at `inputs`.
/// Every element of every input is perturbed by +-h; returns the maximum
/// relative error seen.
///
/// The difference quotient divides by the actually-realized spacing
/// (x+h and x-h after rounding to the scalar type), which keeps the check
/// meaningful for narrow storage types.
pub fn grad_check<S: Scalar>(
    f: &dyn Fn(&[Tensor<S>]) -> f64,
    inputs: &[Tensor<S>],
    analytic: &[Tensor<S>],
    h: f64,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len(), "one gradient per input");
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |ei| (ti, ei)))
        .collect();
    grad_check_at(f, inputs, analytic, h, &all)
}

/// Same as `grad_check` but only for the chosen (tensor, element) pairs;
/// used for sampled end-to-end checks where a full sweep is too slow.
pub fn grad_check_at<S: Scalar>(
    f: &dyn Fn(&[Tensor<S>]) -> f64,
    inputs: &[Tensor<S>],
    analytic: &[Tensor<S>],
    h: f64,
    elements: &[(usize, usize)],
) -> f64 {
    grad_check_report(f, inputs, analytic, h, elements).worst
}

/// Outcome of a finite-difference sweep: the worst relative error over the
/// coordinates that were actually comparable, plus how many were checked
/// and how many were skipped for sitting on a kink.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Full sweep driver. For each coordinate it also evaluates f at the
/// unperturbed point and compares the two one-sided difference quotients:
/// at a smooth point they agree to O(h * curvature), while a ReLU kink
/// inside the bracket makes them differ by the slope jump. Coordinates
/// whose one-sided quotients disagree by more than 10% of scale are
/// *skipped* rather than compared -- there the central difference measures
/// nothing the analytic (sub)gradient is required to match. A wrong
/// gradient at a smooth point is still always caught, because both
/// one-sided quotients then agree with each other and disagree with the
/// analytic value.
pub fn grad_check_report<S: Scalar>(
    f: &dyn Fn(&[Tensor<S>]) -> f64,
    inputs: &[Tensor<S>],
    analytic: &[Tensor<S>],
    h: f64,
    elements: &[(usize, usize)],
) -> CheckReport {
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let f0 = f(&work);
    let mut report = CheckReport { worst: 0.0, checked: 0, skipped: 0 };
    for &(ti, ei) in elements {
        assert_eq!(
            inputs[ti].shape(),
            analytic[ti].shape(),
            "gradient {ti} must match its input's shape"
        );
        let x0 = inputs[ti].data()[ei].as_f64();
        let xp = S::from_f64(x0 + h);
        let xm = S::from_f64(x0 - h);

        work[ti].data_mut()[ei] = xp;
        let fp = f(&work);
        work[ti].data_mut()[ei] = xm;
        let fm = f(&work);
        work[ti].data_mut()[ei] = inputs[ti].data()[ei];

        let a = analytic[ti].data()[ei].as_f64();
        let d_plus = (fp - f0) / (xp.as_f64() - x0);
        let d_minus = (f0 - fm) / (x0 - xm.as_f64());
        let scale = d_plus.abs().max(d_minus.abs()).max(a.abs()).max(1e-8);
        if (d_plus - d_minus).abs() > 0.1 * scale {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (xp.as_f64() - xm.as_f64());
        let err = relative_error(a, numeric);
        if err > report.worst {
            report.worst = err;
        }
        report.checked += 1;
    }
    report
}
