use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference check of `analytic` (the claimed gradient of `f` at
/// `x`) over every element. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let all: Vec<usize> = (0..x.len()).collect();
    probe(f, x, analytic, eps, &all)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    probe(f, x, analytic, eps, coords)
}

/// Relative disagreement between the step-`h` and step-`h/2` central
/// differences above which a stencil is taken to be non-smooth.
pub const AGREEMENT_TOLERANCE: f64 = 1e-6;
/// Step sizes tried per coordinate, each a tenth of the previous one.
pub const STEP_LEVELS: usize = 6;
/// Starting step for [`grad_check_piecewise`].
pub const PIECEWISE_START_STEP: f64 = 1e-2;

/// [`grad_check`] for piecewise-smooth objectives (relu, max pooling).
///
/// Each coordinate is probed with central differences at steps `h` and
/// `h/2`. If the two agree to [`AGREEMENT_TOLERANCE`] (or within rounding
/// noise) the stencil is smooth and their Richardson combination
/// `(4·D(h/2) − D(h))/3` is the numeric derivative. Otherwise a kink or strong
/// curvature lies inside the stencil and `h` is divided by 10, for at most
/// [`STEP_LEVELS`] steps starting at `start_step`. The step choice looks at
/// `f` only, never at `analytic`.
pub fn grad_check_piecewise<F>(mut f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, start_step: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let base = validate(&mut f, x, analytic, start_step)?;
    let noise_scale = 64.0 * f64::EPSILON * base.abs().max(1.0);
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut eval = |d: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + d;
            let v = f(&probe);
            probe.data_mut()[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("grad_check objective at coordinate {i}")))
            }
        };
        let mut h = start_step;
        let mut numeric = 0.0;
        for level in 0..STEP_LEVELS {
            let d1 = (eval(h)? - eval(-h)?) / (2.0 * h);
            let d2 = (eval(h / 2.0)? - eval(-h / 2.0)?) / h;
            numeric = (4.0 * d2 - d1) / 3.0;
            let floor = noise_scale / h / AGREEMENT_TOLERANCE;
            let disagreement = (d1 - d2).abs() / d1.abs().max(d2.abs()).max(floor);
            if disagreement <= AGREEMENT_TOLERANCE || level + 1 == STEP_LEVELS {
                break;
            }
            h *= 0.1;
        }
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn validate<F>(f: &mut F, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: x.shape().to_vec(),
            right: analytic.shape().to_vec(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} must be > 0")));
    }
    let base = f(x);
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(base)
}

fn probe<F>(mut f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    validate(&mut f, x, analytic, eps)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
