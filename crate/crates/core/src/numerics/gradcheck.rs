//! Central-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Absolute floor for the relative-error denominator.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds `f` on a fresh tape with `point` as the only trainable leaf and
/// returns `(f(point), ∇f(point))`.
pub fn value_and_grad<F>(f: &F, point: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    let value = tape.value(out).item()?;
    let mut grads = tape.backward(out)?;
    let grad = grads.take(x).unwrap_or_else(|| Tensor::zeros(point.shape()));
    Ok((value, grad))
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let out = f(&mut tape, x)?;
    tape.value(out).item()
}

/// Compares reverse-mode gradients with central differences on every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, tolerance, &coords)
}

/// Like [`grad_check`] but restricted to the listed coordinates.
pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor,
    step: f64,
    tolerance: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(&f, point)?;
    compare_with_differences(|p| eval(&f, p), &analytic, point, step, tolerance, coords)
}

/// Checks a supplied gradient against central differences of `value`.
pub fn compare_with_differences<V>(
    value: V,
    analytic: &Tensor,
    point: &Tensor,
    step: f64,
    tolerance: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    V: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("grad_check step must be positive, got {step}")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::dim(
            "grad_check",
            format!("gradient {:?} vs point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let mut probe = point.clone();
    let mut worst = (0.0f64, 0usize);
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic.data()[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        coordinates_checked: coords.len(),
        tolerance,
        passed: worst.0 < tolerance,
    })
}
