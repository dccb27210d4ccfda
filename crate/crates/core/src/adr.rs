//! Rectified soft targets from an EMA teacher.
//!
//! For a clean input with label `y` the teacher's logits are softened with a
//! temperature, the interpolation weight is reduced by the teacher's
//! confidence gap when it predicts the wrong class, and the result is mixed
//! with the one-hot label:
//!
//! ```text
//! P_t = softmax(z_t / τ)
//! λ_i = clip[0,1](λ − (P_t[ŷ] − P_t[y]))      ŷ = argmax P_t
//! ỹ   = λ_i·P_t + (1 − λ_i)·onehot(y)
//! ```
//!
//! The clip guarantees `ỹ[y] ≥ ỹ[c]` for every class `c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_rows;
use crate::numerics::ops::check_tau;
use crate::numerics::{argmax, Tensor};
use crate::schedules::AnnealSpec;

/// Tolerance used when validating probability rows handed in by callers.
const DIST_TOL: f64 = 1e-6;

/// Largest dominance deficit attributed to floating-point rounding.
const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedTarget {
    pub distribution: Vec<f64>,
    pub lambda_used: f64,
    pub teacher_argmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdrConfig {
    pub tau: AnnealSpec,
    pub lambda: AnnealSpec,
}

impl AdrConfig {
    pub fn validate(&self) -> Result<()> {
        self.tau.validate()?;
        self.lambda.validate()?;
        if !(self.tau.start > 0.0 && self.tau.end > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature endpoints must be positive, got {} → {}",
                self.tau.start, self.tau.end
            )));
        }
        for v in [self.lambda.start, self.lambda.end] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("interpolation endpoint {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("entries must be finite and non-negative: {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::Input(format!("row sums to {s}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("interpolation factor {lambda} outside [0,1]")));
    }
    Ok(())
}

/// Temperature-scaled softmax of one row of teacher logits.
pub fn teacher_distribution(teacher_logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if teacher_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("teacher logits".into()));
    }
    Ok(softmax_rows(teacher_logits, teacher_logits.len(), tau))
}

/// `clip[0,1](λ − (P_t[ŷ] − P_t[y]))`; equals `λ` when the teacher is right.
pub fn adjusted_lambda(p_t: &[f64], y: usize, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_distribution(p_t)?;
    if y >= p_t.len() {
        return Err(Error::Index { index: y, len: p_t.len() });
    }
    let top = argmax(p_t);
    if top == y {
        return Ok(lambda);
    }
    let gap = p_t[top] - p_t[y];
    Ok((lambda - gap).clamp(0.0, 1.0))
}

/// `λ_i·P_t + (1 − λ_i)·onehot(y)`.
pub fn rectify(p_t: &[f64], y: usize, lambda_i: f64) -> Result<RectifiedTarget> {
    check_lambda(lambda_i)?;
    check_distribution(p_t)?;
    if y >= p_t.len() {
        return Err(Error::Index { index: y, len: p_t.len() });
    }
    let mut distribution: Vec<f64> = p_t.iter().map(|p| lambda_i * p).collect();
    distribution[y] += 1.0 - lambda_i;
    // The clip in `adjusted_lambda` makes ỹ[y] ≥ ỹ[c] exactly; at near-ties the
    // margin can fall below one ulp, so restore it where rounding lost it.
    let rival = distribution
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if rival > distribution[y] && rival - distribution[y] <= ROUNDING_SLACK {
        distribution[y] = rival;
    }
    Ok(RectifiedTarget {
        distribution,
        lambda_used: lambda_i,
        teacher_argmax: argmax(p_t),
    })
}

/// Argmax with ties resolved toward `preferred`.
pub fn argmax_toward(values: &[f64], preferred: usize) -> usize {
    let best = argmax(values);
    if values[preferred] >= values[best] {
        preferred
    } else {
        best
    }
}

/// Per-row teacher distribution, adjusted λ and rectified target.
pub fn rectify_batch(
    teacher_logits: &Tensor,
    labels: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Vec<RectifiedTarget>> {
    check_tau(tau)?;
    if teacher_logits.rank() != 2 || teacher_logits.shape()[0] != labels.len() {
        return Err(Error::dim(
            "rectify_batch",
            format!("logits {:?} for {} labels", teacher_logits.shape(), labels.len()),
        ));
    }
    teacher_logits
        .rows()
        .zip(labels)
        .enumerate()
        .map(|(row, (z, &y))| {
            let wrap = |e| Error::Row { row, source: Box::new(e) };
            let p_t = teacher_distribution(z, tau).map_err(wrap)?;
            let lambda_i = adjusted_lambda(&p_t, y, lambda).map_err(wrap)?;
            rectify(&p_t, y, lambda_i).map_err(wrap)
        })
        .collect()
}

/// Stacks target rows into an `N×C` tensor.
pub fn targets_tensor(targets: &[RectifiedTarget]) -> Tensor {
    let cols = targets.first().map_or(0, |t| t.distribution.len());
    let data = targets.iter().flat_map(|t| t.distribution.iter().copied()).collect();
    Tensor::new(vec![targets.len(), cols], data).expect("uniform rows")
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Index { index: y, len: num_classes });
        }
        data[r * num_classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Classic label smoothing: `(1 − ε)·onehot + ε/C`.
pub fn label_smoothing(labels: &[usize], num_classes: usize, factor: f64) -> Result<Tensor> {
    let base = factor / num_classes as f64;
    let mut t = one_hot(labels, num_classes)?;
    for v in t.data_mut() {
        *v = *v * (1.0 - factor) + base;
    }
    Ok(t)
}
