//! SGD with Nesterov momentum, step learning-rate decay and the EMA teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: ParamSet,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            velocity: params.zeros_like(),
        }
    }
}

/// One optimizer step at learning rate `lr`.
///
/// `g = grad + wd·w; v = μ·v + g; w -= lr·(g + μ·v)` (Nesterov) or `w -= lr·v`.
/// Weight decay applies to every tensor, biases included.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor(i).shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("{}: grad {:?} vs param {:?}", params.name(i), g.shape(), params.tensor(i).shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(i))));
        }
    }
    for (i, g) in grads.iter().enumerate() {
        let v = state.velocity.tensor_mut(i).data_mut();
        let w = params.tensor_mut(i).data_mut();
        for ((wj, vj), gj) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            let d = gj + cfg.weight_decay * *wj;
            *vj = cfg.momentum * *vj + d;
            let step = if cfg.nesterov { d + cfg.momentum * *vj } else { *vj };
            *wj -= lr * step;
        }
    }
    Ok(())
}

/// Step decay: `base` for the first half, `base/10` until 75%, `base/100` after.
/// Boundaries are `floor(0.5·total)` and `floor(0.75·total)`.
pub fn lr_at(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    let first = total_epochs / 2;
    let second = (3 * total_epochs) / 4;
    if epoch < first {
        base_lr
    } else if epoch < second {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    }
}

/// Exponential-moving-average teacher weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub teacher: ParamSet,
    pub decay: f64,
}

impl EmaState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: &ParamSet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Parameter(format!("EMA decay must be in [0,1], got {decay}")));
        }
        Ok(Self {
            teacher: student.clone(),
            decay,
        })
    }

    /// `θ_t ← γ·θ_t + (1−γ)·θ_s`.
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        if !self.teacher.same_layout(student) {
            return Err(Error::dim("ema_update", "teacher and student layouts differ"));
        }
        let g = self.decay;
        for (i, s) in student.tensors().enumerate() {
            for (t, sv) in self.teacher.tensor_mut(i).data_mut().iter_mut().zip(s.data()) {
                *t = g * *t + (1.0 - g) * sv;
            }
        }
        Ok(())
    }
}

pub fn ema_update(ema: &mut EmaState, student: &ParamSet) -> Result<()> {
    ema.update(student)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet::new(vec![("w".into(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    fn plain(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            nesterov: momentum > 0.0,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn vanilla_step() {
        let mut p = scalar_set(1.0);
        let mut st = SgdState::new(&p);
        sgd_step(&mut p, &[Tensor::new(vec![1], vec![2.0]).unwrap()], &mut st, &plain(0.1, 0.0), 0.1).unwrap();
        assert!((p.tensor(0).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut p = scalar_set(1.25);
        let mut st = SgdState::new(&p);
        let cfg = SgdConfig { weight_decay: 0.0, ..Default::default() };
        sgd_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p.tensor(0).data()[0], 1.25);
    }

    #[test]
    fn nesterov_matches_scalar_recurrence() {
        // f(w) = 0.5·a·w², grad = a·w
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let cfg = SgdConfig { lr, momentum: mu, nesterov: true, weight_decay: wd };
        let mut p = scalar_set(2.0);
        let mut st = SgdState::new(&p);
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            let grad = a * p.tensor(0).data()[0];
            sgd_step(&mut p, &[Tensor::new(vec![1], vec![grad]).unwrap()], &mut st, &cfg, lr).unwrap();
            let g = a * w + wd * w;
            v = mu * v + g;
            w -= lr * (g + mu * v);
        }
        assert!((p.tensor(0).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_set(1.0);
        let mut st = SgdState::new(&p);
        let err = sgd_step(&mut p, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], &mut st, &SgdConfig::default(), 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(p.tensor(0).data()[0], 1.0);
    }

    #[test]
    fn step_schedule() {
        assert_eq!(lr_at(0.1, 0, 200), 0.1);
        assert!((lr_at(0.1, 100, 200) - 0.01).abs() < 1e-15);
        assert!((lr_at(0.1, 99, 200) - 0.1).abs() < 1e-15);
        assert!((lr_at(0.1, 150, 200) - 0.001).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..37 {
            let lr = lr_at(0.3, e, 37);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn ema_extremes_and_geometric_sum() {
        let student = scalar_set(1.0);
        let mut e = EmaState::new(&scalar_set(0.0), 0.0).unwrap();
        e.update(&student).unwrap();
        assert_eq!(e.teacher, student);

        let mut e = EmaState::new(&scalar_set(0.0), 1.0).unwrap();
        e.update(&student).unwrap();
        assert_eq!(e.teacher.tensor(0).data()[0], 0.0);

        let mut e = EmaState::new(&scalar_set(0.0), 0.5).unwrap();
        for n in 1..=20 {
            e.update(&student).unwrap();
            let expected = 1.0 - 0.5f64.powi(n);
            assert!((e.teacher.tensor(0).data()[0] - expected).abs() < 1e-15);
        }
        assert!(EmaState::new(&student, 1.5).is_err());
    }
}
