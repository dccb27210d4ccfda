//! Cosine annealing of the distillation temperature and interpolation factor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Granularity at which a schedule advances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    /// Held constant within an epoch.
    #[default]
    PerEpoch,
    PerIteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSpec {
    pub start: f64,
    pub end: f64,
    /// Number of scheduling units from `start` to `end`.
    pub horizon: usize,
    #[serde(default)]
    pub unit: ScheduleUnit,
}

impl AnnealSpec {
    pub fn new(start: f64, end: f64, horizon: usize, unit: ScheduleUnit) -> Self {
        Self { start, end, horizon, unit }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(value, value, 1, ScheduleUnit::PerEpoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Parameter("schedule horizon must be at least 1".into()));
        }
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Parameter(format!(
                "schedule endpoints must be finite, got {} → {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Value at scheduling position `t`, clamped to the horizon.
    ///
    /// Positions past the horizon hold the end value; this is what the training
    /// loop uses when the schedule is shorter than the run.
    pub fn at_clamped(&self, t: usize) -> f64 {
        cosine_anneal(self, t.min(self.horizon)).expect("clamped position")
    }
}

/// `end + (start − end)·(1 + cos(π·t/horizon))/2` for `0 ≤ t ≤ horizon`.
pub fn cosine_anneal(spec: &AnnealSpec, t: usize) -> Result<f64> {
    spec.validate()?;
    if t > spec.horizon {
        return Err(Error::Parameter(format!(
            "schedule position {t} beyond horizon {}",
            spec.horizon
        )));
    }
    if t == 0 {
        return Ok(spec.start);
    }
    if t == spec.horizon {
        return Ok(spec.end);
    }
    let phase = (1.0 + (PI * t as f64 / spec.horizon as f64).cos()) / 2.0;
    Ok(spec.end + (spec.start - spec.end) * phase)
}
