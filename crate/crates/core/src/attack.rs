//! ℓ∞ projected-gradient attacks and the ε / step-count sanity sweeps.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adr::one_hot;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{forward, forward_recorded, GradRequest, ModelSpec, ParamSet};
use crate::numerics::Tensor;
use crate::rng::{substream, tags, StreamRng};

/// Allowed slack on the ε-ball and clamp bounds when feasibility checks are on.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ radius in input units.
    #[serde(with = "crate::ratio")]
    pub epsilon: f64,
    #[serde(with = "crate::ratio")]
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_init: bool,
    #[serde(default)]
    pub clamp_lo: f64,
    #[serde(default = "default_one")]
    pub clamp_hi: f64,
    /// Verify ball and range membership after every step.
    #[serde(default)]
    pub debug_checks: bool,
}

impl Default for AttackConfig {
    /// PGD-10 with ε = 8/255, α = 2/255 and random start.
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_init: true,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            debug_checks: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Parameter(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "alpha must be > 0 when steps > 0 and epsilon > 0, got {}",
                self.alpha
            )));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Parameter(format!(
                "clamp range [{}, {}] is empty",
                self.clamp_lo, self.clamp_hi
            )));
        }
        Ok(())
    }

    /// Same attack with a different radius and the sweep step-size rule
    /// `α = max(ε/4, α₀·ε/ε₀)`.
    pub fn scaled_to(&self, epsilon: f64) -> AttackConfig {
        let proportional = if self.epsilon > 0.0 {
            self.alpha * epsilon / self.epsilon
        } else {
            0.0
        };
        AttackConfig {
            epsilon,
            alpha: (epsilon / 4.0).max(proportional),
            ..self.clone()
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Quantity the attack ascends.
#[derive(Clone, Copy)]
enum Objective<'a> {
    /// Cross-entropy against fixed target rows.
    SoftTarget(&'a Tensor),
    /// `KL(softmax(clean) ‖ softmax(f(x')))` with fixed clean logits.
    KlFromClean(&'a Tensor),
}

/// Record of one attack run.
#[derive(Clone, Debug)]
pub struct PgdTrace {
    pub adversarial: Tensor,
    /// Objective at `x⁰ … x^K`.
    pub losses: Vec<f64>,
    /// Largest `‖xᵗ − x‖∞ − ε` seen (≤ 0 when feasible).
    pub max_ball_excess: f64,
    /// Iterates whose feasibility was verified.
    pub checked_iterates: usize,
}

fn objective_and_grad(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    objective: Objective<'_>,
) -> Result<(f64, Tensor)> {
    let mut rec = forward_recorded(params, spec, x, GradRequest::INPUT)?;
    let loss = match objective {
        Objective::SoftTarget(t) => rec.tape.soft_cross_entropy(rec.logits, t)?,
        Objective::KlFromClean(clean) => {
            let q = rec.tape.leaf(clean.clone(), false);
            rec.tape.kl_divergence(rec.logits, q)?
        }
    };
    let value = rec.tape.value(loss).item()?;
    let mut grads = rec.tape.backward(loss)?;
    let g = grads.take(rec.input).expect("input requires grad");
    if !g.all_finite() {
        return Err(Error::NonFinite("input gradient during attack".into()));
    }
    Ok((value, g))
}

fn objective_value(params: &ParamSet, spec: &ModelSpec, x: &Tensor, objective: Objective<'_>) -> Result<f64> {
    let logits = forward(params, spec, x)?;
    match objective {
        Objective::SoftTarget(t) => crate::numerics::soft_cross_entropy(&logits, t),
        Objective::KlFromClean(clean) => crate::numerics::kl_divergence(&logits, clean),
    }
}

/// Projection onto `[x − ε, x + ε] ∩ [lo, hi]`.
fn project(point: &mut [f64], origin: &[f64], cfg: &AttackConfig) {
    for (p, o) in point.iter_mut().zip(origin) {
        *p = p.clamp(o - cfg.epsilon, o + cfg.epsilon).clamp(cfg.clamp_lo, cfg.clamp_hi);
    }
}

fn ball_excess(point: &[f64], origin: &[f64], cfg: &AttackConfig) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for (p, o) in point.iter().zip(origin) {
        worst = worst.max((p - o).abs() - cfg.epsilon);
        if *p < cfg.clamp_lo - FEASIBILITY_SLACK || *p > cfg.clamp_hi + FEASIBILITY_SLACK {
            return Err(Error::Feasibility(format!(
                "value {p} outside [{}, {}]",
                cfg.clamp_lo, cfg.clamp_hi
            )));
        }
    }
    if worst > FEASIBILITY_SLACK {
        return Err(Error::Feasibility(format!(
            "‖x' − x‖∞ exceeds ε = {} by {worst}",
            cfg.epsilon
        )));
    }
    Ok(worst)
}

fn check_inputs(x: &Tensor, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(v) = x.data().iter().find(|v| !(**v >= cfg.clamp_lo && **v <= cfg.clamp_hi)) {
        return Err(Error::Parameter(format!(
            "attack input value {v} outside [{}, {}]",
            cfg.clamp_lo, cfg.clamp_hi
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    objective: Objective<'_>,
    cfg: &AttackConfig,
    start: Tensor,
    trace: bool,
) -> Result<PgdTrace> {
    let origin = x.data();
    let mut current = start;
    let mut losses = Vec::new();
    let mut max_excess = f64::NEG_INFINITY;
    let mut checked = 0;
    let check = |pt: &Tensor, max_excess: &mut f64, checked: &mut usize| -> Result<()> {
        if cfg.debug_checks {
            *max_excess = max_excess.max(ball_excess(pt.data(), origin, cfg)?);
            *checked += 1;
        }
        Ok(())
    };
    check(&current, &mut max_excess, &mut checked)?;
    for _ in 0..cfg.steps {
        let (loss, g) = objective_and_grad(params, spec, &current, objective)?;
        if trace {
            losses.push(loss);
        }
        for (p, gv) in current.data_mut().iter_mut().zip(g.data()) {
            *p += cfg.alpha * sign(*gv);
        }
        project(current.data_mut(), origin, cfg);
        check(&current, &mut max_excess, &mut checked)?;
    }
    if trace {
        losses.push(objective_value(params, spec, &current, objective)?);
    }
    Ok(PgdTrace {
        adversarial: current,
        losses,
        max_ball_excess: max_excess,
        checked_iterates: checked,
    })
}

fn uniform_start(x: &Tensor, cfg: &AttackConfig, rng: &mut StreamRng) -> Tensor {
    let mut start = x.clone();
    if cfg.random_init {
        for v in start.data_mut() {
            let u = 2.0 * rng.random::<f64>() - 1.0;
            *v = (*v + cfg.epsilon * u).clamp(cfg.clamp_lo, cfg.clamp_hi);
        }
    }
    start
}

/// PGD against soft (or one-hot) targets; returns `x^K`.
pub fn pgd(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    target: &Tensor,
    cfg: &AttackConfig,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    Ok(pgd_traced(params, spec, x, target, cfg, rng, false)?.adversarial)
}

/// [`pgd`] with per-iterate losses (when `record_losses`) and feasibility data.
pub fn pgd_traced(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    target: &Tensor,
    cfg: &AttackConfig,
    rng: &mut StreamRng,
    record_losses: bool,
) -> Result<PgdTrace> {
    check_inputs(x, cfg)?;
    if cfg.epsilon == 0.0 {
        return Ok(PgdTrace {
            adversarial: x.clone(),
            losses: Vec::new(),
            max_ball_excess: 0.0,
            checked_iterates: 0,
        });
    }
    let start = uniform_start(x, cfg, rng);
    run(params, spec, x, Objective::SoftTarget(target), cfg, start, record_losses)
}

/// Scale of the Gaussian start used by the KL attack.
pub const KL_INIT_SCALE: f64 = 1e-3;

/// Inner maximization of TRADES: ascends `KL(softmax(f(x)) ‖ softmax(f(x')))`.
///
/// Starts from `x + 0.001·N(0, I)` (projected), since the KL gradient
/// vanishes at `x' = x`.
pub fn pgd_kl(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    clean_logits: &Tensor,
    cfg: &AttackConfig,
    rng: &mut StreamRng,
) -> Result<PgdTrace> {
    check_inputs(x, cfg)?;
    if cfg.epsilon == 0.0 {
        return Ok(PgdTrace {
            adversarial: x.clone(),
            losses: Vec::new(),
            max_ball_excess: 0.0,
            checked_iterates: 0,
        });
    }
    let mut start = x.clone();
    for v in start.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += KL_INIT_SCALE * z;
    }
    project(start.data_mut(), x.data(), cfg);
    run(params, spec, x, Objective::KlFromClean(clean_logits), cfg, start, false)
}

/// Clean and robust accuracy of one model on a labelled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub standard_acc: f64,
    /// Fraction correct on both the clean and the attacked input.
    pub robust_acc: f64,
    pub n_examples: usize,
}

/// Standard and PGD robust accuracy. Chunk `i` draws its random start from
/// the `(seed, "eval-attack", i)` stream.
pub fn evaluate(params: &ParamSet, spec: &ModelSpec, ds: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<Accuracy> {
    evaluate_tagged(params, spec, ds, cfg, seed, tags::EVAL_ATTACK)
}

pub(crate) fn evaluate_tagged(
    params: &ParamSet,
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
    tag: &str,
) -> Result<Accuracy> {
    if ds.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut clean_ok, mut robust_ok) = (0usize, 0usize);
    for (ci, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let (x, y) = ds.batch(chunk);
        let clean = forward(params, spec, &x)?.argmax_rows();
        let target = one_hot(&y, spec.num_classes)?;
        let mut rng = substream(seed, tag, ci as u64);
        let adv = pgd(params, spec, &x, &target, cfg, &mut rng)?;
        let attacked = forward(params, spec, &adv)?.argmax_rows();
        for ((c, a), t) in clean.iter().zip(&attacked).zip(&y) {
            if c == t {
                clean_ok += 1;
                if a == t {
                    robust_ok += 1;
                }
            }
        }
    }
    let n = ds.len() as f64;
    Ok(Accuracy {
        standard_acc: clean_ok as f64 / n,
        robust_acc: robust_ok as f64 / n,
        n_examples: ds.len(),
    })
}

/// One row of a sweep table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub robust_acc: f64,
    pub n_examples: usize,
}

fn ascending(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] <= w[1])
}

/// Robust accuracy for each radius, with `α = max(ε/4, α₀·ε/ε₀)`.
pub fn eps_sweep(
    params: &ParamSet,
    spec: &ModelSpec,
    ds: &Dataset,
    eps_list: &[f64],
    base: &AttackConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if !ascending(eps_list) {
        return Err(Error::Parameter("eps_list must be sorted ascending".into()));
    }
    eps_list
        .iter()
        .map(|&eps| {
            let acc = evaluate(params, spec, ds, &base.scaled_to(eps), seed)?;
            Ok(SweepRow {
                value: eps,
                robust_acc: acc.robust_acc,
                n_examples: acc.n_examples,
            })
        })
        .collect()
}

/// Robust accuracy for each step count.
pub fn steps_sweep(
    params: &ParamSet,
    spec: &ModelSpec,
    ds: &Dataset,
    step_list: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if !step_list.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::Parameter("step_list must be sorted ascending".into()));
    }
    step_list
        .iter()
        .map(|&k| {
            let acc = evaluate(params, spec, ds, &AttackConfig { steps: k, ..cfg.clone() }, seed)?;
            Ok(SweepRow {
                value: k as f64,
                robust_acc: acc.robust_acc,
                n_examples: acc.n_examples,
            })
        })
        .collect()
}

/// Writes `<column>,robust_acc,n_examples` rows.
pub fn write_sweep_csv<W: Write>(mut out: W, column: &str, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{column},robust_acc,n_examples")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.value, r.robust_acc, r.n_examples)?;
    }
    Ok(())
}
