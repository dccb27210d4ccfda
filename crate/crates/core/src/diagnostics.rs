//! Output-distribution statistics and loss-landscape probes.
//!
//! All divergences and entropies are in nats.

use std::f64::consts::LN_2;
use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adr::one_hot;
use crate::attack::{pgd, sign, AttackConfig, EVAL_CHUNK};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{forward, forward_chunked, forward_recorded, GradRequest, ModelSpec, ParamSet};
use crate::numerics::kernels::softmax_rows;
use crate::numerics::{argmax, soft_cross_entropy, Tensor};
use crate::rng::{substream, tags};

const DIST_TOL: f64 = 1e-6;

/// Default number of histogram bins over `[0, ln C]`.
pub const DEFAULT_BINS: usize = 20;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Input("empty distribution".into()));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("entries must be finite and non-negative: {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::Input(format!("row sums to {s}")));
    }
    Ok(())
}

fn xlogx_over(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / q).ln()
    }
}

/// Shannon entropy `−Σ p·ln p` with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// Jensen–Shannon divergence `½KL(p‖m) + ½KL(q‖m)`, `m = (p+q)/2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("js_divergence", format!("{} vs {} classes", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kl_p += xlogx_over(*a, m);
        kl_q += xlogx_over(*b, m);
    }
    Ok((0.5 * (kl_p + kl_q)).clamp(0.0, LN_2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Correct,
    Incorrect,
    Clean,
    Adversarial,
    Ood,
}

/// Location and spread of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(Summary {
            n,
            mean: values.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are counted in the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Parameter(format!("histogram needs bins > 0 and lo < hi, got {bins} bins over [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Per-example entropies of one subset with their histogram over `[0, ln C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub subset: Subset,
    pub entropies: Vec<f64>,
    pub histogram: Histogram,
    pub summary: Option<Summary>,
}

impl EntropyReport {
    pub fn new(subset: Subset, entropies: Vec<f64>, num_classes: usize, bins: usize) -> Result<Self> {
        let hi = (num_classes.max(2) as f64).ln();
        let histogram = Histogram::new(&entropies, 0.0, hi, bins)?;
        let summary = Summary::of(&entropies);
        Ok(Self {
            subset,
            entropies,
            histogram,
            summary,
        })
    }

    pub fn len(&self) -> usize {
        self.entropies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropies.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        self.summary.map(|s| s.mean)
    }
}

fn probabilities(logits: &Tensor) -> Tensor {
    let c = logits.shape()[1];
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), c, 1.0)).expect("same shape")
}

fn row_entropies(probs: &Tensor) -> Result<Vec<f64>> {
    probs.rows().map(entropy).collect()
}

/// Softmax entropies of a model's predictions on any image set (labelled or not).
pub fn entropy_report(params: &ParamSet, spec: &ModelSpec, images: &Tensor, subset: Subset) -> Result<EntropyReport> {
    let probs = probabilities(&forward_chunked(params, spec, images, EVAL_CHUNK)?);
    EntropyReport::new(subset, row_entropies(&probs)?, spec.num_classes, DEFAULT_BINS)
}

/// Prediction entropies split by whether the prediction is correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSplit {
    pub correct: EntropyReport,
    pub incorrect: EntropyReport,
}

pub fn confidence_split(params: &ParamSet, spec: &ModelSpec, ds: &Dataset) -> Result<ConfidenceSplit> {
    let probs = probabilities(&forward_chunked(params, spec, &ds.images, EVAL_CHUNK)?);
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (row, &y) in probs.rows().zip(&ds.labels) {
        let h = entropy(row)?;
        if argmax(row) == y {
            correct.push(h);
        } else {
            incorrect.push(h);
        }
    }
    Ok(ConfidenceSplit {
        correct: EntropyReport::new(Subset::Correct, correct, spec.num_classes, DEFAULT_BINS)?,
        incorrect: EntropyReport::new(Subset::Incorrect, incorrect, spec.num_classes, DEFAULT_BINS)?,
    })
}

/// Clean-versus-attacked agreement of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Per-example `JS(softmax f(x), softmax f(x'))`.
    pub js: Vec<f64>,
    pub js_summary: Option<Summary>,
    pub clean: EntropyReport,
    pub adversarial: EntropyReport,
}

impl ConsistencyReport {
    pub fn mean_js(&self) -> Option<f64> {
        self.js_summary.map(|s| s.mean)
    }
}

/// JS divergence between clean and PGD outputs per example. Without labels
/// (out-of-distribution data) the attack targets the model's own clean
/// prediction. Chunk `i` draws its random start from `(seed, "eval-attack", i)`.
pub fn consistency_report(
    params: &ParamSet,
    spec: &ModelSpec,
    images: &Tensor,
    labels: Option<&[usize]>,
    attack: &AttackConfig,
    seed: u64,
) -> Result<ConsistencyReport> {
    let n = images.shape().first().copied().unwrap_or(0);
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim("consistency_report", format!("{} labels for {n} images", l.len())));
        }
    }
    let idx: Vec<usize> = (0..n).collect();
    let mut js = Vec::with_capacity(n);
    let mut h_clean = Vec::with_capacity(n);
    let mut h_adv = Vec::with_capacity(n);
    for (ci, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let x = images.gather(chunk);
        let clean = probabilities(&forward(params, spec, &x)?);
        let y: Vec<usize> = match labels {
            Some(l) => chunk.iter().map(|&i| l[i]).collect(),
            None => clean.argmax_rows(),
        };
        let target = one_hot(&y, spec.num_classes)?;
        let adv = pgd(params, spec, &x, &target, attack, &mut substream(seed, tags::EVAL_ATTACK, ci as u64))?;
        let attacked = probabilities(&forward(params, spec, &adv)?);
        for (p, q) in clean.rows().zip(attacked.rows()) {
            js.push(js_divergence(p, q)?);
            h_clean.push(entropy(p)?);
            h_adv.push(entropy(q)?);
        }
    }
    let (clean_tag, adv_tag) = match labels {
        Some(_) => (Subset::Clean, Subset::Adversarial),
        None => (Subset::Ood, Subset::Ood),
    };
    Ok(ConsistencyReport {
        js_summary: Summary::of(&js),
        js,
        clean: EntropyReport::new(clean_tag, h_clean, spec.num_classes, DEFAULT_BINS)?,
        adversarial: EntropyReport::new(adv_tag, h_adv, spec.num_classes, DEFAULT_BINS)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeMode {
    Weight1d,
    Input2d,
}

/// Loss values over a 1-D weight-space line or a 2-D input-space plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub mode: LandscapeMode,
    pub a: Vec<f64>,
    /// Second axis; empty for weight-space lines.
    pub b: Vec<f64>,
    /// Row-major over `(a, b)`.
    pub loss: Vec<f64>,
    /// Input-gradient norm per point (input mode only).
    pub grad_mag: Vec<f64>,
    pub seed: u64,
}

impl LandscapeGrid {
    /// Loss at `(i, j)`; `j` is ignored for weight-space lines.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        if self.b.is_empty() {
            self.loss[i]
        } else {
            self.loss[i * self.b.len() + j]
        }
    }

    /// Max minus min loss over the grid.
    pub fn spread(&self) -> f64 {
        let max = self.loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.loss.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Rows of `a,b,loss,grad_mag`; absent columns are left blank.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "a,b,loss,grad_mag")?;
        if self.b.is_empty() {
            for (a, l) in self.a.iter().zip(&self.loss) {
                writeln!(out, "{a},,{l},")?;
            }
        } else {
            for (i, a) in self.a.iter().enumerate() {
                for (j, b) in self.b.iter().enumerate() {
                    let k = i * self.b.len() + j;
                    writeln!(out, "{a},{b},{},{}", self.loss[k], self.grad_mag[k])?;
                }
            }
        }
        Ok(())
    }
}

/// Gaussian direction rescaled so each filter (output channel of a
/// convolution, output row of a dense layer) has the norm of the matching
/// weight filter. Bias directions are zero.
pub fn filter_normalized_direction(params: &ParamSet, spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    let layout = spec.layout();
    if layout.len() != params.len() {
        return Err(Error::dim("weight_landscape", "parameters do not match the model layout"));
    }
    let mut dir = params.zeros_like();
    for (i, info) in layout.iter().enumerate() {
        if info.is_bias() {
            continue;
        }
        let w = params.tensor(i);
        let mut rng = substream(seed, tags::DIRECTION, i as u64);
        let d = dir.tensor_mut(i);
        for v in d.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        let group = w.stride0();
        for (f, (dg, wg)) in d.data_mut().chunks_mut(group).zip(w.data().chunks(group)).enumerate() {
            let dn = dg.iter().map(|v| v * v).sum::<f64>().sqrt();
            let wn = wg.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dn == 0.0 || wn == 0.0 {
                warn!("{} filter {f} has zero norm; its direction is left at zero", info.name);
                dg.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let s = wn / dn;
            dg.iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(dir)
}

/// Mean one-hot cross-entropy on PGD examples regenerated for the given weights.
fn adversarial_loss(params: &ParamSet, spec: &ModelSpec, ds: &Dataset, attack: &AttackConfig, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for (ci, chunk) in idx.chunks(EVAL_CHUNK).enumerate() {
        let (x, y) = ds.batch(chunk);
        let t = one_hot(&y, spec.num_classes)?;
        let adv = pgd(params, spec, &x, &t, attack, &mut substream(seed, tags::ATTACK, ci as u64))?;
        total += soft_cross_entropy(&forward(params, spec, &adv)?, &t)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Adversarial loss along `w + α·d` for a filter-normalized Gaussian `d`.
pub fn weight_landscape(
    params: &ParamSet,
    spec: &ModelSpec,
    ds: &Dataset,
    alpha_grid: &[f64],
    seed: u64,
    attack: &AttackConfig,
) -> Result<LandscapeGrid> {
    if ds.is_empty() {
        return Err(Error::Config("landscape dataset is empty".into()));
    }
    if alpha_grid.iter().any(|a| !a.is_finite()) {
        return Err(Error::Parameter("alpha grid must be finite".into()));
    }
    let dir = filter_normalized_direction(params, spec, seed)?;
    let loss = alpha_grid
        .par_iter()
        .map(|&alpha| {
            let mut w = params.clone();
            for (i, d) in dir.tensors().enumerate() {
                for (wv, dv) in w.tensor_mut(i).data_mut().iter_mut().zip(d.data()) {
                    *wv += alpha * dv;
                }
            }
            adversarial_loss(&w, spec, ds, attack, seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    finite_grid(LandscapeGrid {
        mode: LandscapeMode::Weight1d,
        a: alpha_grid.to_vec(),
        b: Vec::new(),
        loss,
        grad_mag: Vec::new(),
        seed,
    })
}

fn finite_grid(g: LandscapeGrid) -> Result<LandscapeGrid> {
    if g.loss.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("landscape loss".into()));
    }
    Ok(g)
}

fn loss_and_input_grad(params: &ParamSet, spec: &ModelSpec, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let mut rec = forward_recorded(params, spec, x, GradRequest::INPUT)?;
    let loss = rec.tape.soft_cross_entropy(rec.logits, target)?;
    let value = rec.tape.value(loss).item()?;
    let g = rec.tape.backward(loss)?.take(rec.input).expect("input grad");
    Ok((value, g))
}

/// Cross-entropy over the plane `x + a·r1 + b·r2` (clamped to `[lo, hi]`),
/// with `r1 = sign(∇ₓ loss)` and `r2` a Rademacher direction.
#[allow(clippy::too_many_arguments)]
pub fn input_landscape(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    label: usize,
    grid_a: &[f64],
    grid_b: &[f64],
    seed: u64,
    clamp: (f64, f64),
) -> Result<LandscapeGrid> {
    if x.shape().first() != Some(&1) {
        return Err(Error::dim("input_landscape", format!("expected a single example, got {:?}", x.shape())));
    }
    let target = one_hot(&[label], spec.num_classes)?;
    let (_, g) = loss_and_input_grad(params, spec, x, &target)?;
    let r1: Vec<f64> = g.data().iter().map(|v| sign(*v)).collect();
    let mut rng = substream(seed, tags::RADEMACHER, 0);
    let r2: Vec<f64> = (0..x.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let points: Vec<(f64, f64)> = grid_a.iter().flat_map(|&a| grid_b.iter().map(move |&b| (a, b))).collect();
    let values = points
        .par_iter()
        .map(|&(a, b)| {
            let mut p = x.clone();
            for ((v, d1), d2) in p.data_mut().iter_mut().zip(&r1).zip(&r2) {
                *v = (*v + a * d1 + b * d2).clamp(clamp.0, clamp.1);
            }
            let (l, g) = loss_and_input_grad(params, spec, &p, &target)?;
            Ok((l, g.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (loss, grad_mag) = values.into_iter().unzip();
    finite_grid(LandscapeGrid {
        mode: LandscapeMode::Input2d,
        a: grid_a.to_vec(),
        b: grid_b.to_vec(),
        loss,
        grad_mag,
        seed,
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}
