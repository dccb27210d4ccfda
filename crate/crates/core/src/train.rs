//! Adversarial training loops: PGD-AT, TRADES, and either one with rectified
//! ADR targets from the EMA teacher.
//!
//! Every random draw comes from a named substream of the run seed, indexed by
//! the epoch (shuffling) or the global step (augmentation, attack start), so a
//! run resumed from `(epoch, iteration)` continues exactly where it stopped.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adr::{one_hot, rectify_batch, targets_tensor, AdrConfig};
use crate::attack::{evaluate_tagged, pgd, pgd_kl, Accuracy, AttackConfig};
use crate::data::{augment, split_indices, Dataset};
use crate::error::{Error, Result};
use crate::models::{forward, forward_on_tape, forward_recorded, init, GradRequest, ModelSpec, ParamSet};
use crate::numerics::{Tape, Tensor};
use crate::optim::{lr_at, sgd_step, EmaState, SgdConfig, SgdState};
use crate::rng::{substream, tags};
use crate::schedules::{AnnealSpec, ScheduleUnit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy on PGD examples.
    #[default]
    At,
    /// Clean cross-entropy plus β·KL(clean ‖ adversarial).
    Trades,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zero padding before the random crop.
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.pad == 0 && self.flip_prob == 0.0
    }
}

fn default_gamma() -> f64 {
    0.995
}

fn default_batch() -> usize {
    128
}

fn default_beta() -> f64 {
    6.0
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub use_adr: bool,
    /// Temperature and interpolation schedules; required when `use_adr` is set.
    #[serde(default)]
    pub adr: Option<AdrConfig>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// EMA decay of the teacher.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// TRADES KL weight.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Attack used for per-epoch validation.
    #[serde(default)]
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Records `wall_s = 0` so metric files are reproducible byte for byte.
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

impl TrainConfig {
    /// PGD-AT defaults for a model: ε = 8/255, α = 2/255, K = 10, SGD 0.1 with
    /// Nesterov momentum, γ = 0.995, batch 128.
    pub fn new(model: ModelSpec, epochs: usize) -> Self {
        Self {
            model,
            method: Method::At,
            use_adr: false,
            adr: None,
            attack: AttackConfig::default(),
            sgd: SgdConfig::default(),
            gamma: default_gamma(),
            epochs,
            batch_size: default_batch(),
            beta: default_beta(),
            eval_attack: AttackConfig::default(),
            seed: 0,
            val_fraction: default_val_fraction(),
            augment: AugmentConfig::default(),
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.sgd.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Parameter(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.method == Method::Trades && !(self.beta > 0.0) {
            return Err(Error::Parameter(format!("TRADES beta must be > 0, got {}", self.beta)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::Parameter(format!(
                "flip_prob must be in [0,1], got {}",
                self.augment.flip_prob
            )));
        }
        match (&self.adr, self.use_adr) {
            (Some(adr), _) => adr.validate()?,
            (None, true) => return Err(Error::Parameter("use_adr is set but no adr schedules are given".into())),
            (None, false) => {}
        }
        Ok(())
    }

    fn adr_schedules(&self) -> Option<&AdrConfig> {
        if self.use_adr {
            self.adr.as_ref()
        } else {
            None
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub train_loss: f64,
    pub val_std_acc: f64,
    pub val_rob_acc: f64,
    pub val_rob_acc_ema: f64,
    pub wall_s: f64,
}

/// Weights of the epoch with the highest validation robust accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_rob_acc: f64,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub config: TrainConfig,
    pub student: ParamSet,
    pub ema: EmaState,
    pub optimizer: SgdState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub history: Vec<EpochMetrics>,
    pub best: Option<BestSnapshot>,
}

impl RunState {
    /// Fresh state: seeded initialization, teacher equal to the student.
    pub fn initial(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = init(&config.model, config.seed)?;
        let ema = EmaState::new(&student, config.gamma)?;
        let optimizer = SgdState::new(&student);
        Ok(Self {
            config,
            student,
            ema,
            optimizer,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.config.model
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn best_robust_acc(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.val_rob_acc)
    }

    /// Best minus final validation robust accuracy.
    pub fn overfitting_gap(&self) -> Option<f64> {
        Some(self.best_robust_acc()? - self.history.last()?.val_rob_acc)
    }

    /// Temperature and interpolation factor at the current position, when ADR is on.
    pub fn schedule_values(&self) -> Option<(f64, f64)> {
        let adr = self.config.adr_schedules()?;
        Some((
            schedule_value(&adr.tau, self.epoch, self.iteration),
            schedule_value(&adr.lambda, self.epoch, self.iteration),
        ))
    }

    pub fn learning_rate(&self) -> f64 {
        lr_at(self.config.sgd.lr, self.epoch, self.config.epochs)
    }

    /// Checks the bookkeeping invariants: counters match the history and the
    /// retained snapshot is the best recorded epoch.
    pub fn check_consistency(&self) -> Result<()> {
        if self.history.len() != self.epoch {
            return Err(Error::Usage(format!(
                "history has {} entries after {} epochs",
                self.history.len(),
                self.epoch
            )));
        }
        let best = best_epoch(&self.history);
        let kept = self.best.as_ref().map(|b| b.epoch);
        if best != kept {
            return Err(Error::Usage(format!("best snapshot at {kept:?} but history peaks at {best:?}")));
        }
        if !self.ema.teacher.same_layout(&self.student) || !self.optimizer.velocity.same_layout(&self.student) {
            return Err(Error::dim("run state", "student, teacher and velocity layouts differ"));
        }
        Ok(())
    }
}

fn schedule_value(spec: &AnnealSpec, epoch: usize, iteration: u64) -> f64 {
    let t = match spec.unit {
        ScheduleUnit::PerEpoch => epoch,
        ScheduleUnit::PerIteration => iteration as usize,
    };
    spec.at_clamped(t)
}

/// Epoch whose validation robust accuracy is highest; the earliest wins ties.
pub fn best_epoch(history: &[EpochMetrics]) -> Option<usize> {
    let mut best: Option<&EpochMetrics> = None;
    for m in history {
        if best.is_none_or(|b| m.val_rob_acc > b.val_rob_acc) {
            best = Some(m);
        }
    }
    best.map(|m| m.epoch)
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    /// Targets used for both the attack and the loss.
    pub targets: Tensor,
    /// Clean batch after augmentation; the attack starts from here.
    pub inputs: Tensor,
    pub adversarial: Tensor,
}

/// Runs a training configuration over a fixed train/validation split.
pub struct Trainer {
    state: RunState,
    train: Dataset,
    val: Dataset,
}

fn check_dataset(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if ds.image_shape() != spec.input_shape || ds.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset '{}' has images {:?} and {} classes, model expects {:?} and {}",
            ds.name,
            ds.image_shape(),
            ds.num_classes,
            spec.input_shape,
            spec.num_classes
        )));
    }
    if ds.is_empty() {
        return Err(Error::Config(format!("dataset '{}' is empty", ds.name)));
    }
    Ok(())
}

impl Trainer {
    /// Holds out a seeded, stratified validation split of `dataset`.
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        Self::resume(RunState::initial(config)?, dataset)
    }

    /// Continues from a saved state; the split is recomputed from the seed.
    pub fn resume(state: RunState, dataset: &Dataset) -> Result<Self> {
        state.config.validate()?;
        state.check_consistency()?;
        check_dataset(state.spec(), dataset)?;
        let (tr, va) = split_indices(dataset, state.config.val_fraction, state.config.seed)?;
        Self::with_split(state, dataset.subset(&tr), dataset.subset(&va))
    }

    /// Uses caller-provided training and validation sets.
    pub fn with_split(state: RunState, train: Dataset, val: Dataset) -> Result<Self> {
        check_dataset(state.spec(), &train)?;
        check_dataset(state.spec(), &val)?;
        Ok(Self { state, train, val })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn val_set(&self) -> &Dataset {
        &self.val
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_finished()
    }

    /// Training-set order for the current epoch.
    pub fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut substream(self.state.config.seed, tags::SHUFFLE, self.state.epoch as u64));
        order
    }

    /// One optimizer step on an explicit batch, using the current epoch's
    /// learning rate and schedules and the current step's random streams.
    ///
    /// On error the state is left untouched.
    pub fn step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepOutcome> {
        let st = &mut self.state;
        let cfg = &st.config;
        let spec = &cfg.model;
        let x = if cfg.augment.is_identity() {
            x.clone()
        } else {
            let mut rng = substream(cfg.seed, tags::AUGMENT, st.iteration);
            augment(x, cfg.augment.pad, cfg.augment.flip_prob, &mut rng)
        };
        let targets = match st.schedule_values() {
            Some((tau, lambda)) => {
                let teacher_logits = forward(&st.ema.teacher, spec, &x)?;
                targets_tensor(&rectify_batch(&teacher_logits, y, tau, lambda)?)
            }
            None => one_hot(y, spec.num_classes)?,
        };
        let mut rng = substream(cfg.seed, tags::ATTACK, st.iteration);
        let (loss, grads, adversarial) = match cfg.method {
            Method::At => {
                let adv = pgd(&st.student, spec, &x, &targets, &cfg.attack, &mut rng)?;
                let mut rec = forward_recorded(&st.student, spec, &adv, GradRequest::PARAMS)?;
                let loss = rec.tape.soft_cross_entropy(rec.logits, &targets)?;
                let value = rec.tape.value(loss).item()?;
                let mut g = rec.tape.backward(loss)?;
                let grads: Vec<Tensor> = rec.params.iter().map(|v| g.take(*v).expect("param grad")).collect();
                (value, grads, adv)
            }
            Method::Trades => {
                let clean = forward(&st.student, spec, &x)?;
                let adv = pgd_kl(&st.student, spec, &x, &clean, &cfg.attack, &mut rng)?.adversarial;
                let (value, grads) = trades_value_and_grad(&st.student, spec, &x, &adv, &targets, cfg.beta)?;
                (value, grads, adv)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {} step {}",
                st.epoch, st.iteration
            )));
        }
        let lr = st.learning_rate();
        sgd_step(&mut st.student, &grads, &mut st.optimizer, &cfg.sgd, lr)?;
        st.ema.update(&st.student)?;
        st.iteration += 1;
        Ok(StepOutcome {
            loss,
            targets,
            inputs: x,
            adversarial,
        })
    }

    /// One pass over the shuffled training set followed by validation of the
    /// student and the EMA teacher.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        self.run_epoch_observed(|_| Ok(()))
    }

    /// Like [`Trainer::run_epoch`], handing every step's outcome to `observe`.
    pub fn run_epoch_observed<F>(&mut self, mut observe: F) -> Result<EpochMetrics>
    where
        F: FnMut(&StepOutcome) -> Result<()>,
    {
        if self.is_finished() {
            return Err(Error::Usage(format!(
                "run already completed {} epochs",
                self.state.config.epochs
            )));
        }
        let started = Instant::now();
        let lr = self.state.learning_rate();
        let sched = self.state.schedule_values();
        let order = self.epoch_order();
        let batch = self.state.config.batch_size;
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (x, y) = self.train.batch(chunk);
            let outcome = self.step(&x, &y)?;
            observe(&outcome)?;
            loss_sum += outcome.loss * chunk.len() as f64;
        }
        let st = &self.state;
        let cfg = &st.config;
        let student = validate(&st.student, &cfg.model, &self.val, &cfg.eval_attack, cfg.seed)?;
        let teacher = validate(&st.ema.teacher, &cfg.model, &self.val, &cfg.eval_attack, cfg.seed)?;
        let metrics = EpochMetrics {
            epoch: st.epoch,
            lr,
            tau: sched.map(|s| s.0),
            lambda: sched.map(|s| s.1),
            train_loss: loss_sum / order.len() as f64,
            val_std_acc: student.standard_acc,
            val_rob_acc: student.robust_acc,
            val_rob_acc_ema: teacher.robust_acc,
            wall_s: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        info!(
            "epoch {} loss {:.4} val std {:.4} rob {:.4} ema {:.4}",
            metrics.epoch, metrics.train_loss, metrics.val_std_acc, metrics.val_rob_acc, metrics.val_rob_acc_ema
        );
        let st = &mut self.state;
        if st.best_robust_acc().is_none_or(|b| metrics.val_rob_acc > b) {
            debug!("new best robust accuracy {} at epoch {}", metrics.val_rob_acc, metrics.epoch);
            st.best = Some(BestSnapshot {
                epoch: metrics.epoch,
                val_rob_acc: metrics.val_rob_acc,
                student: st.student.clone(),
                teacher: st.ema.teacher.clone(),
            });
        }
        st.history.push(metrics.clone());
        st.epoch += 1;
        Ok(metrics)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run_with<F>(&mut self, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&RunState, &EpochMetrics) -> Result<()>,
    {
        while !self.is_finished() {
            let m = self.run_epoch()?;
            on_epoch(&self.state, &m)?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunState> {
        self.run_with(|_, _| Ok(()))?;
        Ok(self.state)
    }
}

/// Baseline adversarial training against one-hot labels.
pub fn train_at(config: TrainConfig, dataset: &Dataset) -> Result<RunState> {
    if config.use_adr {
        return Err(Error::Usage("train_at called with use_adr set".into()));
    }
    Trainer::new(config, dataset)?.run()
}

/// Adversarial training against rectified teacher targets.
pub fn train_adr(config: TrainConfig, dataset: &Dataset) -> Result<RunState> {
    if !config.use_adr {
        return Err(Error::Usage("train_adr called without use_adr".into()));
    }
    Trainer::new(config, dataset)?.run()
}

/// Standard and robust accuracy of a parameter set (student or teacher) on a
/// held-out split.
pub fn validate(params: &ParamSet, spec: &ModelSpec, val: &Dataset, attack: &AttackConfig, seed: u64) -> Result<Accuracy> {
    evaluate_tagged(params, spec, val, attack, seed, tags::VALIDATION_ATTACK)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("TRADES beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// `CE(f(x), targets) + β·KL(softmax f(x) ‖ softmax f(x'))`.
pub fn trades_loss(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    x_adv: &Tensor,
    targets: &Tensor,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let mut tape = Tape::new();
    let (loss, _) = record_trades(&mut tape, params, spec, x, x_adv, targets, beta, false)?;
    tape.value(loss).item()
}

fn trades_value_and_grad(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    x_adv: &Tensor,
    targets: &Tensor,
    beta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_beta(beta)?;
    let mut tape = Tape::new();
    let (loss, pv) = record_trades(&mut tape, params, spec, x, x_adv, targets, beta, true)?;
    let value = tape.value(loss).item()?;
    let mut g = tape.backward(loss)?;
    Ok((value, pv.iter().map(|v| g.take(*v).expect("param grad")).collect()))
}

#[allow(clippy::too_many_arguments)]
fn record_trades(
    tape: &mut Tape,
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor,
    x_adv: &Tensor,
    targets: &Tensor,
    beta: f64,
    grad: bool,
) -> Result<(crate::numerics::Var, Vec<crate::numerics::Var>)> {
    if x.shape() != x_adv.shape() {
        return Err(Error::dim(
            "trades_loss",
            format!("clean {:?} vs adversarial {:?}", x.shape(), x_adv.shape()),
        ));
    }
    let pv: Vec<_> = params.tensors().map(|t| tape.leaf(t.clone(), grad)).collect();
    let xc = tape.leaf(x.clone(), false);
    let xa = tape.leaf(x_adv.clone(), false);
    let clean = forward_on_tape(tape, spec, xc, &pv)?;
    let adv = forward_on_tape(tape, spec, xa, &pv)?;
    let ce = tape.soft_cross_entropy(clean, targets)?;
    let kl = tape.kl_divergence(adv, clean)?;
    let kl = tape.scale(kl, beta);
    Ok((tape.add(ce, kl)?, pv))
}
