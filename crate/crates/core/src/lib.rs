//! Adversarial training with annealed self-distillation rectification.
//!
//! The crate bundles a small reverse-mode tensor engine, two desk-scale
//! classifiers, ℓ∞ PGD attacks, PGD-AT / TRADES training with optional
//! rectified targets from an EMA teacher, and the diagnostics used to study
//! the resulting models (entropy and JS statistics, loss landscapes).
//!
//! ```
//! use adr_core::{adjusted_lambda, rectify};
//!
//! let p_t = [0.3, 0.5, 0.2];
//! let lambda_i = adjusted_lambda(&p_t, 0, 0.7).unwrap();
//! assert!((lambda_i - 0.5).abs() < 1e-12);
//! let target = rectify(&p_t, 0, lambda_i).unwrap();
//! assert!((target.distribution[0] - 0.65).abs() < 1e-12);
//! ```

pub mod adr;
pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod ratio;
pub mod rng;
pub mod schedules;
pub mod train;

pub use adr::{adjusted_lambda, label_smoothing, one_hot, rectify, rectify_batch, teacher_distribution, AdrConfig, RectifiedTarget};
pub use attack::{eps_sweep, evaluate, pgd, pgd_kl, pgd_traced, steps_sweep, Accuracy, AttackConfig, PgdTrace, SweepRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use data::{load_cifar10_bin, load_mnist_idx, split, synth_blobs, DataError, Dataset};
pub use diagnostics::{
    confidence_split, consistency_report, entropy, input_landscape, js_divergence, weight_landscape, ConsistencyReport,
    EntropyReport, LandscapeGrid,
};
pub use error::{Error, Result};
pub use models::{forward, init, ModelKind, ModelSpec, ParamSet};
pub use numerics::{Tape, Tensor, Var};
pub use optim::{ema_update, lr_at, sgd_step, EmaState, SgdConfig, SgdState};
pub use schedules::{cosine_anneal, AnnealSpec, ScheduleUnit};
pub use train::{train_adr, train_at, trades_loss, EpochMetrics, Method, RunState, TrainConfig, Trainer};
