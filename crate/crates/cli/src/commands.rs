use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adr_core::attack::{eps_sweep, evaluate, steps_sweep, write_sweep_csv, AttackConfig, EVAL_CHUNK};
use adr_core::checkpoint::{load_checkpoint, save_checkpoint};
use adr_core::data::Dataset;
use adr_core::diagnostics::{
    confidence_split, consistency_report, entropy_report, input_landscape, linspace, weight_landscape, Subset,
};
use adr_core::models::forward_chunked;
use adr_core::numerics::cross_entropy_per_example;
use adr_core::ratio::parse_ratio;
use adr_core::train::{EpochMetrics, RunState, Trainer};
use adr_core::{Error as CoreError, ParamSet};
use clap::{Args, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DatasetConfig, RunConfig};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const SNAPSHOT_CKPT: &str = "snapshot.ckpt";

fn ratio_arg(s: &str) -> Result<f64, String> {
    parse_ratio(s).map_err(|e| e.to_string())
}

fn ratio_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| ratio_arg(v.trim())).collect()
}

fn usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|v| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"))).collect()
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir` in the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Checkpoint and evaluation data shared by the analysis commands.
#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `mnist:IMAGES,LABELS`, `cifar10:FILE[,FILE..]`, `blobs:SEED,CLASSES,PER_CLASS,CxHxW` or inline JSON.
    #[arg(long)]
    pub dataset: DatasetConfig,
    /// Skip the first N examples.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Use at most N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Evaluate the EMA teacher instead of the student.
    #[arg(long)]
    pub use_ema: bool,
    /// Use the best-validation snapshot stored in the checkpoint.
    #[arg(long)]
    pub best: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Overrides for the attack stored in the checkpoint's `eval_attack`.
#[derive(Args, Debug)]
pub struct AttackArgs {
    /// ℓ∞ radius, e.g. `8/255`.
    #[arg(long, value_parser = ratio_arg)]
    pub eps: Option<f64>,
    /// Step size; defaults to max(ε/4, α₀·ε/ε₀) when only `--eps` is given.
    #[arg(long, value_parser = ratio_arg)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub no_random_init: bool,
}

impl AttackArgs {
    fn resolve(&self, base: &AttackConfig) -> AttackConfig {
        let mut cfg = match self.eps {
            Some(e) => base.scaled_to(e),
            None => base.clone(),
        };
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(k) = self.steps {
            cfg.steps = k;
        }
        if self.no_random_init {
            cfg.random_init = false;
        }
        cfg
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Eps,
    Steps,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub mode: SweepMode,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Comma-separated radii (ratios allowed) or step counts, ascending.
    #[arg(long)]
    pub values: String,
    /// CSV output; a `.json` manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Entropy,
    Js,
    Split,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long, value_enum)]
    pub report: Report,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Treat the dataset as unlabelled out-of-distribution data.
    #[arg(long)]
    pub ood: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeKind {
    Weight,
    Input,
}

#[derive(Args, Debug)]
pub struct LandscapeArgs {
    #[arg(long, value_enum)]
    pub mode: LandscapeKind,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Grid points per axis.
    #[arg(long, default_value_t = 21)]
    pub points: usize,
    /// Grid spans [-range, range] per axis.
    #[arg(long, value_parser = ratio_arg, default_value = "1")]
    pub range: f64,
    /// Example used by the input-space landscape.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// CSV output; a `.json` manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path.display().to_string())(e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(CliError::io(path.display().to_string()))
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn metrics_lines(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))?;
    let dataset = cfg.dataset.load()?;
    let state = match &args.resume {
        Some(path) => {
            let st = load_checkpoint(path).map_err(|source| CliError::Checkpoint {
                path: path.clone(),
                source,
            })?;
            if st.config != cfg.train {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written by a different training config",
                    path.display()
                )));
            }
            st
        }
        None => RunState::initial(cfg.train.clone())?,
    };
    fs::create_dir_all(&out).map_err(CliError::io(format!("creating {}", out.display())))?;
    write_json(
        &out.join(RUN_FILE),
        &json!({ "config": cfg, "seed": cfg.train.seed, "resumed_from": args.resume }),
    )?;
    let metrics_path = out.join(METRICS_FILE);
    fs::write(&metrics_path, metrics_lines(&state.history)).map_err(CliError::io(metrics_path.display().to_string()))?;

    let mut trainer = Trainer::resume(state, &dataset)?;
    info!(
        "training on {} examples, validating on {}",
        trainer.train_set().len(),
        trainer.val_set().len()
    );
    let result = trainer.run_with(|st, m| {
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(f, "{}", serde_json::to_string(m).expect("metrics serialize"))?;
        save_checkpoint(st, out.join(LAST_CKPT))?;
        if st.best.as_ref().is_some_and(|b| b.epoch == m.epoch) {
            save_checkpoint(st, out.join(BEST_CKPT))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        return Err(match e {
            CoreError::NonFinite(_) | CoreError::Feasibility(_) => {
                let snap = out.join(SNAPSHOT_CKPT);
                let saved = save_checkpoint(trainer.state(), &snap).ok().map(|_| snap);
                CliError::Numeric {
                    source: e,
                    snapshot: saved,
                }
            }
            other => other.into(),
        });
    }
    let state = trainer.into_state();
    save_checkpoint(&state, out.join(FINAL_CKPT))?;
    let mut summary = json!({
        "epochs": state.epoch,
        "best_epoch": state.best.as_ref().map(|b| b.epoch),
        "best_val_rob_acc": state.best_robust_acc(),
        "final_val_rob_acc": state.history.last().map(|m| m.val_rob_acc),
        "best_minus_final": state.overfitting_gap(),
    });
    if let Some(test) = &cfg.test_dataset {
        let test = test.load()?;
        let spec = state.spec();
        let final_acc = evaluate(&state.student, spec, &test, &cfg.train.eval_attack, cfg.train.seed)?;
        let best = state.best.as_ref().map(|b| &b.student).unwrap_or(&state.student);
        let best_acc = evaluate(best, spec, &test, &cfg.train.eval_attack, cfg.train.seed)?;
        summary["test"] = json!({ "final": final_acc, "best": best_acc });
    }
    summary["config"] = serde_json::to_value(&cfg).expect("config serializes");
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

struct Loaded {
    state: RunState,
    dataset: Dataset,
}

impl Loaded {
    fn weights(&self, args: &ModelArgs) -> &ParamSet {
        match (&self.state.best, args.best, args.use_ema) {
            (Some(b), true, true) => &b.teacher,
            (Some(b), true, false) => &b.student,
            (_, _, true) => &self.state.ema.teacher,
            _ => &self.state.student,
        }
    }
}

fn load(args: &ModelArgs) -> Result<Loaded, CliError> {
    let state = load_checkpoint(&args.ckpt).map_err(|source| CliError::Checkpoint {
        path: args.ckpt.clone(),
        source,
    })?;
    if args.best && state.best.is_none() {
        return Err(CliError::Config("checkpoint has no best snapshot yet".into()));
    }
    let full = args.dataset.load()?;
    if args.offset > full.len() {
        return Err(CliError::Config(format!("offset {} beyond {} examples", args.offset, full.len())));
    }
    let end = args.limit.map_or(full.len(), |l| (args.offset + l).min(full.len()));
    let dataset = full.slice(args.offset, end);
    let spec = state.spec();
    if dataset.image_shape() != spec.input_shape || dataset.num_classes != spec.num_classes {
        return Err(CliError::Config(format!(
            "dataset images {:?} / {} classes do not fit model input {:?} / {} classes",
            dataset.image_shape(),
            dataset.num_classes,
            spec.input_shape,
            spec.num_classes
        )));
    }
    if dataset.is_empty() {
        return Err(CliError::Config("selected dataset range is empty".into()));
    }
    Ok(Loaded { state, dataset })
}

fn describe(args: &ModelArgs, loaded: &Loaded, attack: &AttackConfig) -> Value {
    json!({
        "checkpoint": args.ckpt,
        "dataset": args.dataset,
        "offset": args.offset,
        "limit": args.limit,
        "n_examples": loaded.dataset.len(),
        "weights": if args.use_ema { "teacher" } else { "student" },
        "snapshot": if args.best { "best" } else { "latest" },
        "seed": args.seed,
        "attack": attack,
        "train_config": loaded.state.config,
    })
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let loaded = load(&args.model)?;
    let attack = args.attack.resolve(&loaded.state.config.eval_attack);
    let acc = evaluate(
        loaded.weights(&args.model),
        loaded.state.spec(),
        &loaded.dataset,
        &attack,
        args.model.seed,
    )?;
    let logits = forward_chunked(loaded.weights(&args.model), loaded.state.spec(), &loaded.dataset.images, EVAL_CHUNK)?;
    let losses = cross_entropy_per_example(&logits, &loaded.dataset.labels)?;
    let mut report = describe(&args.model, &loaded, &attack);
    report["clean_loss"] = json!(losses.iter().sum::<f64>() / losses.len() as f64);
    report["standard_acc"] = json!(acc.standard_acc);
    report["robust_acc"] = json!(acc.robust_acc);
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let loaded = load(&args.model)?;
    let base = args.attack.resolve(&loaded.state.config.eval_attack);
    let (params, spec, ds, seed) = (
        loaded.weights(&args.model),
        loaded.state.spec(),
        &loaded.dataset,
        args.model.seed,
    );
    let (rows, column, values) = match args.mode {
        SweepMode::Eps => {
            let eps = ratio_list(&args.values).map_err(CliError::Config)?;
            (eps_sweep(params, spec, ds, &eps, &base, seed)?, "epsilon", json!(eps))
        }
        SweepMode::Steps => {
            let steps = usize_list(&args.values).map_err(CliError::Config)?;
            (steps_sweep(params, spec, ds, &steps, &base, seed)?, "steps", json!(steps))
        }
    };
    let mut w = create(&args.out)?;
    write_sweep_csv(&mut w, column, &rows)
        .and_then(|_| w.flush())
        .map_err(CliError::io(args.out.display().to_string()))?;
    let mut manifest = describe(&args.model, &loaded, &base);
    manifest["mode"] = json!(args.mode);
    manifest["values"] = values;
    manifest["rows"] = json!(rows);
    write_json(&manifest_path(&args.out), &manifest)?;
    Ok(())
}

fn write_csv(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(CliError::io(path.display().to_string()))
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let loaded = load(&args.model)?;
    let attack = args.attack.resolve(&loaded.state.config.eval_attack);
    let (params, spec, ds) = (loaded.weights(&args.model), loaded.state.spec(), &loaded.dataset);
    fs::create_dir_all(&args.out).map_err(CliError::io(format!("creating {}", args.out.display())))?;
    let mut summary = describe(&args.model, &loaded, &attack);
    summary["report"] = json!(args.report);
    summary["ood"] = json!(args.ood);
    match args.report {
        Report::Entropy => {
            let tag = if args.ood { Subset::Ood } else { Subset::All };
            let r = entropy_report(params, spec, &ds.images, tag)?;
            write_csv(&args.out.join("entropy_hist.csv"), |w| r.histogram.write_csv(w))?;
            summary["entropy"] = json!(r.summary);
        }
        Report::Split => {
            let r = confidence_split(params, spec, ds)?;
            write_csv(&args.out.join("correct_hist.csv"), |w| r.correct.histogram.write_csv(w))?;
            write_csv(&args.out.join("incorrect_hist.csv"), |w| r.incorrect.histogram.write_csv(w))?;
            summary["correct"] = json!(r.correct.summary);
            summary["incorrect"] = json!(r.incorrect.summary);
        }
        Report::Js => {
            let labels = (!args.ood).then_some(ds.labels.as_slice());
            let r = consistency_report(params, spec, &ds.images, labels, &attack, args.model.seed)?;
            write_csv(&args.out.join("js.csv"), |w| {
                writeln!(w, "index,js,entropy_clean,entropy_adv")?;
                for (i, js) in r.js.iter().enumerate() {
                    writeln!(w, "{i},{js},{},{}", r.clean.entropies[i], r.adversarial.entropies[i])?;
                }
                Ok(())
            })?;
            write_csv(&args.out.join("clean_hist.csv"), |w| r.clean.histogram.write_csv(w))?;
            write_csv(&args.out.join("adv_hist.csv"), |w| r.adversarial.histogram.write_csv(w))?;
            summary["js"] = json!(r.js_summary);
            summary["clean_entropy"] = json!(r.clean.summary);
            summary["adv_entropy"] = json!(r.adversarial.summary);
        }
    }
    write_json(&args.out.join("summary.json"), &summary)
}

pub fn landscape(args: &LandscapeArgs) -> Result<(), CliError> {
    let loaded = load(&args.model)?;
    let attack = args.attack.resolve(&loaded.state.config.eval_attack);
    let (params, spec, ds) = (loaded.weights(&args.model), loaded.state.spec(), &loaded.dataset);
    let grid = linspace(-args.range, args.range, args.points);
    let g = match args.mode {
        LandscapeKind::Weight => weight_landscape(params, spec, ds, &grid, args.model.seed, &attack)?,
        LandscapeKind::Input => {
            if args.index >= ds.len() {
                return Err(CliError::Config(format!("--index {} beyond {} examples", args.index, ds.len())));
            }
            let (x, y) = ds.batch(&[args.index]);
            input_landscape(
                params,
                spec,
                &x,
                y[0],
                &grid,
                &grid,
                args.model.seed,
                (attack.clamp_lo, attack.clamp_hi),
            )?
        }
    };
    write_csv(&args.out, |w| g.write_csv(w))?;
    let mut manifest = describe(&args.model, &loaded, &attack);
    manifest["mode"] = json!(args.mode);
    manifest["points"] = json!(args.points);
    manifest["range"] = json!(args.range);
    manifest["index"] = json!(args.index);
    manifest["spread"] = json!(g.spread());
    write_json(&manifest_path(&args.out), &manifest)
}
