use adr_core::attack::pgd_traced;
use adr_core::checkpoint::{from_bytes, to_bytes};
use adr_core::models::forward_chunked;
use adr_core::rng::substream;
use adr_core::train::validate;
use adr_core::{
    eps_sweep, evaluate, init, one_hot, pgd, steps_sweep, synth_blobs, trades_loss, train_at, AttackConfig,
    CheckpointError, Dataset, Error, ModelSpec, ParamSet, Tensor, TrainConfig, Trainer,
};
use adr_core::numerics::soft_cross_entropy;
use approx::assert_abs_diff_eq;

/// Two-class linear model on four inputs: logits = W·x.
fn linear(w: [[f64; 4]; 2]) -> (ModelSpec, ParamSet) {
    let spec = ModelSpec::mlp(vec![4, 2], [1, 1, 4]);
    let mut p = ParamSet::zeros(&spec);
    p.tensor_mut(0).data_mut().copy_from_slice(&[w[0], w[1]].concat());
    (spec, p)
}

fn x4(v: [f64; 4]) -> Tensor {
    Tensor::new(vec![1, 1, 1, 4], v.to_vec()).unwrap()
}

fn blobs_config(epochs: usize) -> (TrainConfig, Dataset) {
    let ds = synth_blobs(3, 3, 24, [1, 4, 4]).unwrap();
    let mut cfg = TrainConfig::new(ModelSpec::mlp(vec![16, 12, 3], [1, 4, 4]), epochs);
    cfg.batch_size = 16;
    cfg.sgd.lr = 0.05;
    cfg.attack = AttackConfig {
        epsilon: 0.05,
        alpha: 0.02,
        steps: 3,
        ..Default::default()
    };
    cfg.eval_attack = cfg.attack.clone();
    (cfg, ds)
}

fn trained_mlp() -> (ModelSpec, ParamSet, Dataset) {
    let (cfg, ds) = blobs_config(4);
    let spec = cfg.model.clone();
    let st = train_at(cfg, &ds).unwrap();
    (spec, st.student, ds)
}

#[test]
fn zero_radius_returns_input_bitwise() {
    let (spec, p) = linear([[1.0, -2.0, 0.5, 0.0], [0.3, 0.1, -1.0, 2.0]]);
    let x = x4([0.2, 0.7, 0.0, 1.0]);
    let cfg = AttackConfig {
        epsilon: 0.0,
        alpha: 0.1,
        steps: 5,
        ..Default::default()
    };
    let adv = pgd(&p, &spec, &x, &one_hot(&[0], 2).unwrap(), &cfg, &mut substream(0, "t", 0)).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn single_step_follows_linear_gradient_sign() {
    // For label y the input gradient of the cross-entropy is (1 − p_y)·(W_other − W_y),
    // so the step direction is sign(W_other − W_y) coordinatewise.
    let w = [[1.0, -2.0, 0.5, 0.25], [0.3, 0.1, -1.0, 2.0]];
    let (spec, p) = linear(w);
    let x = x4([0.5, 0.5, 0.5, 0.5]);
    let cfg = AttackConfig {
        epsilon: 0.2,
        alpha: 0.1,
        steps: 1,
        random_init: false,
        ..Default::default()
    };
    for y in 0..2 {
        let adv = pgd(&p, &spec, &x, &one_hot(&[y], 2).unwrap(), &cfg, &mut substream(0, "t", 0)).unwrap();
        for j in 0..4 {
            let dir = (w[1 - y][j] - w[y][j]).signum();
            assert_eq!(adv.data()[j], 0.5 + 0.1 * dir, "y={y} j={j}");
        }
    }
}

#[test]
fn iterates_stay_in_ball_and_range() {
    let (spec, p, ds) = trained_mlp();
    let cfg = AttackConfig {
        epsilon: 0.1,
        alpha: 0.04,
        steps: 7,
        debug_checks: true,
        ..Default::default()
    };
    let idx: Vec<usize> = (0..32).collect();
    let (x, y) = ds.batch(&idx);
    let t = one_hot(&y, 3).unwrap();
    let trace = pgd_traced(&p, &spec, &x, &t, &cfg, &mut substream(1, "t", 0), false).unwrap();
    assert!(trace.max_ball_excess <= 1e-9);
    for (a, b) in trace.adversarial.data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 0.1 + 1e-12);
        assert!((0.0..=1.0).contains(a));
    }
    let again = pgd(&p, &spec, &x, &t, &cfg, &mut substream(1, "t", 0)).unwrap();
    assert_eq!(again, trace.adversarial);
}

#[test]
fn attack_raises_loss_on_a_trained_model() {
    let (spec, p, ds) = trained_mlp();
    let cfg = AttackConfig {
        epsilon: 0.1,
        alpha: 0.01,
        steps: 10,
        ..Default::default()
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batches: Vec<&[usize]> = idx.chunks(4).collect();
    let mut rising = 0;
    for (i, b) in batches.iter().enumerate() {
        let (x, y) = ds.batch(b);
        let t = one_hot(&y, 3).unwrap();
        let trace = pgd_traced(&p, &spec, &x, &t, &cfg, &mut substream(2, "t", i as u64), true).unwrap();
        assert_eq!(trace.losses.len(), 11);
        if trace.losses.windows(2).all(|w| w[1] >= w[0] - 1e-12) {
            rising += 1;
        }
    }
    assert!(rising as f64 >= 0.95 * batches.len() as f64, "{rising}/{}", batches.len());
}

#[test]
fn sweeps_reduce_to_standard_accuracy() {
    let (spec, p, ds) = trained_mlp();
    let base = AttackConfig {
        epsilon: 0.1,
        alpha: 0.025,
        steps: 5,
        ..Default::default()
    };
    let clean = evaluate(&p, &spec, &ds, &AttackConfig { epsilon: 0.0, ..base.clone() }, 0).unwrap();
    let rows = eps_sweep(&p, &spec, &ds, &[0.0, 2.0 / 255.0, 8.0 / 255.0, 0.5], &base, 0).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].robust_acc, clean.standard_acc);
    assert!(rows[3].robust_acc <= rows[0].robust_acc);

    let no_start = AttackConfig {
        random_init: false,
        ..base.clone()
    };
    let rows = steps_sweep(&p, &spec, &ds, &[0, 1, 5], &no_start, 0).unwrap();
    assert_eq!(rows[0].robust_acc, clean.standard_acc);
    assert!(eps_sweep(&p, &spec, &ds, &[0.1, 0.0], &base, 0).is_err());
}

#[test]
fn robust_never_exceeds_standard_without_random_start() {
    let (spec, p, ds) = trained_mlp();
    let cfg = AttackConfig {
        epsilon: 0.1,
        alpha: 0.03,
        steps: 5,
        random_init: false,
        ..Default::default()
    };
    let acc = validate(&p, &spec, &ds, &cfg, 0).unwrap();
    assert!(acc.robust_acc <= acc.standard_acc);
    assert_eq!(acc.n_examples, ds.len());
}

#[test]
fn untrained_model_is_near_chance() {
    let ds = synth_blobs(5, 10, 60, [1, 8, 8]).unwrap();
    let spec = ModelSpec::small_conv([1, 8, 8], 10);
    let p = init(&spec, 11).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.05,
        alpha: 0.02,
        steps: 3,
        ..Default::default()
    };
    let acc = validate(&p, &spec, &ds, &cfg, 0).unwrap();
    assert!((acc.standard_acc - 0.1).abs() < 0.07, "{acc:?}");
    assert!(acc.robust_acc <= acc.standard_acc + 0.07, "{acc:?}");
}

#[test]
fn one_epoch_smoke_on_64_examples() {
    let ds = synth_blobs(0, 4, 16, [1, 4, 4]).unwrap();
    assert_eq!(ds.len(), 64);
    let mut cfg = TrainConfig::new(ModelSpec::mlp(vec![16, 8, 4], [1, 4, 4]), 1);
    cfg.batch_size = 16;
    let st = train_at(cfg, &ds).unwrap();
    assert_eq!(st.history.len(), 1);
    assert_eq!(st.best.as_ref().map(|b| b.val_rob_acc), st.best_robust_acc());
}

#[test]
fn zero_radius_training_lowers_clean_loss() {
    let (mut cfg, ds) = blobs_config(5);
    cfg.attack.epsilon = 0.0;
    let spec = cfg.model.clone();
    let start = init(&spec, cfg.seed).unwrap();
    let labels = one_hot(&ds.labels, 3).unwrap();
    let loss = |p: &ParamSet| soft_cross_entropy(&forward_chunked(p, &spec, &ds.images, 64).unwrap(), &labels).unwrap();
    let st = train_at(cfg, &ds).unwrap();
    assert!(loss(&st.student) < loss(&start));
}

#[test]
fn teacher_moves_only_by_averaging() {
    let (cfg, ds) = blobs_config(1);
    let gamma = cfg.gamma;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let order = t.epoch_order();
    for chunk in order.chunks(16).take(3) {
        let (x, y) = t.train_set().batch(chunk);
        let before = t.state().ema.teacher.flatten();
        t.step(&x, &y).unwrap();
        let student = t.state().student.flatten();
        let after = t.state().ema.teacher.flatten();
        for ((a, b), s) in after.iter().zip(&before).zip(&student) {
            assert_eq!(*a, gamma * b + (1.0 - gamma) * s);
        }
    }
}

#[test]
fn trades_loss_by_hand() {
    let w = [[0.5, -1.0, 0.25, 2.0], [-0.5, 0.75, 1.0, 0.0]];
    let (spec, p) = linear(w);
    let x = x4([0.2, 0.4, 0.6, 0.8]);
    let xa = x4([0.3, 0.3, 0.7, 0.7]);
    let logits = |v: &[f64]| -> [f64; 2] {
        [0, 1].map(|c| w[c].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
    };
    let softmax = |z: [f64; 2]| {
        let m = z[0].max(z[1]);
        let e = z.map(|v| (v - m).exp());
        e.map(|v| v / (e[0] + e[1]))
    };
    let q = softmax(logits(x.data()));
    let pa = softmax(logits(xa.data()));
    let ce = -q[1].ln();
    let kl: f64 = (0..2).map(|c| q[c] * (q[c].ln() - pa[c].ln())).sum();
    let value = trades_loss(&p, &spec, &x, &xa, &one_hot(&[1], 2).unwrap(), 6.0).unwrap();
    assert_abs_diff_eq!(value, ce + 6.0 * kl, epsilon = 1e-12);

    let same = trades_loss(&p, &spec, &x, &x, &one_hot(&[1], 2).unwrap(), 6.0).unwrap();
    assert_abs_diff_eq!(same, ce, epsilon = 1e-15);
    assert!(matches!(
        trades_loss(&p, &spec, &x, &xa, &one_hot(&[1], 2).unwrap(), 0.0),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn resume_midway_matches_continuous_run() {
    let (cfg, ds) = blobs_config(10);
    let continuous = train_at(cfg.clone(), &ds).unwrap();

    let mut first = Trainer::new(cfg, &ds).unwrap();
    for _ in 0..5 {
        first.run_epoch().unwrap();
    }
    let bytes = to_bytes(first.state()).unwrap();
    let restored = from_bytes(&bytes).unwrap();
    assert_eq!(&restored, first.state());
    let resumed = Trainer::resume(restored, &ds).unwrap().run().unwrap();
    assert_eq!(resumed, continuous);
}

#[test]
fn damaged_checkpoints_are_rejected_distinctly() {
    let (cfg, ds) = blobs_config(1);
    let st = train_at(cfg, &ds).unwrap();
    let bytes = to_bytes(&st).unwrap();

    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(from_bytes(&magic), Err(Error::Checkpoint(CheckpointError::BadMagic))));

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 40;
    flipped[mid] ^= 1;
    assert!(matches!(
        from_bytes(&flipped),
        Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
    ));

    assert!(matches!(
        from_bytes(&bytes[..bytes.len() / 2]),
        Err(Error::Checkpoint(CheckpointError::Truncated(_) | CheckpointError::Checksum { .. }))
    ));
}
