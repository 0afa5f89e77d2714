use cosinegate::data::{Dataset, Split};
use cosinegate::error::Error;
use cosinegate::harness::gradsuite::run_gradient_suite;
use cosinegate::harness::{evaluate, run_training, DatasetKind, GateTraceRecord, TrainConfig, Trainer, PRESET_NAMES};
use cosinegate::losses::prog_schedule;
use cosinegate::model::{GateOverride, GatedNetwork, Topology};
use cosinegate::nn::cross_entropy;
use cosinegate::optim::SgdState;
use cosinegate::data::normalize;
use cosinegate::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_topology() -> Topology {
    Topology {
        in_channels: 1,
        image_size: 8,
        stem_width: 4,
        stages: vec![(4, 1), (8, 1)],
        num_classes: 3,
    }
}

/// Class k lights up a k-dependent band of rows, plus noise.
fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut data = Vec::with_capacity(n * 64);
    for &y in &labels {
        for p in 0..64 {
            let row = p / 8;
            let on = row / 3 == y;
            data.push(if on { 0.8 } else { 0.1 } + 0.1 * rng.random::<f32>());
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels, 3, Split::Train).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup: 2,
        batch_size: 8,
        lr0: 0.05,
        dataset: DatasetKind::Mnist,
        ..TrainConfig::balanced()
    }
}

fn tiny_trainer(cfg: TrainConfig) -> Trainer {
    let net = GatedNetwork::new(tiny_topology(), &cfg.gate_config(), cfg.seed).unwrap();
    Trainer::with_network(cfg, net).unwrap()
}

#[test]
fn presets_and_unknown_preset() {
    let a = TrainConfig::preset("aggressive").unwrap();
    assert_eq!((a.lambda_flops, a.lambda_cons, a.tau_target, a.gamma0), (5.0, 0.01, 0.60, -3.0));
    let b = TrainConfig::preset("Balanced").unwrap();
    assert_eq!((b.lambda_flops, b.lambda_cons, b.tau_target, b.gamma0), (3.0, 0.01, 0.70, -2.5));
    let c = TrainConfig::preset("conservative").unwrap();
    assert_eq!((c.lambda_flops, c.lambda_cons, c.tau_target, c.gamma0), (2.5, 0.05, 0.72, -2.0));
    for p in [&a, &b, &c] {
        assert_eq!((p.epochs, p.warmup, p.batch_size), (160, 40, 128));
        assert_eq!((p.lr0, p.momentum, p.weight_decay), (0.1, 0.9, 5e-4));
    }
    match TrainConfig::preset("turbo") {
        Err(Error::UnknownPreset { valid, .. }) => {
            for name in PRESET_NAMES {
                assert!(valid.contains(name));
            }
        }
        other => panic!("expected UnknownPreset, got {other:?}"),
    }
}

#[test]
fn flops_weight_at_epoch_twenty_is_half() {
    let cfg = TrainConfig::balanced();
    assert_eq!(prog_schedule(20, cfg.warmup), 0.5);
    assert_eq!(prog_schedule(0, cfg.warmup), 0.0);
    assert_eq!(prog_schedule(100, cfg.warmup), 1.0);
}

#[test]
fn gradient_suite_passes() {
    let cases = run_gradient_suite().unwrap();
    assert!(cases.len() >= 25);
    for c in &cases {
        assert!(c.passed(), "{}: {:?}", c.name, c.report);
    }
}

#[test]
fn pinned_open_gates_without_gate_losses_match_plain_training() {
    let mut cfg = tiny_config();
    cfg.lambda_flops = 0.0;
    cfg.lambda_cons = 0.0;
    let ds = toy_dataset(24, 1);
    let mut gated = tiny_trainer(cfg.clone());
    gated.gate_override = GateOverride::OPEN;
    let mut plain = GatedNetwork::new(tiny_topology(), &cfg.gate_config(), cfg.seed).unwrap();
    let mut opt = SgdState::new(cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs).unwrap();
    let aug = DatasetKind::Mnist.augment();

    for step in 0..6 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % 24).collect();
        let (images, labels) = ds.gather(&idx).unwrap();
        gated.train_step(&images, &labels, 1.0, 1.0).unwrap();

        let mut tape = Tape::new();
        let x = tape.constant(normalize(&images, &aug.mean, &aug.std).unwrap());
        let logits = plain.forward_plain_train(&mut tape, x).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        opt.step_available(&mut plain.store, &tape);
    }
    for ((_, a), (_, b)) in gated.net.store.iter().zip(plain.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.max_abs_diff(&b.value) < 1e-6, "{} diverged", a.name);
    }
}

#[test]
fn closed_gates_leave_gate_params_untouched() {
    let mut t = tiny_trainer(tiny_config());
    t.gate_override = GateOverride::CLOSED;
    let before = t.net.store.clone();
    let ds = toy_dataset(16, 2);
    t.train_epoch(&ds, 0, None).unwrap();
    for ((_, a), (_, b)) in t.net.store.iter().zip(before.iter()) {
        if a.name.contains("controller") || a.name.ends_with("gate.gamma") {
            assert_eq!(a.value, b.value, "{} moved", a.name);
        }
    }
}

#[test]
fn evaluation_is_deterministic_and_counts_trace_rows() {
    let t = tiny_trainer(tiny_config());
    let ds = toy_dataset(20, 3);
    let mut trace: Vec<GateTraceRecord> = Vec::new();
    let a = evaluate(&t.net, &ds, &t.augment, 8, 0, Some(&mut trace)).unwrap();
    let b = evaluate(&t.net, &ds, &t.augment, 8, 0, None).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.per_block_skip, b.per_block_skip);
    // three batches (8, 8, 4) times two blocks
    assert_eq!(trace.len(), 6);
    assert_eq!(trace.iter().map(|r| r.cir.len()).sum::<usize>(), 40);
    assert!(trace.iter().flat_map(|r| &r.gate).all(|&g| g == 0.0 || g == 1.0));
}

#[test]
fn same_seed_same_run() {
    let ds = toy_dataset(24, 4);
    let run = || {
        let mut t = tiny_trainer(tiny_config());
        run_training(&mut t, &ds, &ds, None, false, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.metrics, b.metrics);
    let mut cfg = tiny_config();
    cfg.seed = 9;
    let mut t = tiny_trainer(cfg);
    let c = run_training(&mut t, &ds, &ds, None, false, |_| {}).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(16, 5);
    let mut t = tiny_trainer(tiny_config());
    let out = run_training(&mut t, &ds, &ds, Some(dir.path()), true, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 3);
    for f in ["metrics.csv", "best.cgv1", "final.cgv1", "gate_trace.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let rows = cosinegate::harness::read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows, out.metrics);
    // prog follows the warmup of 2 epochs
    let prog: Vec<f64> = rows.iter().map(|m| m.prog).collect();
    assert_eq!(prog, vec![0.0, 0.5, 1.0]);
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = tiny_trainer(tiny_config());
    t.dump_dir = Some(dir.path().to_path_buf());
    let (_, p) = t.net.store.iter_mut().find(|(_, p)| p.name == "head.fc.weight").unwrap();
    p.value.data_mut()[0] = f32::NAN;
    let ds = toy_dataset(16, 6);
    match t.train_epoch(&ds, 2, None) {
        Err(Error::NonFinite { detail, .. }) => assert!(detail.contains("epoch 2 batch 0")),
        other => panic!("expected NonFinite, got {:?}", other.map(|s| s.train_acc)),
    }
    assert!(dir.path().join("nan_batch_trace.csv").exists());
    assert!(dir.path().join("nan_batch.txt").exists());
}
