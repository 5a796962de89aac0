use mcdncnn::datapipe::{assemble_batch, build_training_set, PatchConfig, PatchSample, Regime};
use mcdncnn::optim::{adam_step, lr_at_epoch, train, write_loss_csv, AdamState, TrainConfig, Trainer};
use mcdncnn::phantom::phantom;
use mcdncnn::{build_model, ModelConfig, Tensor};

fn small_model(seed: u64) -> mcdncnn::Model {
    let config = ModelConfig {
        width: 8,
        depth: 5,
        ..ModelConfig::default()
    };
    build_model(config, seed).unwrap()
}

fn samples(count: usize, patch: usize, seed: u64) -> Vec<PatchSample> {
    let volumes = vec![phantom([48, 48, 10], seed).unwrap()];
    let cfg = PatchConfig {
        patch,
        stride: 4,
        target_count: count,
    };
    build_training_set(&volumes, &Regime::Specific(9.0), &cfg, seed).unwrap()
}

fn fast(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr_start: 1e-3,
        lr_end: 1e-4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_follows_the_stated_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 1e-1);
    assert_eq!(lr_at_epoch(&cfg, 49).unwrap(), 1e-4);
    assert!(lr_at_epoch(&cfg, 50).is_err());
    let lrs: Vec<f64> = (0..50).map(|e| lr_at_epoch(&cfg, e).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    for e in 0..50 {
        let product = lrs[e] * lrs[49 - e];
        assert!((product / (1e-1 * 1e-4) - 1.0).abs() < 1e-12);
    }
    let ratio = (lrs[1] / lrs[0]).ln();
    assert!((ratio - (1e-3f64).ln() / 49.0).abs() < 1e-12);
}

#[test]
fn adam_first_step_is_signed_learning_rate() {
    let cfg = TrainConfig::default();
    for g in [0.5f32, -3.0, 1e-3] {
        let mut p = Tensor::full(&[1], 1.0f32);
        let grad = Tensor::full(&[1], g);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&grad], &mut state, 0.01, &cfg).unwrap();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + ε)
        let expected = 1.0 - 0.01 * g as f64 / (g.abs() as f64 + 1e-8);
        assert!((p.data()[0] as f64 - expected).abs() < 1e-7, "g={g}");
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = Tensor::<f32>::zeros(&[2]);
    let mut state = AdamState::new(&[&p]);
    let g = Tensor::zeros(&[3]);
    assert!(adam_step(&mut [&mut p], &[&g], &mut state, 0.1, &TrainConfig::default()).is_err());
}

#[test]
fn history_has_one_entry_per_epoch_and_is_reproducible() {
    let data = samples(12, 12, 1);
    let mut a = small_model(4);
    let mut b = small_model(4);
    let mut seen = 0;
    let ha = train(&mut a, &data, &fast(3), |_| seen += 1).unwrap();
    let hb = train(&mut b, &data, &fast(3), |_| {}).unwrap();
    assert_eq!(ha.len(), 3);
    assert_eq!(seen, 3);
    assert_eq!(ha.iter().map(|h| h.epoch).collect::<Vec<_>>(), [0, 1, 2]);
    for (x, y) in ha.iter().zip(&hb) {
        assert_eq!(x.mean_loss.to_bits(), y.mean_loss.to_bits());
    }
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&ha, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,lr,mean_loss"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn zero_residual_targets_drive_loss_down() {
    let mut data = samples(16, 12, 2);
    for s in &mut data {
        s.noisy_center = s.clean_center.clone();
    }
    let mut model = small_model(5);
    let history = train(&mut model, &data, &fast(6), |_| {}).unwrap();
    assert!(history.last().unwrap().mean_loss < history[0].mean_loss, "{history:?}");
}

#[test]
fn repeated_steps_overfit_one_batch() {
    let data = samples(8, 20, 3);
    let refs: Vec<_> = data.iter().collect();
    let (input, noisy, clean) = assemble_batch(&refs).unwrap();
    let mut model = small_model(6);
    let mut trainer = Trainer::new(&model, fast(1)).unwrap();
    let first = trainer.step(&mut model, &input, &noisy, &clean, 1e-3).unwrap();
    let mut last = first;
    for _ in 1..200 {
        last = trainer.step(&mut model, &input, &noisy, &clean, 1e-3).unwrap();
    }
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

#[test]
fn empty_dataset_is_rejected() {
    let mut model = small_model(1);
    assert!(train(&mut model, &[], &fast(1), |_| {}).is_err());
    let bad = TrainConfig {
        lr_end: 1.0,
        lr_start: 0.1,
        ..TrainConfig::default()
    };
    assert!(train(&mut model, &samples(2, 12, 1), &bad, |_| {}).is_err());
}
