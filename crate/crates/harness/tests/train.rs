use mst_core::boxes::iou;
use mst_core::{BoxXYWH, TrackerConfig};
use mst_harness::checkpoint::encode;
use mst_harness::scene::SyntheticScene;
use mst_harness::track::track;
use mst_harness::train::{loss_csv, train, LoadedSequence, TrainOptions};

fn small() -> TrackerConfig {
    TrackerConfig {
        embed_dim: 32,
        num_layers: 3,
        head_channels: 32,
        ..TrackerConfig::desk()
    }
}

fn sequence(scene: &SyntheticScene) -> LoadedSequence {
    LoadedSequence {
        name: "s".into(),
        frames: (0..scene.num_frames).map(|t| scene.render(t)).collect(),
        gt: scene.boxes(),
    }
}

fn plain(epochs: usize, batch: usize, lr: f64) -> TrainOptions {
    TrainOptions {
        epochs,
        lr,
        batch,
        shift_jitter: 0.0,
        scale_jitter: 0.0,
        colour_augment: false,
        ..TrainOptions::default()
    }
}

#[test]
fn zero_learning_rate_keeps_the_loss() {
    let data = [sequence(&SyntheticScene::random(1, 4, 96))];
    let rep = train(&small(), &data, &plain(3, 4, 0.0), |_| {}).unwrap();
    assert!(rep.abort.is_none());
    let first = rep.epochs[0].loss;
    for e in &rep.epochs {
        assert!((e.loss - first).abs() <= 1e-12 * first, "{} vs {first}", e.loss);
    }
}

#[test]
fn same_seed_same_curve_and_weights() {
    let data = [sequence(&SyntheticScene::random(2, 6, 96))];
    let opts = TrainOptions {
        epochs: 2,
        batch: 4,
        ..TrainOptions::default()
    };
    let a = train(&small(), &data, &opts, |_| {}).unwrap();
    let b = train(&small(), &data, &opts, |_| {}).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(loss_csv(&a.epochs), loss_csv(&b.epochs));
    assert_eq!(encode(&a.tracker), encode(&b.tracker));
    let c = train(&small(), &data, &TrainOptions { seed: 43, ..opts }, |_| {}).unwrap();
    assert_ne!(a.epochs, c.epochs);
}

#[test]
fn empty_data_is_a_usage_error() {
    let Err(err) = train(&small(), &[], &TrainOptions::default(), |_| {}) else {
        panic!("trained on nothing");
    };
    assert_eq!(err.exit_code(), 1);
}

const TARGET: BoxXYWH = BoxXYWH {
    x: 40.0,
    y: 41.0,
    w: 16.0,
    h: 14.0,
};

/// The first frame of a motionless scene, ten times over, so 50 epochs are
/// 500 steps.
fn repeated_frame() -> LoadedSequence {
    let mut seq = sequence(&SyntheticScene::fixed(3, 1, 96, TARGET));
    seq.frames = vec![seq.frames[0].clone(); 10];
    seq.gt = vec![seq.gt[0]; 10];
    seq
}

/// One sample repeated: the per-epoch loss curve must fall monotonically
/// after warm-up.
#[test]
fn overfits_a_single_sample() {
    let rep = train(&small(), &[repeated_frame()], &plain(50, 1, 1e-3), |_| {}).unwrap();
    assert_eq!(rep.steps, 500);
    let losses: Vec<f64> = rep.epochs.iter().map(|e| e.loss).collect();
    // warm-up is 25 steps, over by the end of epoch 3
    for (i, w) in losses[2..].windows(2).enumerate() {
        assert!(w[1] <= w[0], "epoch {}: {} -> {}", i + 4, w[0], w[1]);
    }
    assert!(losses[49] < 0.1 * losses[0], "{} vs {}", losses[49], losses[0]);
}

/// Overfit on a motionless target with crop jitter, the tracker must hold
/// it in every frame. Batches of one would make eval-mode batch norm see
/// running statistics unlike any single training batch.
#[test]
fn overfit_model_holds_a_still_target() {
    let opts = TrainOptions {
        epochs: 150,
        batch: 5,
        lr: 1e-3,
        colour_augment: false,
        ..TrainOptions::default()
    };
    let rep = train(&small(), &[repeated_frame()], &opts, |_| {}).unwrap();
    let still = SyntheticScene::fixed(3, 30, 96, TARGET);
    let boxes = track(&rep.tracker, 30, TARGET, |t| Ok(still.render(t))).unwrap();
    for (t, b) in boxes.iter().enumerate() {
        assert!(iou(b, &TARGET) >= 0.7, "frame {t}: {b:?}");
    }
}
