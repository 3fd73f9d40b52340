use std::path::Path;

use mst_core::metrics::{Summary, SequenceResult};
use mst_core::BoxXYWH;
use mst_harness::eval::{evaluate, evaluate_all};
use mst_harness::scene::format_boxes;

fn put(dir: &Path, name: &str, boxes: &[BoxXYWH]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format_boxes(boxes)).unwrap();
    p
}

fn gt() -> Vec<BoxXYWH> {
    vec![
        BoxXYWH::new(10.0, 10.0, 20.0, 20.0),
        BoxXYWH::new(12.0, 11.0, 20.0, 22.0),
        BoxXYWH::new(15.0, 12.0, 21.0, 22.0),
        BoxXYWH::new(18.0, 14.0, 21.0, 23.0),
        BoxXYWH::new(20.0, 15.0, 22.0, 24.0),
    ]
}

#[test]
fn copied_ground_truth_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    let g = put(d.path(), "gt.txt", &gt());
    let s = evaluate(&g, &g).unwrap();
    assert_eq!((s.ao, s.auc, s.p_20), (1.0, 1.0, 1.0));
}

#[test]
fn zero_boxes_score_nothing() {
    let d = tempfile::tempdir().unwrap();
    let g = put(d.path(), "gt.txt", &gt());
    let p = put(d.path(), "p.txt", &[BoxXYWH::default(); 5]);
    assert_eq!(evaluate(&p, &g).unwrap().ao, 0.0);
}

#[test]
fn five_frame_case_matches_the_metrics() {
    let d = tempfile::tempdir().unwrap();
    let pred = vec![
        BoxXYWH::new(10.0, 10.0, 20.0, 20.0),
        BoxXYWH::new(14.0, 11.0, 20.0, 20.0),
        BoxXYWH::new(40.0, 12.0, 21.0, 22.0),
        BoxXYWH::new(18.0, 20.0, 25.0, 20.0),
        BoxXYWH::new(0.0, 0.0, 10.0, 10.0),
    ];
    let g = put(d.path(), "gt.txt", &gt());
    let p = put(d.path(), "p.txt", &pred);
    let got = evaluate(&p, &g).unwrap();
    let want = Summary::of(&SequenceResult::from_pairs(&pred, &gt()).unwrap());
    for (a, b) in [(got.ao, want.ao), (got.auc, want.auc), (got.p_20, want.p_20), (got.pnorm, want.pnorm)] {
        assert!((a - b).abs() < 1e-4, "{got:?} vs {want:?}");
    }
    // frame 1: inter 18·20 = 360, union 400 + 440 − 360 = 480
    assert!((mst_core::boxes::iou(&pred[1], &gt()[1]) - 0.75).abs() < 1e-12);
    // centre errors 0, 1.5, 25, 5.55.., 27.5..: three within 20 px
    assert!((got.p_20 - 0.6).abs() < 1e-12);

    let (text, csv) = evaluate_all(&[("seq".into(), p.as_path(), g.as_path())]).unwrap();
    assert!(text.contains("seq") && text.contains("aggregate"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn length_mismatch_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let g = put(d.path(), "gt.txt", &gt());
    let p = put(d.path(), "p.txt", &gt()[..3]);
    assert_eq!(evaluate(&p, &g).unwrap_err().exit_code(), 2);
}
