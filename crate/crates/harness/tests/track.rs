use std::cell::RefCell;

use mst_core::{BoxXYWH, Tracker, TrackerConfig};
use mst_harness::image::Image;
use mst_harness::scene::SyntheticScene;
use mst_harness::track::track;

fn tracker() -> Tracker<f64> {
    Tracker::new(TrackerConfig::desk(), 8).unwrap()
}

#[test]
fn first_prediction_is_the_init_box() {
    let s = SyntheticScene::random(4, 5, 96);
    let init = s.box_at(0);
    let boxes = track(&tracker(), 5, init, |t| Ok(s.render(t))).unwrap();
    assert_eq!(boxes.len(), 5);
    assert_eq!(boxes[0], init);
    for b in &boxes[1..] {
        assert!(b.is_finite() && b.w >= 1.0 && b.x >= 0.0 && b.x + b.w <= 96.0 + 1e-9);
    }
}

#[test]
fn frames_are_read_in_order_and_never_ahead() {
    let s = SyntheticScene::random(5, 8, 96);
    let seen = RefCell::new(Vec::new());
    let boxes = track(&tracker(), 8, s.box_at(0), |t| {
        seen.borrow_mut().push(t);
        Ok(s.render(t))
    })
    .unwrap();
    assert_eq!(*seen.borrow(), (0..8).collect::<Vec<_>>());

    // changing later frames leaves earlier predictions alone
    let other = SyntheticScene::random(6, 8, 96);
    let mixed = track(&tracker(), 8, s.box_at(0), |t| Ok(if t < 5 { s.render(t) } else { other.render(t) })).unwrap();
    assert_eq!(boxes[..5], mixed[..5]);
}

#[test]
fn degenerate_init_box_is_a_usage_error() {
    let img = Image::new(64, 64);
    let err = track(&tracker(), 3, BoxXYWH::new(5.0, 5.0, 0.0, 4.0), |_| Ok(img.clone())).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(track(&tracker(), 0, BoxXYWH::default(), |_| Ok(img.clone())).unwrap().is_empty());
}
