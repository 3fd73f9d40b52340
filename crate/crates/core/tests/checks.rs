use mst_core::checks::{gradient_check_names, gradient_suite, run_gradient_check, ssd_oracle_trials, GRAD_TOL};

#[test]
fn every_registered_check_passes() {
    let results = gradient_suite(None, 3).unwrap();
    assert_eq!(results.len(), gradient_check_names().len());
    for r in &results {
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
        assert!(r.max_rel_err < GRAD_TOL);
    }
}

#[test]
fn filter_selects_by_name() {
    let results = gradient_suite(Some("giou"), 2).unwrap();
    assert!(!results.is_empty());
    assert!(results.iter().all(|r| r.name.contains("giou")));
    assert!(run_gradient_check("no_such_check", 0).is_err());
}

#[test]
fn oracle_trials_agree() {
    let rep = ssd_oracle_trials(100, 0).unwrap();
    assert_eq!(rep.trials, 100);
    assert!(rep.worst_ratio < 1e-9, "{:e} at {:?}", rep.worst_ratio, rep.worst_config);
}
