use cpe_core::experiment::{
    run_comparison, run_comparison_arms, run_trial, scenario_config, scenario_suite, ComparisonReport, ScenarioSpec,
    TrialResult,
};
use cpe_core::report::to_canonical_json;
use cpe_core::stats::mean;
use cpe_core::Mode;

fn compare(id: &str, trials: usize, seed: u64) -> ComparisonReport {
    let spec = ScenarioSpec::preset(id).unwrap();
    let template = scenario_config(&spec).unwrap();
    run_comparison(&spec, &template, trials, seed).unwrap()
}

fn check_trial(r: &TrialResult) {
    assert!(r.mttr_values_s.iter().all(|&v| v > 0.0), "{:?}", r.mttr_values_s);
    assert_eq!(r.mean_mttr_s, mean(&r.mttr_values_s));
    for i in &r.incidents {
        if let Some(d) = i.t_detected_s {
            assert!(i.t_injected_s <= d);
            if let Some(rec) = i.t_recovered_s {
                assert!(d <= rec);
            }
        } else {
            assert!(i.t_recovered_s.is_none());
        }
    }
    assert!((0.0..=1.0).contains(&r.slo_compliance_fraction));
    assert!(r.violations_per_hr >= 0.0);
}

fn check_report(r: &ComparisonReport) {
    for arm in [&r.baseline, &r.cpe] {
        assert!(arm.mttr_ci.lo <= arm.mean_mttr_s && arm.mean_mttr_s <= arm.mttr_ci.hi);
        assert_eq!(arm.resolved + arm.unresolved, arm.incidents);
    }
    assert!((0.0..=1.0).contains(&r.mwu.p_value));
    assert!((-1.0..=1.0).contains(&r.cliffs_delta));
    assert_eq!(r.baseline_trials.len(), r.trials);
    assert_eq!(r.cpe_trials.len(), r.trials);
    for (a, b) in r.baseline_trials.iter().zip(&r.cpe_trials) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.mode, r.baseline.mode);
        assert_eq!(b.mode, r.cpe.mode);
        check_trial(a);
        check_trial(b);
    }
}

#[test]
fn arms_differ_only_in_mode() {
    let cfg = scenario_config(&ScenarioSpec::preset("S2").unwrap()).unwrap();
    let a = cfg.with_arm(Mode::Baseline, 9);
    let b = cfg.with_arm(Mode::Cpe, 9);
    assert_ne!(a.digest(), b.digest());
    assert_eq!(a, b.with_arm(Mode::Baseline, 9));
}

#[test]
fn trials_are_deterministic() {
    let mut cfg = scenario_config(&ScenarioSpec::preset("S2").unwrap()).unwrap();
    cfg.mode = Mode::Cpe;
    cfg.seed = 11;
    let a = run_trial(&cfg).unwrap();
    let b = run_trial(&cfg).unwrap();
    assert_eq!(to_canonical_json(&a.result), to_canonical_json(&b.result));
    check_trial(&a.result);
}

#[test]
fn comparisons_are_byte_identical() {
    let a = compare("S2", 2, 5);
    let b = compare("S2", 2, 5);
    assert_eq!(to_canonical_json(&a), to_canonical_json(&b));
    check_report(&a);
}

#[test]
fn identical_arms_are_null() {
    let spec = ScenarioSpec::preset("S2").unwrap();
    let template = scenario_config(&spec).unwrap();
    let r = run_comparison_arms(&spec, &template, 3, 42, (Mode::Baseline, Mode::Baseline)).unwrap();
    assert_eq!(r.delta_mttr_pct, 0.0);
    assert_eq!(r.delta_re_pct, Some(0.0));
    assert_eq!(r.delta_violations_pct, Some(0.0));
    assert_eq!(r.cliffs_delta, 0.0);
    assert!(r.mwu.p_value >= 0.99);
    check_report(&r);
}

#[test]
fn bursty_scenario_favours_the_closed_loop() {
    let r = compare("S2", 3, 42);
    check_report(&r);
    assert!(r.delta_mttr_pct > 0.0);
    assert!(r.delta_violations_pct.unwrap() > 0.0);
    assert!(r.cliffs_delta > 0.0, "baseline MTTR should dominate");
    assert!(r.cpe.autonomy_pct.unwrap() > r.baseline.autonomy_pct.unwrap_or(0.0));
}

#[test]
fn suite_covers_every_scenario() {
    let suite = scenario_suite(1, 42).unwrap();
    assert_eq!(suite.keys().cloned().collect::<Vec<_>>(), ["S1", "S2", "S3", "S4"]);
    for (id, r) in &suite {
        assert_eq!(&r.scenario.id, id);
        check_report(r);
    }
    // Same faults, tighter thresholds: more episodes cross the alert line.
    assert!(suite["S3"].baseline.detected > suite["S1"].baseline.detected);
}
