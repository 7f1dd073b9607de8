//! Acceptance run: one PASS/FAIL line per headline criterion, with its
//! tolerance and runtime budget fixed below. Exits non-zero on any FAIL.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cpe_core::action::{ActionKind, ActionTag, Risk};
use cpe_core::control::{
    evaluate_policy, ungated_executions, ActionStatus, ControlPlane, Decision, GateConfig, PolicyContext, PolicyRule,
    PolicySet, RuleKind, Verdict,
};
use cpe_core::experiment::{run_comparison, run_comparison_arms, scenario_config, ScenarioSpec};
use cpe_core::intelligence::{
    c_factor, score_from_path_length, BaselineAlertRule, ForestParams, IsolationForest, ProposedAction,
};
use cpe_core::simcluster::{
    init_cluster, ClusterConfig, ClusterState, FaultKind, ServiceConfig, ServiceSpec, SimParams, WorkloadProfile,
};
use cpe_core::stats::{
    bootstrap_ci, cliffs_delta, delta_mttr, delta_violations, mann_whitney_u, mttr_per_incident, resource_efficiency,
};
use cpe_core::telemetry::{IncidentRecord, IncidentTracker, RecoveryObservation, SloVerdict};
use cpe_core::Mode;

const DELTA_TOL: f64 = 0.05;
const P_TOL: f64 = 1e-12;
const NULL_P_MIN: f64 = 0.99;
const COVERAGE_MIN: usize = 450;
const C256: f64 = 10.2448;
const C256_TOL: f64 = 1e-4;
const OUTLIER_HITS_MIN: usize = 95;
const GATE_ACTIONS: usize = 1000;
const MTTR_REDUCTION_MIN: f64 = 20.0;
const MWU_ALPHA: f64 = 0.05;
const VIOLATION_REDUCTION_MIN: f64 = 80.0;
const PAIRED_RANGE: (usize, usize) = (35, 50);
const E2E_TRIALS: usize = 5;
const E2E_SEED: u64 = 42;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn incident(detected: Option<u64>, recovered: Option<u64>) -> IncidentRecord {
    IncidentRecord {
        id: 1,
        service: "frontend".into(),
        fault_kind: FaultKind::PodEviction,
        fault_id: 1,
        schedule_index: None,
        t_injected_s: 600,
        t_detected_s: detected,
        t_recovered_s: recovered,
        detector: None,
        mode: Mode::Cpe,
    }
}

fn formula_oracles() -> Check {
    let m = delta_mttr(185.3, 126.5).map_err(|e| e.to_string())?;
    ensure((m - 31.7).abs() < DELTA_TOL, || format!("MTTR delta {m}"))?;
    let v = delta_violations(4.2, 0.3).map_err(|e| e.to_string())?;
    ensure((v - 92.9).abs() < DELTA_TOL, || format!("violation delta {v}"))?;
    let mttr_traces = [
        (Some(630), Some(690), Some(60.0)),
        (Some(600), Some(600), Some(0.0)),
        (Some(810), Some(1020), Some(210.0)),
        (Some(1380), None, None),
        (None, None, None),
        (Some(2580), Some(2610), Some(30.0)),
        (Some(3240), Some(3540), Some(300.0)),
        (Some(3780), Some(5370), Some(1590.0)),
        (Some(4350), Some(4380), Some(30.0)),
        (Some(660), Some(690), Some(30.0)),
    ];
    for (d, r, want) in mttr_traces {
        let got = mttr_per_incident(&incident(d, r));
        ensure(got == want, || format!("mttr {d:?}->{r:?}: {got:?} != {want:?}"))?;
    }
    let re_traces: [(&[f64], &[f64], Option<f64>); 10] = [
        (&[100.0, 100.0], &[1.0, 1.0], Some(100.0)),
        (&[100.0, 300.0], &[2.0, 2.0], Some(100.0)),
        (&[120.0, 80.0, 100.0], &[1.0, 1.5, 0.5], Some(100.0)),
        (&[50.0], &[0.25], Some(200.0)),
        (&[0.0, 0.0], &[1.0, 3.0], Some(0.0)),
        (&[10.0, 10.0], &[0.0, 0.0], None),
        (&[90.0, 110.0, 100.0, 100.0], &[4.0; 4], Some(25.0)),
        (&[64.0, 64.0], &[0.5, 1.5], Some(64.0)),
        (&[1.0, 2.0, 3.0, 4.0], &[0.5; 4], Some(5.0)),
        (&[300.0, 0.0], &[3.0, 1.0], Some(75.0)),
    ];
    for (rps, res, want) in re_traces {
        let got = resource_efficiency(rps, res).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("RE {rps:?}/{res:?}: {got:?} != {want:?}"))?;
    }
    Ok(format!("MTTR {m:.3}%, violations {v:.3}%, 20 traces exact"))
}

fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
        .sum()
}

fn brute_delta(a: &[f64], b: &[f64]) -> f64 {
    let net: i64 = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| (x > y) as i64 - (x < y) as i64))
        .sum();
    net as f64 / (a.len() * b.len()) as f64
}

fn permutation_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let observed = brute_u(a, b);
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << pooled.len()) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (x, y): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            pooled.iter().copied().enumerate().partition(|(i, _)| mask & (1 << i) != 0);
        let x: Vec<f64> = x.into_iter().map(|p| p.1).collect();
        let y: Vec<f64> = y.into_iter().map(|p| p.1).collect();
        let u = brute_u(&x, &y);
        total += 1;
        le += (u <= observed) as u64;
        ge += (u >= observed) as u64;
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

fn statistics_vs_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut exact_p = 0;
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=8);
        let tied = case % 4 == 3;
        let mut draw = |k: usize| -> Vec<f64> {
            (0..k)
                .map(|_| {
                    if tied {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        };
        let a = draw(n);
        let b = draw(m);
        let r = mann_whitney_u(&a, &b).map_err(|e| e.to_string())?;
        let d = cliffs_delta(&a, &b).map_err(|e| e.to_string())?;
        ensure(r.u_a == brute_u(&a, &b), || format!("case {case}: U {} != {}", r.u_a, brute_u(&a, &b)))?;
        ensure(d == brute_delta(&a, &b), || format!("case {case}: delta {d}"))?;
        if !tied {
            let want = permutation_p(&a, &b);
            ensure((r.p_value - want).abs() < P_TOL, || {
                format!("case {case}: p {} != {want}", r.p_value)
            })?;
            exact_p += 1;
        }
    }
    let same = [3.0, 9.0, 14.0, 20.0, 41.0, 55.0, 60.0, 72.0];
    let r = mann_whitney_u(&same, &same).map_err(|e| e.to_string())?;
    let d = cliffs_delta(&same, &same).map_err(|e| e.to_string())?;
    ensure(d == 0.0 && r.p_value >= NULL_P_MIN, || format!("null: delta {d}, p {}", r.p_value))?;
    Ok(format!("200 samples, {exact_p} exact p-values; null p={:.3}", r.p_value))
}

fn bootstrap() -> Check {
    let ci = bootstrap_ci(&[7.5; 20], 2000, 0.95, 1).map_err(|e| e.to_string())?;
    ensure(ci.lo == 7.5 && ci.hi == 7.5, || format!("degenerate CI {ci:?}"))?;
    let data: Vec<f64> = (0..25).map(|i| ((i * 37) % 11) as f64).collect();
    let a = serde_json::to_string(&bootstrap_ci(&data, 10_000, 0.95, 9).map_err(|e| e.to_string())?).unwrap();
    let b = serde_json::to_string(&bootstrap_ci(&data, 10_000, 0.95, 9).map_err(|e| e.to_string())?).unwrap();
    ensure(a == b, || "seeded bootstrap differs".into())?;
    let normal = Normal::new(100.0, 15.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut covered = 0;
    for trial in 0..500u64 {
        let s: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
        let ci = bootstrap_ci(&s, 2000, 0.95, trial).map_err(|e| e.to_string())?;
        covered += (ci.lo <= 100.0 && 100.0 <= ci.hi) as usize;
    }
    ensure(covered >= COVERAGE_MIN, || format!("coverage {covered}/500"))?;
    Ok(format!("coverage {covered}/500"))
}

fn isolation_forest() -> Check {
    ensure(c_factor(1) == 0.0 && c_factor(2) == 1.0, || "c(1), c(2)".into())?;
    let c = c_factor(256);
    ensure((c - C256).abs() < C256_TOL, || format!("c(256) = {c}"))?;
    ensure(score_from_path_length(c, c) == 0.5, || "E[h]=c(psi) is not 0.5".into())?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let mut data: Vec<Vec<f64>> = (0..255)
            .map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        data.push(vec![6.0, 6.0]);
        let forest = IsolationForest::fit(&data, &ForestParams::default(), seed).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = data.iter().map(|x| forest.score(x)).collect();
        ensure(scores.iter().all(|&s| s > 0.0 && s < 1.0), || format!("seed {seed}: score outside (0,1)"))?;
        let top = (0..scores.len()).max_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
        hits += (top == 255) as usize;
    }
    ensure(hits >= OUTLIER_HITS_MIN, || format!("outlier first in {hits}/100"))?;
    Ok(format!("c(256)={c:.5}, outlier first in {hits}/100"))
}

fn replay(script: &str) -> Result<(Option<u64>, Option<u64>), String> {
    let mut tracker = IncidentTracker::new();
    let id = tracker.open_incident("web", FaultKind::PodEviction, 0, Mode::Baseline, 1, Some(0));
    let mut alert = BaselineAlertRule::new("web", 2);
    for (i, code) in script.chars().enumerate() {
        let ts_s = (i as u64 + 1) * 30;
        let verdict = match code {
            'B' => SloVerdict::NonCompliant,
            'U' => SloVerdict::Unknown,
            _ => SloVerdict::Compliant,
        };
        let obs = RecoveryObservation {
            ts_s,
            verdict,
            available_replicas: if code == 'R' { 3 } else { 4 },
            desired_replicas: 4,
            drift_active: code == 'D',
            degraded_replicas: 0,
        };
        if let Some(ev) = alert.observe(ts_s, verdict) {
            tracker.mark_detected(id, ev.ts_s, &ev.detector).map_err(|e| e.to_string())?;
        }
        let rec = tracker.get(id).unwrap();
        if rec.t_detected_s.is_some() && rec.t_recovered_s.is_none() {
            tracker.check_recovery(id, &obs).map_err(|e| e.to_string())?;
        }
    }
    let rec = tracker.get(id).unwrap();
    Ok((rec.t_detected_s, rec.t_recovered_s))
}

fn recovery_oracle() -> Check {
    let cases = [
        ("CCBBBCCC", (Some(120), Some(180))),
        ("BCBBCBCCC", (Some(120), Some(210))),
        ("BUBBUCC", (Some(120), Some(180))),
        ("BBRRDCC", (Some(60), Some(180))),
        ("BBCBCBCB", (Some(60), None)),
    ];
    for (script, want) in cases {
        let got = replay(script)?;
        ensure(got == want, || format!("{script}: {got:?} != {want:?}"))?;
    }
    Ok("5 scripted cases".into())
}

fn gate_cluster() -> ClusterState {
    let svc = |name: &str| ServiceConfig {
        spec: ServiceSpec {
            name: name.into(),
            desired_replicas: 4,
            capacity_rps_per_replica: 100.0,
            vcpu_per_replica: 1.0,
            mem_mb_per_replica: 256.0,
            base_latency_ms: 40.0,
            min_replicas: 1,
            max_replicas: 30,
        },
        workload: WorkloadProfile::steady(200.0),
    };
    let cfg = ClusterConfig {
        services: vec![svc("web"), svc("api")],
        faults: vec![],
        params: SimParams::default(),
    };
    init_cluster(&cfg, 1).expect("valid cluster")
}

fn random_rules(rng: &mut ChaCha8Rng) -> Vec<PolicyRule> {
    const TAGS: [ActionTag; 4] = [
        ActionTag::ScaleUp,
        ActionTag::ScaleDown,
        ActionTag::RestartPod,
        ActionTag::RollbackConfig,
    ];
    (0..rng.random_range(1..6))
        .map(|i| {
            let kind = match rng.random_range(0..4) {
                0 => {
                    let min = rng.random_range(1..5);
                    RuleKind::ReplicaBounds {
                        min,
                        max: min + rng.random_range(0..8),
                    }
                }
                1 => RuleKind::ForbiddenAction {
                    actions: vec![TAGS[rng.random_range(0..4)]],
                },
                2 => RuleKind::RateLimit {
                    max_actions: rng.random_range(1..4),
                    window_s: rng.random_range(30..600),
                },
                _ => RuleKind::ApprovalRequired { risks: vec![Risk::High] },
            };
            PolicyRule::new(&format!("r{i}"), kind)
        })
        .collect()
}

fn random_action(rng: &mut ChaCha8Rng) -> ActionKind {
    match rng.random_range(0..4) {
        0 => ActionKind::ScaleUp {
            delta: rng.random_range(1..4),
        },
        1 => ActionKind::ScaleDown {
            delta: rng.random_range(1..4),
        },
        2 => ActionKind::RestartPod { count: 1 },
        _ => ActionKind::RollbackConfig,
    }
}

fn gate_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A7E);
    let mut state = gate_cluster();
    let mut plane = ControlPlane::new(Mode::Cpe, PolicySet::default_set(), GateConfig::interactive(), 0);
    let mut executed = 0;
    let mut audited = 0;
    for n in 0..GATE_ACTIONS {
        if n % 100 == 0 {
            ensure(ungated_executions(plane.audit()).is_empty(), || "ungated execution".into())?;
            audited += plane.audit().len();
            let rules = random_rules(&mut rng);
            plane = ControlPlane::new(Mode::Cpe, PolicySet::new(rules).unwrap(), GateConfig::batch(), n as u64);
            state = gate_cluster();
        }
        let service = if rng.random_bool(0.5) { "web" } else { "api" };
        let view = state.service_view(service).unwrap();
        let proposal = ProposedAction {
            service: service.into(),
            action: random_action(&mut rng),
            risk: if rng.random_bool(0.5) { Risk::High } else { Risk::Low },
            rationale: "fuzz".into(),
        };
        plane.submit(proposal, &view, state.clock_s);
        for req in plane.pending_approvals() {
            if rng.random_bool(0.4) {
                let d = if rng.random_bool(0.5) { Decision::Approve } else { Decision::Deny };
                plane.decide(req.action_id, d, state.clock_s).map_err(|e| e.to_string())?;
            }
        }
        let probe = rng.random_range(1..=plane.actions().len() as u64);
        let was = plane.action(probe).unwrap().status;
        let ran = plane.execute(probe, &mut state).is_ok();
        ensure(!ran || was == ActionStatus::Approved, || format!("action {probe} ran from {was:?}"))?;
        executed += ran as usize;
        for id in plane.ready() {
            executed += plane.execute(id, &mut state).is_ok() as usize;
        }
        state.step(rng.random_range(1..40)).map_err(|e| e.to_string())?;
        plane.tick(state.clock_s);
    }
    ensure(ungated_executions(plane.audit()).is_empty(), || "ungated execution".into())?;
    audited += plane.audit().len();

    // Deny dominance: a denying rule decides the verdict at every position.
    let view = state.service_view("web").unwrap();
    for _ in 0..200 {
        let action = random_action(&mut rng);
        let mut rules = random_rules(&mut rng);
        let forbid = PolicyRule::new("forbid", RuleKind::ForbiddenAction { actions: vec![action.tag()] });
        let base = rules.len();
        rules.push(forbid);
        for pos in 0..=base {
            let mut ordered = rules.clone();
            let f = ordered.pop().unwrap();
            ordered.insert(pos, f);
            ordered.rotate_left(rng.random_range(0..=base));
            let set = PolicySet::new(ordered).unwrap();
            let proposal = ProposedAction {
                service: "web".into(),
                action,
                risk: Risk::High,
                rationale: "order".into(),
            };
            let ctx = PolicyContext {
                view: &view,
                now_s: 0,
                executions: &[],
            };
            let v = evaluate_policy(&proposal, &set, &ctx).verdict;
            ensure(v == Verdict::Deny, || format!("verdict {v:?} with a forbidding rule"))?;
        }
    }
    Ok(format!("{GATE_ACTIONS} actions, {executed} executed, {audited} audit rows"))
}

fn end_to_end() -> Check {
    let spec = ScenarioSpec::preset("S2").unwrap();
    let template = scenario_config(&spec).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let r = run_comparison(&spec, &template, E2E_TRIALS, E2E_SEED).map_err(|e| e.to_string())?;
    let per_trial = started.elapsed() / (2 * E2E_TRIALS as u32);
    let viol = r.delta_violations_pct.ok_or("baseline recorded no violations")?;
    let re = r.delta_re_pct.ok_or("no matched efficiency")?;
    let summary = format!(
        "MTTR -{:.1}% (p={:.2e}), violations -{viol:.1}%, RE {re:+.1}%, paired {}",
        r.delta_mttr_pct, r.mwu.p_value, r.paired_incidents
    );
    ensure(r.delta_mttr_pct >= MTTR_REDUCTION_MIN, || summary.clone())?;
    ensure(r.mwu.p_value < MWU_ALPHA, || summary.clone())?;
    ensure(viol >= VIOLATION_REDUCTION_MIN, || summary.clone())?;
    ensure(re > 0.0, || summary.clone())?;
    ensure(
        (PAIRED_RANGE.0..=PAIRED_RANGE.1).contains(&r.paired_incidents),
        || summary.clone(),
    )?;
    ensure(per_trial < Duration::from_secs(60), || format!("{per_trial:?} per trial"))?;
    Ok(summary)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut docs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cpe"))
            .args(["compare", "--scenario", "S2", "--trials", "5", "--seed", "42", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        docs.push(std::fs::read(out.join("comparison.json")).map_err(|e| e.to_string())?);
    }
    ensure(docs[0] == docs[1], || "comparison.json differs between runs".into())?;
    Ok(format!("{} bytes identical", docs[0].len()))
}

fn identical_arms() -> Check {
    let spec = ScenarioSpec::preset("S2").unwrap();
    let template = scenario_config(&spec).map_err(|e| e.to_string())?;
    let r = run_comparison_arms(&spec, &template, E2E_TRIALS, E2E_SEED, (Mode::Baseline, Mode::Baseline))
        .map_err(|e| e.to_string())?;
    let deltas = [Some(r.delta_mttr_pct), r.delta_re_pct, r.delta_violations_pct];
    ensure(deltas.iter().all(|d| *d == Some(0.0)), || format!("deltas {deltas:?}"))?;
    ensure(r.cliffs_delta == 0.0, || format!("delta {}", r.cliffs_delta))?;
    Ok(format!("all deltas 0, Cliff's delta 0, p={:.3}", r.mwu.p_value))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check, Duration); 9] = [
        ("formula oracles", formula_oracles, Duration::from_secs(1)),
        ("statistics vs brute force", statistics_vs_brute_force, Duration::from_secs(10)),
        ("bootstrap", bootstrap, Duration::from_secs(60)),
        ("isolation forest", isolation_forest, Duration::from_secs(30)),
        ("recovery detection oracle", recovery_oracle, Duration::from_secs(1)),
        ("policy gate soundness", gate_soundness, Duration::from_secs(60)),
        ("end-to-end S2 direction", end_to_end, Duration::from_secs(600)),
        ("determinism", determinism, Duration::from_secs(600)),
        ("identical-arms null", identical_arms, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (name, check, budget) in checks {
        let started = Instant::now();
        let outcome = check();
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; over budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{took:.2?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
