use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpe_core::action::{ActionKind, ActionTag, Risk};
use cpe_core::control::{
    evaluate_policy, ungated_executions, ActionStatus, ControlPlane, Decision, GateConfig, PolicyContext, PolicyRule,
    PolicySet, RuleKind, Verdict,
};
use cpe_core::intelligence::ProposedAction;
use cpe_core::simcluster::{
    init_cluster, ClusterConfig, ClusterState, ServiceConfig, ServiceSpec, ServiceView, SimParams, WorkloadProfile,
};
use cpe_core::Mode;

const TAGS: [ActionTag; 4] = [
    ActionTag::ScaleUp,
    ActionTag::ScaleDown,
    ActionTag::RestartPod,
    ActionTag::RollbackConfig,
];

fn cluster() -> ClusterState {
    let spec = |name: &str| ServiceConfig {
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
        services: vec![spec("web"), spec("api")],
        faults: vec![],
        params: SimParams::default(),
    };
    init_cluster(&cfg, 1).unwrap()
}

fn random_action(rng: &mut ChaCha8Rng) -> ActionKind {
    match rng.random_range(0..4) {
        0 => ActionKind::ScaleUp {
            delta: rng.random_range(1..4),
        },
        1 => ActionKind::ScaleDown {
            delta: rng.random_range(1..4),
        },
        2 => ActionKind::RestartPod {
            count: rng.random_range(1..3),
        },
        _ => ActionKind::RollbackConfig,
    }
}

fn random_rules(rng: &mut ChaCha8Rng) -> Vec<PolicyRule> {
    let mut rules = Vec::new();
    for i in 0..rng.random_range(0..6) {
        let kind = match rng.random_range(0..5) {
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
            3 => RuleKind::ApprovalRequired {
                risks: if rng.random_bool(0.5) {
                    vec![Risk::High]
                } else {
                    vec![Risk::Low, Risk::High]
                },
            },
            _ => RuleKind::DriftForbidden,
        };
        rules.push(PolicyRule::new(&format!("r{i}"), kind));
    }
    rules
}

/// Does this rule, read on its own, refuse the action outright?
fn rule_denies(rule: &PolicyRule, action: &ActionKind, view: &ServiceView, now_s: u64, executions: &[u64]) -> bool {
    match &rule.kind {
        RuleKind::ReplicaBounds { min, max } => {
            let after = match *action {
                ActionKind::ScaleUp { delta } => view.declared_replicas as i64 + delta as i64,
                ActionKind::ScaleDown { delta } => view.declared_replicas as i64 - delta as i64,
                ActionKind::RollbackConfig => view.declared_replicas as i64,
                ActionKind::RestartPod { .. } => return false,
            };
            after < *min as i64 || after > *max as i64
        }
        RuleKind::ForbiddenAction { actions } => actions.contains(&action.tag()),
        RuleKind::RateLimit { max_actions, window_s } => {
            executions.iter().filter(|&&t| now_s < t + window_s).count() >= *max_actions as usize
        }
        _ => false,
    }
}

fn rule_flags(rule: &PolicyRule, risk: Risk) -> bool {
    matches!(&rule.kind, RuleKind::ApprovalRequired { risks } if risks.contains(&risk))
}

#[test]
fn deny_dominates_in_every_ordering() {
    let state = cluster();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..300 {
        let mut rules = random_rules(&mut rng);
        let mut view = state.service_view("web").unwrap();
        view.declared_replicas = rng.random_range(1..12);
        let action = random_action(&mut rng);
        let risk = if rng.random_bool(0.5) { Risk::High } else { Risk::Low };
        let now_s = rng.random_range(600..1200);
        let executions: Vec<u64> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..now_s)).collect();
        let proposal = ProposedAction {
            service: "web".into(),
            action,
            risk,
            rationale: "fuzz".into(),
        };
        let any_deny = rules.iter().any(|r| rule_denies(r, &action, &view, now_s, &executions));
        let any_flag = rules.iter().any(|r| rule_flags(r, risk));
        let want = if any_deny {
            Verdict::Deny
        } else if any_flag {
            Verdict::RequireApproval
        } else {
            Verdict::Allow
        };
        for _ in 0..6 {
            rules.shuffle(&mut rng);
            let set = PolicySet::new(rules.clone()).unwrap();
            let ctx = PolicyContext {
                view: &view,
                now_s,
                executions: &executions,
            };
            let decision = evaluate_policy(&proposal, &set, &ctx);
            assert_eq!(decision.verdict, want, "case {case}: {rules:?}");
            assert_eq!(decision.trail.len(), rules.len());
        }
    }
}

#[test]
fn fuzzed_actions_never_execute_ungated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut state = cluster();
    let mut total = 0;
    let mut executed = 0;
    let mut plane = ControlPlane::new(
        Mode::Cpe,
        PolicySet::new(random_rules(&mut rng)).unwrap(),
        GateConfig::interactive(),
        5,
    );
    while total < 1000 {
        if total % 100 == 0 {
            // Fresh policy set and gate every hundred actions.
            let gate = if rng.random_bool(0.5) {
                GateConfig::interactive()
            } else {
                GateConfig::batch()
            };
            let mode = if rng.random_bool(0.5) { Mode::Cpe } else { Mode::Baseline };
            check_log(&plane);
            plane = ControlPlane::new(mode, PolicySet::new(random_rules(&mut rng)).unwrap(), gate, total);
            state = cluster();
        }
        let service = if rng.random_bool(0.5) { "web" } else { "api" };
        let view = state.service_view(service).unwrap();
        let proposal = ProposedAction {
            service: service.into(),
            action: random_action(&mut rng),
            risk: if rng.random_bool(0.5) { Risk::High } else { Risk::Low },
            rationale: "fuzz".into(),
        };
        if rng.random_bool(0.2) {
            plane.submit_operator(proposal, &view, state.clock_s);
        } else {
            plane.submit(proposal, &view, state.clock_s);
        }
        total += 1;

        for req in plane.pending_approvals() {
            match rng.random_range(0..3) {
                0 => {
                    plane.decide(req.action_id, Decision::Approve, state.clock_s).unwrap();
                }
                1 => {
                    plane.decide(req.action_id, Decision::Deny, state.clock_s).unwrap();
                }
                _ => {}
            }
        }
        // A random id, possibly not approved, must be refused.
        let probe = rng.random_range(1..=plane.actions().len() as u64);
        let probe_status = plane.action(probe).unwrap().status;
        let result = plane.execute(probe, &mut state);
        if probe_status != ActionStatus::Approved {
            assert!(result.is_err());
        }
        for id in plane.ready() {
            if rng.random_bool(0.7) && plane.execute(id, &mut state).is_ok() {
                executed += 1;
            }
        }
        state.step(rng.random_range(1..40)).unwrap();
        plane.tick(state.clock_s);
    }
    check_log(&plane);
    assert!(executed > 100, "only {executed} executions exercised");
}

/// Every executed row follows an allow or approved row for the same action,
/// and every executed action passed through the approved state.
fn check_log(plane: &ControlPlane) {
    assert!(ungated_executions(plane.audit()).is_empty());
    let mut cleared: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last = (0, None);
    for e in plane.audit().entries() {
        assert!((e.ts_s, Some(e.seq)) > last, "audit out of order at {}", e.seq);
        last = (e.ts_s, Some(e.seq));
        match e.verdict.as_str() {
            "allow" | "approved" => {
                cleared.entry(e.action_id).or_insert(e.seq);
            }
            "executed" => {
                let gate_seq = cleared.get(&e.action_id);
                assert!(gate_seq.is_some_and(|&s| s < e.seq), "action {} ran ungated", e.action_id);
            }
            _ => {}
        }
    }
    for a in plane.actions() {
        if a.status == ActionStatus::Executed {
            assert_ne!(a.verdict, Verdict::Deny);
            let statuses: Vec<ActionStatus> = a.transitions.iter().map(|t| t.status).collect();
            let approved = statuses.iter().position(|&s| s == ActionStatus::Approved).unwrap();
            let exec = statuses.iter().position(|&s| s == ActionStatus::Executed).unwrap();
            assert!(approved < exec);
        }
        for w in a.transitions.windows(2) {
            assert!(w[0].status.can_become(w[1].status));
            assert!(w[0].ts_s <= w[1].ts_s);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn a_forbidding_rule_anywhere_denies(seed in any::<u64>(), position in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = cluster();
        let view = state.service_view("web").unwrap();
        let action = random_action(&mut rng);
        let mut rules = random_rules(&mut rng);
        let forbid = PolicyRule::new("forbid", RuleKind::ForbiddenAction { actions: vec![action.tag()] });
        rules.insert(position.min(rules.len()), forbid);
        let set = PolicySet::new(rules).unwrap();
        let proposal = ProposedAction { service: "web".into(), action, risk: Risk::High, rationale: "p".into() };
        let ctx = PolicyContext { view: &view, now_s: 0, executions: &[] };
        let decision = evaluate_policy(&proposal, &set, &ctx);
        prop_assert_eq!(decision.verdict, Verdict::Deny);
        prop_assert!(decision.rule_ids().contains(&"forbid".to_string()));
    }
}
