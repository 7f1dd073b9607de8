//! Control plane: declarative policy evaluation, the approval gate, the
//! append-only audit log, action execution, the Baseline's manual-triage
//! delay, violation episodes and the autonomy rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionKind, ActionTag, Risk};
use crate::intelligence::ProposedAction;
use crate::simcluster::{ActionOutcome, ClusterState, ServiceView};
use crate::Mode;

pub const DEFAULT_APPROVAL_TIMEOUT_S: u64 = 120;
pub const TRIAGE_MEDIAN_S: f64 = 150.0;
pub const TRIAGE_LOG_SIGMA: f64 = 0.35;
/// Rule id used for executions that lack an allow or approve decision.
pub const UNGATED_RULE_ID: &str = "ungated_execution";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid policy `{id}`: {reason}")]
    InvalidPolicy { id: String, reason: String },
    #[error("unknown action {0}")]
    UnknownAction(u64),
    #[error("approval for action {0} already decided or expired")]
    Conflict(u64),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleKind {
    ReplicaBounds { min: u32, max: u32 },
    ForbiddenAction { actions: Vec<ActionTag> },
    RateLimit { max_actions: u32, window_s: u64 },
    ApprovalRequired { risks: Vec<Risk> },
    DriftForbidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
}

impl PolicyRule {
    pub fn new(id: &str, kind: RuleKind) -> Self {
        Self { id: id.to_string(), kind }
    }

    fn validate(&self) -> Result<(), ControlError> {
        let bad = |reason: &str| {
            Err(ControlError::InvalidPolicy {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.trim().is_empty() {
            return bad("empty id");
        }
        match &self.kind {
            RuleKind::ReplicaBounds { min, max } if min > max => bad("min exceeds max"),
            RuleKind::ForbiddenAction { actions } if actions.is_empty() => bad("no actions listed"),
            RuleKind::RateLimit { max_actions, window_s } if *max_actions == 0 || *window_s == 0 => {
                bad("max_actions and window_s must be positive")
            }
            RuleKind::ApprovalRequired { risks } if risks.is_empty() => bad("no risk classes listed"),
            _ => Ok(()),
        }
    }
}

/// Ordered rule list; anything not denied or flagged is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySet {
    rules: Vec<PolicyRule>,
}

impl PolicySet {
    pub fn new(rules: Vec<PolicyRule>) -> Result<Self, ControlError> {
        let mut seen = BTreeSet::new();
        for rule in &rules {
            rule.validate()?;
            if !seen.insert(rule.id.clone()) {
                return Err(ControlError::InvalidPolicy {
                    id: rule.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self { rules: Vec::new() }
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    /// Replica bounds 2..=10, no more than 5 executions per service per
    /// 10 minutes, approval for high-risk actions, no drift.
    pub fn default_set() -> Self {
        Self::new(vec![
            PolicyRule::new("replica-bounds", RuleKind::ReplicaBounds { min: 2, max: 10 }),
            PolicyRule::new(
                "rate-limit",
                RuleKind::RateLimit {
                    max_actions: 5,
                    window_s: 600,
                },
            ),
            PolicyRule::new("approve-high-risk", RuleKind::ApprovalRequired { risks: vec![Risk::High] }),
            PolicyRule::new("no-drift", RuleKind::DriftForbidden),
        ])
        .expect("default policy set is valid")
    }
}

impl Serialize for PolicySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rules.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rules = Vec::<PolicyRule>::deserialize(d)?;
        PolicySet::new(rules).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny,
    RequireApproval,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Allow => "allow",
            Verdict::Deny => "deny",
            Verdict::RequireApproval => "require_approval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOutcome {
    Pass,
    Deny,
    RequireApproval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleHit {
    pub rule_id: String,
    pub outcome: RuleOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub verdict: Verdict,
    /// Every rule consulted, in rule order.
    pub trail: Vec<RuleHit>,
}

impl PolicyDecision {
    /// Rules that decided the verdict: the denying rules on deny, the
    /// approval-requiring rules on require_approval, every consulted rule on
    /// allow.
    pub fn rule_ids(&self) -> Vec<String> {
        let decisive = match self.verdict {
            Verdict::Deny => Some(RuleOutcome::Deny),
            Verdict::RequireApproval => Some(RuleOutcome::RequireApproval),
            Verdict::Allow => None,
        };
        self.trail
            .iter()
            .filter(|h| decisive.is_none_or(|o| h.outcome == o))
            .map(|h| h.rule_id.clone())
            .collect()
    }
}

/// State an evaluation may look at besides the action itself.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub view: &'a ServiceView,
    pub now_s: u64,
    /// Execution timestamps of earlier actions on the same service.
    pub executions: &'a [u64],
}

fn resulting_replicas(action: &ActionKind, view: &ServiceView) -> Option<i64> {
    let declared = view.declared_replicas as i64;
    match *action {
        ActionKind::ScaleUp { delta } => Some(declared + delta as i64),
        ActionKind::ScaleDown { delta } => Some(declared - delta as i64),
        ActionKind::RollbackConfig => Some(view.declared_replicas as i64),
        ActionKind::RestartPod { .. } => None,
    }
}

/// Pure. Deny wins over everything; otherwise any approval flag wins over
/// allow.
pub fn evaluate_policy(action: &ProposedAction, policies: &PolicySet, ctx: &PolicyContext<'_>) -> PolicyDecision {
    let mut trail = Vec::with_capacity(policies.rules.len());
    for rule in &policies.rules {
        let outcome = match &rule.kind {
            RuleKind::ReplicaBounds { min, max } => match resulting_replicas(&action.action, ctx.view) {
                Some(n) if n < *min as i64 || n > *max as i64 => RuleOutcome::Deny,
                _ => RuleOutcome::Pass,
            },
            RuleKind::ForbiddenAction { actions } => {
                if actions.contains(&action.action.tag()) {
                    RuleOutcome::Deny
                } else {
                    RuleOutcome::Pass
                }
            }
            RuleKind::RateLimit { max_actions, window_s } => {
                let recent = ctx.executions.iter().filter(|&&t| t + window_s > ctx.now_s).count();
                if recent >= *max_actions as usize {
                    RuleOutcome::Deny
                } else {
                    RuleOutcome::Pass
                }
            }
            RuleKind::ApprovalRequired { risks } => {
                if risks.contains(&action.risk) {
                    RuleOutcome::RequireApproval
                } else {
                    RuleOutcome::Pass
                }
            }
            RuleKind::DriftForbidden => RuleOutcome::Pass,
        };
        trail.push(RuleHit {
            rule_id: rule.id.clone(),
            outcome,
        });
    }
    let verdict = if trail.iter().any(|h| h.outcome == RuleOutcome::Deny) {
        Verdict::Deny
    } else if trail.iter().any(|h| h.outcome == RuleOutcome::RequireApproval) {
        Verdict::RequireApproval
    } else {
        Verdict::Allow
    };
    PolicyDecision { verdict, trail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Proposed,
    PendingApproval,
    Approved,
    Denied,
    Executed,
    Expired,
}

impl ActionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionStatus::Proposed => "proposed",
            ActionStatus::PendingApproval => "pending_approval",
            ActionStatus::Approved => "approved",
            ActionStatus::Denied => "denied",
            ActionStatus::Executed => "executed",
            ActionStatus::Expired => "expired",
        }
    }

    /// Legal successor states.
    pub fn can_become(self, next: ActionStatus) -> bool {
        use ActionStatus::*;
        matches!(
            (self, next),
            (Proposed, PendingApproval)
                | (Proposed, Approved)
                | (Proposed, Denied)
                | (PendingApproval, Approved)
                | (PendingApproval, Denied)
                | (Approved, Executed)
                | (Approved, Denied)
                | (Denied, Expired)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decider {
    /// The policy set allowed the action outright.
    Policy,
    Operator,
    TimeoutPolicy,
}

impl Decider {
    pub fn as_str(self) -> &'static str {
        match self {
            Decider::Policy => "policy",
            Decider::Operator => "operator",
            Decider::TimeoutPolicy => "timeout_policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub status: ActionStatus,
    pub ts_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemediationAction {
    pub id: u64,
    pub proposal: ProposedAction,
    pub status: ActionStatus,
    pub verdict: Verdict,
    pub trail: Vec<RuleHit>,
    pub transitions: Vec<Transition>,
    pub decided_by: Option<Decider>,
    pub reason: Option<String>,
    pub outcome: Option<ActionOutcome>,
}

impl RemediationAction {
    pub fn executed_at(&self) -> Option<u64> {
        self.transitions
            .iter()
            .find(|t| t.status == ActionStatus::Executed)
            .map(|t| t.ts_s)
    }

    fn advance(&mut self, next: ActionStatus, ts_s: u64) {
        debug_assert!(self.status.can_become(next), "{:?} -> {:?}", self.status, next);
        self.status = next;
        self.transitions.push(Transition { status: next, ts_s });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub action_id: u64,
    pub service: String,
    pub action: ActionKind,
    pub risk: Risk,
    pub created_ts_s: u64,
    pub deadline_ts_s: u64,
    pub decision: Option<Decision>,
    pub decided_by: Option<Decider>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    #[serde(rename = "ts")]
    pub ts_s: u64,
    pub seq: u64,
    pub actor: String,
    pub action_id: u64,
    pub service: String,
    pub action: String,
    /// `allow`, `deny`, `require_approval`, `approved`, `denied`, `executed`,
    /// `expired` or `execution_failed`.
    pub verdict: String,
    pub rules: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Append-only, ordered by timestamp then sequence number.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[allow(clippy::too_many_arguments)]
    fn append(
        &mut self,
        ts_s: u64,
        actor: &str,
        action: &RemediationAction,
        verdict: &str,
        rules: Vec<String>,
        detail: Option<String>,
    ) -> &AuditEntry {
        let last_ts = self.entries.last().map_or(0, |e| e.ts_s);
        let ts_s = ts_s.max(last_ts);
        self.entries.push(AuditEntry {
            ts_s,
            seq: self.entries.len() as u64,
            actor: actor.to_string(),
            action_id: action.id,
            service: action.proposal.service.clone(),
            action: action.proposal.action.to_string(),
            verdict: verdict.to_string(),
            rules,
            detail,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ControlError> {
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| ControlError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| ControlError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<(), ControlError> {
        let f = File::create(path).map_err(|e| ControlError::Io(e.to_string()))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| ControlError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub approval_timeout_s: u64,
    pub timeout_decision: Decision,
}

impl GateConfig {
    /// Interactive default: 120 s, deny.
    pub fn interactive() -> Self {
        Self {
            approval_timeout_s: DEFAULT_APPROVAL_TIMEOUT_S,
            timeout_decision: Decision::Deny,
        }
    }

    /// Batch default: approve after 20 s so the loop runs unattended.
    pub fn batch() -> Self {
        Self {
            approval_timeout_s: 20,
            timeout_decision: Decision::Approve,
        }
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::interactive()
    }
}

/// What happened to one action inside the control plane, in order; the
/// engine forwards these as events.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlEvent {
    pub action_id: u64,
    pub status: ActionStatus,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionRecord {
    pub action_id: u64,
    pub ts_s: u64,
    pub outcome: ActionOutcome,
}

/// A Baseline remediation waiting for the simulated operator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriageTicket {
    pub incident_id: u64,
    pub service: String,
    pub detected_s: u64,
    pub delay_s: u64,
    pub due_s: u64,
}

/// Lognormal human-triage delay with the given median and log-sigma.
#[derive(Debug, Clone)]
pub struct TriageModel {
    dist: LogNormal<f64>,
    rng: ChaCha8Rng,
}

impl TriageModel {
    pub fn new(seed: u64) -> Self {
        Self::with_params(seed, TRIAGE_MEDIAN_S, TRIAGE_LOG_SIGMA)
    }

    pub fn with_params(seed: u64, median_s: f64, log_sigma: f64) -> Self {
        Self {
            dist: LogNormal::new(median_s.ln(), log_sigma).expect("finite lognormal parameters"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample_delay_s(&mut self) -> f64 {
        self.dist.sample(&mut self.rng)
    }
}

/// Owns the gate state and the audit log for one run. Single writer.
#[derive(Debug, Clone)]
pub struct ControlPlane {
    mode: Mode,
    policies: PolicySet,
    gate: GateConfig,
    actions: Vec<RemediationAction>,
    approvals: BTreeMap<u64, ApprovalRequest>,
    audit: AuditLog,
    triage: TriageModel,
    tickets: Vec<TriageTicket>,
    executions: BTreeMap<String, Vec<u64>>,
}

impl ControlPlane {
    pub fn new(mode: Mode, policies: PolicySet, gate: GateConfig, triage_seed: u64) -> Self {
        Self {
            mode,
            policies,
            gate,
            actions: Vec::new(),
            approvals: BTreeMap::new(),
            audit: AuditLog::default(),
            triage: TriageModel::new(triage_seed),
            tickets: Vec::new(),
            executions: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn gate(&self) -> GateConfig {
        self.gate
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn actions(&self) -> &[RemediationAction] {
        &self.actions
    }

    pub fn action(&self, id: u64) -> Option<&RemediationAction> {
        self.actions.get(id.checked_sub(1)? as usize)
    }

    pub fn approvals(&self) -> impl Iterator<Item = &ApprovalRequest> {
        self.approvals.values()
    }

    pub fn pending_approvals(&self) -> Vec<ApprovalRequest> {
        self.approvals
            .values()
            .filter(|a| a.decision.is_none())
            .cloned()
            .collect()
    }

    /// Whether the service has an action awaiting approval or execution.
    pub fn has_in_flight(&self, service: &str) -> bool {
        self.actions.iter().any(|a| {
            a.proposal.service == service
                && matches!(a.status, ActionStatus::PendingApproval | ActionStatus::Approved)
        })
    }

    fn action_mut(&mut self, id: u64) -> Result<&mut RemediationAction, ControlError> {
        let idx = id.checked_sub(1).ok_or(ControlError::UnknownAction(id))? as usize;
        self.actions.get_mut(idx).ok_or(ControlError::UnknownAction(id))
    }

    fn record(&mut self, id: u64, ts_s: u64, actor: &str, verdict: &str, rules: Vec<String>, detail: Option<String>) -> u64 {
        let action = &self.actions[(id - 1) as usize];
        self.audit.append(ts_s, actor, action, verdict, rules, detail).seq
    }

    /// Evaluate and gate a proposal from the automated loop.
    pub fn submit(&mut self, proposal: ProposedAction, view: &ServiceView, now_s: u64) -> Vec<ControlEvent> {
        self.admit(proposal, view, now_s, "cpe")
    }

    /// Evaluate a proposal raised by the operator; a non-deny verdict counts
    /// as the operator's own approval.
    pub fn submit_operator(&mut self, proposal: ProposedAction, view: &ServiceView, now_s: u64) -> Vec<ControlEvent> {
        self.admit(proposal, view, now_s, "operator")
    }

    fn admit(&mut self, proposal: ProposedAction, view: &ServiceView, now_s: u64, actor: &str) -> Vec<ControlEvent> {
        let empty = Vec::new();
        let executions = self.executions.get(&proposal.service).unwrap_or(&empty);
        let ctx = PolicyContext {
            view,
            now_s,
            executions,
        };
        let decision = evaluate_policy(&proposal, &self.policies, &ctx);
        let id = self.actions.len() as u64 + 1;
        self.actions.push(RemediationAction {
            id,
            proposal: proposal.clone(),
            status: ActionStatus::Proposed,
            verdict: decision.verdict,
            trail: decision.trail.clone(),
            transitions: vec![Transition {
                status: ActionStatus::Proposed,
                ts_s: now_s,
            }],
            decided_by: None,
            reason: None,
            outcome: None,
        });
        let rules = decision.rule_ids();
        let seq = self.record(id, now_s, actor, decision.verdict.as_str(), rules.clone(), Some(proposal.rationale.clone()));
        let mut events = vec![ControlEvent {
            action_id: id,
            status: ActionStatus::Proposed,
            audit_seq: seq,
        }];
        let operator = actor == "operator";
        let (next, decider) = match decision.verdict {
            Verdict::Deny => (ActionStatus::Denied, Decider::Policy),
            Verdict::Allow if operator => (ActionStatus::Approved, Decider::Operator),
            Verdict::Allow => (ActionStatus::Approved, Decider::Policy),
            Verdict::RequireApproval if operator => (ActionStatus::Approved, Decider::Operator),
            Verdict::RequireApproval => (ActionStatus::PendingApproval, Decider::Policy),
        };
        let action = self.action_mut(id).expect("just pushed");
        action.advance(next, now_s);
        if next != ActionStatus::PendingApproval {
            action.decided_by = Some(decider);
        }
        let verdict_word = match next {
            ActionStatus::PendingApproval => {
                let deadline = now_s + self.gate.approval_timeout_s;
                self.approvals.insert(
                    id,
                    ApprovalRequest {
                        action_id: id,
                        service: proposal.service.clone(),
                        action: proposal.action,
                        risk: proposal.risk,
                        created_ts_s: now_s,
                        deadline_ts_s: deadline,
                        decision: None,
                        decided_by: None,
                    },
                );
                "pending_approval"
            }
            other => other.as_str(),
        };
        let seq = self.record(id, now_s, decider_actor(decider, actor), verdict_word, rules, None);
        events.push(ControlEvent {
            action_id: id,
            status: next,
            audit_seq: seq,
        });
        events
    }

    /// Operator decision on a pending approval.
    pub fn decide(&mut self, action_id: u64, decision: Decision, now_s: u64) -> Result<Vec<ControlEvent>, ControlError> {
        let req = self
            .approvals
            .get(&action_id)
            .ok_or(ControlError::UnknownAction(action_id))?;
        if req.decision.is_some() || now_s >= req.deadline_ts_s {
            return Err(ControlError::Conflict(action_id));
        }
        Ok(self.resolve(action_id, decision, Decider::Operator, now_s))
    }

    fn resolve(&mut self, action_id: u64, decision: Decision, decider: Decider, now_s: u64) -> Vec<ControlEvent> {
        let req = self.approvals.get_mut(&action_id).expect("approval exists");
        req.decision = Some(decision);
        req.decided_by = Some(decider);
        let rules = self.actions[(action_id - 1) as usize]
            .trail
            .iter()
            .map(|h| h.rule_id.clone())
            .collect::<Vec<_>>();
        let action = &mut self.actions[(action_id - 1) as usize];
        action.decided_by = Some(decider);
        let mut events = Vec::new();
        match decision {
            Decision::Approve => {
                action.advance(ActionStatus::Approved, now_s);
                let seq = self.record(action_id, now_s, decider.as_str(), "approved", rules, None);
                events.push(ControlEvent {
                    action_id,
                    status: ActionStatus::Approved,
                    audit_seq: seq,
                });
            }
            Decision::Deny => {
                action.advance(ActionStatus::Denied, now_s);
                let timed_out = decider == Decider::TimeoutPolicy;
                if timed_out {
                    action.advance(ActionStatus::Expired, now_s);
                }
                let seq = self.record(action_id, now_s, decider.as_str(), "denied", rules.clone(), None);
                events.push(ControlEvent {
                    action_id,
                    status: ActionStatus::Denied,
                    audit_seq: seq,
                });
                if timed_out {
                    let seq = self.record(action_id, now_s, decider.as_str(), "expired", rules, None);
                    events.push(ControlEvent {
                        action_id,
                        status: ActionStatus::Expired,
                        audit_seq: seq,
                    });
                }
            }
        }
        events
    }

    /// Apply the timeout policy to every approval whose deadline has passed.
    pub fn tick(&mut self, now_s: u64) -> Vec<ControlEvent> {
        let due: Vec<u64> = self
            .approvals
            .values()
            .filter(|r| r.decision.is_none() && now_s >= r.deadline_ts_s)
            .map(|r| r.action_id)
            .collect();
        let mut events = Vec::new();
        for id in due {
            let decision = self.gate.timeout_decision;
            events.extend(self.resolve(id, decision, Decider::TimeoutPolicy, now_s));
        }
        events
    }

    /// Approved actions not yet executed, in id order.
    pub fn ready(&self) -> Vec<u64> {
        self.actions
            .iter()
            .filter(|a| a.status == ActionStatus::Approved)
            .map(|a| a.id)
            .collect()
    }

    /// Carry out an approved action on the simulator.
    pub fn execute(&mut self, action_id: u64, cluster: &mut ClusterState) -> Result<(ExecutionRecord, ControlEvent), ControlError> {
        let now_s = cluster.clock_s;
        let action = self.action_mut(action_id)?;
        if action.status != ActionStatus::Approved {
            return Err(ControlError::Contract(format!(
                "action {action_id} is {} and cannot execute",
                action.status.as_str()
            )));
        }
        let service = action.proposal.service.clone();
        let kind = action.proposal.action;
        let rules: Vec<String> = action.trail.iter().map(|h| h.rule_id.clone()).collect();
        match cluster.apply_action(&service, &kind) {
            Ok(outcome) => {
                let action = self.action_mut(action_id)?;
                action.advance(ActionStatus::Executed, now_s);
                action.outcome = Some(outcome.clone());
                let detail = outcome.noop.then(|| "no-op".to_string());
                let actor = self.executor_actor();
                let seq = self.record(action_id, now_s, actor, "executed", rules, detail);
                self.executions.entry(service).or_default().push(now_s);
                Ok((
                    ExecutionRecord {
                        action_id,
                        ts_s: now_s,
                        outcome,
                    },
                    ControlEvent {
                        action_id,
                        status: ActionStatus::Executed,
                        audit_seq: seq,
                    },
                ))
            }
            Err(e) => {
                let action = self.action_mut(action_id)?;
                action.advance(ActionStatus::Denied, now_s);
                action.reason = Some(e.to_string());
                let actor = self.executor_actor();
                self.record(action_id, now_s, actor, "execution_failed", rules, Some(e.to_string()));
                Err(ControlError::Contract(format!("simulator rejected action {action_id}: {e}")))
            }
        }
    }

    fn executor_actor(&self) -> &'static str {
        match self.mode {
            Mode::Baseline => "operator",
            Mode::Cpe => "cpe",
        }
    }

    /// Baseline only: schedule the operator's remediation after a sampled
    /// diagnosis delay.
    pub fn baseline_triage(&mut self, incident_id: u64, service: &str, detected_s: u64) -> Result<TriageTicket, ControlError> {
        if self.mode != Mode::Baseline {
            return Err(ControlError::Contract("manual triage is only modelled in baseline mode".into()));
        }
        let delay_s = self.triage.sample_delay_s().round().max(1.0) as u64;
        let ticket = TriageTicket {
            incident_id,
            service: service.to_string(),
            detected_s,
            delay_s,
            due_s: detected_s + delay_s,
        };
        self.tickets.push(ticket.clone());
        Ok(ticket)
    }

    /// Remove and return tickets due at or before `now_s`, in due order.
    pub fn due_tickets(&mut self, now_s: u64) -> Vec<TriageTicket> {
        let (mut due, rest): (Vec<_>, Vec<_>) = self.tickets.drain(..).partition(|t| t.due_s <= now_s);
        self.tickets = rest;
        due.sort_by_key(|t| (t.due_s, t.incident_id));
        due
    }

    pub fn pending_tickets(&self) -> &[TriageTicket] {
        &self.tickets
    }

    pub fn autonomy_pct(&self) -> Option<f64> {
        autonomy_rate(&self.actions)
    }
}

fn decider_actor(decider: Decider, actor: &str) -> &str {
    match decider {
        Decider::Operator => "operator",
        Decider::TimeoutPolicy => "timeout_policy",
        Decider::Policy => actor,
    }
}

/// Share of executed actions that no operator had to decide, in percent.
pub fn autonomy_rate(actions: &[RemediationAction]) -> Option<f64> {
    let executed: Vec<_> = actions.iter().filter(|a| a.status == ActionStatus::Executed).collect();
    if executed.is_empty() {
        return None;
    }
    let auto = executed
        .iter()
        .filter(|a| a.decided_by != Some(Decider::Operator))
        .count();
    Some(auto as f64 / executed.len() as f64 * 100.0)
}

/// Per-scrape compliance facts for one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceObservation {
    pub ts_s: u64,
    pub service: String,
    pub desired_replicas: u32,
    pub drift_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    /// First violating scrape of the episode.
    pub ts_s: u64,
    /// Last violating scrape seen so far.
    pub last_ts_s: u64,
    pub rule_id: String,
    pub service: String,
    pub detail: String,
}

fn violating_rules(policies: &PolicySet, obs: &ComplianceObservation) -> Vec<(String, String)> {
    policies
        .rules
        .iter()
        .filter_map(|rule| match rule.kind {
            RuleKind::DriftForbidden if obs.drift_active => {
                Some((rule.id.clone(), "live replica count diverges from declared".to_string()))
            }
            RuleKind::ReplicaBounds { min, max } if obs.desired_replicas < min || obs.desired_replicas > max => Some((
                rule.id.clone(),
                format!("{} replicas outside [{min}, {max}]", obs.desired_replicas),
            )),
            _ => None,
        })
        .collect()
}

/// Deduplicates scrape-level violations into contiguous episodes per
/// (rule, service).
#[derive(Debug, Clone, Default)]
pub struct ViolationTracker {
    open: BTreeMap<(String, String), usize>,
    records: Vec<ViolationRecord>,
}

impl ViolationTracker {
    /// Feed one scrape's observations (all services). Returns newly opened
    /// episodes.
    pub fn observe(&mut self, policies: &PolicySet, observations: &[ComplianceObservation]) -> Vec<ViolationRecord> {
        let mut opened = Vec::new();
        let mut still_open = BTreeMap::new();
        for obs in observations {
            for (rule_id, detail) in violating_rules(policies, obs) {
                let key = (rule_id.clone(), obs.service.clone());
                let idx = match self.open.get(&key) {
                    Some(&idx) => {
                        self.records[idx].last_ts_s = obs.ts_s;
                        idx
                    }
                    None => {
                        let rec = ViolationRecord {
                            ts_s: obs.ts_s,
                            last_ts_s: obs.ts_s,
                            rule_id,
                            service: obs.service.clone(),
                            detail,
                        };
                        opened.push(rec.clone());
                        self.records.push(rec);
                        self.records.len() - 1
                    }
                };
                still_open.insert(key, idx);
            }
        }
        self.open = still_open;
        opened
    }

    /// Record an execution that was never allowed or approved.
    pub fn ungated(&mut self, ts_s: u64, service: &str, action_id: u64) -> ViolationRecord {
        let rec = ViolationRecord {
            ts_s,
            last_ts_s: ts_s,
            rule_id: UNGATED_RULE_ID.into(),
            service: service.to_string(),
            detail: format!("action {action_id} executed without allow or approval"),
        };
        self.records.push(rec.clone());
        rec
    }

    pub fn records(&self) -> &[ViolationRecord] {
        &self.records
    }
}

/// Audit entries for executions that have no earlier allow/approved entry.
pub fn ungated_executions(audit: &AuditLog) -> Vec<&AuditEntry> {
    let mut cleared = BTreeSet::new();
    let mut out = Vec::new();
    for e in audit.entries() {
        match e.verdict.as_str() {
            "allow" | "approved" => {
                cleared.insert(e.action_id);
            }
            "executed" if !cleared.contains(&e.action_id) => out.push(e),
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub episodes: Vec<ViolationRecord>,
    pub window_hours: f64,
    pub per_hour: f64,
}

/// Violation episodes within `[from_s, to_s)` divided by the window length
/// in hours. Observations outside the window are ignored.
pub fn count_violations(
    observations: &[ComplianceObservation],
    audit: &AuditLog,
    policies: &PolicySet,
    from_s: u64,
    to_s: u64,
) -> ViolationSummary {
    let mut tracker = ViolationTracker::default();
    let mut by_ts: BTreeMap<u64, Vec<ComplianceObservation>> = BTreeMap::new();
    for o in observations.iter().filter(|o| o.ts_s >= from_s && o.ts_s < to_s) {
        by_ts.entry(o.ts_s).or_default().push(o.clone());
    }
    for scrape in by_ts.values() {
        tracker.observe(policies, scrape);
    }
    for e in ungated_executions(audit) {
        if e.ts_s >= from_s && e.ts_s < to_s {
            tracker.ungated(e.ts_s, &e.service, e.action_id);
        }
    }
    let window_hours = to_s.saturating_sub(from_s) as f64 / 3600.0;
    let episodes = tracker.records.clone();
    let per_hour = if window_hours > 0.0 {
        episodes.len() as f64 / window_hours
    } else {
        0.0
    };
    ViolationSummary {
        episodes,
        window_hours,
        per_hour,
    }
}
