//! The per-trial loop. One tick per simulated second: scrape and sense on
//! the 30 s grid, run the mode's detection and remediation path, apply
//! approval timeouts and executions, then advance the simulator.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::action::{ActionKind, Risk};
use crate::control::{
    ComplianceObservation, ControlError, ControlEvent, ControlPlane, Decision, GateConfig, PolicySet, RuleKind,
    ViolationRecord, ViolationTracker,
};
use crate::intelligence::{
    reason, risk_of, AnomalyDetector, BaselineAlertRule, DetectorParams, FeatureExtractor, FeatureVector,
    ModelSummary, ProposedAction, ScrapeValues, Trigger,
};
use crate::simcluster::{init_cluster, ClusterConfig, ClusterState, FaultEvent, FaultKind, ServiceView, SimError};
use crate::telemetry::{
    evaluate_slo, IncidentError, IncidentRecord, IncidentTracker, Labels, MetricName, RecoveryObservation, SloSpec,
    SloVerdict, TelemetryError, TelemetrySample, TelemetryStore, SCRAPE_INTERVAL_S,
};
use crate::Mode;

/// Consecutive breaching scrapes before the Baseline alert fires.
pub const ALERT_BREACHES: u32 = 2;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Incident(#[from] IncidentError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid trial: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub cluster: ClusterConfig,
    pub slo: SloSpec,
    pub policies: PolicySet,
    pub gate: GateConfig,
    pub detector: DetectorParams,
    pub warmup_s: u64,
    pub duration_s: u64,
    pub seed: u64,
}

/// Independent stream seed derived from the trial seed (SplitMix64 step).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_TRIAGE: u64 = 1;
const STREAM_DETECTOR: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Scrape,
    Anomaly,
    ActionProposed,
    ApprovalPending,
    ActionDecided,
    ActionExecuted,
    IncidentOpened,
    IncidentDetected,
    IncidentRecovered,
    Violation,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Scrape => "scrape",
            EventKind::Anomaly => "anomaly",
            EventKind::ActionProposed => "action_proposed",
            EventKind::ApprovalPending => "approval_pending",
            EventKind::ActionDecided => "action_decided",
            EventKind::ActionExecuted => "action_executed",
            EventKind::IncidentOpened => "incident_opened",
            EventKind::IncidentDetected => "incident_detected",
            EventKind::IncidentRecovered => "incident_recovered",
            EventKind::Violation => "violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiEvent {
    pub seq: u64,
    #[serde(rename = "ts")]
    pub ts_s: u64,
    pub kind: EventKind,
    pub payload: Value,
}

/// Per-service facts captured at one scrape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceScrape {
    pub service: String,
    pub verdict: SloVerdict,
    pub rps: Option<f64>,
    pub cpu_vcpu: Option<f64>,
    pub mem_mb: Option<f64>,
    pub p95_latency_ms: Option<f64>,
    pub error_rate: Option<f64>,
    pub desired_replicas: u32,
    pub available_replicas: u32,
    pub drift_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScrapeRecord {
    #[serde(rename = "ts")]
    pub ts_s: u64,
    pub services: Vec<ServiceScrape>,
}

impl ScrapeRecord {
    pub fn all_compliant(&self) -> bool {
        self.services.iter().all(|s| s.verdict.is_compliant())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceStatus {
    #[serde(flatten)]
    pub view: ServiceView,
    pub latest: Option<ServiceScrape>,
}

/// Read-only summary served on `/state`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateSummary {
    pub clock_s: u64,
    pub duration_s: u64,
    pub warmup_s: u64,
    pub mode: Mode,
    pub finished: bool,
    pub services: Vec<ServiceStatus>,
    pub active_faults: Vec<FaultEvent>,
    pub open_incidents: Vec<IncidentRecord>,
    pub pending_approvals: usize,
    pub last_event_seq: u64,
}

#[derive(Debug, Clone)]
struct SenseState {
    extractor: FeatureExtractor,
    detector: AnomalyDetector,
    training: Vec<FeatureVector>,
    fit_attempted: bool,
    alert: BaselineAlertRule,
}

/// Everything a finished trial leaves behind.
#[derive(Debug, Clone)]
pub struct EngineOutput {
    pub incidents: Vec<IncidentRecord>,
    pub scrapes: Vec<ScrapeRecord>,
    pub compliance: Vec<ComplianceObservation>,
    pub control: ControlPlane,
    pub violations: Vec<ViolationRecord>,
    pub models: Vec<ModelSummary>,
    pub store: TelemetryStore,
    pub events: Vec<ApiEvent>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    cluster: ClusterState,
    store: TelemetryStore,
    tracker: IncidentTracker,
    control: ControlPlane,
    sense: BTreeMap<String, SenseState>,
    violations: ViolationTracker,
    compliance: Vec<ComplianceObservation>,
    scrapes: Vec<ScrapeRecord>,
    events: Vec<ApiEvent>,
    seen_injections: usize,
    incident_of_fault: BTreeMap<u64, u64>,
    enforce_drift: bool,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        if config.duration_s <= config.warmup_s {
            return Err(EngineError::Invalid(format!(
                "duration_s ({}) must exceed warmup_s ({})",
                config.duration_s, config.warmup_s
            )));
        }
        config.slo.validate().map_err(EngineError::Invalid)?;
        let cluster = init_cluster(&config.cluster, config.seed)?;
        let control = ControlPlane::new(
            config.mode,
            config.policies.clone(),
            config.gate,
            derive_seed(config.seed, STREAM_TRIAGE),
        );
        let sense = config
            .cluster
            .services
            .iter()
            .map(|s| {
                let name = s.spec.name.clone();
                let state = SenseState {
                    extractor: FeatureExtractor::new(&name, s.spec.vcpu_per_replica),
                    detector: AnomalyDetector::new(&name, config.detector.clone()),
                    training: Vec::new(),
                    fit_attempted: false,
                    alert: BaselineAlertRule::new(&name, ALERT_BREACHES),
                };
                (name, state)
            })
            .collect();
        let enforce_drift = config.mode == Mode::Cpe
            && config
                .policies
                .rules()
                .iter()
                .any(|r| r.kind == RuleKind::DriftForbidden);
        Ok(Self {
            config,
            cluster,
            store: TelemetryStore::new(),
            tracker: IncidentTracker::new(),
            control,
            sense,
            violations: ViolationTracker::default(),
            compliance: Vec::new(),
            scrapes: Vec::new(),
            events: Vec::new(),
            seen_injections: 0,
            incident_of_fault: BTreeMap::new(),
            enforce_drift,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock_s(&self) -> u64 {
        self.cluster.clock_s
    }

    pub fn is_finished(&self) -> bool {
        self.cluster.clock_s >= self.config.duration_s
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn store(&self) -> &TelemetryStore {
        &self.store
    }

    pub fn control(&self) -> &ControlPlane {
        &self.control
    }

    pub fn incidents(&self) -> &[IncidentRecord] {
        self.tracker.incidents()
    }

    pub fn scrapes(&self) -> &[ScrapeRecord] {
        &self.scrapes
    }

    pub fn compliance(&self) -> &[ComplianceObservation] {
        &self.compliance
    }

    pub fn events(&self) -> &[ApiEvent] {
        &self.events
    }

    pub fn events_after(&self, after_seq: u64) -> &[ApiEvent] {
        // seq starts at 1 and is dense, so it doubles as an index.
        let start = (after_seq as usize).min(self.events.len());
        &self.events[start..]
    }

    pub fn last_seq(&self) -> u64 {
        self.events.len() as u64
    }

    fn emit(&mut self, kind: EventKind, payload: Value) {
        let seq = self.events.len() as u64 + 1;
        self.events.push(ApiEvent {
            seq,
            ts_s: self.cluster.clock_s,
            kind,
            payload,
        });
    }

    fn emit_control(&mut self, events: Vec<ControlEvent>) {
        use crate::control::ActionStatus as S;
        for ev in events {
            let kind = match ev.status {
                S::Proposed => EventKind::ActionProposed,
                S::PendingApproval => EventKind::ApprovalPending,
                S::Approved | S::Denied | S::Expired => EventKind::ActionDecided,
                S::Executed => EventKind::ActionExecuted,
            };
            let action = self.control.action(ev.action_id).expect("event refers to a known action");
            let audit = &self.control.audit().entries()[ev.audit_seq as usize];
            let mut payload = json!({
                "action_id": ev.action_id,
                "service": action.proposal.service,
                "action": action.proposal.action,
                "risk": action.proposal.risk,
                "rationale": action.proposal.rationale,
                "status": ev.status,
                "verdict": audit.verdict,
                "actor": audit.actor,
                "rules": audit.rules,
                "audit_seq": ev.audit_seq,
            });
            if ev.status == S::PendingApproval {
                if let Some(req) = self.control.approvals().find(|r| r.action_id == ev.action_id) {
                    payload["deadline_ts"] = json!(req.deadline_ts_s);
                }
            }
            if let Some(by) = action.decided_by {
                payload["decided_by"] = json!(by);
            }
            self.emit(kind, payload);
        }
    }

    /// Operator decision, applied between ticks.
    pub fn decide(&mut self, action_id: u64, decision: Decision) -> Result<(), EngineError> {
        let events = self.control.decide(action_id, decision, self.cluster.clock_s)?;
        self.emit_control(events);
        Ok(())
    }

    /// What-if injection, effective immediately.
    pub fn inject_fault(&mut self, fault: FaultEvent) -> Result<u64, EngineError> {
        let id = self.cluster.inject_fault(fault)?;
        self.collect_injections();
        Ok(self.incident_of_fault.get(&id).copied().unwrap_or(0))
    }

    fn collect_injections(&mut self) {
        let fresh: Vec<_> = self.cluster.injections()[self.seen_injections..].to_vec();
        self.seen_injections += fresh.len();
        for inj in fresh {
            let id = self.tracker.open_incident(
                &inj.service,
                inj.kind,
                inj.at_s,
                self.config.mode,
                inj.fault_id,
                inj.schedule_index,
            );
            self.incident_of_fault.insert(inj.fault_id, id);
            let record = self.tracker.get(id).cloned();
            self.emit(EventKind::IncidentOpened, json!(record));
        }
    }

    /// Run one tick. No-op once the trial has finished.
    pub fn tick(&mut self) -> Result<(), EngineError> {
        if self.is_finished() {
            return Ok(());
        }
        let t = self.cluster.clock_s;
        if t % SCRAPE_INTERVAL_S == 0 {
            self.scrape_and_sense(t)?;
        }
        if self.enforce_drift {
            self.reconcile_drift(t)?;
        }
        let events = self.control.tick(t);
        self.emit_control(events);
        if self.config.mode == Mode::Baseline {
            self.run_triage(t)?;
        }
        self.execute_ready()?;
        self.cluster.step(1)?;
        self.collect_injections();
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), EngineError> {
        while !self.is_finished() {
            self.tick()?;
        }
        Ok(())
    }

    fn scrape_and_sense(&mut self, t: u64) -> Result<(), EngineError> {
        let samples = self.store.scrape(&self.cluster, &Labels::new())?;
        let verdicts = evaluate_slo(&samples, &self.config.slo);
        let mut by_service: BTreeMap<&str, ScrapeValues> = BTreeMap::new();
        let mut mem: BTreeMap<&str, f64> = BTreeMap::new();
        for s in &samples {
            let Some(svc) = s.service() else { continue };
            let v = by_service.entry(svc).or_default();
            let slot = match s.metric {
                MetricName::CpuVcpu => &mut v.cpu_vcpu,
                MetricName::P95LatencyMs => &mut v.p95_latency_ms,
                MetricName::ErrorRate => &mut v.error_rate,
                MetricName::Rps => &mut v.rps,
                MetricName::DesiredReplicas => &mut v.desired_replicas,
                MetricName::AvailableReplicas => &mut v.available_replicas,
                MetricName::Mem => {
                    mem.insert(svc, s.value);
                    continue;
                }
            };
            *slot = Some(s.value);
        }

        let names: Vec<String> = self.cluster.services.iter().map(|s| s.spec.name.clone()).collect();
        let mut record = ScrapeRecord {
            ts_s: t,
            services: Vec::with_capacity(names.len()),
        };
        let mut compliance = Vec::with_capacity(names.len());
        for name in &names {
            let view = self.view(name)?;
            let values = by_service.get(name.as_str()).copied().unwrap_or_default();
            let verdict = verdicts.get(name).copied().unwrap_or(SloVerdict::Unknown);
            record.services.push(ServiceScrape {
                service: name.clone(),
                verdict,
                rps: values.rps,
                cpu_vcpu: values.cpu_vcpu,
                mem_mb: mem.get(name.as_str()).copied(),
                p95_latency_ms: values.p95_latency_ms,
                error_rate: values.error_rate,
                desired_replicas: view.desired_replicas,
                available_replicas: view.available_replicas,
                drift_active: view.drift_active,
            });
            compliance.push(ComplianceObservation {
                ts_s: t,
                service: name.clone(),
                desired_replicas: view.desired_replicas,
                drift_active: view.drift_active,
            });
        }
        self.emit(EventKind::Scrape, scrape_payload(&record, &samples));

        for v in self.violations.observe(self.control.policies(), &compliance) {
            self.emit(EventKind::Violation, json!(v));
        }
        self.compliance.extend(compliance);

        for (i, name) in names.iter().enumerate() {
            let values = by_service.get(name.as_str()).copied().unwrap_or_default();
            let verdict = record.services[i].verdict;
            match self.config.mode {
                Mode::Baseline => self.sense_baseline(t, name, verdict)?,
                Mode::Cpe => self.sense_cpe(t, i, name, &values, verdict)?,
            }
        }

        for (i, name) in names.iter().enumerate() {
            let view = self.view(name)?;
            let obs = RecoveryObservation {
                ts_s: t,
                verdict: record.services[i].verdict,
                available_replicas: view.available_replicas,
                desired_replicas: view.desired_replicas,
                drift_active: view.drift_active,
                degraded_replicas: view.degraded_replicas,
            };
            for id in self.tracker.detected_open(name) {
                if self.tracker.check_recovery(id, &obs)? {
                    let record = self.tracker.get(id).cloned();
                    self.emit(EventKind::IncidentRecovered, json!(record));
                }
            }
        }
        self.scrapes.push(record);
        Ok(())
    }

    fn view(&self, service: &str) -> Result<ServiceView, EngineError> {
        self.cluster
            .service_view(service)
            .ok_or_else(|| EngineError::Sim(SimError::UnknownService(service.to_string())))
    }

    fn detect_incident(&mut self, service: &str, t: u64, detector: &str) -> Result<Option<u64>, EngineError> {
        let Some(id) = self.tracker.first_undetected(service) else {
            return Ok(None);
        };
        if self.tracker.mark_detected(id, t, detector)? {
            let record = self.tracker.get(id).cloned();
            self.emit(EventKind::IncidentDetected, json!(record));
            return Ok(Some(id));
        }
        Ok(None)
    }

    fn sense_baseline(&mut self, t: u64, service: &str, verdict: SloVerdict) -> Result<(), EngineError> {
        let sense = self.sense.get_mut(service).expect("sense state per service");
        let Some(alert) = sense.alert.observe(t, verdict) else {
            return Ok(());
        };
        self.emit(
            EventKind::Anomaly,
            json!({"service": service, "trigger": "alert", "detector": alert.detector}),
        );
        if let Some(id) = self.detect_incident(service, t, &alert.detector)? {
            self.control.baseline_triage(id, service, t)?;
        }
        Ok(())
    }

    fn sense_cpe(
        &mut self,
        t: u64,
        index: usize,
        service: &str,
        values: &ScrapeValues,
        verdict: SloVerdict,
    ) -> Result<(), EngineError> {
        let warmup = self.config.warmup_s;
        let seed = derive_seed(self.config.seed, STREAM_DETECTOR + index as u64);
        let sense = self.sense.get_mut(service).expect("sense state per service");
        let fv = sense.extractor.extract(t, values);
        if t < warmup {
            sense.training.push(fv.clone());
        } else if !sense.fit_attempted {
            sense.fit_attempted = true;
            // A failed fit leaves the detector in fallback-only mode.
            let _ = sense.detector.fit(&sense.training, seed);
        }
        let Some(report) = sense.detector.detect(&fv, verdict) else {
            return Ok(());
        };
        self.emit(EventKind::Anomaly, json!(report));
        if report.trigger != Trigger::Underuse {
            let detector = match report.trigger {
                Trigger::Model => "model:isolation_forest",
                _ => "fallback:slo_breach",
            };
            self.detect_incident(service, t, detector)?;
        }
        let view = self.view(service)?;
        if self.control.has_in_flight(service) || view.starting_replicas > 0 {
            return Ok(());
        }
        for proposal in reason(&report, &view) {
            let events = self.control.submit(proposal, &view, t);
            self.emit_control(events);
        }
        Ok(())
    }

    /// Continuous drift enforcement: any live drift is detected and a
    /// rollback proposed on the tick it is observed.
    fn reconcile_drift(&mut self, t: u64) -> Result<(), EngineError> {
        let drifted: Vec<String> = self
            .cluster
            .services
            .iter()
            .filter(|s| s.drift_active())
            .map(|s| s.spec.name.clone())
            .collect();
        for service in drifted {
            self.detect_incident(&service, t, "policy:drift_forbidden")?;
            if self.control.has_in_flight(&service) {
                continue;
            }
            let view = self.view(&service)?;
            let proposal = ProposedAction {
                service: service.clone(),
                action: ActionKind::RollbackConfig,
                risk: Risk::High,
                rationale: "drift_forbidden".into(),
            };
            let events = self.control.submit(proposal, &view, t);
            self.emit_control(events);
        }
        Ok(())
    }

    fn run_triage(&mut self, t: u64) -> Result<(), EngineError> {
        for ticket in self.control.due_tickets(t) {
            let Some(kind) = self.tracker.get(ticket.incident_id).map(|i| i.fault_kind) else {
                continue;
            };
            let view = self.view(&ticket.service)?;
            let action = match kind {
                FaultKind::ConfigDrift => ActionKind::RollbackConfig,
                FaultKind::PodEviction => ActionKind::RestartPod {
                    count: view.failed_replicas.max(1),
                },
                FaultKind::CpuSaturation => ActionKind::RestartPod {
                    count: view.degraded_replicas.max(1),
                },
            };
            let proposal = ProposedAction {
                service: ticket.service.clone(),
                action,
                risk: risk_of(&action, &view),
                rationale: format!("manual_triage(incident {})", ticket.incident_id),
            };
            let events = self.control.submit_operator(proposal, &view, t);
            self.emit_control(events);
        }
        Ok(())
    }

    fn execute_ready(&mut self) -> Result<(), EngineError> {
        for id in self.control.ready() {
            match self.control.execute(id, &mut self.cluster) {
                Ok((_, event)) => self.emit_control(vec![event]),
                Err(ControlError::Contract(reason)) => {
                    let action = self.control.action(id).cloned();
                    self.emit(
                        EventKind::ActionDecided,
                        json!({"action_id": id, "status": "denied", "reason": reason, "action": action.map(|a| a.proposal)}),
                    );
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> StateSummary {
        let latest = self.scrapes.last();
        let services = self
            .cluster
            .services
            .iter()
            .filter_map(|s| {
                let view = self.cluster.service_view(&s.spec.name)?;
                let latest = latest.and_then(|r| r.services.iter().find(|x| x.service == s.spec.name).cloned());
                Some(ServiceStatus { view, latest })
            })
            .collect();
        StateSummary {
            clock_s: self.cluster.clock_s,
            duration_s: self.config.duration_s,
            warmup_s: self.config.warmup_s,
            mode: self.config.mode,
            finished: self.is_finished(),
            services,
            active_faults: self.cluster.active_faults.iter().map(|f| f.event.clone()).collect(),
            open_incidents: self
                .tracker
                .incidents()
                .iter()
                .filter(|i| i.is_open())
                .cloned()
                .collect(),
            pending_approvals: self.control.pending_approvals().len(),
            last_event_seq: self.last_seq(),
        }
    }

    pub fn model_summaries(&self) -> Vec<ModelSummary> {
        self.sense.values().map(|s| s.detector.summary()).collect()
    }

    pub fn finish(self) -> EngineOutput {
        let models = self.model_summaries();
        EngineOutput {
            incidents: self.tracker.into_incidents(),
            scrapes: self.scrapes,
            compliance: self.compliance,
            violations: self.violations.records().to_vec(),
            control: self.control,
            models,
            store: self.store,
            events: self.events,
        }
    }
}

fn scrape_payload(record: &ScrapeRecord, samples: &[TelemetrySample]) -> Value {
    json!({
        "ts": record.ts_s,
        "services": record.services,
        "samples": samples.len(),
    })
}
