//! Deterministic discrete-event model of a small cluster.
//!
//! Each service owns a list of replicas. Offered load comes from a
//! [`WorkloadProfile`]; per-step metrics follow a queueing-flavoured model:
//!
//! * `rho = offered / (available * capacity_per_replica * mean capacity_multiplier)`
//! * `p95 = base_latency / max(eps, 1 - min(rho, 0.98))`, capped at `latency_cap_ms`
//! * `error_rate = clamp(spill_factor * max(0, rho - 1), 0, 1)`
//! * a healthy replica burns `min(1, rho * m + (1 - m))` of its vCPU, where
//!   `m` is its capacity multiplier; the `(1 - m)` share is the stressor
//!   that saturated it, so nominal replicas reduce to `min(1, rho)`.
//!
//! All randomness is drawn from a seeded ChaCha stream owned by the state, so
//! a `(config, seed)` pair always produces the same trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ActionKind;

const LATENCY_EPS: f64 = 1e-9;
const RHO_LATENCY_CEIL: f64 = 0.98;
/// Stored utilisation is clamped here so snapshots stay finite.
const RHO_STORE_CAP: f64 = 1.0e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config at `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("step size must be positive")]
    ZeroStep,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub desired_replicas: u32,
    pub capacity_rps_per_replica: f64,
    pub vcpu_per_replica: f64,
    pub mem_mb_per_replica: f64,
    pub base_latency_ms: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
}

impl ServiceSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let field = |f: &str| format!("services.{}.{f}", self.name);
        if self.name.is_empty() {
            return Err(invalid("services.name", "must not be empty"));
        }
        if self.min_replicas < 1 {
            return Err(invalid(field("min_replicas"), "must be at least 1"));
        }
        if self.desired_replicas < self.min_replicas {
            return Err(invalid(field("desired_replicas"), "desired_replicas below min"));
        }
        if self.desired_replicas > self.max_replicas {
            return Err(invalid(field("desired_replicas"), "desired_replicas above max"));
        }
        if !(self.capacity_rps_per_replica > 0.0) {
            return Err(invalid(field("capacity_rps_per_replica"), "must be positive"));
        }
        if !(self.vcpu_per_replica > 0.0) {
            return Err(invalid(field("vcpu_per_replica"), "must be positive"));
        }
        if !(self.mem_mb_per_replica >= 0.0) {
            return Err(invalid(field("mem_mb_per_replica"), "must be non-negative"));
        }
        if !(self.base_latency_ms > 0.0) {
            return Err(invalid(field("base_latency_ms"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub id: u64,
    pub healthy: bool,
    pub cpu_fraction: f64,
    pub capacity_multiplier: f64,
    /// Set while the replica is starting; it turns healthy once the clock
    /// reaches this instant.
    pub ready_at_s: Option<u64>,
}

impl ReplicaState {
    fn fresh(id: u64, ready_at_s: Option<u64>) -> Self {
        Self {
            id,
            healthy: ready_at_s.is_none(),
            cpu_fraction: 0.0,
            capacity_multiplier: 1.0,
            ready_at_s,
        }
    }

    pub fn is_starting(&self) -> bool {
        self.ready_at_s.is_some()
    }

    /// Not serving and not on its way back.
    pub fn is_failed(&self) -> bool {
        !self.healthy && self.ready_at_s.is_none()
    }

    pub fn is_degraded(&self) -> bool {
        self.healthy && self.capacity_multiplier < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Steady,
    Bursty,
    SpikeScript,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub start_s: u64,
    pub end_s: u64,
    pub rps: f64,
}

/// Offered-load generator.
///
/// `bursty` adds `amplitude` for the first `duty * period_s` seconds of every
/// period (shifted by `phase_s`). `spike-script` serves `rps` inside each
/// segment and `base_rps` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub kind: WorkloadKind,
    pub base_rps: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period_s: u64,
    #[serde(default = "default_duty")]
    pub duty: f64,
    #[serde(default)]
    pub phase_s: u64,
    #[serde(default)]
    pub script: Vec<ScriptSegment>,
}

fn default_period() -> u64 {
    600
}

fn default_duty() -> f64 {
    0.3
}

impl WorkloadProfile {
    pub fn steady(base_rps: f64) -> Self {
        Self {
            kind: WorkloadKind::Steady,
            base_rps,
            amplitude: 0.0,
            period_s: default_period(),
            duty: default_duty(),
            phase_s: 0,
            script: Vec::new(),
        }
    }

    pub fn bursty(base_rps: f64, amplitude: f64, period_s: u64, duty: f64, phase_s: u64) -> Self {
        Self {
            kind: WorkloadKind::Bursty,
            base_rps,
            amplitude,
            period_s,
            duty,
            phase_s,
            script: Vec::new(),
        }
    }

    pub fn spike_script(base_rps: f64, script: Vec<ScriptSegment>) -> Self {
        Self {
            kind: WorkloadKind::SpikeScript,
            base_rps,
            amplitude: 0.0,
            period_s: default_period(),
            duty: default_duty(),
            phase_s: 0,
            script,
        }
    }

    pub fn validate(&self, field: &str) -> Result<(), SimError> {
        if !(self.base_rps >= 0.0) {
            return Err(invalid(format!("{field}.base_rps"), "must be non-negative"));
        }
        match self.kind {
            WorkloadKind::Steady => {}
            WorkloadKind::Bursty => {
                if self.period_s == 0 {
                    return Err(invalid(format!("{field}.period_s"), "must be positive"));
                }
                if !(self.duty > 0.0 && self.duty < 1.0) {
                    return Err(invalid(format!("{field}.duty"), "must lie in (0, 1)"));
                }
                if !(self.amplitude >= -self.base_rps) {
                    return Err(invalid(
                        format!("{field}.amplitude"),
                        "burst would drive load negative",
                    ));
                }
            }
            WorkloadKind::SpikeScript => {
                let mut prev_end = 0;
                for (i, seg) in self.script.iter().enumerate() {
                    if seg.end_s <= seg.start_s {
                        return Err(invalid(format!("{field}.script[{i}]"), "end_s must exceed start_s"));
                    }
                    if i > 0 && seg.start_s < prev_end {
                        return Err(invalid(
                            format!("{field}.script[{i}]"),
                            "segments must be time-ordered and non-overlapping",
                        ));
                    }
                    if !(seg.rps >= 0.0) {
                        return Err(invalid(format!("{field}.script[{i}].rps"), "must be non-negative"));
                    }
                    prev_end = seg.end_s;
                }
            }
        }
        Ok(())
    }

    /// Noise-free offered rps at `t_s`.
    pub fn rate_at(&self, t_s: u64) -> f64 {
        match self.kind {
            WorkloadKind::Steady => self.base_rps,
            WorkloadKind::Bursty => {
                let phase = (t_s + self.period_s - self.phase_s % self.period_s) % self.period_s;
                let burst_len = (self.duty * self.period_s as f64).round() as u64;
                if phase < burst_len {
                    self.base_rps + self.amplitude
                } else {
                    self.base_rps
                }
            }
            WorkloadKind::SpikeScript => {
                // Segments are sorted, so the first segment starting after t ends the search.
                let idx = self.script.partition_point(|seg| seg.start_s <= t_s);
                match idx.checked_sub(1).map(|i| &self.script[i]) {
                    Some(seg) if t_s < seg.end_s => seg.rps,
                    _ => self.base_rps,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    CpuSaturation,
    PodEviction,
    ConfigDrift,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [
        FaultKind::CpuSaturation,
        FaultKind::PodEviction,
        FaultKind::ConfigDrift,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::CpuSaturation => "cpu_saturation",
            FaultKind::PodEviction => "pod_eviction",
            FaultKind::ConfigDrift => "config_drift",
        }
    }
}

/// `magnitude` is a capacity multiplier for `cpu_saturation`, a replica count
/// for `pod_eviction` and the drifted replica value for `config_drift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub kind: FaultKind,
    pub target_service: String,
    pub at_s: u64,
    pub magnitude: f64,
    #[serde(default)]
    pub duration_s: Option<u64>,
}

impl FaultEvent {
    pub fn validate(&self, field: &str) -> Result<(), SimError> {
        match self.kind {
            FaultKind::CpuSaturation => {
                if !(self.magnitude > 0.0 && self.magnitude < 1.0) {
                    return Err(invalid(
                        format!("{field}.magnitude"),
                        "cpu_saturation multiplier must lie in (0, 1)",
                    ));
                }
            }
            FaultKind::PodEviction => {
                if !(self.magnitude >= 1.0) || self.magnitude.fract() != 0.0 {
                    return Err(invalid(format!("{field}.magnitude"), "eviction count must be an integer >= 1"));
                }
            }
            FaultKind::ConfigDrift => {
                if !(self.magnitude >= 0.0) || self.magnitude.fract() != 0.0 {
                    return Err(invalid(format!("{field}.magnitude"), "drift replica value must be a whole number"));
                }
            }
        }
        if self.duration_s == Some(0) {
            return Err(invalid(format!("{field}.duration_s"), "must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub noise_sigma: f64,
    pub restart_delay_s: u64,
    pub latency_cap_ms: f64,
    pub spill_factor: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.03,
            restart_delay_s: 15,
            latency_cap_ms: 10_000.0,
            spill_factor: 1.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 1.0) {
            return Err(invalid("sim.noise_sigma", "must lie in [0, 1)"));
        }
        if !(self.latency_cap_ms > 0.0) {
            return Err(invalid("sim.latency_cap_ms", "must be positive"));
        }
        if !(self.spill_factor >= 0.0) {
            return Err(invalid("sim.spill_factor", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub spec: ServiceSpec,
    pub workload: WorkloadProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub services: Vec<ServiceConfig>,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default)]
    pub params: SimParams,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.services.is_empty() {
            return Err(invalid("services", "at least one service is required"));
        }
        for (i, svc) in self.services.iter().enumerate() {
            svc.spec.validate()?;
            svc.workload.validate(&format!("services.{}.workload", svc.spec.name))?;
            if self.services[..i].iter().any(|s| s.spec.name == svc.spec.name) {
                return Err(invalid(format!("services.{}", svc.spec.name), "duplicate service name"));
            }
        }
        for (i, fault) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            fault.validate(&field)?;
            if !self.services.iter().any(|s| s.spec.name == fault.target_service) {
                return Err(invalid(
                    format!("{field}.target_service"),
                    format!("unknown service `{}`", fault.target_service),
                ));
            }
        }
        self.params.validate()
    }
}

/// Per-service figures recomputed at every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    pub offered_rps: f64,
    pub served_rps: f64,
    pub dropped_rps: f64,
    pub utilization: f64,
    pub p95_latency_ms: f64,
    pub error_rate: f64,
    pub cpu_vcpu: f64,
    pub mem_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    pub spec: ServiceSpec,
    /// Replica count the control plane considers authoritative.
    pub declared_replicas: u32,
    pub desired_replicas: u32,
    pub replicas: Vec<ReplicaState>,
    /// Out-of-band replica value while config drift is present.
    pub drift: Option<u32>,
    pub workload: WorkloadProfile,
    pub metrics: ServiceMetrics,
    noise: (f64, f64),
}

impl ServiceState {
    pub fn available_replicas(&self) -> u32 {
        self.replicas.iter().filter(|r| r.healthy).count() as u32
    }

    pub fn drift_active(&self) -> bool {
        self.drift.is_some()
    }

    fn effective_capacity(&self) -> f64 {
        self.replicas
            .iter()
            .filter(|r| r.healthy)
            .map(|r| self.spec.capacity_rps_per_replica * r.capacity_multiplier)
            .sum()
    }

    /// Pick the replica to drop when shrinking: failed first, then starting,
    /// then the most degraded, then the newest.
    fn removal_candidate(&self) -> Option<usize> {
        let rank = |r: &ReplicaState| -> (u8, f64) {
            if r.is_failed() {
                (0, 0.0)
            } else if r.is_starting() {
                (1, 0.0)
            } else {
                (2, r.capacity_multiplier)
            }
        };
        let mut best: Option<(usize, (u8, f64))> = None;
        for (i, r) in self.replicas.iter().enumerate() {
            let key = rank(r);
            let better = match best {
                None => true,
                Some((_, b)) => key.0 < b.0 || (key.0 == b.0 && key.1 <= b.1),
            };
            if better {
                best = Some((i, key));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveFault {
    pub id: u64,
    pub event: FaultEvent,
    pub applied_at_s: u64,
    /// Replicas still carrying the fault (saturation and eviction).
    pub affected: Vec<u64>,
}

/// Marker left by every applied fault so the telemetry layer can open the
/// matching incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub fault_id: u64,
    /// Index in the scripted schedule; `None` for ad-hoc injections.
    pub schedule_index: Option<usize>,
    pub kind: FaultKind,
    pub service: String,
    pub at_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionOutcome {
    /// The request exceeded replica bounds and was clamped.
    pub clamped: bool,
    /// Nothing to do (e.g. rollback without drift).
    pub noop: bool,
}

/// Raw per-service metric tuple as exposed to the scraper.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSnapshot {
    pub service: String,
    pub cpu_vcpu: f64,
    pub mem_mb: f64,
    pub rps_served: f64,
    pub p95_latency_ms: f64,
    pub error_rate: f64,
    pub desired_replicas: u32,
    pub available_replicas: u32,
}

/// Read-only view of one service handed to the reasoner and policy engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceView {
    pub service: String,
    pub desired_replicas: u32,
    pub declared_replicas: u32,
    pub available_replicas: u32,
    pub failed_replicas: u32,
    pub starting_replicas: u32,
    pub degraded_replicas: u32,
    pub drift_active: bool,
    pub offered_rps: f64,
    pub utilization: f64,
    pub capacity_rps_per_replica: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub clock_s: u64,
    pub services: Vec<ServiceState>,
    pub active_faults: Vec<ActiveFault>,
    pub params: SimParams,
    /// Scheduled faults not yet applied, ordered by `at_s`.
    schedule: Vec<(usize, FaultEvent)>,
    injections: Vec<Injection>,
    rng: ChaCha8Rng,
    next_replica_id: u64,
    next_fault_id: u64,
}

pub fn init_cluster(config: &ClusterConfig, seed: u64) -> Result<ClusterState, SimError> {
    config.validate()?;
    let mut next_replica_id = 0;
    let services = config
        .services
        .iter()
        .map(|svc| {
            let replicas = (0..svc.spec.desired_replicas)
                .map(|_| {
                    next_replica_id += 1;
                    ReplicaState::fresh(next_replica_id, None)
                })
                .collect();
            ServiceState {
                spec: svc.spec.clone(),
                declared_replicas: svc.spec.desired_replicas,
                desired_replicas: svc.spec.desired_replicas,
                replicas,
                drift: None,
                workload: svc.workload.clone(),
                metrics: ServiceMetrics::default(),
                noise: (0.0, 0.0),
            }
        })
        .collect();
    let mut schedule: Vec<(usize, FaultEvent)> = config.faults.iter().cloned().enumerate().collect();
    schedule.sort_by_key(|(i, f)| (f.at_s, *i));
    let mut state = ClusterState {
        clock_s: 0,
        services,
        active_faults: Vec::new(),
        params: config.params.clone(),
        schedule,
        injections: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_replica_id,
        next_fault_id: 0,
    };
    state.draw_noise();
    state.recompute();
    Ok(state)
}

impl ClusterState {
    pub fn service(&self, name: &str) -> Option<&ServiceState> {
        self.services.iter().find(|s| s.spec.name == name)
    }

    fn service_index(&self, name: &str) -> Result<usize, SimError> {
        self.services
            .iter()
            .position(|s| s.spec.name == name)
            .ok_or_else(|| SimError::UnknownService(name.to_string()))
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    pub fn pending_faults(&self) -> impl Iterator<Item = &FaultEvent> {
        self.schedule.iter().map(|(_, f)| f)
    }

    /// Advance the clock by `dt_s`, applying every scheduled fault with
    /// `at_s` in `[clock, clock + dt)`.
    pub fn step(&mut self, dt_s: u64) -> Result<(), SimError> {
        if dt_s == 0 {
            return Err(SimError::ZeroStep);
        }
        let t0 = self.clock_s;
        let t1 = t0 + dt_s;
        while self.schedule.first().is_some_and(|(_, f)| f.at_s < t1) {
            let (idx, fault) = self.schedule.remove(0);
            let at = fault.at_s.max(t0);
            self.apply_fault(fault, at, Some(idx));
        }
        self.expire_faults(t1);
        self.clock_s = t1;
        for svc in &mut self.services {
            for r in &mut svc.replicas {
                if r.ready_at_s.is_some_and(|ready| ready <= t1) {
                    r.ready_at_s = None;
                    r.healthy = true;
                }
            }
        }
        self.draw_noise();
        self.recompute();
        Ok(())
    }

    /// Apply `fault` now, regardless of its `at_s`.
    pub fn inject_fault(&mut self, mut fault: FaultEvent) -> Result<u64, SimError> {
        self.service_index(&fault.target_service)?;
        fault.validate("fault")?;
        fault.at_s = self.clock_s;
        let now = self.clock_s;
        let id = self.apply_fault(fault, now, None);
        self.recompute();
        Ok(id)
    }

    fn apply_fault(&mut self, fault: FaultEvent, at_s: u64, schedule_index: Option<usize>) -> u64 {
        self.next_fault_id += 1;
        let id = self.next_fault_id;
        let restart_delay = self.params.restart_delay_s;
        let Ok(si) = self.service_index(&fault.target_service) else {
            return id;
        };
        let mut affected = Vec::new();
        let mut track = true;
        {
            let svc = &mut self.services[si];
            match fault.kind {
                FaultKind::CpuSaturation => {
                    for r in svc.replicas.iter_mut().filter(|r| r.healthy) {
                        r.capacity_multiplier = r.capacity_multiplier.min(fault.magnitude);
                        affected.push(r.id);
                    }
                }
                FaultKind::PodEviction => {
                    let count = fault.magnitude as usize;
                    for r in svc.replicas.iter_mut().filter(|r| r.healthy).take(count) {
                        r.healthy = false;
                        r.cpu_fraction = 0.0;
                        affected.push(r.id);
                    }
                }
                FaultKind::ConfigDrift => {
                    let value = (fault.magnitude as u32).clamp(svc.spec.min_replicas, svc.spec.max_replicas);
                    if svc.drift == Some(value) && svc.desired_replicas == value {
                        // Same drift again: already in effect.
                        track = false;
                    } else {
                        svc.drift = Some(value);
                        svc.desired_replicas = value;
                    }
                }
            }
        }
        if fault.kind == FaultKind::ConfigDrift {
            self.reconcile_replicas(si, at_s, restart_delay);
            if track {
                self.active_faults.retain(|f| {
                    !(f.event.kind == FaultKind::ConfigDrift && f.event.target_service == fault.target_service)
                });
            }
        }
        if track {
            self.injections.push(Injection {
                fault_id: id,
                schedule_index,
                kind: fault.kind,
                service: fault.target_service.clone(),
                at_s,
            });
            self.active_faults.push(ActiveFault {
                id,
                event: fault,
                applied_at_s: at_s,
                affected,
            });
        }
        self.prune_faults();
        id
    }

    fn expire_faults(&mut self, t1: u64) {
        let mut expired = Vec::new();
        self.active_faults.retain(|f| {
            let end = f.event.duration_s.map(|d| f.applied_at_s + d);
            if end.is_some_and(|e| e < t1) {
                expired.push(f.clone());
                false
            } else {
                true
            }
        });
        for f in expired {
            let Ok(si) = self.service_index(&f.event.target_service) else {
                continue;
            };
            let svc = &mut self.services[si];
            match f.event.kind {
                FaultKind::CpuSaturation => {
                    for r in svc.replicas.iter_mut().filter(|r| f.affected.contains(&r.id)) {
                        r.capacity_multiplier = 1.0;
                    }
                }
                // An evicted pod stays gone until replaced; drift stays until rolled back.
                FaultKind::PodEviction | FaultKind::ConfigDrift => {}
            }
        }
    }

    /// Drop faults whose effects are fully gone.
    fn prune_faults(&mut self) {
        let services = &self.services;
        self.active_faults.retain_mut(|f| {
            let Some(svc) = services.iter().find(|s| s.spec.name == f.event.target_service) else {
                return false;
            };
            match f.event.kind {
                FaultKind::ConfigDrift => svc.drift.is_some(),
                FaultKind::CpuSaturation => {
                    f.affected
                        .retain(|id| svc.replicas.iter().any(|r| r.id == *id && r.capacity_multiplier < 1.0));
                    !f.affected.is_empty()
                }
                FaultKind::PodEviction => {
                    f.affected.retain(|id| svc.replicas.iter().any(|r| r.id == *id && r.is_failed()));
                    !f.affected.is_empty()
                }
            }
        });
    }

    fn reconcile_replicas(&mut self, si: usize, now: u64, restart_delay: u64) {
        while self.services[si].replicas.len() > self.services[si].desired_replicas as usize {
            let idx = self.services[si]
                .removal_candidate()
                .expect("non-empty replica list has a removal candidate");
            self.services[si].replicas.remove(idx);
        }
        while self.services[si].replicas.len() < self.services[si].desired_replicas as usize {
            self.next_replica_id += 1;
            let id = self.next_replica_id;
            self.services[si]
                .replicas
                .push(ReplicaState::fresh(id, Some(now + restart_delay)));
        }
    }

    /// Carry out an action the control plane has already approved.
    pub fn apply_action(&mut self, service: &str, action: &ActionKind) -> Result<ActionOutcome, SimError> {
        let si = self.service_index(service)?;
        let now = self.clock_s;
        let delay = self.params.restart_delay_s;
        let mut outcome = ActionOutcome {
            clamped: false,
            noop: false,
        };
        match *action {
            ActionKind::ScaleUp { delta } => {
                let svc = &mut self.services[si];
                let target = svc.declared_replicas.saturating_add(delta);
                outcome.clamped = target > svc.spec.max_replicas;
                let target = target.min(svc.spec.max_replicas);
                outcome.noop = target == svc.declared_replicas;
                svc.declared_replicas = target;
                // Under drift only the declared spec moves; rollback applies it.
                if svc.drift.is_none() {
                    svc.desired_replicas = target;
                    self.reconcile_replicas(si, now, delay);
                }
            }
            ActionKind::ScaleDown { delta } => {
                let svc = &mut self.services[si];
                let target = svc.declared_replicas.saturating_sub(delta);
                outcome.clamped = target < svc.spec.min_replicas;
                let target = target.max(svc.spec.min_replicas);
                outcome.noop = target == svc.declared_replicas;
                svc.declared_replicas = target;
                // Under drift only the declared spec moves; rollback applies it.
                if svc.drift.is_none() {
                    svc.desired_replicas = target;
                    self.reconcile_replicas(si, now, delay);
                }
            }
            ActionKind::RestartPod { count } => {
                let svc = &self.services[si];
                let mut failed: Vec<&ReplicaState> = svc.replicas.iter().filter(|r| r.is_failed()).collect();
                let mut degraded: Vec<&ReplicaState> = svc.replicas.iter().filter(|r| r.is_degraded()).collect();
                degraded.sort_by(|a, b| a.capacity_multiplier.total_cmp(&b.capacity_multiplier));
                failed.extend(degraded);
                let victims: Vec<u64> = failed.iter().take(count as usize).map(|r| r.id).collect();
                outcome.noop = victims.is_empty();
                for id in victims {
                    self.next_replica_id += 1;
                    let fresh = ReplicaState::fresh(self.next_replica_id, Some(now + delay));
                    let svc = &mut self.services[si];
                    if let Some(slot) = svc.replicas.iter_mut().find(|r| r.id == id) {
                        *slot = fresh;
                    }
                }
            }
            ActionKind::RollbackConfig => {
                let svc = &mut self.services[si];
                if svc.drift.take().is_some() {
                    svc.desired_replicas = svc.declared_replicas;
                    self.reconcile_replicas(si, now, delay);
                } else {
                    outcome.noop = true;
                }
            }
        }
        self.prune_faults();
        self.recompute();
        Ok(outcome)
    }

    fn draw_noise(&mut self) {
        for svc in &mut self.services {
            let z1: f64 = StandardNormal.sample(&mut self.rng);
            let z2: f64 = StandardNormal.sample(&mut self.rng);
            svc.noise = (z1, z2);
        }
    }

    fn recompute(&mut self) {
        let t = self.clock_s;
        let p = &self.params;
        for svc in &mut self.services {
            let (z_rps, z_lat) = svc.noise;
            let offered = (svc.workload.rate_at(t) * (1.0 + p.noise_sigma * z_rps)).max(0.0);
            let capacity = svc.effective_capacity();
            let rho = if capacity > 0.0 {
                offered / capacity
            } else if offered > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            let error_rate = (p.spill_factor * (rho - 1.0).max(0.0)).clamp(0.0, 1.0);
            let served = offered * (1.0 - error_rate);
            let p95 = if capacity > 0.0 {
                let raw = svc.spec.base_latency_ms / (1.0 - rho.min(RHO_LATENCY_CEIL)).max(LATENCY_EPS);
                (raw.min(p.latency_cap_ms) * (1.0 + p.noise_sigma * z_lat)).clamp(0.0, p.latency_cap_ms)
            } else {
                p.latency_cap_ms
            };
            let busy = rho.min(1.0);
            let mut cpu = 0.0;
            for r in &mut svc.replicas {
                r.cpu_fraction = if r.healthy {
                    let m = r.capacity_multiplier;
                    (busy * m + (1.0 - m)).min(1.0)
                } else {
                    0.0
                };
                cpu += r.cpu_fraction * svc.spec.vcpu_per_replica;
            }
            let running = svc.replicas.iter().filter(|r| r.healthy || r.is_starting()).count();
            svc.metrics = ServiceMetrics {
                offered_rps: offered,
                served_rps: served,
                dropped_rps: offered - served,
                utilization: rho.min(RHO_STORE_CAP),
                p95_latency_ms: p95,
                error_rate,
                cpu_vcpu: cpu,
                mem_mb: running as f64 * svc.spec.mem_mb_per_replica,
            };
        }
    }

    pub fn snapshot_metrics(&self) -> Vec<MetricSnapshot> {
        self.services
            .iter()
            .map(|svc| MetricSnapshot {
                service: svc.spec.name.clone(),
                cpu_vcpu: svc.metrics.cpu_vcpu,
                mem_mb: svc.metrics.mem_mb,
                rps_served: svc.metrics.served_rps,
                p95_latency_ms: svc.metrics.p95_latency_ms,
                error_rate: svc.metrics.error_rate,
                desired_replicas: svc.desired_replicas,
                available_replicas: svc.available_replicas(),
            })
            .collect()
    }

    pub fn service_view(&self, name: &str) -> Option<ServiceView> {
        let svc = self.service(name)?;
        let count = |pred: fn(&ReplicaState) -> bool| svc.replicas.iter().filter(|r| pred(r)).count() as u32;
        Some(ServiceView {
            service: svc.spec.name.clone(),
            desired_replicas: svc.desired_replicas,
            declared_replicas: svc.declared_replicas,
            available_replicas: svc.available_replicas(),
            failed_replicas: count(ReplicaState::is_failed),
            starting_replicas: count(ReplicaState::is_starting),
            degraded_replicas: count(ReplicaState::is_degraded),
            drift_active: svc.drift_active(),
            offered_rps: svc.metrics.offered_rps,
            utilization: svc.metrics.utilization,
            capacity_rps_per_replica: svc.spec.capacity_rps_per_replica,
            min_replicas: svc.spec.min_replicas,
            max_replicas: svc.spec.max_replicas,
        })
    }
}
