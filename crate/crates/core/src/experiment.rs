//! Trial procedure and A/B comparison: scenario presets, single trials,
//! K-pair comparisons with pooled statistics, and the four-scenario suite.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{count_violations, ActionStatus, GateConfig, PolicySet, ViolationRecord};
use crate::engine::{Engine, EngineConfig, EngineError, EngineOutput, ScrapeRecord};
use crate::intelligence::{DetectorParams, ModelSummary};
use crate::report::{sha256_hex, to_canonical_json};
use crate::simcluster::{
    ClusterConfig, FaultEvent, FaultKind, ScriptSegment, ServiceConfig, ServiceSpec, SimParams,
    WorkloadProfile,
};
use crate::stats::{
    bootstrap_ci, cliffs_delta, delta_mttr, delta_re, delta_violations, mann_whitney_u, summarize_mttr,
    ConfidenceInterval, MwuResult, StatsError, DEFAULT_BOOTSTRAP_RESAMPLES,
};
use crate::telemetry::{IncidentRecord, MetricName, SloSpec, SloStrictness, TelemetryStore, SCRAPE_INTERVAL_S};
use crate::Mode;

pub const DEFAULT_DURATION_S: u64 = 5400;
pub const DEFAULT_WARMUP_S: u64 = 600;
pub const DEFAULT_TRIALS: usize = 5;
pub const DEFAULT_FAULTS: usize = 8;
pub const DEFAULT_FAULT_SPACING_S: u64 = 600;
/// First fault lands this long after warm-up ends.
pub const DEFAULT_FAULT_OFFSET_S: u64 = 150;
/// Seed of the fault-free run whose telemetry becomes the recorded trace.
pub const RECORDING_SEED: u64 = 0x7EC0_4D;

const MIB_PER_GIB: f64 = 1024.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid trial config: {0}")]
    Invalid(String),
    #[error("{arm} arm has no resolved incidents; MTTR is undefined")]
    NoResolvedIncidents { arm: String },
    #[error("trial worker panicked")]
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadPattern {
    Steady,
    Bursty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceType {
    Synthetic,
    Recorded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub workload: WorkloadPattern,
    pub slo: SloStrictness,
    pub trace: TraceType,
}

impl ScenarioSpec {
    /// S1 steady/standard/recorded, S2 bursty/standard/synthetic,
    /// S3 steady/strict/recorded, S4 bursty/relaxed/synthetic.
    pub fn preset(id: &str) -> Option<Self> {
        let (workload, slo, trace) = match id {
            "S1" => (WorkloadPattern::Steady, SloStrictness::Standard, TraceType::Recorded),
            "S2" => (WorkloadPattern::Bursty, SloStrictness::Standard, TraceType::Synthetic),
            "S3" => (WorkloadPattern::Steady, SloStrictness::Strict, TraceType::Recorded),
            "S4" => (WorkloadPattern::Bursty, SloStrictness::Relaxed, TraceType::Synthetic),
            _ => return None,
        };
        Some(Self {
            id: id.to_string(),
            workload,
            slo,
            trace,
        })
    }

    pub fn all() -> Vec<Self> {
        ["S1", "S2", "S3", "S4"]
            .iter()
            .map(|id| Self::preset(id).expect("preset ids are known"))
            .collect()
    }
}

/// Everything that determines a trial. Two arms of one comparison differ
/// only in `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub duration_s: u64,
    pub warmup_s: u64,
    pub cluster: ClusterConfig,
    pub slo: SloSpec,
    pub policies: PolicySet,
    pub gate: GateConfig,
    pub detector: DetectorParams,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        if self.duration_s <= self.warmup_s {
            return bad(format!(
                "duration_s ({}) must exceed warmup_s ({})",
                self.duration_s, self.warmup_s
            ));
        }
        self.cluster
            .validate()
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        self.slo.validate().map_err(ExperimentError::Invalid)?;
        if self.gate.approval_timeout_s == 0 {
            return bad("gate.approval_timeout_s must be positive".into());
        }
        let d = &self.detector;
        if !(d.threshold > 0.0 && d.threshold < 1.0) {
            return bad("detector.threshold must lie in (0, 1)".into());
        }
        if d.n_trees == 0 || d.subsample < 2 {
            return bad("detector needs n_trees >= 1 and subsample >= 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(to_canonical_json(self).as_bytes())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            mode: self.mode,
            cluster: self.cluster.clone(),
            slo: self.slo.clone(),
            policies: self.policies.clone(),
            gate: self.gate,
            detector: self.detector.clone(),
            warmup_s: self.warmup_s,
            duration_s: self.duration_s,
            seed: self.seed,
        }
    }

    pub fn with_arm(&self, mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            ..self.clone()
        }
    }
}

struct ServiceShape {
    name: &'static str,
    desired: u32,
    capacity: f64,
    vcpu: f64,
    mem_mb: f64,
    base_latency_ms: f64,
    max: u32,
}

/// Two services; the default policy set bounds them to 2..=10 replicas.
const TOPOLOGY: [ServiceShape; 2] = [
    ServiceShape {
        name: "frontend",
        desired: 4,
        capacity: 100.0,
        vcpu: 1.0,
        mem_mb: 512.0,
        base_latency_ms: 40.0,
        max: 10,
    },
    ServiceShape {
        name: "checkout",
        desired: 3,
        capacity: 80.0,
        vcpu: 0.5,
        mem_mb: 256.0,
        base_latency_ms: 40.0,
        max: 8,
    },
];

/// Nominal utilisation of each load phase.
const STEADY_UTILIZATION: f64 = 0.5;
const BURST_BASE_UTILIZATION: f64 = 0.45;
const BURST_PEAK_UTILIZATION: f64 = 0.75;
const BURST_PERIOD_S: u64 = 600;
const BURST_DUTY: f64 = 0.3;
const BURST_PHASE_S: u64 = 300;

const SATURATION_MULTIPLIER: f64 = 0.65;
const EVICTION_COUNT: f64 = 2.0;
const DRIFT_REPLICAS: f64 = 1.0;

fn nominal_capacity(s: &ServiceShape) -> f64 {
    s.desired as f64 * s.capacity
}

fn synthetic_workload(pattern: WorkloadPattern, s: &ServiceShape) -> WorkloadProfile {
    let cap = nominal_capacity(s);
    match pattern {
        WorkloadPattern::Steady => WorkloadProfile::steady(cap * STEADY_UTILIZATION),
        WorkloadPattern::Bursty => WorkloadProfile::bursty(
            cap * BURST_BASE_UTILIZATION,
            cap * (BURST_PEAK_UTILIZATION - BURST_BASE_UTILIZATION),
            BURST_PERIOD_S,
            BURST_DUTY,
            BURST_PHASE_S,
        ),
    }
}

/// `count` faults evenly spaced after warm-up; kinds and targets rotate.
pub fn default_fault_schedule(services: &[String], warmup_s: u64, count: usize) -> Vec<FaultEvent> {
    (0..count)
        .map(|k| {
            let kind = FaultKind::ALL[k % FaultKind::ALL.len()];
            let magnitude = match kind {
                FaultKind::CpuSaturation => SATURATION_MULTIPLIER,
                FaultKind::PodEviction => EVICTION_COUNT,
                FaultKind::ConfigDrift => DRIFT_REPLICAS,
            };
            FaultEvent {
                kind,
                target_service: services[k % services.len()].clone(),
                at_s: warmup_s + DEFAULT_FAULT_OFFSET_S + DEFAULT_FAULT_SPACING_S * k as u64,
                magnitude,
                duration_s: None,
            }
        })
        .collect()
}

fn synthetic_cluster(pattern: WorkloadPattern) -> ClusterConfig {
    let services: Vec<ServiceConfig> = TOPOLOGY
        .iter()
        .map(|s| ServiceConfig {
            spec: ServiceSpec {
                name: s.name.to_string(),
                desired_replicas: s.desired,
                capacity_rps_per_replica: s.capacity,
                vcpu_per_replica: s.vcpu,
                mem_mb_per_replica: s.mem_mb,
                base_latency_ms: s.base_latency_ms,
                min_replicas: 1,
                max_replicas: s.max,
            },
            workload: synthetic_workload(pattern, s),
        })
        .collect();
    let names: Vec<String> = services.iter().map(|s| s.spec.name.clone()).collect();
    ClusterConfig {
        faults: default_fault_schedule(&names, DEFAULT_WARMUP_S, DEFAULT_FAULTS),
        services,
        params: SimParams::default(),
    }
}

/// Served-RPS series of one service turned into back-to-back scrape-length
/// segments.
pub fn trace_from_store(store: &TelemetryStore, service: &str) -> Vec<ScriptSegment> {
    let mut out = Vec::new();
    for sample in store.samples() {
        if sample.metric == MetricName::Rps && sample.service() == Some(service) {
            out.push(ScriptSegment {
                start_s: sample.ts_s,
                end_s: sample.ts_s + SCRAPE_INTERVAL_S,
                rps: sample.value,
            });
        }
    }
    out
}

/// Replace every service's workload with a replay of a fault-free
/// recording of the same cluster.
pub fn record_trace(template: &TrialConfig) -> Result<ClusterConfig, ExperimentError> {
    let mut recording = template.with_arm(Mode::Baseline, RECORDING_SEED);
    recording.cluster.faults.clear();
    let mut engine = Engine::new(recording.engine_config())?;
    engine.run_to_end()?;
    let mut buf = Vec::new();
    engine
        .store()
        .write_jsonl(&mut buf)
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let replayed = TelemetryStore::read_jsonl(buf.as_slice()).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let mut cluster = template.cluster.clone();
    for svc in &mut cluster.services {
        let script = trace_from_store(&replayed, &svc.spec.name);
        svc.workload = WorkloadProfile::spike_script(svc.workload.base_rps, script);
    }
    Ok(cluster)
}

/// Fully defaulted config for a scenario (mode Baseline, seed 0).
pub fn scenario_config(spec: &ScenarioSpec) -> Result<TrialConfig, ExperimentError> {
    let mut cfg = TrialConfig {
        scenario: spec.id.clone(),
        mode: Mode::Baseline,
        seed: 0,
        duration_s: DEFAULT_DURATION_S,
        warmup_s: DEFAULT_WARMUP_S,
        cluster: synthetic_cluster(spec.workload),
        slo: SloSpec::preset(spec.slo),
        policies: PolicySet::default_set(),
        gate: GateConfig::batch(),
        detector: DetectorParams::default(),
    };
    if spec.trace == TraceType::Recorded {
        cfg.cluster = record_trace(&cfg)?;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub proposed: usize,
    pub executed: usize,
    pub denied: usize,
    pub expired: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    pub incidents: Vec<IncidentRecord>,
    pub mttr_values_s: Vec<f64>,
    pub mean_mttr_s: Option<f64>,
    pub unresolved_incidents: usize,
    pub undetected_incidents: usize,
    /// RPS per vCPU over this arm's SLO-compliant measured scrapes.
    pub re_cpu: Option<f64>,
    /// RPS per GiB of memory over the same scrapes.
    pub re_mem: Option<f64>,
    pub violations_per_hr: f64,
    pub violation_episodes: Vec<ViolationRecord>,
    pub autonomy_pct: Option<f64>,
    pub slo_compliance_fraction: f64,
    pub measured_scrapes: usize,
    pub actions: ActionCounts,
    pub models: Vec<ModelSummary>,
}

/// A trial's result plus the raw material the comparison needs.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub result: TrialResult,
    pub output: EngineOutput,
    pub warmup_s: u64,
}

impl TrialRun {
    pub fn measured_scrapes(&self) -> impl Iterator<Item = &ScrapeRecord> {
        let warmup = self.warmup_s;
        self.output.scrapes.iter().filter(move |s| s.ts_s >= warmup)
    }
}

fn totals(scrape: &ScrapeRecord) -> (f64, f64, f64) {
    scrape.services.iter().fold((0.0, 0.0, 0.0), |(r, c, m), s| {
        (
            r + s.rps.unwrap_or(0.0),
            c + s.cpu_vcpu.unwrap_or(0.0),
            m + s.mem_mb.unwrap_or(0.0),
        )
    })
}

/// Cluster-level RPS per vCPU and per GiB over the given scrapes.
fn efficiency<'a>(scrapes: impl IntoIterator<Item = &'a ScrapeRecord>) -> (Option<f64>, Option<f64>, usize) {
    let mut rps = Vec::new();
    let mut cpu = Vec::new();
    let mut mem = Vec::new();
    for s in scrapes {
        let (r, c, m) = totals(s);
        rps.push(r);
        cpu.push(c);
        mem.push(m / MIB_PER_GIB);
    }
    let n = rps.len();
    if n == 0 {
        return (None, None, 0);
    }
    let re_cpu = crate::stats::resource_efficiency(&rps, &cpu).ok().flatten();
    let re_mem = crate::stats::resource_efficiency(&rps, &mem).ok().flatten();
    (re_cpu, re_mem, n)
}

/// Metrics of everything the engine has seen so far; the measurement window
/// runs from warm-up to the current clock.
pub fn trial_result(config: &TrialConfig, engine: &Engine) -> TrialResult {
    let incidents = engine.incidents();
    let mttr = summarize_mttr(incidents);
    let undetected = incidents.iter().filter(|i| i.t_detected_s.is_none()).count();
    let measured: Vec<&ScrapeRecord> = engine.scrapes().iter().filter(|s| s.ts_s >= config.warmup_s).collect();
    let (re_cpu, re_mem, _) = efficiency(measured.iter().copied().filter(|s| s.all_compliant()));
    let pairs: usize = measured.iter().map(|s| s.services.len()).sum();
    let compliant: usize = measured
        .iter()
        .map(|s| s.services.iter().filter(|x| x.verdict.is_compliant()).count())
        .sum();
    let control = engine.control();
    let violations = count_violations(
        engine.compliance(),
        control.audit(),
        &config.policies,
        config.warmup_s,
        engine.clock_s().min(config.duration_s),
    );
    let mut actions = ActionCounts::default();
    for a in control.actions() {
        actions.proposed += 1;
        match a.status {
            ActionStatus::Executed => actions.executed += 1,
            ActionStatus::Denied => actions.denied += 1,
            ActionStatus::Expired => actions.expired += 1,
            _ => {}
        }
    }
    TrialResult {
        scenario: config.scenario.clone(),
        mode: config.mode,
        seed: config.seed,
        config_digest: config.digest(),
        incidents: incidents.to_vec(),
        mttr_values_s: mttr.values_s,
        mean_mttr_s: mttr.mean_s,
        unresolved_incidents: mttr.unresolved,
        undetected_incidents: undetected,
        re_cpu,
        re_mem,
        violations_per_hr: violations.per_hour,
        violation_episodes: violations.episodes,
        autonomy_pct: control.autonomy_pct(),
        slo_compliance_fraction: if pairs == 0 {
            0.0
        } else {
            compliant as f64 / pairs as f64
        },
        measured_scrapes: measured.len(),
        actions,
        models: engine.model_summaries(),
    }
}

pub fn run_trial(config: &TrialConfig) -> Result<TrialRun, ExperimentError> {
    config.validate()?;
    let mut engine = Engine::new(config.engine_config())?;
    engine.run_to_end()?;
    let result = trial_result(config, &engine);
    Ok(TrialRun {
        result,
        output: engine.finish(),
        warmup_s: config.warmup_s,
    })
}

/// Resource efficiency of both arms over the scrapes at which every service
/// was SLO-compliant in both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedEfficiency {
    pub matched_scrapes: usize,
    pub baseline_re_cpu: Option<f64>,
    pub cpe_re_cpu: Option<f64>,
    pub baseline_re_mem: Option<f64>,
    pub cpe_re_mem: Option<f64>,
}

fn matched_timestamps(a: &TrialRun, b: &TrialRun) -> BTreeSet<u64> {
    let ok = |r: &TrialRun| -> BTreeSet<u64> {
        r.measured_scrapes()
            .filter(|s| s.all_compliant())
            .map(|s| s.ts_s)
            .collect()
    };
    ok(a).intersection(&ok(b)).copied().collect()
}

fn matched_efficiency<'a>(pairs: impl IntoIterator<Item = (&'a TrialRun, &'a TrialRun)>) -> MatchedEfficiency {
    let mut a_scrapes: Vec<&ScrapeRecord> = Vec::new();
    let mut b_scrapes: Vec<&ScrapeRecord> = Vec::new();
    for (a, b) in pairs {
        let ts = matched_timestamps(a, b);
        a_scrapes.extend(a.measured_scrapes().filter(|s| ts.contains(&s.ts_s)));
        b_scrapes.extend(b.measured_scrapes().filter(|s| ts.contains(&s.ts_s)));
    }
    let (baseline_re_cpu, baseline_re_mem, n) = efficiency(a_scrapes);
    let (cpe_re_cpu, cpe_re_mem, _) = efficiency(b_scrapes);
    MatchedEfficiency {
        matched_scrapes: n,
        baseline_re_cpu,
        cpe_re_cpu,
        baseline_re_mem,
        cpe_re_mem,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mode: Mode,
    pub incidents: usize,
    pub detected: usize,
    pub resolved: usize,
    pub unresolved: usize,
    pub mean_mttr_s: f64,
    pub mttr_ci: ConfidenceInterval,
    /// Matched-window RPS per vCPU, pooled over all pairs.
    pub re_cpu: Option<f64>,
    pub re_mem: Option<f64>,
    pub re_ci: Option<ConfidenceInterval>,
    pub violations_per_hr: f64,
    pub autonomy_pct: Option<f64>,
    pub slo_compliance_fraction: f64,
    pub actions: ActionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario: ScenarioSpec,
    pub trials: usize,
    pub base_seed: u64,
    pub config_digest: String,
    pub baseline: ArmSummary,
    pub cpe: ArmSummary,
    pub delta_mttr_pct: f64,
    pub delta_re_pct: Option<f64>,
    pub delta_re_mem_pct: Option<f64>,
    /// Absent when the baseline arm recorded no violations.
    pub delta_violations_pct: Option<f64>,
    /// Baseline MTTR sample against CPE MTTR sample.
    pub mwu: MwuResult,
    pub cliffs_delta: f64,
    /// Per-pair matched RPS/vCPU, baseline against CPE.
    pub mwu_re: Option<MwuResult>,
    pub cliffs_delta_re: Option<f64>,
    pub paired_incidents: usize,
    pub matched_scrapes: usize,
    pub per_pair: Vec<PairSummary>,
    pub baseline_trials: Vec<TrialResult>,
    pub cpe_trials: Vec<TrialResult>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub seed: u64,
    pub baseline_mean_mttr_s: Option<f64>,
    pub cpe_mean_mttr_s: Option<f64>,
    pub paired_incidents: usize,
    pub efficiency: MatchedEfficiency,
}

/// Schedule slots resolved in both arms of one pair.
fn paired_slots(a: &TrialResult, b: &TrialResult) -> usize {
    let resolved = |r: &TrialResult| -> BTreeSet<usize> {
        r.incidents
            .iter()
            .filter(|i| i.t_recovered_s.is_some())
            .filter_map(|i| i.schedule_index)
            .collect()
    };
    resolved(a).intersection(&resolved(b)).count()
}

/// Run every config, in parallel, returning results in input order.
pub fn run_trials(configs: &[TrialConfig]) -> Result<Vec<TrialRun>, ExperimentError> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len().max(1));
    let chunks: Vec<Vec<(usize, &TrialConfig)>> = (0..workers)
        .map(|w| configs.iter().enumerate().skip(w).step_by(workers).collect())
        .collect();
    let mut slots: Vec<Option<Result<TrialRun, ExperimentError>>> = (0..configs.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, cfg)| (i, run_trial(cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            match h.join() {
                Ok(done) => {
                    for (i, r) in done {
                        slots[i] = Some(r);
                    }
                }
                Err(_) => {
                    // Missing slots surface as Worker errors below.
                }
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.unwrap_or(Err(ExperimentError::Worker)))
        .collect()
}

fn arm_summary(
    mode: Mode,
    runs: &[&TrialRun],
    re: (Option<f64>, Option<f64>),
    per_pair_re: &[f64],
    ci_seed: u64,
) -> Result<ArmSummary, ExperimentError> {
    let incidents: Vec<&IncidentRecord> = runs.iter().flat_map(|r| r.result.incidents.iter()).collect();
    let mttr = summarize_mttr(incidents.iter().copied());
    let Some(mean_mttr_s) = mttr.mean_s else {
        return Err(ExperimentError::NoResolvedIncidents {
            arm: mode.as_str().to_string(),
        });
    };
    let mttr_ci = bootstrap_ci(&mttr.values_s, DEFAULT_BOOTSTRAP_RESAMPLES, 0.95, ci_seed)?;
    let re_ci = if per_pair_re.is_empty() {
        None
    } else {
        Some(bootstrap_ci(per_pair_re, DEFAULT_BOOTSTRAP_RESAMPLES, 0.95, ci_seed ^ 1)?)
    };
    let executed: usize = runs.iter().map(|r| r.result.actions.executed).sum();
    let autonomous: f64 = runs
        .iter()
        .filter_map(|r| r.result.autonomy_pct.map(|p| p / 100.0 * r.result.actions.executed as f64))
        .sum();
    let mut actions = ActionCounts::default();
    for r in runs {
        actions.proposed += r.result.actions.proposed;
        actions.executed += r.result.actions.executed;
        actions.denied += r.result.actions.denied;
        actions.expired += r.result.actions.expired;
    }
    let k = runs.len() as f64;
    Ok(ArmSummary {
        mode,
        incidents: incidents.len(),
        detected: incidents.iter().filter(|i| i.t_detected_s.is_some()).count(),
        resolved: mttr.values_s.len(),
        unresolved: mttr.unresolved,
        mean_mttr_s,
        mttr_ci,
        re_cpu: re.0,
        re_mem: re.1,
        re_ci,
        violations_per_hr: runs.iter().map(|r| r.result.violations_per_hr).sum::<f64>() / k,
        autonomy_pct: (executed > 0).then(|| (autonomous / executed as f64 * 100.0 * 1e9).round() / 1e9),
        slo_compliance_fraction: runs.iter().map(|r| r.result.slo_compliance_fraction).sum::<f64>() / k,
        actions,
    })
}

/// K seeded pairs; pair `k` runs both arms with seed `base_seed + k`.
pub fn run_comparison(
    scenario: &ScenarioSpec,
    template: &TrialConfig,
    trials: usize,
    base_seed: u64,
) -> Result<ComparisonReport, ExperimentError> {
    run_comparison_arms(scenario, template, trials, base_seed, (Mode::Baseline, Mode::Cpe))
}

/// As [`run_comparison`] with explicit arm modes, e.g. Baseline against
/// Baseline for a null check.
pub fn run_comparison_arms(
    scenario: &ScenarioSpec,
    template: &TrialConfig,
    trials: usize,
    base_seed: u64,
    arms: (Mode, Mode),
) -> Result<ComparisonReport, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::Invalid("trials must be at least 1".into()));
    }
    template.validate()?;
    let seeds: Vec<u64> = (0..trials as u64).map(|k| base_seed.wrapping_add(k)).collect();
    let configs: Vec<TrialConfig> = seeds
        .iter()
        .flat_map(|&s| [template.with_arm(arms.0, s), template.with_arm(arms.1, s)])
        .collect();
    let runs = run_trials(&configs)?;
    let a_runs: Vec<&TrialRun> = runs.iter().step_by(2).collect();
    let b_runs: Vec<&TrialRun> = runs.iter().skip(1).step_by(2).collect();

    let pooled = matched_efficiency(a_runs.iter().copied().zip(b_runs.iter().copied()));
    let mut per_pair = Vec::with_capacity(trials);
    let mut re_a = Vec::new();
    let mut re_b = Vec::new();
    for ((a, b), &seed) in a_runs.iter().zip(&b_runs).zip(&seeds) {
        let eff = matched_efficiency([(*a, *b)]);
        if let (Some(x), Some(y)) = (eff.baseline_re_cpu, eff.cpe_re_cpu) {
            re_a.push(x);
            re_b.push(y);
        }
        per_pair.push(PairSummary {
            seed,
            baseline_mean_mttr_s: a.result.mean_mttr_s,
            cpe_mean_mttr_s: b.result.mean_mttr_s,
            paired_incidents: paired_slots(&a.result, &b.result),
            efficiency: eff,
        });
    }

    let ci_seed = crate::engine::derive_seed(base_seed, 0xC1);
    let baseline = arm_summary(
        arms.0,
        &a_runs,
        (pooled.baseline_re_cpu, pooled.baseline_re_mem),
        &re_a,
        ci_seed,
    )?;
    let cpe = arm_summary(arms.1, &b_runs, (pooled.cpe_re_cpu, pooled.cpe_re_mem), &re_b, ci_seed)?;

    let a_mttr: Vec<f64> = a_runs.iter().flat_map(|r| r.result.mttr_values_s.iter().copied()).collect();
    let b_mttr: Vec<f64> = b_runs.iter().flat_map(|r| r.result.mttr_values_s.iter().copied()).collect();
    let delta = |f: fn(f64, f64) -> Result<f64, StatsError>, a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => f(a, b).ok(),
        _ => None,
    };
    let (mwu_re, cliffs_delta_re) = if re_a.is_empty() {
        (None, None)
    } else {
        (Some(mann_whitney_u(&re_a, &re_b)?), Some(cliffs_delta(&re_a, &re_b)?))
    };
    let paired_incidents = per_pair.iter().map(|p| p.paired_incidents).sum();
    Ok(ComparisonReport {
        scenario: scenario.clone(),
        trials,
        base_seed,
        config_digest: template.with_arm(Mode::Baseline, 0).digest(),
        delta_mttr_pct: delta_mttr(baseline.mean_mttr_s, cpe.mean_mttr_s)?,
        delta_re_pct: delta(delta_re, baseline.re_cpu, cpe.re_cpu),
        delta_re_mem_pct: delta(delta_re, baseline.re_mem, cpe.re_mem),
        delta_violations_pct: delta(
            delta_violations,
            Some(baseline.violations_per_hr),
            Some(cpe.violations_per_hr),
        ),
        mwu: mann_whitney_u(&a_mttr, &b_mttr)?,
        cliffs_delta: cliffs_delta(&a_mttr, &b_mttr)?,
        mwu_re,
        cliffs_delta_re,
        paired_incidents,
        matched_scrapes: pooled.matched_scrapes,
        per_pair,
        baseline_trials: a_runs.iter().map(|r| r.result.clone()).collect(),
        cpe_trials: b_runs.iter().map(|r| r.result.clone()).collect(),
        notes: vec![
            "resource efficiency is delivered RPS per vCPU (higher is better) over matched SLO-compliant scrapes".into(),
            "all resolved incidents are retained; none are excluded as outliers".into(),
        ],
        baseline,
        cpe,
    })
}

/// One comparison per S1-S4 preset, keyed by scenario id.
pub fn scenario_suite(trials: usize, base_seed: u64) -> Result<BTreeMap<String, ComparisonReport>, ExperimentError> {
    let mut out = BTreeMap::new();
    for spec in ScenarioSpec::all() {
        let template = scenario_config(&spec)?;
        out.insert(spec.id.clone(), run_comparison(&spec, &template, trials, base_seed)?);
    }
    Ok(out)
}
