//! Data plane: fixed-cadence scrapes, an append-only series store, SLO
//! verdicts and incident lifecycle tracking.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcluster::{ClusterState, FaultKind};
use crate::Mode;

pub const SCRAPE_INTERVAL_S: u64 = 30;
/// Consecutive compliant scrapes required before an incident counts as recovered.
pub const RECOVERY_SUSTAIN_SCRAPES: u32 = 2;

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("scrape at t={0}s is not aligned to the {SCRAPE_INTERVAL_S}s interval")]
    Misaligned(u64),
    #[error("sample for {metric} at t={ts}s does not advance past t={last}s")]
    OutOfOrder { metric: MetricName, ts: u64, last: u64 },
    #[error("window [{from}, {to}] is inverted")]
    InvertedWindow { from: u64, to: u64 },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Metric names; variants are declared in name order so the derived `Ord`
/// sorts like the strings do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    AvailableReplicas,
    CpuVcpu,
    DesiredReplicas,
    ErrorRate,
    Mem,
    P95LatencyMs,
    Rps,
}

impl MetricName {
    pub const ALL: [MetricName; 7] = [
        MetricName::AvailableReplicas,
        MetricName::CpuVcpu,
        MetricName::DesiredReplicas,
        MetricName::ErrorRate,
        MetricName::Mem,
        MetricName::P95LatencyMs,
        MetricName::Rps,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::AvailableReplicas => "available_replicas",
            MetricName::CpuVcpu => "cpu_vcpu",
            MetricName::DesiredReplicas => "desired_replicas",
            MetricName::ErrorRate => "error_rate",
            MetricName::Mem => "mem",
            MetricName::P95LatencyMs => "p95_latency_ms",
            MetricName::Rps => "rps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    #[serde(rename = "ts")]
    pub ts_s: u64,
    pub metric: MetricName,
    pub value: f64,
    pub labels: Labels,
}

impl TelemetrySample {
    pub fn service(&self) -> Option<&str> {
        self.labels.get("service").map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub metric: MetricName,
    pub labels: Labels,
}

impl SeriesKey {
    pub fn new(metric: MetricName, labels: &Labels) -> Self {
        Self {
            metric,
            labels: labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub key: SeriesKey,
    pub points: Vec<(u64, f64)>,
}

/// A scrape slot where a service did not report the full metric set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrapeGap {
    pub ts_s: u64,
    pub service: String,
    pub metric: MetricName,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryStore {
    series: BTreeMap<SeriesKey, MetricSeries>,
    gaps: Vec<ScrapeGap>,
}

impl TelemetryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, sample: &TelemetrySample) -> Result<(), TelemetryError> {
        let key = SeriesKey::new(sample.metric, &sample.labels);
        let series = self.series.entry(key.clone()).or_insert_with(|| MetricSeries {
            key,
            points: Vec::new(),
        });
        if let Some(&(last, _)) = series.points.last() {
            if sample.ts_s <= last {
                return Err(TelemetryError::OutOfOrder {
                    metric: sample.metric,
                    ts: sample.ts_s,
                    last,
                });
            }
        }
        series.points.push((sample.ts_s, sample.value));
        Ok(())
    }

    /// Scrape every service of `state`. `labels` carries the run-level labels
    /// (mode, trial); the service label is added per sample.
    pub fn scrape(&mut self, state: &ClusterState, labels: &Labels) -> Result<Vec<TelemetrySample>, TelemetryError> {
        let ts = state.clock_s;
        if ts % SCRAPE_INTERVAL_S != 0 {
            return Err(TelemetryError::Misaligned(ts));
        }
        let mut out = Vec::with_capacity(state.services.len() * MetricName::ALL.len());
        for snap in state.snapshot_metrics() {
            let mut l = labels.clone();
            l.insert("service".into(), snap.service.clone());
            for metric in MetricName::ALL {
                let value = match metric {
                    MetricName::AvailableReplicas => snap.available_replicas as f64,
                    MetricName::CpuVcpu => snap.cpu_vcpu,
                    MetricName::DesiredReplicas => snap.desired_replicas as f64,
                    MetricName::ErrorRate => snap.error_rate,
                    MetricName::Mem => snap.mem_mb,
                    MetricName::P95LatencyMs => snap.p95_latency_ms,
                    MetricName::Rps => snap.rps_served,
                };
                if !value.is_finite() {
                    self.gaps.push(ScrapeGap {
                        ts_s: ts,
                        service: snap.service.clone(),
                        metric,
                    });
                    continue;
                }
                let sample = TelemetrySample {
                    ts_s: ts,
                    metric,
                    value,
                    labels: l.clone(),
                };
                self.append(&sample)?;
                out.push(sample);
            }
        }
        Ok(out)
    }

    pub fn gaps(&self) -> &[ScrapeGap] {
        &self.gaps
    }

    pub fn series(&self) -> impl Iterator<Item = &MetricSeries> {
        self.series.values()
    }

    pub fn get(&self, key: &SeriesKey) -> Option<&MetricSeries> {
        self.series.get(key)
    }

    pub fn len(&self) -> usize {
        self.series.values().map(|s| s.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points of `key` with `from <= ts <= to`; unknown keys yield nothing.
    pub fn query_window(&self, key: &SeriesKey, from: u64, to: u64) -> Result<Vec<(u64, f64)>, TelemetryError> {
        if from > to {
            return Err(TelemetryError::InvertedWindow { from, to });
        }
        let Some(series) = self.series.get(key) else {
            return Ok(Vec::new());
        };
        let lo = series.points.partition_point(|&(t, _)| t < from);
        let hi = series.points.partition_point(|&(t, _)| t <= to);
        Ok(series.points[lo..hi].to_vec())
    }

    /// All samples ordered by timestamp, then metric name, then labels.
    pub fn samples(&self) -> Vec<TelemetrySample> {
        let mut out: Vec<TelemetrySample> = self
            .series
            .values()
            .flat_map(|s| {
                s.points.iter().map(|&(ts, value)| TelemetrySample {
                    ts_s: ts,
                    metric: s.key.metric,
                    value,
                    labels: s.key.labels.clone(),
                })
            })
            .collect();
        out.sort_by(|a, b| (a.ts_s, a.metric, &a.labels).cmp(&(b.ts_s, b.metric, &b.labels)));
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TelemetryError> {
        for sample in self.samples() {
            serde_json::to_writer(&mut w, &sample).map_err(io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TelemetryError> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(io::BufWriter::new(file))
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TelemetryError> {
        let mut store = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: TelemetrySample =
                serde_json::from_str(&line).map_err(|source| TelemetryError::Parse { line: i + 1, source })?;
            store.append(&sample)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloStrictness {
    Standard,
    Strict,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloSpec {
    pub latency_p95_ms_max: f64,
    pub error_rate_max: f64,
    pub strictness: SloStrictness,
}

impl SloSpec {
    pub fn preset(strictness: SloStrictness) -> Self {
        let (latency, err) = match strictness {
            SloStrictness::Standard => (200.0, 0.02),
            SloStrictness::Strict => (150.0, 0.01),
            SloStrictness::Relaxed => (300.0, 0.05),
        };
        Self {
            latency_p95_ms_max: latency,
            error_rate_max: err,
            strictness,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.latency_p95_ms_max > 0.0) {
            return Err("slo.latency_p95_ms_max must be positive".into());
        }
        if !(self.error_rate_max > 0.0 && self.error_rate_max < 1.0) {
            return Err("slo.error_rate_max must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn verdict(&self, p95: Option<f64>, error_rate: Option<f64>) -> SloVerdict {
        match (p95, error_rate) {
            (Some(p), Some(e)) if p <= self.latency_p95_ms_max && e <= self.error_rate_max => SloVerdict::Compliant,
            (Some(_), Some(_)) => SloVerdict::NonCompliant,
            _ => SloVerdict::Unknown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SloVerdict {
    Compliant,
    NonCompliant,
    Unknown,
}

impl SloVerdict {
    /// Counts toward recovery: unknown blocks it.
    pub fn is_compliant(self) -> bool {
        self == SloVerdict::Compliant
    }

    /// Counts as a breach for alerting and violation accounting: unknown does not.
    pub fn is_breach(self) -> bool {
        self == SloVerdict::NonCompliant
    }
}

/// Per-service verdict for the samples of one scrape.
pub fn evaluate_slo(samples: &[TelemetrySample], slo: &SloSpec) -> BTreeMap<String, SloVerdict> {
    let mut seen: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for s in samples {
        let Some(service) = s.service() else { continue };
        let entry = seen.entry(service.to_string()).or_default();
        match s.metric {
            MetricName::P95LatencyMs => entry.0 = Some(s.value),
            MetricName::ErrorRate => entry.1 = Some(s.value),
            _ => {}
        }
    }
    seen.into_iter()
        .map(|(svc, (p95, err))| (svc, slo.verdict(p95, err)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub id: u64,
    pub service: String,
    pub fault_kind: FaultKind,
    pub fault_id: u64,
    /// Position of the originating fault in the scripted schedule; pairs
    /// incidents across Baseline and CPE arms.
    pub schedule_index: Option<usize>,
    pub t_injected_s: u64,
    pub t_detected_s: Option<u64>,
    pub t_recovered_s: Option<u64>,
    pub detector: Option<String>,
    pub mode: Mode,
}

impl IncidentRecord {
    pub fn is_open(&self) -> bool {
        self.t_recovered_s.is_none()
    }
}

/// What a single scrape says about an incident's service.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryObservation {
    pub ts_s: u64,
    pub verdict: SloVerdict,
    pub available_replicas: u32,
    pub desired_replicas: u32,
    pub drift_active: bool,
    /// Replicas running below full capacity (CPU-starved).
    pub degraded_replicas: u32,
}

impl RecoveryObservation {
    pub fn healthy(&self) -> bool {
        self.verdict.is_compliant()
            && self.available_replicas == self.desired_replicas
            && !self.drift_active
            && self.degraded_replicas == 0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IncidentError {
    #[error("unknown incident {0}")]
    Unknown(u64),
    #[error("incident {0} has not been detected")]
    NotDetected(u64),
    #[error("incident {0} is already recovered")]
    Closed(u64),
    #[error("detection at t={t}s precedes injection of incident {id}")]
    DetectedBeforeInjection { id: u64, t: u64 },
}

#[derive(Debug, Clone, Default)]
struct Streak {
    start: Option<u64>,
    count: u32,
}

#[derive(Debug, Clone, Default)]
pub struct IncidentTracker {
    incidents: Vec<IncidentRecord>,
    streaks: BTreeMap<u64, Streak>,
    next_id: u64,
}

impl IncidentTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_incident(
        &mut self,
        service: &str,
        fault_kind: FaultKind,
        t_injected_s: u64,
        mode: Mode,
        fault_id: u64,
        schedule_index: Option<usize>,
    ) -> u64 {
        self.next_id += 1;
        let id = self.next_id;
        self.incidents.push(IncidentRecord {
            id,
            service: service.to_string(),
            fault_kind,
            fault_id,
            schedule_index,
            t_injected_s,
            t_detected_s: None,
            t_recovered_s: None,
            detector: None,
            mode,
        });
        id
    }

    fn find_mut(&mut self, id: u64) -> Result<&mut IncidentRecord, IncidentError> {
        self.incidents
            .iter_mut()
            .find(|i| i.id == id)
            .ok_or(IncidentError::Unknown(id))
    }

    pub fn get(&self, id: u64) -> Option<&IncidentRecord> {
        self.incidents.iter().find(|i| i.id == id)
    }

    /// Returns `Ok(false)` when the incident was already detected; the first
    /// detection wins.
    pub fn mark_detected(&mut self, id: u64, t_s: u64, detector: &str) -> Result<bool, IncidentError> {
        let inc = self.find_mut(id)?;
        if inc.t_recovered_s.is_some() {
            return Err(IncidentError::Closed(id));
        }
        if inc.t_detected_s.is_some() {
            return Ok(false);
        }
        if t_s < inc.t_injected_s {
            return Err(IncidentError::DetectedBeforeInjection { id, t: t_s });
        }
        inc.t_detected_s = Some(t_s);
        inc.detector = Some(detector.to_string());
        Ok(true)
    }

    /// Feed one scrape observation. Returns `Ok(true)` on the scrape that
    /// confirms recovery; `t_recovered_s` is then the first scrape of the
    /// sustained window.
    pub fn check_recovery(&mut self, id: u64, obs: &RecoveryObservation) -> Result<bool, IncidentError> {
        let inc = self.find_mut(id)?;
        if inc.t_recovered_s.is_some() {
            return Err(IncidentError::Closed(id));
        }
        let Some(detected) = inc.t_detected_s else {
            return Err(IncidentError::NotDetected(id));
        };
        if obs.ts_s < detected {
            return Ok(false);
        }
        let streak = self.streaks.entry(id).or_default();
        if !obs.healthy() {
            *streak = Streak::default();
            return Ok(false);
        }
        if streak.start.is_none() {
            streak.start = Some(obs.ts_s);
        }
        streak.count += 1;
        if streak.count >= RECOVERY_SUSTAIN_SCRAPES {
            let start = streak.start.expect("streak start set above");
            self.streaks.remove(&id);
            let inc = self.find_mut(id)?;
            inc.t_recovered_s = Some(start);
            return Ok(true);
        }
        Ok(false)
    }

    /// Oldest open, undetected incident on `service`.
    pub fn first_undetected(&self, service: &str) -> Option<u64> {
        self.incidents
            .iter()
            .find(|i| i.service == service && i.is_open() && i.t_detected_s.is_none())
            .map(|i| i.id)
    }

    /// Open incidents on `service` that have been detected.
    pub fn detected_open(&self, service: &str) -> Vec<u64> {
        self.incidents
            .iter()
            .filter(|i| i.service == service && i.is_open() && i.t_detected_s.is_some())
            .map(|i| i.id)
            .collect()
    }

    pub fn has_open(&self, service: &str) -> bool {
        self.incidents.iter().any(|i| i.service == service && i.is_open())
    }

    pub fn incidents(&self) -> &[IncidentRecord] {
        &self.incidents
    }

    pub fn into_incidents(self) -> Vec<IncidentRecord> {
        self.incidents
    }
}
