//! TOML run configuration. Every key is optional except `scenario`; anything
//! left out takes the scenario preset's value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cpe_core::control::{Decision, GateConfig, PolicyRule, PolicySet};
use cpe_core::experiment::{
    default_fault_schedule, record_trace, scenario_config, ExperimentError, ScenarioSpec, TraceType, TrialConfig,
    DEFAULT_TRIALS,
};
use cpe_core::intelligence::DetectorParams;
use cpe_core::simcluster::{FaultEvent, FaultKind, SimError};
use cpe_core::telemetry::{SloSpec, SloStrictness};
use cpe_core::Mode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{line}:{column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid value at `{path}`: {message}")]
    Semantic { path: String, message: String },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

fn semantic(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: String,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub duration_s: Option<u64>,
    pub warmup_s: Option<u64>,
    pub slo: Option<SloSection>,
    pub gate: Option<GateSection>,
    pub detector: Option<DetectorSection>,
    pub sim: Option<SimSection>,
    pub faults: Option<FaultSection>,
    /// Replaces the default policy set when present.
    pub policies: Option<Vec<PolicyRule>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloSection {
    pub strictness: Option<SloStrictness>,
    pub latency_p95_ms_max: Option<f64>,
    pub error_rate_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub approval_timeout_s: Option<u64>,
    pub timeout_decision: Option<Decision>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub threshold: Option<f64>,
    pub n_trees: Option<usize>,
    pub subsample: Option<usize>,
    pub fallback_breaches: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub noise_sigma: Option<f64>,
    pub restart_delay_s: Option<u64>,
    pub latency_cap_ms: Option<f64>,
    pub spill_factor: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    /// Size of the evenly spaced default schedule.
    pub count: Option<usize>,
    /// Explicit schedule; excludes `count`.
    pub events: Option<Vec<FaultEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    pub kind: FaultKind,
    pub target_service: String,
    pub at_s: u64,
    pub magnitude: f64,
    pub duration_s: Option<u64>,
}

/// A parsed and fully defaulted configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadedConfig {
    pub scenario: ScenarioSpec,
    pub trials: usize,
    pub trial: TrialConfig,
    /// SHA-256 of the exact file bytes, when loaded from a file.
    pub source_sha256: Option<String>,
    /// Whether the file set `mode`; otherwise commands pick their own.
    pub mode_explicit: bool,
    /// Whether the file set `[gate]`; interactive serving keeps it if so.
    pub gate_explicit: bool,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

pub fn parse(text: &str) -> Result<ConfigFile, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })
}

/// Parse a file, returning it with the SHA-256 of its exact bytes.
pub fn read(path: &Path) -> Result<(ConfigFile, String), ConfigError> {
    let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = std::str::from_utf8(&bytes).map_err(|e| ConfigError::Parse {
        line: 1,
        column: 1,
        message: format!("not UTF-8: {e}"),
    })?;
    Ok((parse(text)?, cpe_core::report::sha256_hex(&bytes)))
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let (file, sha) = read(path)?;
    let mut loaded = resolve(&file)?;
    loaded.source_sha256 = Some(sha);
    Ok(loaded)
}

/// Defaults for a bare scenario id.
pub fn for_scenario(id: &str) -> Result<LoadedConfig, ConfigError> {
    resolve(&ConfigFile {
        scenario: id.to_string(),
        ..ConfigFile::default()
    })
}

pub fn resolve(file: &ConfigFile) -> Result<LoadedConfig, ConfigError> {
    let scenario = ScenarioSpec::preset(&file.scenario)
        .ok_or_else(|| semantic("scenario", format!("unknown scenario `{}`; expected S1..S4", file.scenario)))?;
    let trials = file.trials.unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        return Err(semantic("trials", "must be at least 1"));
    }

    // Build the synthetic preset first; a recorded trace is captured only
    // after every override that shapes the cluster is in place.
    let mut preset = scenario.clone();
    preset.trace = TraceType::Synthetic;
    let mut cfg = scenario_config(&preset)?;
    cfg.scenario = scenario.id.clone();
    if let Some(m) = file.mode {
        cfg.mode = m;
    }
    if let Some(s) = file.seed {
        cfg.seed = s;
    }
    if let Some(d) = file.duration_s {
        cfg.duration_s = d;
    }
    if let Some(w) = file.warmup_s {
        cfg.warmup_s = w;
    }
    if cfg.duration_s <= cfg.warmup_s {
        return Err(semantic(
            "duration_s",
            format!("must exceed warmup_s ({} <= {})", cfg.duration_s, cfg.warmup_s),
        ));
    }

    if let Some(slo) = &file.slo {
        let base = slo.strictness.map_or(cfg.slo.clone(), SloSpec::preset);
        cfg.slo = SloSpec {
            latency_p95_ms_max: slo.latency_p95_ms_max.unwrap_or(base.latency_p95_ms_max),
            error_rate_max: slo.error_rate_max.unwrap_or(base.error_rate_max),
            strictness: base.strictness,
        };
        if !(cfg.slo.latency_p95_ms_max > 0.0) {
            return Err(semantic("slo.latency_p95_ms_max", "must be positive"));
        }
        if !(cfg.slo.error_rate_max > 0.0 && cfg.slo.error_rate_max < 1.0) {
            return Err(semantic("slo.error_rate_max", "must lie in (0, 1)"));
        }
    }

    if let Some(g) = &file.gate {
        cfg.gate = GateConfig {
            approval_timeout_s: g.approval_timeout_s.unwrap_or(cfg.gate.approval_timeout_s),
            timeout_decision: g.timeout_decision.unwrap_or(cfg.gate.timeout_decision),
        };
        if cfg.gate.approval_timeout_s == 0 {
            return Err(semantic("gate.approval_timeout_s", "must be positive"));
        }
    }

    if let Some(d) = &file.detector {
        let base = DetectorParams::default();
        cfg.detector = DetectorParams {
            threshold: d.threshold.unwrap_or(base.threshold),
            n_trees: d.n_trees.unwrap_or(base.n_trees),
            subsample: d.subsample.unwrap_or(base.subsample),
            fallback_breaches: d.fallback_breaches.unwrap_or(base.fallback_breaches),
        };
        if !(cfg.detector.threshold > 0.0 && cfg.detector.threshold < 1.0) {
            return Err(semantic("detector.threshold", "must lie in (0, 1)"));
        }
        if cfg.detector.n_trees == 0 {
            return Err(semantic("detector.n_trees", "must be at least 1"));
        }
        if cfg.detector.subsample < 2 {
            return Err(semantic("detector.subsample", "must be at least 2"));
        }
        if cfg.detector.fallback_breaches == 0 {
            return Err(semantic("detector.fallback_breaches", "must be at least 1"));
        }
    }

    if let Some(s) = &file.sim {
        let p = &mut cfg.cluster.params;
        p.noise_sigma = s.noise_sigma.unwrap_or(p.noise_sigma);
        p.restart_delay_s = s.restart_delay_s.unwrap_or(p.restart_delay_s);
        p.latency_cap_ms = s.latency_cap_ms.unwrap_or(p.latency_cap_ms);
        p.spill_factor = s.spill_factor.unwrap_or(p.spill_factor);
    }

    let names: Vec<String> = cfg.cluster.services.iter().map(|s| s.spec.name.clone()).collect();
    match &file.faults {
        Some(FaultSection {
            count: Some(_),
            events: Some(_),
        }) => return Err(semantic("faults", "set either `count` or `events`, not both")),
        Some(FaultSection { count: Some(n), .. }) => {
            cfg.cluster.faults = default_fault_schedule(&names, cfg.warmup_s, *n);
        }
        Some(FaultSection {
            events: Some(events), ..
        }) => {
            cfg.cluster.faults = events
                .iter()
                .map(|e| FaultEvent {
                    kind: e.kind,
                    target_service: e.target_service.clone(),
                    at_s: e.at_s,
                    magnitude: e.magnitude,
                    duration_s: e.duration_s,
                })
                .collect();
        }
        _ if file.warmup_s.is_some() => {
            cfg.cluster.faults = default_fault_schedule(&names, cfg.warmup_s, cfg.cluster.faults.len());
        }
        _ => {}
    }
    if file.faults.as_ref().is_none_or(|f| f.events.is_none()) {
        // A generated schedule only keeps the faults that fit the run.
        cfg.cluster.faults.retain(|f| f.at_s < cfg.duration_s);
    }

    if let Some(rules) = &file.policies {
        cfg.policies = PolicySet::new(rules.clone()).map_err(|e| semantic("policies", e.to_string()))?;
    }

    cfg.cluster.validate().map_err(|e| match e {
        SimError::InvalidConfig { field, reason } => semantic(field, reason),
        other => semantic("services", other.to_string()),
    })?;
    for (i, f) in cfg.cluster.faults.iter().enumerate() {
        if f.at_s >= cfg.duration_s {
            return Err(semantic(
                format!("faults.events[{i}].at_s"),
                format!("{} is past the end of the run ({} s)", f.at_s, cfg.duration_s),
            ));
        }
    }
    if scenario.trace == TraceType::Recorded {
        cfg.cluster = record_trace(&cfg)?;
    }
    cfg.validate()?;
    Ok(LoadedConfig {
        scenario,
        trials,
        trial: cfg,
        source_sha256: None,
        mode_explicit: file.mode.is_some(),
        gate_explicit: file.gate.is_some(),
    })
}
