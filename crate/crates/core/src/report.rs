//! Canonical serialization and the human-readable comparison summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::experiment::{ComparisonReport, TrialResult};

/// Serialize with object keys sorted at every level, newline-terminated.
///
/// Panics only if `T`'s `Serialize` impl itself fails, which none of this
/// crate's types do.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("crate types serialize to JSON");
    let mut s = serde_json::to_string_pretty(&sort_keys(v)).expect("JSON values serialize");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// One row of the summary table. `gain_pct` is positive when CPE is better.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: &'static str,
    pub baseline: Option<f64>,
    pub cpe: Option<f64>,
    pub gain_pct: Option<f64>,
}

pub const ROW_MTTR: &str = "MTTR (s)";
pub const ROW_RE: &str = "RPS/vCPU";
pub const ROW_VIOLATIONS: &str = "Policy Violations (/hr)";

pub const LABEL_NOTE: &str = "RPS/vCPU is requests per second per vCPU; higher is better.";

pub fn summary_rows(report: &ComparisonReport) -> Vec<SummaryRow> {
    vec![
        SummaryRow {
            metric: ROW_MTTR,
            baseline: Some(report.baseline.mean_mttr_s),
            cpe: Some(report.cpe.mean_mttr_s),
            gain_pct: Some(report.delta_mttr_pct),
        },
        SummaryRow {
            metric: ROW_RE,
            baseline: report.baseline.re_cpu,
            cpe: report.cpe.re_cpu,
            gain_pct: report.delta_re_pct,
        },
        SummaryRow {
            metric: ROW_VIOLATIONS,
            baseline: Some(report.baseline.violations_per_hr),
            cpe: Some(report.cpe.violations_per_hr),
            gain_pct: report.delta_violations_pct,
        },
    ]
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.decimals$}"))
}

/// Markdown table of the three headline metrics plus test statistics.
pub fn render_summary(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {} ({:?} workload, {:?} SLO, {:?} trace), {} pairs from seed {}",
        report.scenario.id,
        report.scenario.workload,
        report.scenario.slo,
        report.scenario.trace,
        report.trials,
        report.base_seed
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| Metric | {} | {} | Gain (%) |", report.baseline.mode.as_str(), report.cpe.mode.as_str());
    let _ = writeln!(out, "|---|---:|---:|---:|");
    for row in summary_rows(report) {
        let decimals = if row.metric == ROW_RE { 2 } else { 1 };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            row.metric,
            cell(row.baseline, decimals),
            cell(row.cpe, decimals),
            cell(row.gain_pct, 1)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "MTTR: Mann-Whitney U = {:.1}, p = {:.4} ({}), Cliff's delta = {:.3}; 95% CI baseline [{:.1}, {:.1}], cpe [{:.1}, {:.1}]",
        report.mwu.u_a,
        report.mwu.p_value,
        report.mwu.method.as_str(),
        report.cliffs_delta,
        report.baseline.mttr_ci.lo,
        report.baseline.mttr_ci.hi,
        report.cpe.mttr_ci.lo,
        report.cpe.mttr_ci.hi
    );
    if let (Some(m), Some(d)) = (&report.mwu_re, report.cliffs_delta_re) {
        let _ = writeln!(
            out,
            "RPS/vCPU per pair: Mann-Whitney U = {:.1}, p = {:.4} ({}), Cliff's delta = {:.3}",
            m.u_a, m.p_value, m.method.as_str(), d
        );
    }
    let _ = writeln!(
        out,
        "Incidents: baseline {} ({} resolved), cpe {} ({} resolved), paired {}; matched compliant scrapes {}",
        report.baseline.incidents,
        report.baseline.resolved,
        report.cpe.incidents,
        report.cpe.resolved,
        report.paired_incidents,
        report.matched_scrapes
    );
    let _ = writeln!(
        out,
        "Autonomy: {} {}%, {} {}%",
        report.baseline.mode.as_str(),
        cell(report.baseline.autonomy_pct, 1),
        report.cpe.mode.as_str(),
        cell(report.cpe.autonomy_pct, 1)
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "Note: {LABEL_NOTE}");
    out
}

/// Single-arm table for one trial.
pub fn render_trial(result: &TrialResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Scenario {}, {} arm, seed {}",
        result.scenario,
        result.mode.as_str(),
        result.seed
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| Metric | {} |", result.mode.as_str());
    let _ = writeln!(out, "|---|---:|");
    let _ = writeln!(out, "| {ROW_MTTR} | {} |", cell(result.mean_mttr_s, 1));
    let _ = writeln!(out, "| {ROW_RE} | {} |", cell(result.re_cpu, 2));
    let _ = writeln!(out, "| {ROW_VIOLATIONS} | {:.1} |", result.violations_per_hr);
    let _ = writeln!(out);
    let detected = result.incidents.len() - result.undetected_incidents;
    let _ = writeln!(
        out,
        "Incidents: {} ({} detected, {} unresolved); SLO compliance {:.1}%; autonomy {}%",
        result.incidents.len(),
        detected,
        result.unresolved_incidents,
        result.slo_compliance_fraction * 100.0,
        cell(result.autonomy_pct, 1)
    );
    out
}
