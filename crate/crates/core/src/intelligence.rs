//! Intelligence plane: isolation-forest anomaly scoring over scrape-level
//! feature vectors, the Baseline's static alert rule, and the rule table
//! that turns an anomaly into remediation proposals.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionKind, Risk};
use crate::simcluster::ServiceView;
use crate::telemetry::SloVerdict;

/// Euler-Mascheroni constant as used by the isolation-forest normaliser.
const EULER_GAMMA: f64 = 0.577_215_664_9;

pub const DEFAULT_THRESHOLD: f64 = 0.60;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;
/// Below this many training vectors no model is fitted.
pub const MIN_TRAINING: usize = 8;

const OVERLOAD_UTILIZATION: f64 = 0.8;
const UNDERUSE_UTILIZATION: f64 = 0.3;
const UNDERUSE_SCRAPES: u32 = 10;

/// Average path length of an unsuccessful search in a binary search tree
/// built from `n` points.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("need at least {MIN_TRAINING} training vectors, got {0}")]
    InsufficientData(usize),
    #[error("training vectors have inconsistent dimensionality")]
    RaggedData,
    #[error("invalid forest parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        dim: usize,
        split: f64,
        /// Range of `dim` over the node's training partition.
        range: (f64, f64),
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    nodes: Vec<Node>,
    height_limit: usize,
}

impl IsolationTree {
    fn grow(data: &[Vec<f64>], sample: &[usize], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            height_limit,
        };
        tree.build(data, sample.to_vec(), 0, rng);
        tree
    }

    fn build(&mut self, data: &[Vec<f64>], rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= self.height_limit || rows.len() <= 1 {
            return slot;
        }
        let dims = data[rows[0]].len();
        let ranges: Vec<(f64, f64)> = (0..dims)
            .map(|d| {
                rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    (lo.min(data[r][d]), hi.max(data[r][d]))
                })
            })
            .collect();
        // Constant dimensions cannot separate anything; draw among the rest.
        let splittable: Vec<usize> = (0..dims).filter(|&d| ranges[d].0 < ranges[d].1).collect();
        if splittable.is_empty() {
            return slot;
        }
        let dim = splittable[rng.random_range(0..splittable.len())];
        let (lo, hi) = ranges[dim];
        let split = lo + rng.random::<f64>() * (hi - lo);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| data[r][dim] < split);
        let left = self.build(data, left_rows, depth + 1, rng);
        let right = self.build(data, right_rows, depth + 1, rng);
        self.nodes[slot] = Node::Internal {
            dim,
            split,
            range: (lo, hi),
            left,
            right,
        };
        slot
    }

    /// Edge depth at termination plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[idx] {
                Node::Internal {
                    dim, split, left, right, ..
                } => {
                    idx = if x[dim] < split { left } else { right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + c_factor(size),
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    /// Deepest leaf, counted in edges from the root.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], idx: usize, d: usize) -> usize {
            match nodes[idx] {
                Node::Internal { left, right, .. } => walk(nodes, left, d + 1).max(walk(nodes, right, d + 1)),
                Node::Leaf { .. } => d,
            }
        }
        walk(&self.nodes, 0, 0)
    }

    pub fn max_leaf_size(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { size } => Some(*size),
                Node::Internal { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// True when the tree has not split at all.
    pub fn is_single_leaf(&self) -> bool {
        self.nodes.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub subsample: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: DEFAULT_TREES,
            subsample: DEFAULT_SUBSAMPLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    psi: usize,
    c_psi: f64,
}

impl IsolationForest {
    /// Grow `n_trees` trees, each on a seeded subsample of `min(subsample, n)`
    /// rows drawn without replacement.
    pub fn fit(data: &[Vec<f64>], params: &ForestParams, seed: u64) -> Result<Self, ForestError> {
        if params.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be at least 1"));
        }
        if params.subsample < 2 {
            return Err(ForestError::InvalidParams("subsample must be at least 2"));
        }
        if data.len() < MIN_TRAINING {
            return Err(ForestError::InsufficientData(data.len()));
        }
        let dims = data[0].len();
        if dims == 0 || data.iter().any(|row| row.len() != dims) {
            return Err(ForestError::RaggedData);
        }
        let psi = params.subsample.min(data.len());
        let height_limit = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..params.n_trees)
            .map(|_| {
                let sample = index::sample(&mut rng, data.len(), psi).into_vec();
                IsolationTree::grow(data, &sample, height_limit, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            psi,
            c_psi: c_factor(psi),
        })
    }

    pub fn expected_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^(-E[h(x)] / c(psi))`.
    pub fn score(&self, x: &[f64]) -> f64 {
        score_from_path_length(self.expected_path_length(x), self.c_psi)
    }

    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn psi(&self) -> usize {
        self.psi
    }

    pub fn c_psi(&self) -> f64 {
        self.c_psi
    }
}

pub fn score_from_path_length(mean_path: f64, c_psi: f64) -> f64 {
    2f64.powf(-mean_path / c_psi)
}

/// Per-dimension min-max scaling learned from training data; unseen values
/// are clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(data: &[Vec<f64>]) -> Self {
        let dims = data.first().map_or(0, Vec::len);
        let mut mins = vec![f64::INFINITY; dims];
        let mut maxs = vec![f64::NEG_INFINITY; dims];
        for row in data {
            for (d, &v) in row.iter().enumerate() {
                mins[d] = mins[d].min(v);
                maxs[d] = maxs[d].max(v);
            }
        }
        Self { mins, maxs }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, &v)| {
                let span = self.maxs[d] - self.mins[d];
                if span > 0.0 {
                    ((v - self.mins[d]) / span).clamp(0.0, 1.0)
                } else if v > self.maxs[d] {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub const FEATURE_DIMS: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURE_DIMS] = [
    "cpu_utilization",
    "p95_latency_ms",
    "error_rate",
    "rps",
    "availability_ratio",
    "delta_p95_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub ts_s: u64,
    pub service: String,
    pub values: [f64; FEATURE_DIMS],
}

/// Raw per-scrape inputs for one service; any field may be missing.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScrapeValues {
    pub cpu_vcpu: Option<f64>,
    pub p95_latency_ms: Option<f64>,
    pub error_rate: Option<f64>,
    pub rps: Option<f64>,
    pub desired_replicas: Option<f64>,
    pub available_replicas: Option<f64>,
}

/// Turns scrapes into feature vectors, imputing gaps with the previous value.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    service: String,
    vcpu_per_replica: f64,
    last: Option<[f64; FEATURE_DIMS]>,
}

impl FeatureExtractor {
    pub fn new(service: &str, vcpu_per_replica: f64) -> Self {
        Self {
            service: service.to_string(),
            vcpu_per_replica,
            last: None,
        }
    }

    pub fn extract(&mut self, ts_s: u64, v: &ScrapeValues) -> FeatureVector {
        let prev = self.last.unwrap_or([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let cpu_util = match (v.cpu_vcpu, v.available_replicas) {
            (Some(cpu), Some(avail)) if avail > 0.0 => Some(cpu / (avail * self.vcpu_per_replica)),
            (Some(_), Some(_)) => Some(1.0),
            _ => None,
        };
        let availability = match (v.available_replicas, v.desired_replicas) {
            (Some(a), Some(d)) if d > 0.0 => Some(a / d),
            (Some(_), Some(_)) => Some(1.0),
            _ => None,
        };
        let p95 = v.p95_latency_ms.unwrap_or(prev[1]);
        let delta_p95 = if self.last.is_some() { p95 - prev[1] } else { 0.0 };
        let values = [
            cpu_util.unwrap_or(prev[0]),
            p95,
            v.error_rate.unwrap_or(prev[2]),
            v.rps.unwrap_or(prev[3]),
            availability.unwrap_or(prev[4]),
            delta_p95,
        ];
        self.last = Some(values);
        FeatureVector {
            ts_s,
            service: self.service.clone(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub threshold: f64,
    pub n_trees: usize,
    pub subsample: usize,
    /// Consecutive SLO-breaching scrapes that trigger the fallback.
    pub fallback_breaches: u32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            n_trees: DEFAULT_TREES,
            subsample: DEFAULT_SUBSAMPLE,
            fallback_breaches: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Model,
    SloFallback,
    /// Sustained low utilisation; a right-sizing hint, not an incident.
    Underuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub ts_s: u64,
    pub service: String,
    /// Absent when no model could be fitted.
    pub score: Option<f64>,
    pub threshold: f64,
    pub trigger: Trigger,
    /// Scaled value minus training centroid, per feature.
    pub deviations: [f64; FEATURE_DIMS],
    pub dominant_feature: &'static str,
    /// Consecutive scrapes with CPU utilisation below the underuse mark.
    pub low_utilization_streak: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub service: String,
    pub fitted: bool,
    pub trees: usize,
    pub psi: usize,
    pub threshold: f64,
    pub training_from_s: Option<u64>,
    pub training_to_s: Option<u64>,
    pub training_size: usize,
}

#[derive(Debug, Clone)]
struct FittedModel {
    forest: IsolationForest,
    scaler: MinMaxScaler,
    centroid: Vec<f64>,
}

/// Scores one service's feature stream; falls back to the SLO-breach rule
/// when no model is available.
#[derive(Debug, Clone)]
pub struct AnomalyDetector {
    service: String,
    params: DetectorParams,
    model: Option<FittedModel>,
    training: (Option<u64>, Option<u64>, usize),
    breach_streak: u32,
    low_util_streak: u32,
}

impl AnomalyDetector {
    pub fn new(service: &str, params: DetectorParams) -> Self {
        Self {
            service: service.to_string(),
            params,
            model: None,
            training: (None, None, 0),
            breach_streak: 0,
            low_util_streak: 0,
        }
    }

    /// Fit on `training`; on failure the detector stays in fallback-only mode.
    pub fn fit(&mut self, training: &[FeatureVector], seed: u64) -> Result<(), ForestError> {
        self.training = (
            training.first().map(|f| f.ts_s),
            training.last().map(|f| f.ts_s),
            training.len(),
        );
        let rows: Vec<Vec<f64>> = training.iter().map(|f| f.values.to_vec()).collect();
        let scaler = MinMaxScaler::fit(&rows);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform(r)).collect();
        let params = ForestParams {
            n_trees: self.params.n_trees,
            subsample: self.params.subsample,
        };
        match IsolationForest::fit(&scaled, &params, seed) {
            Ok(forest) => {
                let n = scaled.len() as f64;
                let centroid = (0..FEATURE_DIMS)
                    .map(|d| scaled.iter().map(|r| r[d]).sum::<f64>() / n)
                    .collect();
                self.model = Some(FittedModel {
                    forest,
                    scaler,
                    centroid,
                });
                Ok(())
            }
            Err(e) => {
                self.model = None;
                Err(e)
            }
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.model.is_some()
    }

    pub fn score(&self, fv: &FeatureVector) -> Option<f64> {
        let m = self.model.as_ref()?;
        Some(m.forest.score(&m.scaler.transform(&fv.values)))
    }

    /// Call once per scrape. Emits a report when the model score reaches the
    /// threshold or the SLO has been breached on enough consecutive scrapes.
    pub fn detect(&mut self, fv: &FeatureVector, verdict: SloVerdict) -> Option<AnomalyReport> {
        if verdict.is_breach() {
            self.breach_streak += 1;
        } else {
            self.breach_streak = 0;
        }
        if fv.values[0] < UNDERUSE_UTILIZATION {
            self.low_util_streak += 1;
        } else {
            self.low_util_streak = 0;
        }
        let score = self.score(fv);
        let trigger = if score.is_some_and(|s| s >= self.params.threshold) {
            Trigger::Model
        } else if self.breach_streak >= self.params.fallback_breaches {
            Trigger::SloFallback
        } else if self.low_util_streak >= UNDERUSE_SCRAPES {
            Trigger::Underuse
        } else {
            return None;
        };
        let deviations = match &self.model {
            Some(m) => {
                let scaled = m.scaler.transform(&fv.values);
                std::array::from_fn(|d| scaled[d] - m.centroid[d])
            }
            None => [0.0; FEATURE_DIMS],
        };
        let dominant = (0..FEATURE_DIMS)
            .max_by(|&a, &b| deviations[a].abs().total_cmp(&deviations[b].abs()))
            .unwrap_or(0);
        Some(AnomalyReport {
            ts_s: fv.ts_s,
            service: self.service.clone(),
            score,
            threshold: self.params.threshold,
            trigger,
            deviations,
            dominant_feature: FEATURE_NAMES[dominant],
            low_utilization_streak: self.low_util_streak,
        })
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            service: self.service.clone(),
            fitted: self.model.is_some(),
            trees: self.model.as_ref().map_or(0, |m| m.forest.trees().len()),
            psi: self.model.as_ref().map_or(0, |m| m.forest.psi()),
            threshold: self.params.threshold,
            training_from_s: self.training.0,
            training_to_s: self.training.1,
            training_size: self.training.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub ts_s: u64,
    pub service: String,
    pub detector: String,
}

/// The Baseline's only detector: fire once after `required` consecutive
/// breaching scrapes, then stay latched until released or compliant again.
#[derive(Debug, Clone)]
pub struct BaselineAlertRule {
    service: String,
    required: u32,
    streak: u32,
    latched: bool,
}

impl BaselineAlertRule {
    pub fn new(service: &str, required: u32) -> Self {
        Self {
            service: service.to_string(),
            required: required.max(1),
            streak: 0,
            latched: false,
        }
    }

    pub fn observe(&mut self, ts_s: u64, verdict: SloVerdict) -> Option<DetectionEvent> {
        if !verdict.is_breach() {
            self.streak = 0;
            if verdict.is_compliant() {
                self.latched = false;
            }
            return None;
        }
        self.streak += 1;
        if self.streak >= self.required && !self.latched {
            self.latched = true;
            return Some(DetectionEvent {
                ts_s,
                service: self.service.clone(),
                detector: "alert:slo_breach".into(),
            });
        }
        None
    }

    pub fn release(&mut self) {
        self.latched = false;
        self.streak = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedAction {
    pub service: String,
    pub action: ActionKind,
    pub risk: Risk,
    /// Reasoner rule that produced the proposal.
    pub rationale: String,
}

/// Risk table: rollback and scale-down are high, scale-up is low while it
/// stays inside the service bounds, restarts are low.
pub fn risk_of(action: &ActionKind, view: &ServiceView) -> Risk {
    match *action {
        ActionKind::RollbackConfig | ActionKind::ScaleDown { .. } => Risk::High,
        ActionKind::ScaleUp { delta } if view.desired_replicas + delta > view.max_replicas => Risk::High,
        ActionKind::ScaleUp { .. } | ActionKind::RestartPod { .. } => Risk::Low,
    }
}

/// Dominant-symptom dispatch. Priority: drift, failed replicas, saturated
/// replicas, overload, sustained underuse; anything else gets one replica of
/// headroom.
pub fn reason(report: &AnomalyReport, view: &ServiceView) -> Vec<ProposedAction> {
    let propose = |action: ActionKind, rule: &str| ProposedAction {
        service: view.service.clone(),
        action,
        risk: risk_of(&action, view),
        rationale: rule.to_string(),
    };
    if view.drift_active {
        return vec![propose(ActionKind::RollbackConfig, "drift")];
    }
    if view.failed_replicas > 0 {
        return vec![propose(
            ActionKind::RestartPod {
                count: view.failed_replicas,
            },
            "availability_deficit",
        )];
    }
    if view.degraded_replicas > 0 {
        return vec![propose(
            ActionKind::RestartPod {
                count: view.degraded_replicas,
            },
            "saturated_replicas",
        )];
    }
    let headroom = view.max_replicas.saturating_sub(view.desired_replicas);
    if view.utilization >= OVERLOAD_UTILIZATION && headroom > 0 {
        let needed = (view.offered_rps / view.capacity_rps_per_replica).ceil() as i64 - view.desired_replicas as i64;
        let delta = (needed.max(1) as u32).min(headroom);
        return vec![propose(ActionKind::ScaleUp { delta }, "overload")];
    }
    if report.low_utilization_streak >= UNDERUSE_SCRAPES && view.desired_replicas > view.min_replicas {
        return vec![propose(ActionKind::ScaleDown { delta: 1 }, "underuse")];
    }
    vec![propose(ActionKind::ScaleUp { delta: 1 }, "headroom")]
}
