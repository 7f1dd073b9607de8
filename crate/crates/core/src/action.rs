//! Remediation action vocabulary shared by the reasoner, the policy gate and
//! the simulator.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A concrete change the control plane can apply to one service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    ScaleUp { delta: u32 },
    ScaleDown { delta: u32 },
    /// Replace up to `count` unhealthy or saturated replicas.
    RestartPod { count: u32 },
    RollbackConfig,
}

/// Tag form of [`ActionKind`], used where parameters do not matter
/// (policy rules, counters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTag {
    ScaleUp,
    ScaleDown,
    RestartPod,
    RollbackConfig,
}

impl ActionKind {
    pub fn tag(&self) -> ActionTag {
        match self {
            ActionKind::ScaleUp { .. } => ActionTag::ScaleUp,
            ActionKind::ScaleDown { .. } => ActionTag::ScaleDown,
            ActionKind::RestartPod { .. } => ActionTag::RestartPod,
            ActionKind::RollbackConfig => ActionTag::RollbackConfig,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionKind::ScaleUp { delta } => write!(f, "scale_up(+{delta})"),
            ActionKind::ScaleDown { delta } => write!(f, "scale_down(-{delta})"),
            ActionKind::RestartPod { count } => write!(f, "restart_pod({count})"),
            ActionKind::RollbackConfig => f.write_str("rollback_config"),
        }
    }
}

impl fmt::Display for ActionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionTag::ScaleUp => "scale_up",
            ActionTag::ScaleDown => "scale_down",
            ActionTag::RestartPod => "restart_pod",
            ActionTag::RollbackConfig => "rollback_config",
        })
    }
}

/// Risk class attached to every proposal; `High` actions are candidates for
/// the approval gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Risk {
    Low,
    High,
}
