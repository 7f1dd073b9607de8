//! HTTP + server-sent-event API over one live engine run.
//!
//! The engine advances on a driver task at a configurable real-time factor.
//! Mutations (approval decisions, fault injections) travel through a command
//! queue and are applied between ticks; reads take a short lock.

mod error;
mod routes;

use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use parking_lot::Mutex;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;

use cpe_core::control::Decision;
use cpe_core::engine::{ApiEvent, Engine, EngineError};
use cpe_core::experiment::TrialConfig;
use cpe_core::simcluster::FaultEvent;

pub use error::ApiError;

const EVENT_BUFFER: usize = 4096;
const COMMAND_BUFFER: usize = 256;
/// Finest driver period; faster factors run several ticks per wake-up.
const MIN_PERIOD: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// Simulated seconds per wall-clock second.
    pub realtime_factor: f64,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self { realtime_factor: 1.0 }
    }
}

pub(crate) struct Live {
    pub engine: Engine,
    published: u64,
    pub halted: Option<String>,
}

pub(crate) enum Command {
    Decide {
        action_id: u64,
        decision: Decision,
        reply: oneshot::Sender<Result<(), EngineError>>,
    },
    InjectFault {
        fault: FaultEvent,
        reply: oneshot::Sender<Result<u64, EngineError>>,
    },
}

pub(crate) struct Shared {
    pub live: Mutex<Live>,
    pub config: TrialConfig,
    pub events: broadcast::Sender<ApiEvent>,
    pub commands: mpsc::Sender<Command>,
}

impl Shared {
    /// Forward events the engine emitted since the last call. Called with
    /// the lock held so subscribers never see a gap.
    fn publish(&self, live: &mut Live) {
        for e in live.engine.events_after(live.published) {
            // No subscribers is fine; late joiners replay from the engine.
            let _ = self.events.send(e.clone());
        }
        live.published = live.engine.last_seq();
    }

    fn apply(&self, cmd: Command) {
        let mut live = self.live.lock();
        match cmd {
            Command::Decide {
                action_id,
                decision,
                reply,
            } => {
                let r = live.engine.decide(action_id, decision);
                self.publish(&mut live);
                let _ = reply.send(r);
            }
            Command::InjectFault { fault, reply } => {
                let r = live.engine.inject_fault(fault);
                self.publish(&mut live);
                let _ = reply.send(r);
            }
        }
    }

    fn step(&self, ticks: u32) {
        let mut live = self.live.lock();
        for _ in 0..ticks {
            if live.halted.is_some() || live.engine.is_finished() {
                break;
            }
            if let Err(e) = live.engine.tick() {
                live.halted = Some(e.to_string());
            }
        }
        self.publish(&mut live);
    }
}

/// Router plus the task that drives the engine.
pub struct LiveRun {
    pub router: Router,
    pub driver: JoinHandle<()>,
}

fn cadence(realtime_factor: f64) -> Result<(Duration, u32), ApiError> {
    if !(realtime_factor.is_finite() && realtime_factor > 0.0) {
        return Err(ApiError::bad_request(
            "realtime_factor",
            "must be a positive finite number",
        ));
    }
    let per_tick = 1.0 / realtime_factor;
    let ticks = (MIN_PERIOD.as_secs_f64() / per_tick).ceil().max(1.0);
    Ok((Duration::from_secs_f64(per_tick * ticks), ticks as u32))
}

/// Build the engine and spawn its driver on the current runtime.
pub fn spawn(config: TrialConfig, opts: ServeOptions) -> Result<LiveRun, ApiError> {
    let (period, ticks) = cadence(opts.realtime_factor)?;
    config
        .validate()
        .map_err(|e| ApiError::bad_request("config", e.to_string()))?;
    let engine = Engine::new(config.engine_config()).map_err(|e| ApiError::bad_request("config", e.to_string()))?;
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    let (commands, mut rx) = mpsc::channel(COMMAND_BUFFER);
    let shared = Arc::new(Shared {
        live: Mutex::new(Live {
            engine,
            published: 0,
            halted: None,
        }),
        config,
        events,
        commands,
    });
    let router = routes::router(shared.clone());
    let driver = tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                biased;
                cmd = rx.recv() => match cmd {
                    Some(cmd) => shared.apply(cmd),
                    None => break,
                },
                _ = interval.tick() => shared.step(ticks),
            }
        }
    });
    Ok(LiveRun { router, driver })
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, config: TrialConfig, opts: ServeOptions) -> Result<(), ApiError> {
    let run = spawn(config, opts)?;
    axum::serve(listener, run.router)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    run.driver.abort();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence_batches_fast_factors() {
        let (p, n) = cadence(1.0).unwrap();
        assert_eq!((p, n), (Duration::from_secs(1), 1));
        let (p, n) = cadence(10.0).unwrap();
        assert_eq!(n, 1);
        assert!((p.as_secs_f64() - 0.1).abs() < 1e-9);
        let (p, n) = cadence(5000.0).unwrap();
        assert_eq!(n, 10);
        assert!((p.as_secs_f64() - 0.002).abs() < 1e-9);
        assert!(cadence(0.0).is_err());
        assert!(cadence(f64::NAN).is_err());
    }
}
