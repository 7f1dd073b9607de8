use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::{broadcast, oneshot};

use cpe_core::control::{AuditEntry, Decision};
use cpe_core::engine::ApiEvent;
use cpe_core::experiment::trial_result;
use cpe_core::simcluster::{FaultEvent, FaultKind};
use cpe_core::telemetry::{Labels, MetricName};

use crate::{ApiError, Command, Shared};

type AppState = Arc<Shared>;

const DEFAULT_WINDOW_S: u64 = 600;
const DEFAULT_AUDIT_LIMIT: usize = 500;
const MAX_AUDIT_LIMIT: usize = 5000;

pub(crate) fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/metrics", get(get_metrics))
        .route("/events", get(get_events))
        .route("/approvals", get(get_approvals))
        .route("/approvals/{id}", post(post_approval))
        .route("/faults", post(post_fault))
        .route("/audit", get(get_audit))
        .route("/report", get(get_report))
        .route("/version", get(get_version))
        .with_state(state)
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request("query", e.body_text()))
}

/// JSON body with the offending field path in the error.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::bad_request(field, e.inner().to_string())
    })
}

async fn get_state(State(s): State<AppState>) -> Json<Value> {
    let live = s.live.lock();
    let mut v = json!(live.engine.summary());
    v["halted"] = json!(live.halted);
    Json(v)
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    window: Option<u64>,
    service: Option<String>,
    metric: Option<String>,
}

#[derive(Debug, Serialize)]
struct SeriesWindow {
    metric: MetricName,
    labels: Labels,
    points: Vec<(u64, f64)>,
}

async fn get_metrics(
    State(s): State<AppState>,
    q: Result<Query<MetricsQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = query(q)?;
    let metric = match q.metric.as_deref() {
        None => None,
        Some(m) => Some(MetricName::parse(m).ok_or_else(|| {
            let known: Vec<&str> = MetricName::ALL.iter().map(|m| m.as_str()).collect();
            ApiError::bad_request("metric", format!("unknown metric `{m}`; expected one of {}", known.join(", ")))
        })?),
    };
    let window = q.window.unwrap_or(DEFAULT_WINDOW_S);
    let live = s.live.lock();
    let to = live.engine.clock_s();
    let from = to.saturating_sub(window);
    let store = live.engine.store();
    let mut series = Vec::new();
    for ser in store.series() {
        if metric.is_some_and(|m| m != ser.key.metric) {
            continue;
        }
        if let Some(svc) = &q.service {
            if ser.key.labels.get("service") != Some(svc) {
                continue;
            }
        }
        let points = store
            .query_window(&ser.key, from, to)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        series.push(SeriesWindow {
            metric: ser.key.metric,
            labels: ser.key.labels.clone(),
            points,
        });
    }
    Ok(Json(json!({
        "clock_s": to,
        "from_s": from,
        "window_s": window,
        "series": series,
    })))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after_seq: Option<u64>,
}

struct EventCursor {
    backlog: VecDeque<ApiEvent>,
    rx: broadcast::Receiver<ApiEvent>,
    last: u64,
    shared: AppState,
}

fn sse_event(e: &ApiEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind.as_str())
        .json_data(e)
        .unwrap_or_else(|_| Event::default().comment("unserializable event"))
}

/// Replays everything after `after_seq` (or `Last-Event-ID`), then follows
/// live events without gaps or duplicates.
async fn get_events(
    State(s): State<AppState>,
    headers: HeaderMap,
    q: Result<Query<EventsQuery>, QueryRejection>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let q = query(q)?;
    let header_seq = match headers.get("last-event-id") {
        None => None,
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|v| v.trim().parse::<u64>().ok())
                .ok_or_else(|| ApiError::bad_request("Last-Event-ID", "must be a non-negative integer"))?,
        ),
    };
    let after = q.after_seq.or(header_seq).unwrap_or(0);
    let (backlog, rx) = {
        // Subscribing under the lock pins the hand-off point between replay
        // and live delivery.
        let live = s.live.lock();
        (live.engine.events_after(after).to_vec(), s.events.subscribe())
    };
    let cursor = EventCursor {
        backlog: backlog.into(),
        rx,
        last: after,
        shared: s,
    };
    let stream = futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(e) = c.backlog.pop_front() {
                c.last = e.seq;
                return Some((Ok(sse_event(&e)), c));
            }
            match c.rx.recv().await {
                Ok(e) if e.seq <= c.last => continue,
                Ok(e) => {
                    c.last = e.seq;
                    return Some((Ok(sse_event(&e)), c));
                }
                Err(RecvError::Lagged(_)) => {
                    let live = c.shared.live.lock();
                    c.backlog = live.engine.events_after(c.last).to_vec().into();
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn get_approvals(State(s): State<AppState>) -> Json<Value> {
    let live = s.live.lock();
    let pending = live.engine.control().pending_approvals();
    Json(json!({ "clock_s": live.engine.clock_s(), "pending": pending }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Decision,
}

async fn send<T>(s: &Shared, cmd: Command, rx: oneshot::Receiver<T>) -> Result<T, ApiError> {
    s.commands
        .send(cmd)
        .await
        .map_err(|_| ApiError::unavailable("engine driver stopped"))?;
    rx.await.map_err(|_| ApiError::unavailable("engine driver stopped"))
}

async fn post_approval(
    State(s): State<AppState>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> Result<Json<Value>, ApiError> {
    let action_id: u64 = id
        .parse()
        .map_err(|_| ApiError::bad_request("id", format!("`{id}` is not an action id")))?;
    let DecisionBody { decision } = body(&bytes)?;
    let (reply, rx) = oneshot::channel();
    send(
        &s,
        Command::Decide {
            action_id,
            decision,
            reply,
        },
        rx,
    )
    .await??;
    let live = s.live.lock();
    let status = live
        .engine
        .control()
        .action(action_id)
        .map(|a| a.status);
    Ok(Json(json!({
        "action_id": action_id,
        "decision": decision,
        "status": status,
        "clock_s": live.engine.clock_s(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultBody {
    kind: FaultKind,
    target_service: String,
    magnitude: f64,
    #[serde(default)]
    duration_s: Option<u64>,
}

async fn post_fault(State(s): State<AppState>, bytes: Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let f: FaultBody = body(&bytes)?;
    let fault = FaultEvent {
        kind: f.kind,
        target_service: f.target_service,
        at_s: 0,
        magnitude: f.magnitude,
        duration_s: f.duration_s,
    };
    let (reply, rx) = oneshot::channel();
    let incident_id = send(&s, Command::InjectFault { fault, reply }, rx).await??;
    let live = s.live.lock();
    let incident = live.engine.incidents().iter().find(|i| i.id == incident_id).cloned();
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "incident_id": (incident_id != 0).then_some(incident_id),
            "incident": incident,
            "clock_s": live.engine.clock_s(),
        })),
    ))
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    after_seq: Option<u64>,
    limit: Option<usize>,
}

async fn get_audit(
    State(s): State<AppState>,
    q: Result<Query<AuditQuery>, QueryRejection>,
) -> Result<Json<Value>, ApiError> {
    let q = query(q)?;
    let limit = q.limit.unwrap_or(DEFAULT_AUDIT_LIMIT);
    if limit == 0 || limit > MAX_AUDIT_LIMIT {
        return Err(ApiError::bad_request("limit", format!("must lie in 1..={MAX_AUDIT_LIMIT}")));
    }
    let after = q.after_seq.unwrap_or(0);
    let live = s.live.lock();
    let all = live.engine.control().audit().entries();
    let entries: Vec<&AuditEntry> = all.iter().filter(|e| e.seq > after).take(limit).collect();
    let next = entries.last().map(|e| e.seq);
    let more = next.is_some_and(|n| all.iter().any(|e| e.seq > n));
    Ok(Json(json!({
        "entries": entries,
        "next_after_seq": if more { next } else { None },
    })))
}

async fn get_report(State(s): State<AppState>) -> Json<Value> {
    let live = s.live.lock();
    let result = trial_result(&s.config, &live.engine);
    Json(json!({
        "clock_s": live.engine.clock_s(),
        "finished": live.engine.is_finished(),
        "result": result,
    }))
}

async fn get_version() -> Json<Value> {
    Json(json!({
        "name": "cpe",
        "version": env!("CARGO_PKG_VERSION"),
        "api": 1,
    }))
}
