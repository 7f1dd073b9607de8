use std::time::{Duration, Instant};

use serde_json::{json, Value};

use cpe_api::{spawn, ServeOptions};
use cpe_core::control::{Decision, GateConfig};
use cpe_core::experiment::{scenario_config, ScenarioSpec, TrialConfig};
use cpe_core::Mode;

fn live_config() -> TrialConfig {
    let mut cfg = scenario_config(&ScenarioSpec::preset("S2").unwrap()).unwrap();
    cfg.mode = Mode::Cpe;
    cfg.seed = 7;
    cfg.warmup_s = 60;
    cfg.duration_s = 7200;
    cfg.cluster.faults.clear();
    // Long enough that the test, not the timeout, decides.
    cfg.gate = GateConfig {
        approval_timeout_s: 3600,
        timeout_decision: Decision::Deny,
    };
    cfg
}

async fn start(factor: f64) -> String {
    let run = spawn(live_config(), ServeOptions { realtime_factor: factor }).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, run.router).await.unwrap();
    });
    format!("http://{addr}")
}

async fn get(client: &reqwest::Client, url: &str) -> Value {
    client.get(url).send().await.unwrap().json().await.unwrap()
}

async fn wait_for<F>(client: &reqwest::Client, url: &str, mut pred: F) -> Value
where
    F: FnMut(&Value) -> bool,
{
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let v = get(client, url).await;
        if pred(&v) {
            return v;
        }
        assert!(Instant::now() < deadline, "timed out polling {url}: {v}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn pending_for(client: &reqwest::Client, base: &str, service: &str) -> u64 {
    let v = wait_for(client, &format!("{base}/approvals"), |v| {
        v["pending"]
            .as_array()
            .unwrap()
            .iter()
            .any(|a| a["service"] == service && a["action"]["kind"] == "rollback_config")
    })
    .await;
    v["pending"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["service"] == service)
        .unwrap()["action_id"]
        .as_u64()
        .unwrap()
}

async fn audit_has(client: &reqwest::Client, base: &str, action_id: u64, verdict: &str) {
    wait_for(client, &format!("{base}/audit"), |v| {
        v["entries"]
            .as_array()
            .unwrap()
            .iter()
            .any(|e| e["action_id"] == action_id && e["verdict"] == verdict)
    })
    .await;
}

/// Reads SSE frames until `n` events arrived; returns their (seq, kind).
async fn read_events(client: &reqwest::Client, url: &str, n: usize) -> Vec<(u64, String, Value)> {
    let mut resp = client.get(url).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let chunk = tokio::time::timeout(Duration::from_secs(20), resp.chunk())
            .await
            .expect("event stream stalled")
            .unwrap()
            .expect("stream ended");
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
        while let Some(end) = buf.find("\n\n") {
            let frame: String = buf.drain(..end + 2).collect();
            let mut id = None;
            let mut kind = None;
            let mut data = None;
            for line in frame.lines() {
                if let Some(v) = line.strip_prefix("id:") {
                    id = Some(v.trim().parse::<u64>().unwrap());
                } else if let Some(v) = line.strip_prefix("event:") {
                    kind = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data = Some(serde_json::from_str::<Value>(v.trim()).unwrap());
                }
            }
            if let (Some(id), Some(kind), Some(data)) = (id, kind, data) {
                out.push((id, kind, data));
            }
        }
    }
    out.truncate(n);
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn read_endpoints_serve_structured_payloads() {
    let base = start(100.0).await;
    let c = reqwest::Client::new();

    let v = get(&c, &format!("{base}/version")).await;
    assert_eq!(v["name"], "cpe");
    assert_eq!(v["api"], 1);

    let s = wait_for(&c, &format!("{base}/state"), |v| v["clock_s"].as_u64().unwrap() >= 90).await;
    assert_eq!(s["mode"], "cpe");
    assert_eq!(s["services"].as_array().unwrap().len(), 2);
    assert!(s["halted"].is_null());

    let m = get(&c, &format!("{base}/metrics?window=120&service=frontend&metric=rps")).await;
    let series = m["series"].as_array().unwrap();
    assert_eq!(series.len(), 1);
    assert_eq!(series[0]["labels"]["service"], "frontend");
    let from = m["from_s"].as_u64().unwrap();
    for p in series[0]["points"].as_array().unwrap() {
        assert!(p[0].as_u64().unwrap() >= from);
    }

    let r = c.get(format!("{base}/metrics?metric=nope")).send().await.unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "metric");
    let r = c.get(format!("{base}/metrics?window=-3")).send().await.unwrap();
    assert_eq!(r.status(), 400);

    let rep = get(&c, &format!("{base}/report")).await;
    assert_eq!(rep["result"]["mode"], "cpe");
    assert!(rep["result"]["measured_scrapes"].as_u64().is_some());

    let a = get(&c, &format!("{base}/audit?limit=10")).await;
    assert!(a["entries"].is_array());
    let r = c.get(format!("{base}/audit?limit=0")).send().await.unwrap();
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn approval_round_trip_through_the_gate() {
    let base = start(50.0).await;
    let c = reqwest::Client::new();

    let r = c
        .post(format!("{base}/faults"))
        .json(&json!({"kind": "config_drift", "target_service": "frontend", "magnitude": 1}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 201);
    let body: Value = r.json().await.unwrap();
    assert!(body["incident_id"].as_u64().is_some());

    let id = pending_for(&c, &base, "frontend").await;
    let r = c
        .post(format!("{base}/approvals/{id}"))
        .json(&json!({"decision": "approve"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    audit_has(&c, &base, id, "approved").await;
    audit_has(&c, &base, id, "executed").await;

    // Deciding twice conflicts.
    let r = c
        .post(format!("{base}/approvals/{id}"))
        .json(&json!({"decision": "deny"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 409);

    c.post(format!("{base}/faults"))
        .json(&json!({"kind": "config_drift", "target_service": "checkout", "magnitude": 1}))
        .send()
        .await
        .unwrap();
    let id2 = pending_for(&c, &base, "checkout").await;
    let r = c
        .post(format!("{base}/approvals/{id2}"))
        .json(&json!({"decision": "deny"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 200);
    audit_has(&c, &base, id2, "denied").await;

    // Both decisions are on the stream.
    let events = read_events(&c, &format!("{base}/events?after_seq=0"), 1).await;
    assert_eq!(events[0].0, 1);
    let all = get(&c, &format!("{base}/state")).await;
    let last = all["last_event_seq"].as_u64().unwrap() as usize;
    let events = read_events(&c, &format!("{base}/events"), last).await;
    let executed = events
        .iter()
        .any(|(_, k, d)| k == "action_executed" && d["payload"]["action_id"] == id);
    assert!(executed, "no action_executed event for {id}");
    let pending_seq = events
        .iter()
        .find(|(_, k, d)| k == "approval_pending" && d["payload"]["action_id"] == id)
        .map(|e| e.0)
        .expect("approval_pending event");
    let proposed_seq = events
        .iter()
        .find(|(_, k, d)| k == "action_proposed" && d["payload"]["action_id"] == id)
        .map(|e| e.0)
        .expect("action_proposed event");
    assert!(proposed_seq < pending_seq);
    let scrapes_between = events
        .iter()
        .filter(|(s, k, _)| *s > proposed_seq && *s < pending_seq && k == "scrape")
        .count();
    assert!(scrapes_between <= 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_requests_name_the_field() {
    let base = start(20.0).await;
    let c = reqwest::Client::new();

    let r = c
        .post(format!("{base}/approvals/1"))
        .json(&json!({"decision": "maybe"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "decision");

    let r = c
        .post(format!("{base}/approvals/abc"))
        .json(&json!({"decision": "approve"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "id");

    let r = c
        .post(format!("{base}/approvals/999999"))
        .json(&json!({"decision": "approve"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 404);

    let r = c
        .post(format!("{base}/faults"))
        .json(&json!({"kind": "meteor", "target_service": "frontend", "magnitude": 1}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "kind");

    let r = c
        .post(format!("{base}/faults"))
        .json(&json!({"kind": "pod_eviction", "target_service": "ghost", "magnitude": 1}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "target_service");

    let r = c
        .post(format!("{base}/faults"))
        .json(&json!({"kind": "cpu_saturation", "target_service": "frontend", "magnitude": 7}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().await.unwrap()["field"], "magnitude");

    let r = c
        .post(format!("{base}/faults"))
        .json(&json!({"kind": "pod_eviction", "target_service": "frontend", "magnitude": 1, "extra": 1}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn event_stream_resumes_without_gaps_or_duplicates() {
    let base = start(200.0).await;
    let c = reqwest::Client::new();

    let first = read_events(&c, &format!("{base}/events"), 30).await;
    let seqs: Vec<u64> = first.iter().map(|e| e.0).collect();
    assert_eq!(seqs, (1..=30).collect::<Vec<_>>());

    // Reconnect mid-stream, by query and by header.
    let resumed = read_events(&c, &format!("{base}/events?after_seq=17"), 20).await;
    let seqs: Vec<u64> = resumed.iter().map(|e| e.0).collect();
    assert_eq!(seqs, (18..=37).collect::<Vec<_>>());
    for (a, b) in first.iter().skip(17).zip(&resumed) {
        assert_eq!(a, b);
    }

    let resp = c
        .get(format!("{base}/events"))
        .header("Last-Event-ID", "25")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    drop(resp);
    let r = c
        .get(format!("{base}/events"))
        .header("Last-Event-ID", "x")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
}
