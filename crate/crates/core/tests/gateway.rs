use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpListener;

use tacit_core::capture::{Capture, Traffic};
use tacit_core::gateway::{
    spawn_gateway, DispatchEnvelope, EventRelay, GatewayConfig, GatewayErrorBody, GatewayReply, LINEPROTO,
};

/// A native device that answers each command line via `reply`, and may send
/// one unsolicited line right after the first command.
async fn fake_device(reply: fn(&str) -> Option<String>, unsolicited: Option<String>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            let log = log.clone();
            let mut unsolicited = unsolicited.clone();
            tokio::spawn(async move {
                let (read, mut write) = stream.into_split();
                let mut lines = BufReader::new(read).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    log.lock().push(line.clone());
                    if let Some(r) = reply(&line) {
                        write.write_all(r.as_bytes()).await.unwrap();
                    }
                    if let Some(u) = unsolicited.take() {
                        write.write_all(u.as_bytes()).await.unwrap();
                    }
                }
            });
        }
    });
    (addr, seen)
}

fn envelope(device: &str, addr: &str, verb: &str, text: &str) -> DispatchEnvelope {
    DispatchEnvelope {
        device_id: device.into(),
        driver: LINEPROTO.into(),
        native_address: addr.into(),
        verb: verb.into(),
        args: [("text".to_string(), text.to_string())].into(),
        correlation_id: format!("{device}.1"),
        session_id: "sess-1".into(),
    }
}

fn config(events: Option<String>, timeout_ms: u64) -> GatewayConfig {
    GatewayConfig {
        gateway_id: "gw-1".into(),
        listen: "127.0.0.1:0".into(),
        server_events_url: events,
        drivers: vec![LINEPROTO.into()],
        timeout_ms,
    }
}

async fn post_dispatch(url: &str, body: &str) -> (StatusCode, String) {
    let r = reqwest::Client::builder()
        .no_proxy()
        .build()
        .unwrap()
        .post(format!("{url}/dispatch"))
        .header("content-type", "application/json")
        .body(body.to_string())
        .send()
        .await
        .unwrap();
    (StatusCode::from_u16(r.status().as_u16()).unwrap(), r.text().await.unwrap())
}

/// Collects POSTed events; answers with the statuses in `script`, then 202.
async fn events_sink(script: Vec<u16>) -> (String, Arc<Mutex<Vec<serde_json::Value>>>, Arc<AtomicUsize>) {
    let got = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (g, h) = (got.clone(), hits.clone());
    let app = Router::new().route(
        "/events",
        post(move |Json(v): Json<serde_json::Value>| {
            let (g, h, script) = (g.clone(), h.clone(), script.clone());
            async move {
                let n = h.fetch_add(1, Ordering::SeqCst);
                let status = script.get(n).copied().unwrap_or(202);
                if status == 202 {
                    g.lock().push(v);
                }
                StatusCode::from_u16(status).unwrap()
            }
        }),
    );
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/events", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (url, got, hits)
}

#[tokio::test]
async fn dispatch_translates_to_one_line_and_reports_ok() {
    let (addr, seen) = fake_device(|_| Some("OK\n".into()), None).await;
    let capture = Capture::new();
    let gw = spawn_gateway(config(None, 1_000), Some(capture.clone())).await.unwrap();
    let env = envelope("spk", &addr, "announce", "Go left");
    let (status, body) = post_dispatch(&gw.url(), &serde_json::to_string(&env).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let reply: GatewayReply = serde_json::from_str(&body).unwrap();
    assert_eq!((reply.correlation.as_str(), reply.outcome.as_str()), ("spk.1", "ok"));
    assert_eq!(*seen.lock(), ["CMD announce text=R28gbGVmdA=="]);
    let entries = capture.entries();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].correlation.as_deref(), Some("spk.1"));
    assert!(matches!(&entries[0].traffic, Traffic::Http { path, .. } if path == "/dispatch"));
}

#[tokio::test]
async fn device_errors_and_transport_errors_are_replies_not_failures() {
    let (addr, _) = fake_device(|_| Some("ERR BUSY device busy\n".into()), None).await;
    let gw = spawn_gateway(config(None, 1_000), None).await.unwrap();
    let (status, body) =
        post_dispatch(&gw.url(), &serde_json::to_string(&envelope("d", &addr, "show", "x")).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let reply: GatewayReply = serde_json::from_str(&body).unwrap();
    assert_eq!(reply.outcome, "device_error");
    assert_eq!(reply.code.as_deref(), Some("BUSY"));
    assert_eq!(reply.message.as_deref(), Some("device busy"));

    // nothing listens on port 1
    let (status, body) =
        post_dispatch(&gw.url(), &serde_json::to_string(&envelope("d", "127.0.0.1:1", "show", "x")).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let reply: GatewayReply = serde_json::from_str(&body).unwrap();
    assert_eq!(reply.outcome, "transport_error");
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let gw = spawn_gateway(config(None, 1_000), None).await.unwrap();
    let (status, body) = post_dispatch(&gw.url(), "{\"verb\":").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<GatewayErrorBody>(&body).unwrap().error, "BAD_ENVELOPE");

    let mut env = envelope("d", "127.0.0.1:1", "show", "x");
    env.driver = "zigbee".into();
    let (status, body) = post_dispatch(&gw.url(), &serde_json::to_string(&env).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<GatewayErrorBody>(&body).unwrap().error, "UNKNOWN_DRIVER");

    let env = envelope("d", "127.0.0.1:1", "not a verb", "x");
    let (status, body) = post_dispatch(&gw.url(), &serde_json::to_string(&env).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_str::<GatewayErrorBody>(&body).unwrap().error, "ENCODING_ERROR");
}

#[tokio::test]
async fn a_wedged_device_does_not_stall_others() {
    let (wedged, _) = fake_device(|_| None, None).await;
    let (healthy, _) = fake_device(|_| Some("OK\n".into()), None).await;
    let gw = spawn_gateway(config(None, 800), None).await.unwrap();
    let url = gw.url();
    let slow = {
        let url = url.clone();
        let body = serde_json::to_string(&envelope("wedged", &wedged, "show", "x")).unwrap();
        tokio::spawn(async move { post_dispatch(&url, &body).await })
    };
    tokio::time::sleep(Duration::from_millis(50)).await;
    let started = Instant::now();
    for i in 0..5 {
        let body = serde_json::to_string(&envelope("healthy", &healthy, "show", &i.to_string())).unwrap();
        let (_, body) = post_dispatch(&url, &body).await;
        assert_eq!(serde_json::from_str::<GatewayReply>(&body).unwrap().outcome, "ok");
    }
    assert!(started.elapsed() < Duration::from_millis(500), "{:?}", started.elapsed());
    let (_, body) = slow.await.unwrap();
    assert_eq!(serde_json::from_str::<GatewayReply>(&body).unwrap().outcome, "timeout");
}

#[tokio::test]
async fn native_events_are_relayed_with_the_device_id() {
    let (sink, got, _) = events_sink(vec![]).await;
    let (addr, _) = fake_device(|_| Some("OK\n".into()), Some("EVT movement direction=bm9ydGg=\n".into())).await;
    let gw = spawn_gateway(config(Some(sink), 1_000), None).await.unwrap();
    let env = envelope("cam-7", &addr, "monitor", "");
    post_dispatch(&gw.url(), &serde_json::to_string(&env).unwrap()).await;
    let deadline = Instant::now() + Duration::from_secs(3);
    while got.lock().is_empty() && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(
        *got.lock(),
        [serde_json::json!({"device_id": "cam-7", "event_type": "movement", "payload": {"direction": "north"}})]
    );
    assert_eq!(gw.gateway.relay().stats().delivered, 1);
}

#[tokio::test]
async fn relay_retries_once_on_server_errors_then_drops() {
    let payload: BTreeMap<String, String> = [("direction".to_string(), "east".to_string())].into();
    let quick = |url: String| EventRelay::new(Some(url)).with_retry_delay(Duration::from_millis(5));

    let (url, got, hits) = events_sink(vec![503]).await;
    let relay = quick(url);
    assert!(relay.relay("cam", "movement", &payload).await);
    assert_eq!((hits.load(Ordering::SeqCst), got.lock().len()), (2, 1));

    let (url, _, hits) = events_sink(vec![500, 500, 500]).await;
    let relay = quick(url);
    assert!(!relay.relay("cam", "movement", &payload).await);
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    assert_eq!(relay.stats().dropped, 1);

    // a client error is final
    let (url, _, hits) = events_sink(vec![404]).await;
    let relay = quick(url);
    assert!(!relay.relay("ghost", "movement", &payload).await);
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    // unreachable server: two attempts, then dropped
    let relay = quick("http://127.0.0.1:1/events".into());
    assert!(!relay.relay("cam", "movement", &payload).await);
    assert_eq!(relay.stats(), tacit_core::gateway::RelayStats { delivered: 0, dropped: 1 });
}
