use std::collections::BTreeMap;
use std::convert::Infallible;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dsl::Finding;
use crate::registry::{DeviceDescriptor, Location, RegistryError};
use crate::runtime::{DeviceEvent, Engine, IngestError, LogStream, LogicError, StartError, Value};

/// Error body shared by every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub message: String,
    #[serde(flatten)]
    pub detail: serde_json::Map<String, serde_json::Value>,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    error_with(status, code, message, serde_json::Map::new())
}

fn error_with(
    status: StatusCode,
    code: &str,
    message: impl Into<String>,
    detail: serde_json::Map<String, serde_json::Value>,
) -> Response {
    let body = ApiError {
        error: code.to_string(),
        message: message.into(),
        detail,
    };
    (status, Json(body)).into_response()
}

fn registry_error(e: RegistryError) -> Response {
    let status = match &e {
        RegistryError::InvalidDescriptor { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        RegistryError::UnknownDevice(_) => StatusCode::NOT_FOUND,
        RegistryError::StaleTimestamp { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    let mut detail = serde_json::Map::new();
    match &e {
        RegistryError::InvalidDescriptor { path, message } => {
            detail.insert("path".into(), json!(path));
            return error_with(status, e.code(), message.clone(), detail);
        }
        RegistryError::StaleTimestamp { stored, given, .. } => {
            detail.insert("stored".into(), json!(stored));
            detail.insert("given".into(), json!(given));
        }
        _ => {}
    }
    error_with(status, e.code(), e.to_string(), detail)
}

/// Request body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub logic: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    pub user: Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicStored {
    pub name: String,
    pub warnings: Vec<Finding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub dropped_events: u64,
    pub sessions: usize,
    pub devices: usize,
}

pub fn router(engine: Engine) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/stats", get(stats))
        .route("/devices", post(register_device).get(query_devices))
        .route("/devices/{id}", get(get_device).delete(remove_device))
        .route("/devices/{id}/heartbeat", post(heartbeat))
        .route("/gateways", get(list_gateways))
        .route("/gateways/{id}", put(set_gateway))
        .route("/logics", post(put_logic).get(list_logics))
        .route("/logics/{name}", get(get_logic))
        .route("/sessions", post(start_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stream", get(stream_session))
        .route("/events", post(post_event))
        .with_state(engine)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, Response> {
    serde_json::from_str(body).map_err(|e| error(StatusCode::BAD_REQUEST, "BAD_REQUEST", e.to_string()))
}

async fn stats(State(engine): State<Engine>) -> Json<ServerStats> {
    Json(ServerStats {
        dropped_events: engine.dropped_events(),
        sessions: engine.session_ids().len(),
        devices: engine.registry().len(),
    })
}

async fn register_device(State(engine): State<Engine>, body: String) -> Response {
    let descriptor: DeviceDescriptor = match serde_json::from_str(&body) {
        Ok(d) => d,
        Err(e) => {
            return registry_error(RegistryError::InvalidDescriptor {
                path: "$".into(),
                message: e.to_string(),
            })
        }
    };
    match engine.registry().register(descriptor) {
        Ok(id) => Json(json!({ "device_id": id })).into_response(),
        Err(e) => registry_error(e),
    }
}

#[derive(Debug, Deserialize)]
struct DeviceQuery {
    capability: Option<String>,
    zone: Option<String>,
}

/// With `capability`: live matching devices. Without: every registered
/// device, live or not.
async fn query_devices(State(engine): State<Engine>, Query(q): Query<DeviceQuery>) -> Json<Vec<DeviceDescriptor>> {
    let registry = engine.registry();
    let now = registry.clock().now_ms();
    let devices = match &q.capability {
        Some(cap) => registry.query(cap, now, engine.config().ttl_ms, q.zone.as_deref()),
        None => registry
            .snapshot(now)
            .devices()
            .iter()
            .filter(|d| q.zone.as_deref().is_none_or(|z| d.location.zone == z))
            .cloned()
            .collect(),
    };
    Json(devices)
}

async fn get_device(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.registry().get(&id) {
        Some(d) => Json(d).into_response(),
        None => registry_error(RegistryError::UnknownDevice(id)),
    }
}

async fn remove_device(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.registry().remove(&id) {
        Ok(d) => Json(d).into_response(),
        Err(e) => registry_error(e),
    }
}

#[derive(Debug, Default, Deserialize)]
struct HeartbeatBody {
    at: Option<u64>,
}

async fn heartbeat(State(engine): State<Engine>, Path(id): Path<String>, body: String) -> Response {
    let body: HeartbeatBody = if body.trim().is_empty() {
        HeartbeatBody::default()
    } else {
        match parse_json(&body) {
            Ok(b) => b,
            Err(r) => return r,
        }
    };
    let registry = engine.registry();
    let at = body.at.unwrap_or_else(|| registry.clock().now_ms());
    match registry.heartbeat(&id, at) {
        Ok(()) => Json(json!({ "device_id": id, "last_heartbeat": at })).into_response(),
        Err(e) => registry_error(e),
    }
}

async fn list_gateways(State(engine): State<Engine>) -> Json<BTreeMap<String, String>> {
    Json(engine.gateways())
}

#[derive(Debug, Deserialize)]
struct GatewayBody {
    url: String,
}

async fn set_gateway(State(engine): State<Engine>, Path(id): Path<String>, body: String) -> Response {
    let body: GatewayBody = match parse_json(&body) {
        Ok(b) => b,
        Err(r) => return r,
    };
    if url::Url::parse(&body.url).is_err() {
        return error(StatusCode::BAD_REQUEST, "BAD_REQUEST", format!("not a URL: {}", body.url));
    }
    engine.set_gateway(&id, &body.url);
    Json(json!({ "gateway_id": id, "url": body.url })).into_response()
}

#[derive(Debug, Deserialize)]
struct LogicQuery {
    name: Option<String>,
}

async fn put_logic(State(engine): State<Engine>, Query(q): Query<LogicQuery>, body: String) -> Response {
    match engine.put_logic(q.name.as_deref(), &body) {
        Ok(stored) => (
            StatusCode::CREATED,
            Json(LogicStored {
                name: stored.name.clone(),
                warnings: stored.report.warnings().cloned().collect(),
            }),
        )
            .into_response(),
        Err(LogicError::Parse(e)) => {
            let mut detail = serde_json::Map::new();
            detail.insert("line".into(), json!(e.line));
            detail.insert("column".into(), json!(e.column));
            error_with(StatusCode::UNPROCESSABLE_ENTITY, "PARSE_ERROR", e.message, detail)
        }
        Err(LogicError::Invalid(report)) => {
            let mut detail = serde_json::Map::new();
            detail.insert("findings".into(), json!(report.findings));
            let n = report.errors().count();
            error_with(
                StatusCode::UNPROCESSABLE_ENTITY,
                "INVALID_LOGIC",
                format!("{n} validation error(s)"),
                detail,
            )
        }
    }
}

async fn list_logics(State(engine): State<Engine>) -> Json<Vec<String>> {
    Json(engine.logic_names())
}

async fn get_logic(State(engine): State<Engine>, Path(name): Path<String>) -> Response {
    match engine.logic(&name) {
        Some(l) => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], l.source.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "UNKNOWN_LOGIC", name),
    }
}

async fn start_session(State(engine): State<Engine>, body: String) -> Response {
    let req: SessionRequest = match parse_json(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    match engine.start_session(&req.logic, req.params, req.user).await {
        Ok(session_id) => (StatusCode::CREATED, Json(SessionCreated { session_id })).into_response(),
        Err(StartError::UnknownLogic(name)) => error(StatusCode::NOT_FOUND, "UNKNOWN_LOGIC", name),
        Err(StartError::PlanFailed { session_id, source }) => {
            let mut detail = serde_json::Map::new();
            detail.insert("session_id".into(), json!(session_id));
            detail.insert("reason".into(), json!(source.to_string()));
            error_with(StatusCode::UNPROCESSABLE_ENTITY, "PLAN_FAILED", source.to_string(), detail)
        }
    }
}

async fn list_sessions(State(engine): State<Engine>) -> Json<Vec<String>> {
    Json(engine.session_ids())
}

async fn get_session(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.session(&id) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", id),
    }
}

fn sse_events(stream: LogStream) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(stream, |mut s| async move {
        let entry = s.next_entry().await?;
        let event = Event::default()
            .id(entry.seq.to_string())
            .json_data(&entry)
            .expect("log entries serialize");
        Some((Ok(event), s))
    })
}

/// Server-sent events: the full log so far, then each new entry as it is
/// appended. The stream ends after the terminal state change.
async fn stream_session(State(engine): State<Engine>, Path(id): Path<String>) -> Response {
    match engine.stream(&id) {
        Some(s) => Sse::new(sse_events(s))
            .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
            .into_response(),
        None => error(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", id),
    }
}

async fn post_event(State(engine): State<Engine>, body: String) -> Response {
    let event: DeviceEvent = match parse_json(&body) {
        Ok(e) => e,
        Err(r) => return r,
    };
    match engine.ingest_event(event) {
        Ok(delivered) => (StatusCode::ACCEPTED, Json(json!({ "delivered": delivered }))).into_response(),
        Err(e @ IngestError::UnknownDevice(_)) => error(StatusCode::NOT_FOUND, "UNKNOWN_DEVICE", e.to_string()),
    }
}
