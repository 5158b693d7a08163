use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tower_http::cors::CorsLayer;

use super::devices::{self, DeviceState, SimDevice};
use super::{
    GroupState, Heading, ScenarioSpec, ScriptAction, SimError, SimKind, SimProtocol, DEFAULT_HEARTBEAT_MS,
    DEFAULT_SENSING_RADIUS_M,
};
use crate::capture::{Capture, TrafficEntry};
use crate::gateway::{encode_event, spawn_gateway, GatewayConfig, GatewayHandle, DEFAULT_GATEWAY_TIMEOUT_MS, LINEPROTO};
use crate::registry::DeviceDescriptor;
use crate::runtime::{error_chain, http_client, DeviceEvent};

pub const MOVEMENT_EVENT: &str = "movement";

#[derive(Debug, Clone)]
pub struct WorldOptions {
    /// Coordination server base URL. Without one, devices neither register
    /// nor post events, and hosted gateways have nowhere to relay.
    pub server_url: Option<String>,
    pub sensing_radius_m: f64,
    pub heartbeat_ms: u64,
    /// Run a ticker at the group's `tick_ms`.
    pub auto_tick: bool,
    /// Serve the controller API (`/sim/...`) on this address.
    pub controller_listen: Option<String>,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            server_url: None,
            sensing_radius_m: DEFAULT_SENSING_RADIUS_M,
            heartbeat_ms: DEFAULT_HEARTBEAT_MS,
            auto_tick: false,
            controller_listen: None,
        }
    }
}

#[derive(Debug)]
struct WorldInner {
    devices: BTreeMap<String, Arc<SimDevice>>,
    group: Mutex<GroupState>,
    ticks: AtomicU64,
    tick_lock: tokio::sync::Mutex<()>,
    capture: Capture,
    client: reqwest::Client,
    server_url: Option<String>,
    radius: f64,
}

impl WorldInner {
    async fn tick(&self) -> Vec<DeviceEvent> {
        let _serial = self.tick_lock.lock().await;
        let (x, y, heading) = {
            let mut g = self.group.lock();
            let (dx, dy) = g.heading.step();
            g.x += dx;
            g.y += dy;
            (g.x, g.y, g.heading)
        };
        self.ticks.fetch_add(1, Ordering::SeqCst);
        let payload: BTreeMap<String, String> = [("direction".to_string(), heading.to_string())].into();
        let mut events = Vec::new();
        for dev in self.devices.values() {
            let spec = &dev.spec;
            if spec.kind != SimKind::Camera || spec.behavior == super::Behavior::Dead {
                continue;
            }
            if (spec.location.x - x).hypot(spec.location.y - y) > self.radius {
                continue;
            }
            let event = DeviceEvent {
                device_id: spec.id.clone(),
                event_type: MOVEMENT_EVENT.into(),
                payload: payload.clone(),
                received_at: 0,
            };
            match spec.protocol {
                SimProtocol::Rest | SimProtocol::Soap => self.post_event(&event).await,
                SimProtocol::Native => {
                    let line = encode_event(MOVEMENT_EVENT, &payload).expect("movement events are encodable");
                    dev.emit_native(line.as_str());
                }
            }
            events.push(event);
        }
        events
    }

    async fn post_event(&self, event: &DeviceEvent) {
        let Some(server) = &self.server_url else { return };
        let res = self
            .client
            .post(format!("{server}/events"))
            .json(event)
            .timeout(Duration::from_secs(2))
            .send()
            .await;
        match res {
            Ok(r) if r.status().is_success() => {}
            Ok(r) => tracing::debug!(device = %event.device_id, status = %r.status(), "event not accepted"),
            Err(e) => tracing::warn!(device = %event.device_id, error = %error_chain(&e), "event post failed"),
        }
    }

    fn steer(&self, heading: Heading) {
        self.group.lock().heading = heading;
    }

    async fn heartbeat_all(&self) {
        let Some(server) = &self.server_url else { return };
        for id in self.devices.keys() {
            let res = self
                .client
                .post(format!("{server}/devices/{id}/heartbeat"))
                .json(&serde_json::json!({}))
                .timeout(Duration::from_secs(2))
                .send()
                .await;
            if let Err(e) = res {
                tracing::warn!(device = %id, error = %error_chain(&e), "heartbeat failed");
            }
        }
    }
}

/// A running simulated world. Dropping it stops every device server.
#[derive(Debug)]
pub struct World {
    inner: Arc<WorldInner>,
    gateways: BTreeMap<String, GatewayHandle>,
    tasks: Vec<JoinHandle<()>>,
    controller: Option<SocketAddr>,
    script: Vec<ScriptAction>,
}

impl World {
    pub fn capture(&self) -> Vec<TrafficEntry> {
        self.inner.capture.entries()
    }

    pub fn capture_handle(&self) -> &Capture {
        &self.inner.capture
    }

    pub fn steer(&self, heading: Heading) {
        self.inner.steer(heading);
    }

    pub fn group(&self) -> GroupState {
        *self.inner.group.lock()
    }

    pub fn ticks(&self) -> u64 {
        self.inner.ticks.load(Ordering::SeqCst)
    }

    /// Advances the group one step and emits movement events from every
    /// live camera in range.
    pub async fn tick(&self) -> Vec<DeviceEvent> {
        self.inner.tick().await
    }

    pub fn device_state(&self, id: &str) -> Option<DeviceState> {
        self.inner.devices.get(id).map(|d| d.state())
    }

    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.inner.devices.values().map(|d| d.descriptor.clone()).collect()
    }

    pub fn descriptor(&self, id: &str) -> Option<DeviceDescriptor> {
        self.inner.devices.get(id).map(|d| d.descriptor.clone())
    }

    pub fn gateway_urls(&self) -> BTreeMap<String, String> {
        self.gateways.iter().map(|(id, h)| (id.clone(), h.url())).collect()
    }

    pub fn gateway(&self, id: &str) -> Option<&GatewayHandle> {
        self.gateways.get(id)
    }

    pub fn controller_url(&self) -> Option<String> {
        self.controller.map(|a| format!("http://{a}"))
    }

    pub fn script(&self) -> &[ScriptAction] {
        &self.script
    }

    pub async fn heartbeat(&self) {
        self.inner.heartbeat_all().await;
    }

    pub async fn shutdown(mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        for (_, gw) in std::mem::take(&mut self.gateways) {
            gw.shutdown().await;
        }
    }
}

impl Drop for World {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn explicit_port(listen: &str) -> Option<&str> {
    listen.rsplit_once(':').map(|(_, p)| p).filter(|p| *p != "0")
}

async fn bind_or_port_error(listen: &str) -> Result<TcpListener, SimError> {
    TcpListener::bind(listen).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => SimError::PortInUse(listen.to_string()),
        _ => SimError::Io(format!("bind {listen}: {e}")),
    })
}

/// Starts every device server and gateway of `spec`, then registers the
/// devices (and gateway URLs) with the server, if one is configured.
pub async fn spawn_world(spec: &ScenarioSpec, opts: WorldOptions) -> Result<World, SimError> {
    let mut seen = BTreeSet::new();
    let listens = spec
        .devices
        .iter()
        .map(|d| d.listen.as_str())
        .chain(spec.gateways.iter().map(|g| g.listen.as_str()))
        .chain(opts.controller_listen.as_deref());
    for listen in listens {
        if let Some(port) = explicit_port(listen) {
            if !seen.insert(port.to_string()) {
                return Err(SimError::PortInUse(listen.to_string()));
            }
        }
    }
    let mut ids = BTreeSet::new();
    for d in &spec.devices {
        if !ids.insert(d.id.as_str()) {
            return Err(SimError::InvalidScenario(format!("duplicate device id {}", d.id)));
        }
    }

    let server_url = opts.server_url.as_ref().map(|s| s.trim_end_matches('/').to_string());
    let capture = Capture::new();
    let mut tasks = Vec::new();
    let mut gateways = BTreeMap::new();
    for g in &spec.gateways {
        let config = GatewayConfig {
            gateway_id: g.gateway_id.clone(),
            listen: g.listen.clone(),
            server_events_url: server_url.as_ref().map(|s| format!("{s}/events")),
            drivers: vec![LINEPROTO.to_string()],
            timeout_ms: DEFAULT_GATEWAY_TIMEOUT_MS,
        };
        let handle = spawn_gateway(config, Some(capture.clone()))
            .await
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AddrInUse => SimError::PortInUse(g.listen.clone()),
                _ => SimError::Io(format!("gateway {}: {e}", g.gateway_id)),
            })?;
        gateways.insert(g.gateway_id.clone(), handle);
    }

    let mut devices = BTreeMap::new();
    for d in &spec.devices {
        let (addr, listener) = devices::bind(d).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => SimError::PortInUse(d.listen.clone()),
            _ => SimError::Io(format!("device {}: {e}", d.id)),
        })?;
        let dev = devices::new_device(d.clone(), addr, capture.clone());
        if let Some(listener) = listener {
            tasks.push(devices::serve(dev.clone(), listener));
        }
        devices.insert(d.id.clone(), dev);
    }

    let inner = Arc::new(WorldInner {
        devices,
        group: Mutex::new(spec.group),
        ticks: AtomicU64::new(0),
        tick_lock: tokio::sync::Mutex::new(()),
        capture,
        client: http_client(),
        server_url,
        radius: opts.sensing_radius_m,
    });

    if let Some(server) = &inner.server_url {
        for (id, gw) in &gateways {
            let res = inner
                .client
                .put(format!("{server}/gateways/{id}"))
                .json(&serde_json::json!({ "url": gw.url() }))
                .send()
                .await;
            check_registration(id, res).await?;
        }
        for dev in inner.devices.values() {
            let res = inner
                .client
                .post(format!("{server}/devices"))
                .json(&dev.descriptor)
                .send()
                .await;
            check_registration(&dev.spec.id, res).await?;
        }
        let hb = inner.clone();
        let period = Duration::from_millis(opts.heartbeat_ms.max(1));
        tasks.push(tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.tick().await;
            loop {
                interval.tick().await;
                hb.heartbeat_all().await;
            }
        }));
    }

    if opts.auto_tick {
        let ticker = inner.clone();
        let period = Duration::from_millis(spec.group.tick_ms.max(1));
        tasks.push(tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.tick().await;
            loop {
                interval.tick().await;
                ticker.tick().await;
            }
        }));
    }

    let mut controller = None;
    if let Some(listen) = &opts.controller_listen {
        let listener = bind_or_port_error(listen).await?;
        controller = Some(listener.local_addr().map_err(|e| SimError::Io(e.to_string()))?);
        let app = controller_router(inner.clone());
        tasks.push(tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        }));
    }

    Ok(World {
        inner,
        gateways,
        tasks,
        controller,
        script: spec.script.clone(),
    })
}

async fn check_registration(id: &str, res: reqwest::Result<reqwest::Response>) -> Result<(), SimError> {
    let failed = |message: String| SimError::RegistrationFailed {
        device_id: id.to_string(),
        message,
    };
    match res {
        Ok(r) if r.status().is_success() => Ok(()),
        Ok(r) => {
            let status = r.status();
            let body = r.text().await.unwrap_or_default();
            Err(failed(format!("HTTP {status}: {body}")))
        }
        Err(e) => Err(failed(error_chain(&e))),
    }
}

/// Plays the scenario script against `server_url`: at each tick the actions
/// scheduled for it run, then the group advances; ticks are paced at the
/// group's `tick_ms`. Runs `trailing_ticks` more after the last action.
/// Returns the ids of the sessions it started, in script order.
pub async fn run_script(world: &World, server_url: &str, trailing_ticks: u64) -> Result<Vec<String>, SimError> {
    let mut actions: Vec<&ScriptAction> = world.script.iter().collect();
    actions.sort_by_key(|a| a.at_tick());
    let last = actions.last().map(|a| a.at_tick()).unwrap_or(0);
    let period = Duration::from_millis(world.group().tick_ms);
    let client = http_client();
    let server = server_url.trim_end_matches('/');
    let mut sessions = Vec::new();
    let mut next = actions.into_iter().peekable();
    for t in 0..=last + trailing_ticks {
        while let Some(action) = next.next_if(|a| a.at_tick() == t) {
            match action {
                ScriptAction::Steer { heading, .. } => world.steer(*heading),
                ScriptAction::Request {
                    logic, params, user, ..
                } => {
                    let body = serde_json::json!({ "logic": logic, "params": params, "user": user });
                    let resp = client
                        .post(format!("{server}/sessions"))
                        .json(&body)
                        .send()
                        .await
                        .map_err(|e| SimError::Io(error_chain(&e)))?;
                    let status = resp.status();
                    let value: serde_json::Value = resp.json().await.unwrap_or_default();
                    match value.get("session_id").and_then(|s| s.as_str()) {
                        Some(id) if status == StatusCode::CREATED => sessions.push(id.to_string()),
                        _ => return Err(SimError::Io(format!("session request rejected: HTTP {status} {value}"))),
                    }
                }
            }
        }
        tokio::time::sleep(period).await;
        world.tick().await;
    }
    Ok(sessions)
}

#[derive(Deserialize)]
struct SteerBody {
    heading: String,
}

fn sim_error(status: StatusCode, e: SimError) -> Response {
    let code = match &e {
        SimError::InvalidHeading(_) => "INVALID_HEADING",
        SimError::UnknownDevice(_) => "UNKNOWN_SIM_DEVICE",
        _ => "SIM_ERROR",
    };
    (status, Json(serde_json::json!({ "error": code, "message": e.to_string() }))).into_response()
}

fn controller_router(inner: Arc<WorldInner>) -> Router {
    Router::new()
        .route("/sim/steer", post(steer))
        .route("/sim/tick", post(tick))
        .route("/sim/group", get(group))
        .route("/sim/capture", get(capture))
        .route("/sim/devices", get(device_list))
        .route("/sim/devices/{id}/state", get(device_state))
        .layer(CorsLayer::permissive())
        .with_state(inner)
}

async fn steer(State(w): State<Arc<WorldInner>>, Json(body): Json<SteerBody>) -> Response {
    match body.heading.parse::<Heading>() {
        Ok(h) => {
            w.steer(h);
            Json(*w.group.lock()).into_response()
        }
        Err(e) => sim_error(StatusCode::BAD_REQUEST, e),
    }
}

async fn tick(State(w): State<Arc<WorldInner>>) -> Json<Vec<DeviceEvent>> {
    Json(w.tick().await)
}

async fn group(State(w): State<Arc<WorldInner>>) -> Json<GroupState> {
    Json(*w.group.lock())
}

async fn capture(State(w): State<Arc<WorldInner>>) -> Json<Vec<TrafficEntry>> {
    Json(w.capture.entries())
}

async fn device_list(State(w): State<Arc<WorldInner>>) -> Json<Vec<DeviceState>> {
    Json(w.devices.values().map(|d| d.state()).collect())
}

async fn device_state(State(w): State<Arc<WorldInner>>, Path(id): Path<String>) -> Response {
    match w.devices.get(&id) {
        Some(d) => Json(d.state()).into_response(),
        None => sim_error(StatusCode::NOT_FOUND, SimError::UnknownDevice(id)),
    }
}
