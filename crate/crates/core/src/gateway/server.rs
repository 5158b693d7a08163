use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::codec::{decode_native, encode_native, NativeMessage, LINEPROTO};
use super::relay::EventRelay;
use super::{DispatchEnvelope, GatewayConfig, GatewayErrorBody, GatewayReply};
use crate::capture::{Capture, Traffic};
use crate::runtime::DispatchOutcome;

type Pending = oneshot::Sender<NativeMessage>;

/// One TCP connection to a native device. Commands are serialized: at most
/// one is outstanding, and its reply is the next non-event line.
#[derive(Debug)]
struct NativeConn {
    writer: tokio::sync::Mutex<OwnedWriteHalf>,
    pending: Mutex<Option<Pending>>,
    device_id: Mutex<String>,
    alive: AtomicBool,
}

impl NativeConn {
    async fn command(&self, line: &[u8], timeout: Duration) -> DispatchOutcome {
        let mut writer = self.writer.lock().await;
        if !self.alive.load(Ordering::SeqCst) {
            return DispatchOutcome::TransportError {
                message: "connection closed".into(),
            };
        }
        let (tx, rx) = oneshot::channel();
        *self.pending.lock() = Some(tx);
        if let Err(e) = writer.write_all(line).await {
            self.alive.store(false, Ordering::SeqCst);
            return DispatchOutcome::TransportError {
                message: e.to_string(),
            };
        }
        match tokio::time::timeout(timeout, rx).await {
            Ok(Ok(NativeMessage::Ok)) => DispatchOutcome::Ok,
            Ok(Ok(NativeMessage::DeviceError { code, message })) => DispatchOutcome::DeviceError { code, message },
            Ok(Ok(NativeMessage::Event { .. })) => unreachable!("events are never routed to the pending slot"),
            Ok(Err(_)) => DispatchOutcome::TransportError {
                message: "connection closed while awaiting reply".into(),
            },
            Err(_) => {
                // a late reply would be misattributed to the next command
                self.alive.store(false, Ordering::SeqCst);
                let _ = writer.shutdown().await;
                DispatchOutcome::Timeout
            }
        }
    }
}

#[derive(Debug)]
pub struct Gateway {
    config: GatewayConfig,
    pool: Mutex<HashMap<String, Arc<NativeConn>>>,
    relay: Arc<EventRelay>,
    capture: Option<Capture>,
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchRejection {
    #[error("UNKNOWN_DRIVER({0})")]
    UnknownDriver(String),
    #[error("{0}")]
    Encoding(#[from] super::CodecError),
}

impl Gateway {
    pub fn new(config: GatewayConfig, capture: Option<Capture>) -> Self {
        let relay = Arc::new(EventRelay::new(config.server_events_url.clone()));
        Self {
            config,
            pool: Mutex::new(HashMap::new()),
            relay,
            capture,
        }
    }

    pub fn id(&self) -> &str {
        &self.config.gateway_id
    }

    pub fn relay(&self) -> &EventRelay {
        &self.relay
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.timeout_ms)
    }

    /// Translates one envelope to the native protocol and awaits the device's
    /// reply. Device-leg failures are reported in the reply, not as errors.
    pub async fn handle_dispatch(&self, env: &DispatchEnvelope) -> Result<GatewayReply, DispatchRejection> {
        if env.driver != LINEPROTO || !self.config.drivers.iter().any(|d| d == &env.driver) {
            return Err(DispatchRejection::UnknownDriver(env.driver.clone()));
        }
        let line = encode_native(env)?;
        let outcome = match self.connection(env).await {
            Ok(conn) => {
                let outcome = conn.command(line.as_bytes(), self.timeout()).await;
                if !conn.alive.load(Ordering::SeqCst) {
                    self.evict(&env.native_address, &conn);
                }
                outcome
            }
            Err(o) => o,
        };
        Ok(GatewayReply::new(&env.correlation_id, &outcome))
    }

    fn evict(&self, addr: &str, conn: &Arc<NativeConn>) {
        let mut pool = self.pool.lock();
        if pool.get(addr).is_some_and(|c| Arc::ptr_eq(c, conn)) {
            pool.remove(addr);
        }
    }

    async fn connection(&self, env: &DispatchEnvelope) -> Result<Arc<NativeConn>, DispatchOutcome> {
        if let Some(conn) = self.pool.lock().get(&env.native_address).cloned() {
            if conn.alive.load(Ordering::SeqCst) {
                *conn.device_id.lock() = env.device_id.clone();
                return Ok(conn);
            }
        }
        let stream = match tokio::time::timeout(self.timeout(), TcpStream::connect(&env.native_address)).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                return Err(DispatchOutcome::TransportError {
                    message: format!("connect {}: {e}", env.native_address),
                })
            }
            Err(_) => return Err(DispatchOutcome::Timeout),
        };
        let (read, write) = stream.into_split();
        let conn = Arc::new(NativeConn {
            writer: tokio::sync::Mutex::new(write),
            pending: Mutex::new(None),
            device_id: Mutex::new(env.device_id.clone()),
            alive: AtomicBool::new(true),
        });
        let (events_tx, events_rx) = mpsc::unbounded_channel();
        tokio::spawn(relay_loop(self.relay.clone(), events_rx));
        tokio::spawn(read_loop(conn.clone(), read, events_tx));
        let mut pool = self.pool.lock();
        // another dispatch may have connected concurrently; keep the first
        if let Some(existing) = pool.get(&env.native_address) {
            if existing.alive.load(Ordering::SeqCst) {
                return Ok(existing.clone());
            }
        }
        pool.insert(env.native_address.clone(), conn.clone());
        Ok(conn)
    }
}

type RelayItem = (String, String, BTreeMap<String, String>);

async fn read_loop(conn: Arc<NativeConn>, read: tokio::net::tcp::OwnedReadHalf, events: mpsc::UnboundedSender<RelayItem>) {
    let mut lines = BufReader::new(read).lines();
    loop {
        match lines.next_line().await {
            Ok(Some(line)) => match decode_native(&line) {
                Ok(NativeMessage::Event { event_type, payload }) => {
                    let device_id = conn.device_id.lock().clone();
                    let _ = events.send((device_id, event_type, payload));
                }
                Ok(reply) => {
                    if let Some(tx) = conn.pending.lock().take() {
                        let _ = tx.send(reply);
                    }
                }
                Err(e) => {
                    tracing::warn!(error = %e, "undecodable line from native device");
                    if let Some(tx) = conn.pending.lock().take() {
                        let _ = tx.send(NativeMessage::DeviceError {
                            code: "MALFORMED_LINE".into(),
                            message: e.to_string(),
                        });
                    }
                }
            },
            Ok(None) | Err(_) => break,
        }
    }
    conn.alive.store(false, Ordering::SeqCst);
    conn.pending.lock().take();
}

async fn relay_loop(relay: Arc<EventRelay>, mut events: mpsc::UnboundedReceiver<RelayItem>) {
    while let Some((device_id, event_type, payload)) = events.recv().await {
        relay.relay(&device_id, &event_type, &payload).await;
    }
}

fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/dispatch", post(dispatch))
        .route("/healthz", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/stats", get(stats))
        .with_state(gateway)
}

fn rejection(status: StatusCode, error: &str, message: String) -> Response {
    (
        status,
        Json(GatewayErrorBody {
            error: error.to_string(),
            message,
        }),
    )
        .into_response()
}

async fn dispatch(State(gw): State<Arc<Gateway>>, body: String) -> Response {
    let env: DispatchEnvelope = match serde_json::from_str(&body) {
        Ok(e) => e,
        Err(e) => return rejection(StatusCode::BAD_REQUEST, "BAD_ENVELOPE", e.to_string()),
    };
    if let Some(c) = &gw.capture {
        c.record(
            gw.id(),
            Some(env.correlation_id.clone()),
            Traffic::Http {
                method: "POST".into(),
                path: "/dispatch".into(),
                body,
            },
        );
    }
    match gw.handle_dispatch(&env).await {
        Ok(reply) => Json(reply).into_response(),
        Err(e @ DispatchRejection::UnknownDriver(_)) => {
            rejection(StatusCode::BAD_REQUEST, "UNKNOWN_DRIVER", e.to_string())
        }
        Err(DispatchRejection::Encoding(e)) => rejection(StatusCode::BAD_REQUEST, "ENCODING_ERROR", e.to_string()),
    }
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Json<super::RelayStats> {
    Json(gw.relay.stats())
}

/// A running gateway; stops when dropped or on [`GatewayHandle::shutdown`].
#[derive(Debug)]
pub struct GatewayHandle {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl GatewayHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Resolves when the server stops (e.g. after ctrl-c handling elsewhere).
    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

pub async fn spawn_gateway(config: GatewayConfig, capture: Option<Capture>) -> std::io::Result<GatewayHandle> {
    let listener = TcpListener::bind(&config.listen).await?;
    let addr = listener.local_addr()?;
    let gateway = Arc::new(Gateway::new(config, capture));
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let app = router(gateway.clone());
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
    });
    Ok(GatewayHandle {
        addr,
        gateway,
        stop: Some(stop_tx),
        task,
    })
}
