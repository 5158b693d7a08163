use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use super::{Behavior, SimDeviceSpec, SimKind, SimProtocol};
use crate::capture::{Capture, Traffic};
use crate::gateway::{decode_command, encode_error, encode_ok, LINEPROTO};
use crate::registry::{AccessSpec, DeviceDescriptor};
use crate::runtime::wire::{parse_soap_request, soap_fault, RestActionBody, RestReply, SOAP_OK};

pub const SOAP_PATH: &str = "/soap";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub verb: String,
    pub args: BTreeMap<String, String>,
    pub correlation: Option<String>,
}

/// What a simulated device has been told to do so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub id: String,
    pub kind: SimKind,
    pub protocol: SimProtocol,
    pub behavior: Behavior,
    /// Displays: the text currently shown.
    pub last_text: Option<String>,
    /// Speakers: every announcement, oldest first.
    pub announcements: Vec<String>,
    /// Cameras: whether `monitor` has been requested.
    pub monitoring: bool,
    pub actions: Vec<ActionRecord>,
}

type DeviceReply = Result<(), (String, String)>;

#[derive(Debug)]
pub(crate) struct SimDevice {
    pub spec: SimDeviceSpec,
    pub descriptor: DeviceDescriptor,
    state: Mutex<DeviceState>,
    native_peers: Mutex<Vec<mpsc::UnboundedSender<String>>>,
    capture: Capture,
}

impl SimDevice {
    pub fn state(&self) -> DeviceState {
        self.state.lock().clone()
    }

    fn apply(&self, verb: &str, args: BTreeMap<String, String>, correlation: Option<String>) -> DeviceReply {
        if self.spec.behavior == Behavior::Busy {
            return Err(("BUSY".into(), "device busy".into()));
        }
        let mut st = self.state.lock();
        match (self.spec.kind, verb) {
            (SimKind::Display, "show") => st.last_text = Some(args.get("text").cloned().unwrap_or_default()),
            (SimKind::Display, "clear") => st.last_text = None,
            (SimKind::Speaker, "announce") => st.announcements.push(args.get("text").cloned().unwrap_or_default()),
            (SimKind::Camera, "monitor") => st.monitoring = true,
            (SimKind::Echo, _) => {}
            (kind, verb) => {
                return Err((
                    "UNSUPPORTED_VERB".into(),
                    format!("{kind:?} does not support `{verb}`").to_lowercase(),
                ))
            }
        }
        st.actions.push(ActionRecord {
            verb: verb.to_string(),
            args,
            correlation,
        });
        Ok(())
    }

    /// Writes a line to every open native connection; returns how many got it.
    pub fn emit_native(&self, line: &str) -> usize {
        let mut peers = self.native_peers.lock();
        peers.retain(|p| p.send(line.to_string()).is_ok());
        peers.len()
    }

    fn record(&self, correlation: Option<String>, traffic: Traffic) {
        self.capture.record(&self.spec.id, correlation, traffic);
    }
}

/// Binds the device's listener. Dead devices keep only the address.
pub(crate) async fn bind(spec: &SimDeviceSpec) -> std::io::Result<(SocketAddr, Option<TcpListener>)> {
    let listener = TcpListener::bind(&spec.listen).await?;
    let addr = listener.local_addr()?;
    if spec.behavior == Behavior::Dead {
        drop(listener);
        return Ok((addr, None));
    }
    Ok((addr, Some(listener)))
}

pub(crate) fn descriptor_for(spec: &SimDeviceSpec, addr: SocketAddr) -> DeviceDescriptor {
    let access = match spec.protocol {
        SimProtocol::Rest => AccessSpec::rest(format!("http://{addr}")),
        SimProtocol::Soap => AccessSpec::soap(format!("http://{addr}{SOAP_PATH}")),
        SimProtocol::Native => AccessSpec::native(spec.gateway_id.clone(), LINEPROTO, addr.to_string()),
    };
    DeviceDescriptor {
        id: spec.id.clone(),
        capabilities: [spec.kind.capability().to_string()].into(),
        location: spec.location.clone(),
        access,
        last_heartbeat: 0,
        extra: [
            ("sim_kind".to_string(), format!("{:?}", spec.kind).to_lowercase()),
            ("sim_protocol".to_string(), format!("{:?}", spec.protocol).to_lowercase()),
        ]
        .into(),
    }
}

pub(crate) fn new_device(spec: SimDeviceSpec, addr: SocketAddr, capture: Capture) -> Arc<SimDevice> {
    let descriptor = descriptor_for(&spec, addr);
    let state = DeviceState {
        id: spec.id.clone(),
        kind: spec.kind,
        protocol: spec.protocol,
        behavior: spec.behavior,
        last_text: None,
        announcements: Vec::new(),
        monitoring: false,
        actions: Vec::new(),
    };
    Arc::new(SimDevice {
        spec,
        descriptor,
        state: Mutex::new(state),
        native_peers: Mutex::new(Vec::new()),
        capture,
    })
}

pub(crate) fn serve(device: Arc<SimDevice>, listener: TcpListener) -> JoinHandle<()> {
    match device.spec.protocol {
        SimProtocol::Rest => {
            let app = Router::new()
                .route("/actions/{verb}", post(rest_action))
                .with_state(device);
            tokio::spawn(async move {
                let _ = axum::serve(listener, app).await;
            })
        }
        SimProtocol::Soap => {
            let app = Router::new()
                .route(SOAP_PATH, post(soap_action))
                .with_state(device);
            tokio::spawn(async move {
                let _ = axum::serve(listener, app).await;
            })
        }
        SimProtocol::Native => tokio::spawn(native_accept(device, listener)),
    }
}

async fn rest_action(State(dev): State<Arc<SimDevice>>, Path(verb): Path<String>, body: String) -> Response {
    let parsed: Result<RestActionBody, _> = serde_json::from_str(&body);
    let correlation = parsed.as_ref().ok().map(|b| b.correlation.clone());
    dev.record(
        correlation.clone(),
        Traffic::Http {
            method: "POST".into(),
            path: format!("/actions/{verb}"),
            body,
        },
    );
    let body = match parsed {
        Ok(b) => b,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(RestReply::error("BAD_REQUEST", e.to_string()))).into_response(),
    };
    let args = body.args.into_iter().map(|(k, v)| (k, v.canonical())).collect();
    match dev.apply(&verb, args, correlation) {
        Ok(()) => Json(RestReply::ok()).into_response(),
        Err((code, message)) => Json(RestReply::error(code, message)).into_response(),
    }
}

async fn soap_action(State(dev): State<Arc<SimDevice>>, body: String) -> Response {
    let parsed = parse_soap_request(&body);
    let correlation = parsed.as_ref().ok().map(|r| r.correlation.clone());
    dev.record(
        correlation.clone(),
        Traffic::Http {
            method: "POST".into(),
            path: SOAP_PATH.into(),
            body,
        },
    );
    let xml = match parsed {
        Ok(req) => match dev.apply(&req.verb, req.args, correlation) {
            Ok(()) => SOAP_OK.to_string(),
            Err((code, message)) => soap_fault(&code, &message),
        },
        Err(e) => {
            let fault = soap_fault("BAD_REQUEST", &e.to_string());
            return (StatusCode::BAD_REQUEST, [(header::CONTENT_TYPE, "text/xml")], fault).into_response();
        }
    };
    ([(header::CONTENT_TYPE, "text/xml")], xml).into_response()
}

async fn native_accept(device: Arc<SimDevice>, listener: TcpListener) {
    while let Ok((stream, _)) = listener.accept().await {
        tokio::spawn(native_conn(device.clone(), stream));
    }
}

async fn native_conn(device: Arc<SimDevice>, stream: TcpStream) {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    device.native_peers.lock().push(tx.clone());
    let writer = tokio::spawn(async move {
        while let Some(line) = rx.recv().await {
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        device.record(None, Traffic::NativeLine { line: format!("{line}\n") });
        let reply = match decode_command(&line) {
            Ok((verb, args)) => match device.apply(&verb, args, None) {
                Ok(()) => encode_ok().into_string(),
                Err((code, message)) => error_line(&code, &message),
            },
            Err(e) => error_line("BAD_COMMAND", &e.to_string()),
        };
        if tx.send(reply).is_err() {
            break;
        }
    }
    drop(tx);
    writer.abort();
}

fn error_line(code: &str, message: &str) -> String {
    let flat = message.replace(['\r', '\n'], " ");
    encode_error(code, &flat)
        .map(|l| l.into_string())
        .unwrap_or_else(|_| "ERR DEVICE_ERROR unencodable reply\n".to_string())
}
