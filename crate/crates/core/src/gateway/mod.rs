//! Protocol gateway: accepts abstract-instruction envelopes over HTTP,
//! translates them to a device-native line protocol, and relays native
//! device events back to the coordination server.

pub mod codec;
mod relay;
mod server;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::runtime::DispatchOutcome;

pub use codec::{
    decode_command, decode_native, encode_command, encode_error, encode_event, encode_native,
    encode_ok, CodecError, NativeLine, NativeMessage, LINEPROTO,
};
pub use relay::{EventRelay, RelayStats};
pub use server::{spawn_gateway, Gateway, GatewayHandle};

pub const DEFAULT_GATEWAY_TIMEOUT_MS: u64 = 1_500;

/// Body of `POST /dispatch`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchEnvelope {
    pub device_id: String,
    pub driver: String,
    pub native_address: String,
    pub verb: String,
    pub args: BTreeMap<String, String>,
    #[serde(rename = "correlation")]
    pub correlation_id: String,
    #[serde(rename = "session")]
    pub session_id: String,
}

/// Successful `POST /dispatch` response; the device leg may still have failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayReply {
    pub correlation: String,
    pub outcome: String,
    pub code: Option<String>,
    pub message: Option<String>,
}

impl GatewayReply {
    pub fn new(correlation: &str, outcome: &DispatchOutcome) -> Self {
        let (code, message) = match outcome {
            DispatchOutcome::Ok | DispatchOutcome::Timeout => (None, None),
            DispatchOutcome::DeviceError { code, message } => (Some(code.clone()), Some(message.clone())),
            DispatchOutcome::TransportError { message } => (None, Some(message.clone())),
        };
        Self {
            correlation: correlation.to_string(),
            outcome: outcome.name().to_string(),
            code,
            message,
        }
    }

    pub fn into_outcome(self) -> DispatchOutcome {
        let message = self.message.unwrap_or_default();
        match self.outcome.as_str() {
            "ok" => DispatchOutcome::Ok,
            "device_error" => DispatchOutcome::DeviceError {
                code: self.code.unwrap_or_default(),
                message,
            },
            "timeout" => DispatchOutcome::Timeout,
            "transport_error" => DispatchOutcome::TransportError { message },
            other => DispatchOutcome::DeviceError {
                code: "BAD_REPLY".into(),
                message: format!("unknown outcome `{other}`"),
            },
        }
    }
}

/// Error body for rejected envelopes (HTTP 400).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayErrorBody {
    pub error: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub gateway_id: String,
    pub listen: String,
    /// Where decoded device events are POSTed (the server's `/events`).
    #[serde(default)]
    pub server_events_url: Option<String>,
    pub drivers: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_GATEWAY_TIMEOUT_MS
}

impl GatewayConfig {
    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
