//! Session execution: request handlers, event subscriptions, guard
//! evaluation, dispatch with retry, and failover by re-planning.

mod dispatch;
mod engine;
mod session;
mod value;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::planner::DispatchRoute;

pub use dispatch::{ArgNames, Dispatcher, DEFAULT_DISPATCH_TIMEOUT_MS, DEFAULT_MAX_ATTEMPTS};
pub use engine::{
    default_vocabulary, Engine, EngineConfig, IngestError, LogicError, StartError, StoredLogic,
    DEFAULT_SESSION_IDLE_TIMEOUT_MS,
};
pub use session::{LogEntry, LogKind, LogStream, SessionState, SessionView, Subscription};
pub use value::{evaluate, evaluate_condition, EvalError, Tables, Value};

pub(crate) use dispatch::{error_chain, http_client};

/// A role/verb/args action with every argument already evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractInstruction {
    pub session_id: String,
    pub correlation_id: String,
    pub role: String,
    pub verb: String,
    pub args: Vec<Value>,
    pub issued_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceEvent {
    pub device_id: String,
    pub event_type: String,
    #[serde(default)]
    pub payload: BTreeMap<String, String>,
    #[serde(default)]
    pub received_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DispatchOutcome {
    Ok,
    DeviceError { code: String, message: String },
    Timeout,
    TransportError { message: String },
}

impl DispatchOutcome {
    /// Timeouts and transport errors: the only outcomes that are retried
    /// and that trigger failover.
    pub fn is_transport_failure(&self) -> bool {
        matches!(
            self,
            DispatchOutcome::Timeout | DispatchOutcome::TransportError { .. }
        )
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, DispatchOutcome::Ok)
    }

    pub fn name(&self) -> &'static str {
        match self {
            DispatchOutcome::Ok => "ok",
            DispatchOutcome::DeviceError { .. } => "device_error",
            DispatchOutcome::Timeout => "timeout",
            DispatchOutcome::TransportError { .. } => "transport_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub correlation_id: String,
    pub device_id: String,
    #[serde(flatten)]
    pub outcome: DispatchOutcome,
    pub attempts: u32,
    pub route_used: DispatchRoute,
}
