use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};

use super::value::Value;
use super::{AbstractInstruction, DeviceEvent, DispatchResult};
use crate::clock::{Millis, SharedClock};
use crate::dsl::CoordinationLogic;
use crate::planner::{BindingPlan, DispatchRoute, PlanContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Running,
    Completed,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        self != SessionState::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogKind {
    Instruction(AbstractInstruction),
    Event(DeviceEvent),
    DispatchResult(DispatchResult),
    StateChange {
        state: SessionState,
        reason: Option<String>,
    },
    /// A handler stopped early (table miss, missing event field, ...).
    HandlerError {
        handler: usize,
        code: String,
        message: String,
    },
    /// A role moved to another device after failover.
    Rebind {
        role: String,
        from: String,
        to: String,
        route: DispatchRoute,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub at: Millis,
    #[serde(flatten)]
    pub kind: LogKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subscription {
    pub event_type: String,
    pub device_id: String,
    pub role: String,
}

/// Read-only view of a session for the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub logic_name: String,
    pub state: SessionState,
    pub reason: Option<String>,
    pub plan: Option<BindingPlan>,
    pub context: PlanContext,
    pub params: BTreeMap<String, Value>,
    pub subscriptions: Vec<Subscription>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug)]
pub(crate) struct SessionData {
    pub logic: Arc<CoordinationLogic>,
    pub plan: Option<BindingPlan>,
    pub ctx: PlanContext,
    pub params: BTreeMap<String, Value>,
    pub state: SessionState,
    pub reason: Option<String>,
    pub subscriptions: Vec<Subscription>,
    pub log: Vec<LogEntry>,
    pub next_correlation: u64,
}

#[derive(Debug)]
pub(crate) struct SessionHandle {
    pub id: String,
    pub data: Mutex<SessionData>,
    clock: SharedClock,
    log_len: watch::Sender<usize>,
    pub mailbox: Option<mpsc::UnboundedSender<DeviceEvent>>,
}

impl SessionHandle {
    pub fn new(
        id: String,
        data: SessionData,
        clock: SharedClock,
        mailbox: Option<mpsc::UnboundedSender<DeviceEvent>>,
    ) -> Self {
        let (log_len, _) = watch::channel(data.log.len());
        Self {
            id,
            data: Mutex::new(data),
            clock,
            log_len,
            mailbox,
        }
    }

    pub fn record(&self, kind: LogKind) -> LogEntry {
        let entry;
        let len = {
            let mut data = self.data.lock();
            entry = LogEntry {
                seq: data.log.len() as u64,
                at: self.clock.now_ms(),
                kind,
            };
            data.log.push(entry.clone());
            data.log.len()
        };
        self.log_len.send_replace(len);
        entry
    }

    pub fn state(&self) -> SessionState {
        self.data.lock().state
    }

    pub fn finish(&self, state: SessionState, reason: Option<String>) {
        {
            let mut data = self.data.lock();
            if data.state.is_terminal() {
                return;
            }
            data.state = state;
            data.reason = reason.clone();
        }
        self.record(LogKind::StateChange { state, reason });
    }

    pub fn is_subscribed(&self, event_type: &str, device_id: &str) -> bool {
        let data = self.data.lock();
        data.state == SessionState::Running
            && data
                .subscriptions
                .iter()
                .any(|s| s.event_type == event_type && s.device_id == device_id)
    }

    pub fn view(&self) -> SessionView {
        let data = self.data.lock();
        SessionView {
            session_id: self.id.clone(),
            logic_name: data.logic.name.clone(),
            state: data.state,
            reason: data.reason.clone(),
            plan: data.plan.clone(),
            context: data.ctx.clone(),
            params: data.params.clone(),
            subscriptions: data.subscriptions.clone(),
            log: data.log.clone(),
        }
    }

    fn entry(&self, index: usize) -> (Option<LogEntry>, bool) {
        let data = self.data.lock();
        (data.log.get(index).cloned(), data.state.is_terminal())
    }

    pub fn watch(&self) -> watch::Receiver<usize> {
        self.log_len.subscribe()
    }
}

/// Replays a session log from the start and then follows it until the
/// session reaches a terminal state.
#[derive(Debug)]
pub struct LogStream {
    handle: Arc<SessionHandle>,
    changes: watch::Receiver<usize>,
    next: usize,
}

impl LogStream {
    pub(crate) fn new(handle: Arc<SessionHandle>) -> Self {
        let changes = handle.watch();
        Self {
            handle,
            changes,
            next: 0,
        }
    }

    pub async fn next_entry(&mut self) -> Option<LogEntry> {
        loop {
            let (entry, terminal) = self.handle.entry(self.next);
            if let Some(e) = entry {
                self.next += 1;
                return Some(e);
            }
            if terminal {
                return None;
            }
            if self.changes.changed().await.is_err() {
                // sender gone: drain whatever is left
                let (entry, _) = self.handle.entry(self.next);
                self.next += 1;
                return entry;
            }
        }
    }
}
