use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

use super::dispatch::{ArgNames, Dispatcher, DEFAULT_DISPATCH_TIMEOUT_MS, DEFAULT_MAX_ATTEMPTS};
use super::session::{LogKind, LogStream, SessionData, SessionHandle, SessionState, SessionView, Subscription};
use super::value::{evaluate, evaluate_condition, EvalError, Tables, Value};
use super::{AbstractInstruction, DeviceEvent, DispatchResult};
use crate::clock::{Millis, SharedClock};
use crate::dsl::{self, CoordinationLogic, Handler, ParseError, Statement, Trigger, ValidationReport};
use crate::planner::{self, Binding, PlanContext, PlanError};
use crate::registry::{Location, Registry, DEFAULT_TTL_MS};

pub const DEFAULT_SESSION_IDLE_TIMEOUT_MS: Millis = 600_000;

/// Capabilities known to the bundled device simulator.
pub fn default_vocabulary() -> BTreeSet<String> {
    ["audio.speaker", "test.echo", "vision.camera", "visual.display"]
        .into_iter()
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub ttl_ms: Millis,
    pub dispatch_timeout_ms: Millis,
    pub max_attempts: u32,
    pub session_idle_timeout_ms: Millis,
    pub vocabulary: BTreeSet<String>,
    /// gateway id -> base URL
    pub gateways: BTreeMap<String, String>,
    pub verb_args: BTreeMap<String, Vec<String>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            ttl_ms: DEFAULT_TTL_MS,
            dispatch_timeout_ms: DEFAULT_DISPATCH_TIMEOUT_MS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            session_idle_timeout_ms: DEFAULT_SESSION_IDLE_TIMEOUT_MS,
            vocabulary: default_vocabulary(),
            gateways: BTreeMap::new(),
            verb_args: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LogicError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("logic has {} validation error(s)", .0.errors().count())]
    Invalid(ValidationReport),
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error("UNKNOWN_LOGIC({0})")]
    UnknownLogic(String),
    #[error("PLAN_FAILED({source})")]
    PlanFailed {
        session_id: String,
        #[source]
        source: PlanError,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("UNKNOWN_DEVICE({0})")]
    UnknownDevice(String),
}

#[derive(Debug)]
pub struct StoredLogic {
    pub name: String,
    pub source: String,
    pub logic: Arc<CoordinationLogic>,
    pub report: ValidationReport,
}

#[derive(Debug)]
struct Inner {
    registry: Arc<Registry>,
    clock: SharedClock,
    tables: Tables,
    config: EngineConfig,
    dispatcher: Dispatcher,
    logics: RwLock<BTreeMap<String, Arc<StoredLogic>>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionHandle>>>,
    next_session: AtomicU64,
    dropped_events: AtomicU64,
}

/// The coordination server's execution core. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

enum Flow {
    Continue,
    AbortHandler,
    SessionOver,
}

impl Engine {
    pub fn new(registry: Arc<Registry>, tables: Tables, config: EngineConfig) -> Self {
        let mut arg_names = ArgNames::default();
        arg_names.extend(config.verb_args.clone());
        let dispatcher = Dispatcher::new(config.gateways.clone(), arg_names);
        Self {
            inner: Arc::new(Inner {
                clock: registry.clock().clone(),
                registry,
                tables,
                config,
                dispatcher,
                logics: RwLock::new(BTreeMap::new()),
                sessions: RwLock::new(BTreeMap::new()),
                next_session: AtomicU64::new(1),
                dropped_events: AtomicU64::new(0),
            }),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.inner.registry
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    /// Registers or moves a gateway at runtime; sessions pick it up on
    /// their next dispatch.
    pub fn set_gateway(&self, gateway_id: &str, base_url: &str) {
        self.inner.dispatcher.set_gateway(gateway_id, base_url);
    }

    pub fn gateways(&self) -> BTreeMap<String, String> {
        self.inner.dispatcher.gateways()
    }

    pub fn tables(&self) -> &Tables {
        &self.inner.tables
    }

    /// Parses and validates `source`, storing it under `name` (or the
    /// service name) only if validation finds no errors.
    pub fn put_logic(&self, name: Option<&str>, source: &str) -> Result<Arc<StoredLogic>, LogicError> {
        let logic = dsl::parse(source)?;
        let report = dsl::validate(
            &logic,
            &self.inner.config.vocabulary,
            &self.inner.tables.function_names(),
        );
        if report.has_errors() {
            return Err(LogicError::Invalid(report));
        }
        let name = name.unwrap_or(&logic.name).to_string();
        let stored = Arc::new(StoredLogic {
            name: name.clone(),
            source: source.to_string(),
            logic: Arc::new(logic),
            report,
        });
        self.inner.logics.write().insert(name, stored.clone());
        Ok(stored)
    }

    pub fn logic(&self, name: &str) -> Option<Arc<StoredLogic>> {
        self.inner.logics.read().get(name).cloned()
    }

    pub fn logic_names(&self) -> Vec<String> {
        self.inner.logics.read().keys().cloned().collect()
    }

    pub fn session(&self, id: &str) -> Option<SessionView> {
        self.handle(id).map(|h| h.view())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.inner.sessions.read().keys().cloned().collect()
    }

    pub fn stream(&self, id: &str) -> Option<LogStream> {
        self.handle(id).map(LogStream::new)
    }

    pub fn dropped_events(&self) -> u64 {
        self.inner.dropped_events.load(Ordering::SeqCst)
    }

    fn handle(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.inner.sessions.read().get(id).cloned()
    }

    /// Plans bindings and runs every request handler. Returns once the
    /// request handlers have finished; event handling continues in the
    /// background while the session has subscriptions.
    pub async fn start_session(
        &self,
        logic_name: &str,
        params: BTreeMap<String, Value>,
        user_location: Location,
    ) -> Result<String, StartError> {
        let stored = self
            .logic(logic_name)
            .ok_or_else(|| StartError::UnknownLogic(logic_name.to_string()))?;
        let inner = &self.inner;
        let now = inner.clock.now_ms();
        let ctx = PlanContext {
            user_location,
            now,
            ttl_ms: inner.config.ttl_ms,
            excluded: BTreeSet::new(),
        };
        let snapshot = inner.registry.snapshot(now);
        let planned = planner::plan_bindings(&stored.logic, &snapshot, &ctx);
        let session_id = format!("sess-{}", inner.next_session.fetch_add(1, Ordering::SeqCst));
        let data = SessionData {
            logic: stored.logic.clone(),
            plan: planned.as_ref().ok().cloned(),
            ctx,
            params,
            state: SessionState::Running,
            reason: None,
            subscriptions: Vec::new(),
            log: Vec::new(),
            next_correlation: 1,
        };

        let plan_error = match planned {
            Ok(_) => None,
            Err(e) => Some(e),
        };
        if let Some(error) = plan_error {
            let handle = Arc::new(SessionHandle::new(session_id.clone(), data, inner.clock.clone(), None));
            handle.finish(SessionState::Failed, Some(format!("PLAN_FAILED: {error}")));
            inner.sessions.write().insert(session_id.clone(), handle);
            return Err(StartError::PlanFailed {
                session_id,
                source: error,
            });
        }

        let (tx, rx) = mpsc::unbounded_channel();
        let handle = Arc::new(SessionHandle::new(
            session_id.clone(),
            data,
            inner.clock.clone(),
            Some(tx),
        ));
        inner.sessions.write().insert(session_id.clone(), handle.clone());
        let (done_tx, done_rx) = oneshot::channel();
        let runner = Runner {
            inner: inner.clone(),
            handle,
        };
        tokio::spawn(runner.run(rx, done_tx));
        let _ = done_rx.await;
        Ok(session_id)
    }

    /// Delivers an event to every running session subscribed to
    /// `(event_type, device_id)`. Returns how many sessions received it.
    pub fn ingest_event(&self, mut event: DeviceEvent) -> Result<usize, IngestError> {
        let inner = &self.inner;
        if !inner.registry.contains(&event.device_id) {
            return Err(IngestError::UnknownDevice(event.device_id));
        }
        event.received_at = inner.clock.now_ms();
        let targets: Vec<Arc<SessionHandle>> = inner
            .sessions
            .read()
            .values()
            .filter(|h| h.is_subscribed(&event.event_type, &event.device_id))
            .cloned()
            .collect();
        let mut delivered = 0;
        for h in targets {
            if let Some(mailbox) = &h.mailbox {
                if mailbox.send(event.clone()).is_ok() {
                    delivered += 1;
                }
            }
        }
        if delivered == 0 {
            inner.dropped_events.fetch_add(1, Ordering::SeqCst);
        }
        Ok(delivered)
    }
}

struct Runner {
    inner: Arc<Inner>,
    handle: Arc<SessionHandle>,
}

impl Runner {
    async fn run(self, mut mailbox: mpsc::UnboundedReceiver<DeviceEvent>, request_done: oneshot::Sender<()>) {
        self.run_request_handlers().await;
        let _ = request_done.send(());

        if self.handle.state().is_terminal() {
            return;
        }
        if self.handle.data.lock().subscriptions.is_empty() {
            self.handle.finish(SessionState::Completed, None);
            return;
        }
        let idle = Duration::from_millis(self.inner.config.session_idle_timeout_ms);
        loop {
            match tokio::time::timeout(idle, mailbox.recv()).await {
                Ok(Some(event)) => {
                    self.handle_event(event).await;
                    if self.handle.state().is_terminal() {
                        return;
                    }
                }
                Ok(None) => return,
                Err(_) => {
                    self.handle
                        .finish(SessionState::Completed, Some("idle timeout".into()));
                    return;
                }
            }
        }
    }

    fn logic(&self) -> Arc<CoordinationLogic> {
        self.handle.data.lock().logic.clone()
    }

    async fn run_request_handlers(&self) {
        let logic = self.logic();
        let params = self.handle.data.lock().params.clone();
        for (idx, h) in logic.handlers.iter().enumerate() {
            let Trigger::Request { params: declared } = &h.trigger else {
                continue;
            };
            if let Some(missing) = declared.iter().find(|p| !params.contains_key(*p)) {
                self.handler_error(idx, "MISSING_PARAM", format!("request parameter `{missing}` not supplied"));
                continue;
            }
            if let Flow::SessionOver = self.run_handler(idx, h, params.clone()).await {
                return;
            }
        }
    }

    async fn handle_event(&self, event: DeviceEvent) {
        self.handle.record(LogKind::Event(event.clone()));
        let logic = self.logic();
        let params = self.handle.data.lock().params.clone();
        for (idx, h) in logic.handlers.iter().enumerate() {
            let Trigger::Event { event_type, params: declared } = &h.trigger else {
                continue;
            };
            if *event_type != event.event_type {
                continue;
            }
            let mut scope = params.clone();
            let mut missing = None;
            for p in declared {
                match event.payload.get(p) {
                    Some(v) => {
                        scope.insert(p.clone(), Value::Str(v.clone()));
                    }
                    None => {
                        missing = Some(p);
                        break;
                    }
                }
            }
            if let Some(p) = missing {
                self.handler_error(idx, "MISSING_PARAM", format!("event payload lacks `{p}`"));
                continue;
            }
            if let Flow::SessionOver = self.run_handler(idx, h, scope).await {
                return;
            }
        }
    }

    fn handler_error(&self, handler: usize, code: &str, message: String) {
        self.handle.record(LogKind::HandlerError {
            handler,
            code: code.to_string(),
            message,
        });
    }

    fn eval_error(&self, handler: usize, e: EvalError) {
        self.handler_error(handler, e.code(), e.to_string());
    }

    async fn run_handler(&self, idx: usize, h: &Handler, scope: BTreeMap<String, Value>) -> Flow {
        if let Some(guard) = &h.guard {
            match evaluate_condition(guard, &scope, &self.inner.tables) {
                Ok(true) => {}
                Ok(false) => return Flow::Continue,
                Err(e) => {
                    self.eval_error(idx, e);
                    return Flow::AbortHandler;
                }
            }
        }
        for stmt in &h.body {
            match self.run_statement(idx, stmt, &scope).await {
                Flow::Continue => {}
                flow => return flow,
            }
        }
        Flow::Continue
    }

    fn instruction(&self, stmt: &Statement, args: Vec<Value>) -> AbstractInstruction {
        let n = {
            let mut data = self.handle.data.lock();
            let n = data.next_correlation;
            data.next_correlation += 1;
            n
        };
        AbstractInstruction {
            session_id: self.handle.id.clone(),
            correlation_id: format!("{}.{n}", self.handle.id),
            role: stmt.role.clone(),
            verb: stmt.verb.clone(),
            args,
            issued_at: self.inner.clock.now_ms(),
        }
    }

    fn binding(&self, role: &str) -> Option<Binding> {
        self.handle
            .data
            .lock()
            .plan
            .as_ref()
            .and_then(|p| p.bindings.get(role).cloned())
    }

    async fn send(&self, instr: &AbstractInstruction, binding: &Binding) -> DispatchResult {
        let cfg = &self.inner.config;
        let result = self
            .inner
            .dispatcher
            .dispatch(
                instr,
                &binding.device_id,
                &binding.route,
                Duration::from_millis(cfg.dispatch_timeout_ms),
                cfg.max_attempts,
            )
            .await;
        self.handle.record(LogKind::DispatchResult(result.clone()));
        result
    }

    fn subscribe(&self, stmt: &Statement, device_id: &str) {
        let Some(event_type) = &stmt.subscription else {
            return;
        };
        let sub = Subscription {
            event_type: event_type.clone(),
            device_id: device_id.to_string(),
            role: stmt.role.clone(),
        };
        let mut data = self.handle.data.lock();
        if !data.subscriptions.contains(&sub) {
            data.subscriptions.push(sub);
        }
    }

    async fn run_statement(&self, idx: usize, stmt: &Statement, scope: &BTreeMap<String, Value>) -> Flow {
        let args = match stmt
            .args
            .iter()
            .map(|a| evaluate(a, scope, &self.inner.tables))
            .collect::<Result<Vec<_>, _>>()
        {
            Ok(args) => args,
            Err(e) => {
                self.eval_error(idx, e);
                return Flow::AbortHandler;
            }
        };
        let Some(binding) = self.binding(&stmt.role) else {
            self.handler_error(idx, "UNBOUND_ROLE", format!("role `{}` has no binding", stmt.role));
            return Flow::AbortHandler;
        };
        let instr = self.instruction(stmt, args);
        self.handle.record(LogKind::Instruction(instr.clone()));
        let result = self.send(&instr, &binding).await;
        if result.outcome.is_ok() {
            self.subscribe(stmt, &binding.device_id);
            Flow::Continue
        } else if result.outcome.is_transport_failure() {
            self.failover(stmt, &instr, &result).await
        } else {
            Flow::Continue
        }
    }

    /// Re-plans without the unresponsive device and re-dispatches the failed
    /// instruction once to the role's new device.
    async fn failover(&self, stmt: &Statement, failed: &AbstractInstruction, result: &DispatchResult) -> Flow {
        let now = self.inner.clock.now_ms();
        let snapshot = self.inner.registry.snapshot(now);
        let (logic, ctx, prior) = {
            let data = self.handle.data.lock();
            let mut ctx = data.ctx.clone();
            ctx.now = now;
            (data.logic.clone(), ctx, data.plan.clone())
        };
        let Some(prior) = prior else {
            return Flow::SessionOver;
        };
        let new_plan = match planner::replan(&logic, &snapshot, &ctx, &result.device_id, &prior) {
            Ok(p) => p,
            Err(e) => {
                self.handle.finish(SessionState::Failed, Some(e.to_string()));
                return Flow::SessionOver;
            }
        };

        let mut rebinds = Vec::new();
        {
            let mut data = self.handle.data.lock();
            data.ctx.excluded.insert(result.device_id.clone());
            for (role, b) in &new_plan.bindings {
                let Some(old) = prior.bindings.get(role) else {
                    continue;
                };
                if old.device_id != b.device_id {
                    rebinds.push((role.clone(), old.device_id.clone(), b.clone()));
                    for sub in data.subscriptions.iter_mut().filter(|s| &s.role == role) {
                        sub.device_id = b.device_id.clone();
                    }
                }
            }
            data.plan = Some(new_plan.clone());
        }
        for (role, from, b) in rebinds {
            self.handle.record(LogKind::Rebind {
                role,
                from,
                to: b.device_id,
                route: b.route,
            });
        }

        let Some(binding) = new_plan.bindings.get(&failed.role).cloned() else {
            return Flow::Continue;
        };
        let retry = self.instruction(stmt, failed.args.clone());
        self.handle.record(LogKind::Instruction(retry.clone()));
        let second = self.send(&retry, &binding).await;
        if second.outcome.is_ok() {
            self.subscribe(stmt, &binding.device_id);
        }
        Flow::Continue
    }
}
