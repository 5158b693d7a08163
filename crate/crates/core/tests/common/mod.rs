#![allow(dead_code)]

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use tacit_core::clock;
use tacit_core::devsim::{spawn_world, ScenarioSpec, World, WorldOptions};
use tacit_core::facade::{serve_engine, ServerHandle};
use tacit_core::fixtures;
use tacit_core::registry::Registry;
use tacit_core::runtime::{Engine, EngineConfig, LogKind, SessionView, Tables};

pub fn station_scenario() -> ScenarioSpec {
    ScenarioSpec::from_json(fixtures::STATION_NAV_SCENARIO).unwrap()
}

pub async fn start_server(tables: Tables, config: EngineConfig) -> ServerHandle {
    let registry = Arc::new(Registry::in_memory(clock::system()));
    let engine = Engine::new(registry, tables, config);
    serve_engine(engine, "127.0.0.1:0", None).await.unwrap()
}

pub fn fast_config() -> EngineConfig {
    EngineConfig {
        dispatch_timeout_ms: 1_000,
        session_idle_timeout_ms: 30_000,
        ..EngineConfig::default()
    }
}

/// A server loaded with `logic`, plus a world registered against it.
pub async fn stack(spec: &ScenarioSpec, logic: &str) -> (ServerHandle, World) {
    let server = start_server(spec.tables.clone(), fast_config()).await;
    server.engine().put_logic(None, logic).unwrap();
    let world = spawn_world(
        spec,
        WorldOptions {
            server_url: Some(server.url()),
            ..WorldOptions::default()
        },
    )
    .await
    .unwrap();
    (server, world)
}

pub async fn wait_until<F, Fut>(timeout: Duration, mut cond: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let deadline = Instant::now() + timeout;
    loop {
        if cond().await {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

pub fn count_kind(view: &SessionView, pred: impl Fn(&LogKind) -> bool) -> usize {
    view.log.iter().filter(|e| pred(&e.kind)).count()
}

/// Every instruction in the log has its dispatch result.
pub fn settled(view: &SessionView) -> bool {
    count_kind(view, |k| matches!(k, LogKind::Instruction(_)))
        == count_kind(view, |k| matches!(k, LogKind::DispatchResult(_)))
}

pub fn events_seen(view: &SessionView) -> usize {
    count_kind(view, |k| matches!(k, LogKind::Event(_)))
}
