//! The coordination server's HTTP API: device registry, logic store,
//! sessions with live log streaming, and event ingestion.

mod api;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::clock::{self, SharedClock};
use crate::registry::{Registry, RegistryError};
use crate::runtime::{Engine, Tables};

pub use api::{router, ApiError, LogicStored, ServerStats, SessionCreated, SessionRequest};
pub use config::{Config, ConfigError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("BIND_FAILED({listen}): {message}")]
    BindFailed { listen: String, message: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

/// Builds the engine described by `config` on the given clock.
pub fn build_engine(config: &Config, clock: SharedClock) -> Result<Engine, ServeError> {
    config.validate()?;
    let registry = match &config.registry_path {
        Some(p) => Registry::open(p, clock)?,
        None => Registry::in_memory(clock),
    };
    let tables = match &config.tables_path {
        Some(p) => Tables::load(p).map_err(|e| ConfigError::Invalid {
            field: "tables_path".into(),
            message: e.to_string(),
        })?,
        None => Tables::default(),
    };
    Ok(Engine::new(Arc::new(registry), tables, config.engine_config()))
}

/// A running server; stops gracefully on [`ServerHandle::shutdown`] or drop.
#[derive(Debug)]
pub struct ServerHandle {
    pub addr: SocketAddr,
    engine: Engine,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Stops accepting connections and waits for in-flight requests; open
    /// log streams are cut after [`SHUTDOWN_GRACE`].
    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if tokio::time::timeout(SHUTDOWN_GRACE, &mut self.task).await.is_err() {
            self.task.abort();
        }
    }

    pub async fn wait(mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
    }
}

pub async fn serve(config: &Config) -> Result<ServerHandle, ServeError> {
    let engine = build_engine(config, clock::system())?;
    serve_engine(engine, &config.listen, config.console_dir.clone()).await
}

/// Serves an existing engine, e.g. one built on a manual clock.
pub async fn serve_engine(
    engine: Engine,
    listen: &str,
    console_dir: Option<PathBuf>,
) -> Result<ServerHandle, ServeError> {
    let listener = TcpListener::bind(listen).await.map_err(|e| ServeError::BindFailed {
        listen: listen.to_string(),
        message: e.to_string(),
    })?;
    let addr = listener.local_addr().map_err(|e| ServeError::BindFailed {
        listen: listen.to_string(),
        message: e.to_string(),
    })?;
    let mut app = router(engine.clone());
    if let Some(dir) = console_dir {
        app = app.nest_service("/console", ServeDir::new(dir));
    }
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await;
    });
    Ok(ServerHandle {
        addr,
        engine,
        stop: Some(stop_tx),
        task,
    })
}
