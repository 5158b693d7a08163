use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::DEFAULT_TTL_MS;
use crate::runtime::{
    default_vocabulary, EngineConfig, DEFAULT_DISPATCH_TIMEOUT_MS, DEFAULT_MAX_ATTEMPTS,
    DEFAULT_SESSION_IDLE_TIMEOUT_MS,
};

fn d_ttl() -> u64 {
    DEFAULT_TTL_MS
}
fn d_dispatch() -> u64 {
    DEFAULT_DISPATCH_TIMEOUT_MS
}
fn d_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}
fn d_idle() -> u64 {
    DEFAULT_SESSION_IDLE_TIMEOUT_MS
}

/// Server configuration file (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    /// Registry persistence file; in-memory when absent.
    #[serde(default)]
    pub registry_path: Option<PathBuf>,
    #[serde(default = "d_ttl")]
    pub ttl_ms: u64,
    #[serde(default = "d_dispatch")]
    pub dispatch_timeout_ms: u64,
    #[serde(default = "d_attempts")]
    pub max_attempts: u32,
    #[serde(default = "d_idle")]
    pub session_idle_timeout_ms: u64,
    /// Lookup tables for table-function calls in logic.
    #[serde(default)]
    pub tables_path: Option<PathBuf>,
    /// gateway id -> base URL
    #[serde(default)]
    pub gateways: BTreeMap<String, String>,
    #[serde(default)]
    pub vocabulary: Option<BTreeSet<String>>,
    /// Positional argument names per verb, on top of the built-in ones.
    #[serde(default)]
    pub verb_args: BTreeMap<String, Vec<String>>,
    /// Static console assets, served under `/console/`.
    #[serde(default)]
    pub console_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("CONFIG_INVALID({field}): {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl Config {
    pub fn for_listen(listen: impl Into<String>) -> Self {
        Self {
            listen: listen.into(),
            registry_path: None,
            ttl_ms: DEFAULT_TTL_MS,
            dispatch_timeout_ms: DEFAULT_DISPATCH_TIMEOUT_MS,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            session_idle_timeout_ms: DEFAULT_SESSION_IDLE_TIMEOUT_MS,
            tables_path: None,
            gateways: BTreeMap::new(),
            vocabulary: None,
            verb_args: BTreeMap::new(),
            console_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Config = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("missing field") || msg.starts_with("unknown field"))
                .unwrap_or("$")
                .to_string();
            ConfigError::Invalid { field, message: msg }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("$", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let port_ok = self
            .listen
            .rsplit_once(':')
            .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
        if !port_ok {
            return Err(invalid("listen", "expected host:port"));
        }
        for (field, v) in [
            ("ttl_ms", self.ttl_ms),
            ("dispatch_timeout_ms", self.dispatch_timeout_ms),
            ("max_attempts", u64::from(self.max_attempts)),
            ("session_idle_timeout_ms", self.session_idle_timeout_ms),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if let Some(p) = &self.tables_path {
            std::fs::File::open(p).map_err(|e| invalid("tables_path", format!("{}: {e}", p.display())))?;
        }
        if let Some(p) = &self.registry_path {
            if p.exists() {
                std::fs::File::open(p).map_err(|e| invalid("registry_path", format!("{}: {e}", p.display())))?;
            } else {
                let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                if !parent.is_dir() {
                    return Err(invalid("registry_path", format!("directory {} does not exist", parent.display())));
                }
            }
        }
        if let Some(d) = &self.console_dir {
            if !d.is_dir() {
                return Err(invalid("console_dir", format!("{} is not a directory", d.display())));
            }
        }
        for (id, url) in &self.gateways {
            if url::Url::parse(url).is_err() {
                return Err(invalid(&format!("gateways.{id}"), format!("not a URL: {url}")));
            }
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            ttl_ms: self.ttl_ms,
            dispatch_timeout_ms: self.dispatch_timeout_ms,
            max_attempts: self.max_attempts,
            session_idle_timeout_ms: self.session_idle_timeout_ms,
            vocabulary: self.vocabulary.clone().unwrap_or_else(default_vocabulary),
            gateways: self.gateways.clone(),
            verb_args: self.verb_args.clone(),
        }
    }
}
