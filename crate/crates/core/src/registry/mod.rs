//! Device registry: published metadata, heartbeat liveness, capability
//! queries, and JSON persistence.
//!
//! Reads take a shared lock; writes are serialized and persisted (when the
//! registry is file-backed) before the call returns.

mod descriptor;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Millis, SharedClock};

pub use descriptor::{
    is_capability_name, is_lower_ident, AccessKind, AccessSpec, DeviceDescriptor, Location,
    Violation,
};

pub const DEFAULT_TTL_MS: Millis = 30_000;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("INVALID_DESCRIPTOR({path}): {message}")]
    InvalidDescriptor { path: String, message: String },
    #[error("UNKNOWN_DEVICE({0})")]
    UnknownDevice(String),
    #[error("STALE_TIMESTAMP({device_id}): {given} < stored {stored}")]
    StaleTimestamp {
        device_id: String,
        stored: Millis,
        given: Millis,
    },
    #[error("IO_ERROR({}): {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("IO_ERROR({}): malformed registry file: {source}", path.display())]
    Format {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::InvalidDescriptor { .. } => "INVALID_DESCRIPTOR",
            RegistryError::UnknownDevice(_) => "UNKNOWN_DEVICE",
            RegistryError::StaleTimestamp { .. } => "STALE_TIMESTAMP",
            RegistryError::Io { .. } | RegistryError::Format { .. } => "IO_ERROR",
        }
    }
}

impl From<Violation> for RegistryError {
    fn from(v: Violation) -> Self {
        RegistryError::InvalidDescriptor {
            path: v.path,
            message: v.message,
        }
    }
}

/// Immutable point-in-time copy of the registry, devices sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub taken_at: Millis,
    devices: Arc<[DeviceDescriptor]>,
}

impl RegistrySnapshot {
    /// Builds a snapshot from arbitrary devices; later duplicates of an id win.
    pub fn new(taken_at: Millis, devices: impl IntoIterator<Item = DeviceDescriptor>) -> Self {
        let map: BTreeMap<String, DeviceDescriptor> =
            devices.into_iter().map(|d| (d.id.clone(), d)).collect();
        Self {
            taken_at,
            devices: map.into_values().collect(),
        }
    }

    pub fn devices(&self) -> &[DeviceDescriptor] {
        &self.devices
    }

    pub fn get(&self, id: &str) -> Option<&DeviceDescriptor> {
        self.devices
            .binary_search_by(|d| d.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.devices[i])
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

/// Heartbeat freshness: `now - last_heartbeat <= ttl_ms`.
pub fn is_alive(device: &DeviceDescriptor, now: Millis, ttl_ms: Millis) -> bool {
    now.saturating_sub(device.last_heartbeat) <= ttl_ms
}

#[derive(Serialize, Deserialize)]
struct PersistedRegistry {
    devices: Vec<DeviceDescriptor>,
}

#[derive(Debug)]
pub struct Registry {
    devices: RwLock<BTreeMap<String, DeviceDescriptor>>,
    path: Option<PathBuf>,
    clock: SharedClock,
}

impl Registry {
    /// An in-memory registry with no backing file.
    pub fn in_memory(clock: SharedClock) -> Self {
        Self {
            devices: RwLock::new(BTreeMap::new()),
            path: None,
            clock,
        }
    }

    /// Opens a file-backed registry, loading `path` if it exists.
    pub fn open(path: impl Into<PathBuf>, clock: SharedClock) -> Result<Self, RegistryError> {
        let path = path.into();
        let devices = if path.exists() {
            load_devices(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            devices: RwLock::new(devices),
            path: Some(path),
            clock,
        })
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// Upserts a descriptor by id; the stored heartbeat is refreshed to now.
    pub fn register(&self, mut descriptor: DeviceDescriptor) -> Result<String, RegistryError> {
        let now = self.clock.now_ms();
        descriptor.validate(now)?;
        let mut devices = self.devices.write();
        let previous_hb = devices.get(&descriptor.id).map_or(0, |d| d.last_heartbeat);
        descriptor.last_heartbeat = now.max(previous_hb);
        let id = descriptor.id.clone();
        let previous = devices.insert(id.clone(), descriptor);
        if let Err(e) = self.persist_locked(&devices) {
            match previous {
                Some(p) => devices.insert(id, p),
                None => devices.remove(&id),
            };
            return Err(e);
        }
        Ok(id)
    }

    pub fn heartbeat(&self, device_id: &str, at: Millis) -> Result<(), RegistryError> {
        let mut devices = self.devices.write();
        let device = devices
            .get_mut(device_id)
            .ok_or_else(|| RegistryError::UnknownDevice(device_id.to_string()))?;
        if at < device.last_heartbeat {
            return Err(RegistryError::StaleTimestamp {
                device_id: device_id.to_string(),
                stored: device.last_heartbeat,
                given: at,
            });
        }
        let previous = std::mem::replace(&mut device.last_heartbeat, at);
        if let Err(e) = self.persist_locked(&devices) {
            if let Some(d) = devices.get_mut(device_id) {
                d.last_heartbeat = previous;
            }
            return Err(e);
        }
        Ok(())
    }

    pub fn remove(&self, device_id: &str) -> Result<DeviceDescriptor, RegistryError> {
        let mut devices = self.devices.write();
        let removed = devices
            .remove(device_id)
            .ok_or_else(|| RegistryError::UnknownDevice(device_id.to_string()))?;
        if let Err(e) = self.persist_locked(&devices) {
            devices.insert(removed.id.clone(), removed);
            return Err(e);
        }
        Ok(removed)
    }

    pub fn contains(&self, device_id: &str) -> bool {
        self.devices.read().contains_key(device_id)
    }

    pub fn get(&self, device_id: &str) -> Option<DeviceDescriptor> {
        self.devices.read().get(device_id).cloned()
    }

    /// Live devices offering `capability` (exact match), optionally in `zone`,
    /// sorted by id.
    pub fn query(
        &self,
        capability: &str,
        now: Millis,
        ttl_ms: Millis,
        zone: Option<&str>,
    ) -> Vec<DeviceDescriptor> {
        self.devices
            .read()
            .values()
            .filter(|d| d.capabilities.contains(capability))
            .filter(|d| is_alive(d, now, ttl_ms))
            .filter(|d| zone.is_none_or(|z| d.location.zone == z))
            .cloned()
            .collect()
    }

    pub fn snapshot(&self, now: Millis) -> RegistrySnapshot {
        let devices = self.devices.read();
        RegistrySnapshot {
            taken_at: now,
            devices: devices.values().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.devices.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.read().is_empty()
    }

    pub fn persist_to(&self, path: &Path) -> Result<(), RegistryError> {
        let devices = self.devices.read();
        write_devices(path, &devices)
    }

    /// Replaces the in-memory device set with the contents of `path`.
    pub fn load_from(&self, path: &Path) -> Result<(), RegistryError> {
        let loaded = load_devices(path)?;
        *self.devices.write() = loaded;
        Ok(())
    }

    fn persist_locked(&self, devices: &BTreeMap<String, DeviceDescriptor>) -> Result<(), RegistryError> {
        match &self.path {
            Some(path) => write_devices(path, devices),
            None => Ok(()),
        }
    }
}

fn write_devices(path: &Path, devices: &BTreeMap<String, DeviceDescriptor>) -> Result<(), RegistryError> {
    let doc = PersistedRegistry {
        devices: devices.values().cloned().collect(),
    };
    let io_err = |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| io_err(e.into()))?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn load_devices(path: &Path) -> Result<BTreeMap<String, DeviceDescriptor>, RegistryError> {
    let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: PersistedRegistry =
        serde_json::from_str(&text).map_err(|source| RegistryError::Format {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(doc
        .devices
        .into_iter()
        .map(|d| (d.id.clone(), d))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn device(id: &str, cap: &str, zone: &str) -> DeviceDescriptor {
        DeviceDescriptor {
            id: id.into(),
            capabilities: [cap.to_string()].into(),
            location: Location::new(zone, 0.0, 0.0),
            access: AccessSpec::rest(format!("http://127.0.0.1:9000/{id}")),
            last_heartbeat: 0,
            extra: BTreeMap::new(),
        }
    }

    fn registry_at(t: Millis) -> (Arc<ManualClock>, Registry) {
        let clock = Arc::new(ManualClock::new(t));
        let reg = Registry::in_memory(clock.clone());
        (clock, reg)
    }

    #[test]
    fn register_echoes_id() {
        let (_, reg) = registry_at(1_000);
        assert_eq!(reg.register(device("disp-1", "visual.display", "z")).unwrap(), "disp-1");
        assert_eq!(reg.get("disp-1").unwrap().last_heartbeat, 1_000);
    }

    #[test]
    fn native_without_gateway_is_rejected() {
        let (_, reg) = registry_at(0);
        let mut d = device("n", "audio.speaker", "z");
        d.access = AccessSpec::native("gw-1", "lineproto", "sim:7001");
        d.access.gateway_id = None;
        match reg.register(d).unwrap_err() {
            RegistryError::InvalidDescriptor { path, .. } => assert_eq!(path, "access.gateway_id"),
            e => panic!("unexpected {e:?}"),
        }
        assert!(reg.is_empty());
    }

    #[test]
    fn reregistration_wins() {
        let (_, reg) = registry_at(0);
        reg.register(device("disp-1", "visual.display", "north")).unwrap();
        reg.register(device("disp-1", "visual.display", "south")).unwrap();
        let found = reg.query("visual.display", 0, DEFAULT_TTL_MS, Some("south"));
        assert_eq!(found.len(), 1);
        assert!(reg.query("visual.display", 0, DEFAULT_TTL_MS, Some("north")).is_empty());
    }

    #[test]
    fn heartbeat_rules() {
        let (_, reg) = registry_at(0);
        reg.register(device("disp-1", "visual.display", "z")).unwrap();
        reg.heartbeat("disp-1", 500).unwrap();
        assert_eq!(reg.snapshot(500).get("disp-1").unwrap().last_heartbeat, 500);
        assert!(matches!(
            reg.heartbeat("ghost", 500),
            Err(RegistryError::UnknownDevice(_))
        ));
        assert!(matches!(
            reg.heartbeat("disp-1", 499),
            Err(RegistryError::StaleTimestamp { stored: 500, given: 499, .. })
        ));
        assert_eq!(reg.get("disp-1").unwrap().last_heartbeat, 500);
    }

    #[test]
    fn reregistration_never_moves_heartbeat_backwards() {
        let (clock, reg) = registry_at(0);
        reg.register(device("a", "x.y", "z")).unwrap();
        reg.heartbeat("a", 900).unwrap();
        clock.set(100);
        reg.register(device("a", "x.y", "z")).unwrap();
        assert_eq!(reg.get("a").unwrap().last_heartbeat, 900);
    }

    #[test]
    fn query_ttl_boundary() {
        let (_, reg) = registry_at(0);
        reg.register(device("a", "visual.display", "z")).unwrap();
        assert_eq!(reg.query("visual.display", 100, 100, None).len(), 1);
        assert!(reg.query("visual.display", 101, 100, None).is_empty());
    }

    #[test]
    fn query_fixture_of_three() {
        let (clock, reg) = registry_at(0);
        reg.register(device("cam-1", "vision.camera", "z")).unwrap();
        reg.register(device("disp-stale", "visual.display", "z")).unwrap();
        clock.set(50_000);
        reg.register(device("disp-1", "visual.display", "z")).unwrap();
        let ids: Vec<_> = reg
            .query("visual.display", 50_000, DEFAULT_TTL_MS, None)
            .into_iter()
            .map(|d| d.id)
            .collect();
        assert_eq!(ids, ["disp-1"]);
    }

    #[test]
    fn capability_match_is_exact() {
        let (_, reg) = registry_at(0);
        reg.register(device("a", "visual.display", "z")).unwrap();
        assert!(reg.query("visual", 0, 10, None).is_empty());
    }

    #[test]
    fn query_on_empty_registry() {
        let (_, reg) = registry_at(0);
        assert!(reg.query("visual.display", 0, 10, None).is_empty());
    }

    #[test]
    fn remove_device() {
        let (_, reg) = registry_at(0);
        reg.register(device("a", "x.y", "z")).unwrap();
        assert_eq!(reg.remove("a").unwrap().id, "a");
        assert!(matches!(reg.remove("a"), Err(RegistryError::UnknownDevice(_))));
    }

    #[test]
    fn load_missing_path_is_io_error() {
        let (_, reg) = registry_at(0);
        let err = reg.load_from(Path::new("/nonexistent/registry.json")).unwrap_err();
        assert_eq!(err.code(), "IO_ERROR");
        assert!(err.to_string().contains("/nonexistent/registry.json"));
    }

    #[test]
    fn persisted_file_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let clock = Arc::new(ManualClock::new(42));
        let reg = Registry::open(&path, clock).unwrap();
        reg.register(device("b", "x.y", "z")).unwrap();
        reg.register(device("a", "x.y", "z")).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let ids: Vec<_> = doc["devices"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| d["id"].as_str().unwrap())
            .collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(doc["devices"][0]["last_heartbeat"], 42);
        assert_eq!(doc["devices"][0]["location"]["zone"], "z");
    }

    #[test]
    fn snapshot_builder_sorts_by_id() {
        let snap = RegistrySnapshot::new(0, [device("b", "x.y", "z"), device("a", "x.y", "z")]);
        let ids: Vec<_> = snap.devices().iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(snap.get("b").is_some());
        assert!(snap.get("c").is_none());
    }
}
