use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;

/// Where a device sits: a zone label plus a metric offset (x east, y north).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub zone: String,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(zone: impl Into<String>, x: f64, y: f64) -> Self {
        Self {
            zone: zone.into(),
            x,
            y,
        }
    }

    /// Euclidean distance; equal squared distances give bit-identical results.
    pub fn distance_to(&self, other: &Location) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Rest,
    Soap,
    Native,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Rest => "rest",
            AccessKind::Soap => "soap",
            AccessKind::Native => "native",
        })
    }
}

/// How a device is reached. Which optional fields must be present depends
/// on `kind`; [`DeviceDescriptor::validate`] enforces the pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessSpec {
    pub kind: AccessKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_address: Option<String>,
}

impl AccessSpec {
    pub fn rest(endpoint: impl Into<String>) -> Self {
        Self::direct(AccessKind::Rest, endpoint.into())
    }

    pub fn soap(endpoint: impl Into<String>) -> Self {
        Self::direct(AccessKind::Soap, endpoint.into())
    }

    pub fn native(
        gateway_id: impl Into<String>,
        driver: impl Into<String>,
        native_address: impl Into<String>,
    ) -> Self {
        Self {
            kind: AccessKind::Native,
            endpoint: None,
            gateway_id: Some(gateway_id.into()),
            driver: Some(driver.into()),
            native_address: Some(native_address.into()),
        }
    }

    fn direct(kind: AccessKind, endpoint: String) -> Self {
        Self {
            kind,
            endpoint: Some(endpoint),
            gateway_id: None,
            driver: None,
            native_address: None,
        }
    }
}

/// Metadata a device publishes about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub id: String,
    pub capabilities: BTreeSet<String>,
    pub location: Location,
    pub access: AccessSpec,
    #[serde(default)]
    pub last_heartbeat: Millis,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// First violated descriptor constraint, with the offending field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// `[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)*`
pub fn is_capability_name(name: &str) -> bool {
    !name.is_empty() && name.split('.').all(is_lower_ident)
}

/// `[a-z][a-z0-9_]*`
pub fn is_lower_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn is_host_port(s: &str) -> bool {
    match s.rsplit_once(':') {
        Some((host, port)) => !host.is_empty() && port.parse::<u16>().is_ok(),
        None => false,
    }
}

impl DeviceDescriptor {
    /// Checks every descriptor invariant against the observation time `now`.
    pub fn validate(&self, now: Millis) -> Result<(), Violation> {
        if self.id.trim().is_empty() {
            return Err(Violation::new("id", "must be non-empty"));
        }
        if self.capabilities.is_empty() {
            return Err(Violation::new("capabilities", "must be non-empty"));
        }
        for (i, cap) in self.capabilities.iter().enumerate() {
            if !is_capability_name(cap) {
                return Err(Violation::new(
                    format!("capabilities[{i}]"),
                    format!("`{cap}` is not a dotted lowercase capability name"),
                ));
            }
        }
        if self.location.zone.is_empty() {
            return Err(Violation::new("location.zone", "must be non-empty"));
        }
        if !self.location.x.is_finite() {
            return Err(Violation::new("location.x", "must be finite"));
        }
        if !self.location.y.is_finite() {
            return Err(Violation::new("location.y", "must be finite"));
        }
        self.validate_access()?;
        if self.last_heartbeat > now {
            return Err(Violation::new(
                "last_heartbeat",
                format!("{} is in the future (now {now})", self.last_heartbeat),
            ));
        }
        Ok(())
    }

    fn validate_access(&self) -> Result<(), Violation> {
        let a = &self.access;
        let present = |v: &Option<String>| v.as_deref().is_some_and(|s| !s.is_empty());
        match a.kind {
            AccessKind::Rest | AccessKind::Soap => {
                let Some(endpoint) = a.endpoint.as_deref().filter(|s| !s.is_empty()) else {
                    return Err(Violation::new(
                        "access.endpoint",
                        format!("required for kind {}", a.kind),
                    ));
                };
                match url::Url::parse(endpoint) {
                    Ok(u) if u.has_host() => {}
                    _ => {
                        return Err(Violation::new(
                            "access.endpoint",
                            format!("`{endpoint}` is not an absolute URL"),
                        ))
                    }
                }
                for (name, field) in [
                    ("gateway_id", &a.gateway_id),
                    ("driver", &a.driver),
                    ("native_address", &a.native_address),
                ] {
                    if field.is_some() {
                        return Err(Violation::new(
                            format!("access.{name}"),
                            format!("not allowed for kind {}", a.kind),
                        ));
                    }
                }
            }
            AccessKind::Native => {
                for (name, field) in [
                    ("gateway_id", &a.gateway_id),
                    ("driver", &a.driver),
                    ("native_address", &a.native_address),
                ] {
                    if !present(field) {
                        return Err(Violation::new(
                            format!("access.{name}"),
                            "required for kind native",
                        ));
                    }
                }
                if a.endpoint.is_some() {
                    return Err(Violation::new(
                        "access.endpoint",
                        "not allowed for kind native",
                    ));
                }
                let addr = a.native_address.as_deref().unwrap_or_default();
                if !is_host_port(addr) {
                    return Err(Violation::new(
                        "access.native_address",
                        format!("`{addr}` is not host:port"),
                    ));
                }
            }
        }
        Ok(())
    }
}
