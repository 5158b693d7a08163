//! Simulated device network for the station-navigation scenario: mock
//! displays, speakers, and cameras speaking REST, SOAP, or the native line
//! protocol, plus a tourist group walking a 4-direction grid.

mod devices;
mod world;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{CoordinationLogic, Expr};
use crate::registry::Location;
use crate::runtime::{Tables, Value};

pub use devices::DeviceState;
pub use devices::{ActionRecord, SOAP_PATH};
pub use world::{run_script, spawn_world, World, WorldOptions, MOVEMENT_EVENT};

pub const DEFAULT_TICK_MS: u64 = 500;
pub const DEFAULT_SENSING_RADIUS_M: f64 = 100.0;
pub const DEFAULT_HEARTBEAT_MS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Display,
    Speaker,
    Camera,
    Echo,
}

impl SimKind {
    pub fn capability(self) -> &'static str {
        match self {
            SimKind::Display => "visual.display",
            SimKind::Speaker => "audio.speaker",
            SimKind::Camera => "vision.camera",
            SimKind::Echo => "test.echo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimProtocol {
    Rest,
    Soap,
    Native,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    #[default]
    Normal,
    /// Registered, but refuses every connection.
    Dead,
    /// Answers every action with a `BUSY` device error.
    Busy,
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_gateway() -> String {
    "gw-1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDeviceSpec {
    pub id: String,
    pub kind: SimKind,
    pub protocol: SimProtocol,
    pub location: Location,
    #[serde(default)]
    pub behavior: Behavior,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Gateway fronting a native device.
    #[serde(default = "default_gateway")]
    pub gateway_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    /// Unit step in meters: x east, y north.
    pub fn step(self) -> (f64, f64) {
        match self {
            Heading::North => (0.0, 1.0),
            Heading::South => (0.0, -1.0),
            Heading::East => (1.0, 0.0),
            Heading::West => (-1.0, 0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Heading::North => "north",
            Heading::South => "south",
            Heading::East => "east",
            Heading::West => "west",
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Heading {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "north" => Ok(Heading::North),
            "south" => Ok(Heading::South),
            "east" => Ok(Heading::East),
            "west" => Ok(Heading::West),
            other => Err(SimError::InvalidHeading(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub x: f64,
    pub y: f64,
    pub heading: Heading,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
}

fn default_tick() -> u64 {
    DEFAULT_TICK_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGatewaySpec {
    pub gateway_id: String,
    #[serde(default = "default_listen")]
    pub listen: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ScriptAction {
    Steer {
        at_tick: u64,
        heading: Heading,
    },
    Request {
        at_tick: u64,
        logic: String,
        #[serde(default)]
        params: std::collections::BTreeMap<String, Value>,
        user: Location,
    },
}

impl ScriptAction {
    pub fn at_tick(&self) -> u64 {
        match self {
            ScriptAction::Steer { at_tick, .. } | ScriptAction::Request { at_tick, .. } => *at_tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub devices: Vec<SimDeviceSpec>,
    #[serde(default)]
    pub gateways: Vec<SimGatewaySpec>,
    #[serde(default)]
    pub tables: Tables,
    pub group: GroupState,
    #[serde(default)]
    pub script: Vec<ScriptAction>,
}

impl ScenarioSpec {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))
    }

    /// Table functions the logic calls that this scenario does not provide.
    pub fn missing_tables(&self, logic: &CoordinationLogic) -> BTreeSet<String> {
        fn walk(e: &Expr, out: &mut BTreeSet<String>) {
            if let Expr::Call { function, args } = e {
                out.insert(function.clone());
                args.iter().for_each(|a| walk(a, out));
            }
        }
        let mut used = BTreeSet::new();
        for h in &logic.handlers {
            if let Some(g) = &h.guard {
                walk(&g.lhs, &mut used);
                walk(&g.rhs, &mut used);
            }
            for s in &h.body {
                s.args.iter().for_each(|a| walk(a, &mut used));
            }
        }
        used.retain(|f| !self.tables.0.contains_key(f));
        used
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("PORT_IN_USE({0})")]
    PortInUse(String),
    #[error("REGISTRATION_FAILED({device_id}): {message}")]
    RegistrationFailed { device_id: String, message: String },
    #[error("INVALID_HEADING({0})")]
    InvalidHeading(String),
    #[error("UNKNOWN_SIM_DEVICE({0})")]
    UnknownDevice(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("IO_ERROR: {0}")]
    Io(String),
}
