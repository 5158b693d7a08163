//! Traffic capture: an ordered record of what simulated devices and
//! gateways received, for route-conformance assertions.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Millis, SystemClock};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Traffic {
    Http {
        method: String,
        path: String,
        body: String,
    },
    NativeLine {
        line: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEntry {
    pub seq: u64,
    pub at: Millis,
    /// Device or gateway id that received the traffic.
    pub target: String,
    pub correlation: Option<String>,
    #[serde(flatten)]
    pub traffic: Traffic,
}

#[derive(Debug, Clone, Default)]
pub struct Capture {
    entries: Arc<Mutex<Vec<TrafficEntry>>>,
}

impl Capture {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, target: &str, correlation: Option<String>, traffic: Traffic) {
        let mut entries = self.entries.lock();
        let seq = entries.len() as u64;
        entries.push(TrafficEntry {
            seq,
            at: SystemClock.now_ms(),
            target: target.to_string(),
            correlation,
            traffic,
        });
    }

    pub fn entries(&self) -> Vec<TrafficEntry> {
        self.entries.lock().clone()
    }

    pub fn for_target(&self, target: &str) -> Vec<TrafficEntry> {
        self.entries
            .lock()
            .iter()
            .filter(|e| e.target == target)
            .cloned()
            .collect()
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_in_order() {
        let c = Capture::new();
        assert!(c.entries().is_empty());
        c.record("a", None, Traffic::NativeLine { line: "OK\n".into() });
        c.record(
            "b",
            Some("s.1".into()),
            Traffic::Http {
                method: "POST".into(),
                path: "/x".into(),
                body: "{}".into(),
            },
        );
        let e = c.entries();
        assert_eq!(e[0].seq, 0);
        assert_eq!(e[1].target, "b");
        assert_eq!(c.for_target("a").len(), 1);
        let json = serde_json::to_value(&e[1]).unwrap();
        assert_eq!(json["kind"], "http");
    }
}
