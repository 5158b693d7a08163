use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::runtime::{error_chain, http_client};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayStats {
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Serialize)]
struct EventBody<'a> {
    device_id: &'a str,
    event_type: &'a str,
    payload: &'a BTreeMap<String, String>,
}

enum Attempt {
    Delivered,
    Retryable(String),
    Rejected(String),
}

/// Forwards native device events to the server, at least once: one retry on
/// transport failure (or 5xx), then the event is dropped with a warning.
#[derive(Debug)]
pub struct EventRelay {
    client: reqwest::Client,
    url: Option<String>,
    retry_delay: Duration,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

impl EventRelay {
    pub fn new(url: Option<String>) -> Self {
        Self {
            client: http_client(),
            url,
            retry_delay: Duration::from_millis(100),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn with_retry_delay(mut self, delay: Duration) -> Self {
        self.retry_delay = delay;
        self
    }

    pub fn stats(&self) -> RelayStats {
        RelayStats {
            delivered: self.delivered.load(Ordering::SeqCst),
            dropped: self.dropped.load(Ordering::SeqCst),
        }
    }

    /// Returns whether the event reached the server.
    pub async fn relay(&self, device_id: &str, event_type: &str, payload: &BTreeMap<String, String>) -> bool {
        let Some(url) = &self.url else {
            tracing::warn!(device_id, event_type, "no server events URL configured; event dropped");
            self.dropped.fetch_add(1, Ordering::SeqCst);
            return false;
        };
        let body = EventBody {
            device_id,
            event_type,
            payload,
        };
        let mut last = String::new();
        for attempt in 1..=2 {
            match self.post(url, &body).await {
                Attempt::Delivered => {
                    self.delivered.fetch_add(1, Ordering::SeqCst);
                    return true;
                }
                Attempt::Rejected(why) => {
                    last = why;
                    break;
                }
                Attempt::Retryable(why) => {
                    last = why;
                    if attempt == 1 {
                        tokio::time::sleep(self.retry_delay).await;
                    }
                }
            }
        }
        tracing::warn!(device_id, event_type, reason = %last, "event relay failed; dropped");
        self.dropped.fetch_add(1, Ordering::SeqCst);
        false
    }

    async fn post(&self, url: &str, body: &EventBody<'_>) -> Attempt {
        match self
            .client
            .post(url)
            .json(body)
            .timeout(Duration::from_secs(2))
            .send()
            .await
        {
            Ok(r) if r.status().is_success() => Attempt::Delivered,
            Ok(r) if r.status().is_server_error() => Attempt::Retryable(format!("HTTP {}", r.status())),
            Ok(r) => Attempt::Rejected(format!("HTTP {}", r.status())),
            Err(e) => Attempt::Retryable(error_chain(&e)),
        }
    }
}
