use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;

use super::value::Value;
use super::wire::{self, RestActionBody};
use super::{AbstractInstruction, DispatchOutcome, DispatchResult};
use crate::gateway::{DispatchEnvelope, GatewayErrorBody, GatewayReply};
use crate::planner::DispatchRoute;

pub const DEFAULT_DISPATCH_TIMEOUT_MS: u64 = 2_000;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 2;

/// Positional-to-named argument mapping per verb. Verbs without an entry
/// (and surplus arguments) are named `arg0`, `arg1`, ...
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgNames(BTreeMap<String, Vec<String>>);

impl Default for ArgNames {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert("show".to_string(), vec!["text".to_string()]);
        m.insert("announce".to_string(), vec!["text".to_string()]);
        m.insert("monitor".to_string(), vec![]);
        ArgNames(m)
    }
}

impl ArgNames {
    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, Vec<String>)>) {
        self.0.extend(entries);
    }

    pub fn name_args(&self, verb: &str, args: &[Value]) -> BTreeMap<String, Value> {
        let names = self.0.get(verb).map(Vec::as_slice).unwrap_or_default();
        args.iter()
            .enumerate()
            .map(|(i, v)| {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("arg{i}"));
                (name, v.clone())
            })
            .collect()
    }
}

/// Sends abstract instructions over their routes: REST and SOAP straight to
/// the device, native devices through the gateway named by the route.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    client: reqwest::Client,
    gateways: Arc<RwLock<BTreeMap<String, String>>>,
    arg_names: Arc<ArgNames>,
}

impl Dispatcher {
    pub fn new(gateways: BTreeMap<String, String>, arg_names: ArgNames) -> Self {
        Self {
            client: http_client(),
            gateways: Arc::new(RwLock::new(gateways)),
            arg_names: Arc::new(arg_names),
        }
    }

    pub fn arg_names(&self) -> &ArgNames {
        &self.arg_names
    }

    /// Adds or replaces the base URL of a gateway.
    pub fn set_gateway(&self, gateway_id: &str, base_url: &str) {
        self.gateways.write().insert(gateway_id.to_string(), base_url.to_string());
    }

    pub fn gateways(&self) -> BTreeMap<String, String> {
        self.gateways.read().clone()
    }

    /// Retries on timeout and transport errors only, up to `max_attempts`.
    pub async fn dispatch(
        &self,
        instr: &AbstractInstruction,
        device_id: &str,
        route: &DispatchRoute,
        timeout: Duration,
        max_attempts: u32,
    ) -> DispatchResult {
        let max_attempts = max_attempts.max(1);
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            let outcome = self.attempt(instr, device_id, route, timeout).await;
            if !outcome.is_transport_failure() || attempts >= max_attempts {
                break outcome;
            }
            tracing::debug!(correlation = %instr.correlation_id, attempts, ?outcome, "retrying dispatch");
        };
        DispatchResult {
            correlation_id: instr.correlation_id.clone(),
            device_id: device_id.to_string(),
            outcome,
            attempts,
            route_used: route.clone(),
        }
    }

    async fn attempt(
        &self,
        instr: &AbstractInstruction,
        device_id: &str,
        route: &DispatchRoute,
        timeout: Duration,
    ) -> DispatchOutcome {
        let args = self.arg_names.name_args(&instr.verb, &instr.args);
        match route {
            DispatchRoute::DirectRest { endpoint } => {
                let body = RestActionBody {
                    session: instr.session_id.clone(),
                    correlation: instr.correlation_id.clone(),
                    args,
                };
                let req = self
                    .client
                    .post(wire::rest_action_url(endpoint, &instr.verb))
                    .json(&body)
                    .timeout(timeout);
                match send(req).await {
                    Ok((200, text)) => wire::rest_outcome(&text),
                    Ok((status, text)) => http_status_error(status, &text),
                    Err(o) => o,
                }
            }
            DispatchRoute::DirectSoap { endpoint } => {
                let body = wire::soap_envelope(&instr.verb, &instr.session_id, &instr.correlation_id, &args);
                let req = self
                    .client
                    .post(endpoint)
                    .header(reqwest::header::CONTENT_TYPE, "text/xml; charset=utf-8")
                    .body(body)
                    .timeout(timeout);
                match send(req).await {
                    Ok((200, text)) => wire::soap_outcome(&text),
                    Ok((status, text)) => http_status_error(status, &text),
                    Err(o) => o,
                }
            }
            DispatchRoute::ViaGateway {
                gateway_id,
                driver,
                native_address,
            } => {
                let Some(base) = self.gateways.read().get(gateway_id).cloned() else {
                    return DispatchOutcome::TransportError {
                        message: format!("no address configured for gateway {gateway_id}"),
                    };
                };
                let envelope = DispatchEnvelope {
                    device_id: device_id.to_string(),
                    driver: driver.clone(),
                    native_address: native_address.clone(),
                    verb: instr.verb.clone(),
                    args: args.into_iter().map(|(k, v)| (k, v.canonical())).collect(),
                    correlation_id: instr.correlation_id.clone(),
                    session_id: instr.session_id.clone(),
                };
                let url = format!("{}/dispatch", base.trim_end_matches('/'));
                let req = self.client.post(url).json(&envelope).timeout(timeout);
                match send(req).await {
                    Ok((200, text)) => match serde_json::from_str::<GatewayReply>(&text) {
                        Ok(reply) => reply.into_outcome(),
                        Err(_) => DispatchOutcome::DeviceError {
                            code: "BAD_REPLY".into(),
                            message: wire::excerpt(&text),
                        },
                    },
                    Ok((status, text)) => match serde_json::from_str::<GatewayErrorBody>(&text) {
                        Ok(e) => DispatchOutcome::DeviceError {
                            code: e.error,
                            message: e.message,
                        },
                        Err(_) => http_status_error(status, &text),
                    },
                    Err(o) => o,
                }
            }
        }
    }
}

pub(crate) fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .no_proxy()
        .build()
        .expect("http client configuration is static")
}

async fn send(req: reqwest::RequestBuilder) -> Result<(u16, String), DispatchOutcome> {
    let resp = req.send().await.map_err(classify)?;
    let status = resp.status().as_u16();
    let text = resp.text().await.map_err(classify)?;
    Ok((status, text))
}

fn classify(e: reqwest::Error) -> DispatchOutcome {
    if e.is_timeout() {
        DispatchOutcome::Timeout
    } else {
        DispatchOutcome::TransportError {
            message: error_chain(&e),
        }
    }
}

pub(crate) fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut src = e.source();
    while let Some(s) = src {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        src = s.source();
    }
    msg
}

fn http_status_error(status: u16, body: &str) -> DispatchOutcome {
    DispatchOutcome::DeviceError {
        code: format!("HTTP_{status}"),
        message: wire::excerpt(body),
    }
}
