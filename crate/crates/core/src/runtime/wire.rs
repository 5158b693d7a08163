//! Wire formats for direct device dispatch.
//!
//! REST: `POST {endpoint}/actions/{verb}` with
//! `{"session":..,"correlation":..,"args":{..}}`; replies are
//! `{"result":"ok"}` or `{"error":{"code":..,"message":..}}`.
//!
//! SOAP (simplified envelope): `POST {endpoint}` with
//! `<Envelope><Body><{verb} session=".." correlation=".."><arg name="..">..</arg></{verb}></Body></Envelope>`;
//! replies are `<Envelope><Body><ok/></Body></Envelope>` or a `<fault code=".." message=".."/>` body.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::value::Value;
use super::DispatchOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestActionBody {
    pub session: String,
    pub correlation: String,
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceErrorBody {
    pub code: String,
    #[serde(default)]
    pub message: String,
}

/// Reply body of a REST device action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RestReply {
    Ok { result: String },
    Error { error: DeviceErrorBody },
}

impl RestReply {
    pub fn ok() -> Self {
        RestReply::Ok {
            result: "ok".into(),
        }
    }

    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        RestReply::Error {
            error: DeviceErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

pub fn rest_action_url(endpoint: &str, verb: &str) -> String {
    format!("{}/actions/{verb}", endpoint.trim_end_matches('/'))
}

pub fn rest_outcome(body: &str) -> DispatchOutcome {
    match serde_json::from_str::<RestReply>(body) {
        Ok(RestReply::Ok { result }) if result == "ok" => DispatchOutcome::Ok,
        Ok(RestReply::Error { error }) => DispatchOutcome::DeviceError {
            code: error.code,
            message: error.message,
        },
        _ => DispatchOutcome::DeviceError {
            code: "BAD_REPLY".into(),
            message: excerpt(body),
        },
    }
}

pub(crate) fn excerpt(s: &str) -> String {
    s.chars().take(80).collect()
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn xml_unescape(s: &str) -> Result<String, SoapError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let end = tail.find(';').ok_or(SoapError("unterminated entity"))?;
        out.push(match &tail[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&apos;" => '\'',
            _ => return Err(SoapError("unknown entity")),
        });
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn soap_envelope(verb: &str, session: &str, correlation: &str, args: &BTreeMap<String, Value>) -> String {
    let mut out = format!(
        "<Envelope><Body><{verb} session=\"{}\" correlation=\"{}\">",
        xml_escape(session),
        xml_escape(correlation)
    );
    for (name, value) in args {
        out.push_str(&format!(
            "<arg name=\"{}\">{}</arg>",
            xml_escape(name),
            xml_escape(&value.canonical())
        ));
    }
    out.push_str(&format!("</{verb}></Body></Envelope>"));
    out
}

pub const SOAP_OK: &str = "<Envelope><Body><ok/></Body></Envelope>";

pub fn soap_fault(code: &str, message: &str) -> String {
    format!(
        "<Envelope><Body><fault code=\"{}\" message=\"{}\"/></Body></Envelope>",
        xml_escape(code),
        xml_escape(message)
    )
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let needle = format!(" {name}=\"");
    let start = tag.find(&needle)? + needle.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

pub fn soap_outcome(body: &str) -> DispatchOutcome {
    if body.contains("<ok/>") {
        return DispatchOutcome::Ok;
    }
    if let Some(i) = body.find("<fault") {
        let tag_end = body[i..].find('>').map_or(body.len(), |e| i + e);
        let tag = &body[i..tag_end];
        let get = |n| {
            attr(tag, n)
                .map(|v| xml_unescape(v).unwrap_or_else(|_| v.to_string()))
                .unwrap_or_default()
        };
        return DispatchOutcome::DeviceError {
            code: get("code"),
            message: get("message"),
        };
    }
    DispatchOutcome::DeviceError {
        code: "BAD_REPLY".into(),
        message: excerpt(body),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed SOAP envelope: {0}")]
pub struct SoapError(&'static str);

/// A decoded SOAP action request, as a device sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoapRequest {
    pub verb: String,
    pub session: String,
    pub correlation: String,
    pub args: BTreeMap<String, String>,
}

pub fn parse_soap_request(body: &str) -> Result<SoapRequest, SoapError> {
    let rest = body
        .trim()
        .strip_prefix("<Envelope><Body><")
        .ok_or(SoapError("missing envelope"))?;
    let open_end = rest.find('>').ok_or(SoapError("unterminated action tag"))?;
    let open = &rest[..open_end];
    let verb = open.split(' ').next().unwrap_or_default().to_string();
    if verb.is_empty() {
        return Err(SoapError("missing verb"));
    }
    let session = xml_unescape(attr(open, "session").ok_or(SoapError("missing session"))?)?;
    let correlation =
        xml_unescape(attr(open, "correlation").ok_or(SoapError("missing correlation"))?)?;
    let mut rest = &rest[open_end + 1..];
    let mut args = BTreeMap::new();
    while let Some(after) = rest.strip_prefix("<arg name=\"") {
        let name_end = after.find("\">").ok_or(SoapError("unterminated arg name"))?;
        let name = xml_unescape(&after[..name_end])?;
        let after = &after[name_end + 2..];
        let value_end = after.find("</arg>").ok_or(SoapError("unterminated arg"))?;
        args.insert(name, xml_unescape(&after[..value_end])?);
        rest = &after[value_end + "</arg>".len()..];
    }
    let close = format!("</{verb}></Body></Envelope>");
    if rest != close {
        return Err(SoapError("unexpected content after arguments"));
    }
    Ok(SoapRequest {
        verb,
        session,
        correlation,
        args,
    })
}
