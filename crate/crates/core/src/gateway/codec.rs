//! The `lineproto` native protocol: one ASCII line per message, fields
//! separated by single spaces, argument values base64-encoded (RFC 4648
//! standard alphabet, padded).
//!
//! ```text
//! gateway -> device   CMD <verb> <key>=<b64>...
//! device  -> gateway  OK
//!                     ERR <code> <message...>
//!                     EVT <event_type> <key>=<b64>...
//! ```

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use thiserror::Error;

use super::DispatchEnvelope;

pub const LINEPROTO: &str = "lineproto";

/// One LF-terminated protocol line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NativeLine(String);

impl NativeLine {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for NativeLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NativeMessage {
    Ok,
    DeviceError {
        code: String,
        message: String,
    },
    Event {
        event_type: String,
        payload: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("ENCODING_ERROR: {0}")]
    Encoding(String),
    #[error("MALFORMED_LINE({0:?})")]
    MalformedLine(String),
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_wire_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn tagged_line<'a>(
    tag: &str,
    name: &str,
    fields: impl IntoIterator<Item = (&'a String, &'a String)>,
) -> Result<NativeLine, CodecError> {
    if !is_wire_ident(name) {
        return Err(CodecError::Encoding(format!("`{name}` is not an identifier")));
    }
    let mut line = format!("{tag} {name}");
    for (k, v) in fields {
        if !is_wire_ident(k) {
            return Err(CodecError::Encoding(format!("key `{k}` is not an identifier")));
        }
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(&STANDARD.encode(v.as_bytes()));
    }
    line.push('\n');
    Ok(NativeLine(line))
}

/// `CMD <verb> <key>=<b64 value>...`, keys ascending.
pub fn encode_native(env: &DispatchEnvelope) -> Result<NativeLine, CodecError> {
    if env.driver != LINEPROTO {
        return Err(CodecError::Encoding(format!(
            "driver `{}` has no line encoding",
            env.driver
        )));
    }
    encode_command(&env.verb, &env.args)
}

pub fn encode_command(verb: &str, args: &BTreeMap<String, String>) -> Result<NativeLine, CodecError> {
    tagged_line("CMD", verb, args)
}

pub fn encode_event(event_type: &str, payload: &BTreeMap<String, String>) -> Result<NativeLine, CodecError> {
    tagged_line("EVT", event_type, payload)
}

pub fn encode_ok() -> NativeLine {
    NativeLine("OK\n".into())
}

/// `ERR <code> <message>`. Non-printable or non-ASCII message characters
/// become `?`.
pub fn encode_error(code: &str, message: &str) -> Result<NativeLine, CodecError> {
    if code.is_empty() || !code.chars().all(|c| c.is_ascii_graphic()) {
        return Err(CodecError::Encoding(format!("bad error code `{code}`")));
    }
    let message: String = message
        .chars()
        .map(|c| if c == ' ' || c.is_ascii_graphic() { c } else { '?' })
        .collect();
    Ok(NativeLine(if message.is_empty() {
        format!("ERR {code}\n")
    } else {
        format!("ERR {code} {message}\n")
    }))
}

fn strip_terminator(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

fn malformed(line: &str) -> CodecError {
    CodecError::MalformedLine(line.chars().take(64).collect())
}

fn decode_fields<'a>(
    raw: &str,
    parts: impl Iterator<Item = &'a str>,
) -> Result<BTreeMap<String, String>, CodecError> {
    let mut out = BTreeMap::new();
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(|| malformed(raw))?;
        if !is_wire_ident(k) {
            return Err(malformed(raw));
        }
        let bytes = STANDARD.decode(v).map_err(|_| malformed(raw))?;
        let value = String::from_utf8(bytes).map_err(|_| malformed(raw))?;
        out.insert(k.to_string(), value);
    }
    Ok(out)
}

/// Decodes a device-to-gateway line.
pub fn decode_native(line: &str) -> Result<NativeMessage, CodecError> {
    let body = strip_terminator(line);
    if body.contains('\n') {
        return Err(malformed(line));
    }
    let (head, rest) = body.split_once(' ').unwrap_or((body, ""));
    match head {
        "OK" if rest.is_empty() => Ok(NativeMessage::Ok),
        "ERR" => {
            let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
            if code.is_empty() {
                return Err(malformed(line));
            }
            Ok(NativeMessage::DeviceError {
                code: code.to_string(),
                message: message.to_string(),
            })
        }
        "EVT" => {
            let mut parts = rest.split(' ');
            let event_type = parts.next().filter(|t| is_wire_ident(t)).ok_or_else(|| malformed(line))?;
            Ok(NativeMessage::Event {
                event_type: event_type.to_string(),
                payload: decode_fields(line, parts)?,
            })
        }
        _ => Err(malformed(line)),
    }
}

/// Decodes a gateway-to-device `CMD` line into `(verb, args)`.
pub fn decode_command(line: &str) -> Result<(String, BTreeMap<String, String>), CodecError> {
    let body = strip_terminator(line);
    let mut parts = body.split(' ');
    if parts.next() != Some("CMD") {
        return Err(malformed(line));
    }
    let verb = parts.next().filter(|v| is_wire_ident(v)).ok_or_else(|| malformed(line))?;
    Ok((verb.to_string(), decode_fields(line, parts)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(verb: &str, args: &[(&str, &str)]) -> DispatchEnvelope {
        DispatchEnvelope {
            device_id: "spk-native-1".into(),
            driver: LINEPROTO.into(),
            native_address: "127.0.0.1:7001".into(),
            verb: verb.into(),
            args: args.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            correlation_id: "c".into(),
            session_id: "s".into(),
        }
    }

    #[test]
    fn golden_vectors() {
        assert_eq!(
            encode_native(&env("announce", &[("text", "Go left")])).unwrap().as_str(),
            "CMD announce text=R28gbGVmdA==\n"
        );
        assert_eq!(
            encode_native(&env("show", &[("text", "A")])).unwrap().as_str(),
            "CMD show text=QQ==\n"
        );
        assert_eq!(encode_native(&env("ping", &[])).unwrap().as_str(), "CMD ping\n");
        assert_eq!(
            encode_native(&env("set", &[("b", "2"), ("a", "1")])).unwrap().as_str(),
            "CMD set a=MQ== b=Mg==\n"
        );
    }

    #[test]
    fn encoding_errors() {
        assert!(matches!(
            encode_native(&env("bad verb", &[])),
            Err(CodecError::Encoding(_))
        ));
        assert!(matches!(
            encode_native(&env("show", &[("a-b", "x")])),
            Err(CodecError::Encoding(_))
        ));
        let mut e = env("show", &[]);
        e.driver = "other".into();
        assert!(encode_native(&e).is_err());
    }

    #[test]
    fn decode_lines() {
        assert_eq!(decode_native("OK\n").unwrap(), NativeMessage::Ok);
        assert_eq!(
            decode_native("ERR BUSY device busy\n").unwrap(),
            NativeMessage::DeviceError {
                code: "BUSY".into(),
                message: "device busy".into()
            }
        );
        assert_eq!(
            decode_native("EVT movement direction=bm9ydGg=\n").unwrap(),
            NativeMessage::Event {
                event_type: "movement".into(),
                payload: [("direction".to_string(), "north".to_string())].into()
            }
        );
        assert!(matches!(decode_native("WAT\n"), Err(CodecError::MalformedLine(_))));
        assert!(decode_native("EVT movement direction=!!!\n").is_err());
        assert!(decode_native("ERR\n").is_err());
        assert!(decode_native("OK extra\n").is_err());
    }

    #[test]
    fn command_decode() {
        let (verb, args) = decode_command("CMD announce text=R28gbGVmdA==\n").unwrap();
        assert_eq!(verb, "announce");
        assert_eq!(args["text"], "Go left");
        assert!(decode_command("OK\n").is_err());
    }

    #[test]
    fn error_lines_stay_ascii() {
        assert_eq!(encode_error("BUSY", "héllo\n").unwrap().as_str(), "ERR BUSY h?llo?\n");
        assert_eq!(encode_error("BUSY", "").unwrap().as_str(), "ERR BUSY\n");
        assert!(encode_error("", "x").is_err());
    }
}
