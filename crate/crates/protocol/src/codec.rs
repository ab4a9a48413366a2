use semver::Version;
use serde_json::Value;

use crate::canonical;
use crate::message::{MessageKind, MessageName, Payload, ProtocolMessage};
use crate::typed;
use crate::version::protocol_version;
use crate::MAX_LINE_BYTES;

const ENVELOPE_KEYS: [&str; 4] = ["cmd", "type", "correlation_id", "v"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("payload key `{0}` collides with an envelope key")]
    ReservedKey(String),
    #[error("payload value under `{0}` cannot be serialized")]
    Unserializable(String),
    #[error("encoded message is {0} bytes, over the line limit")]
    TooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeErrorClass {
    /// Oversized line or embedded line break.
    Framing,
    Syntax,
    UnknownName,
    Schema,
    Version,
}

impl DecodeErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeErrorClass::Framing => "framing",
            DecodeErrorClass::Syntax => "syntax",
            DecodeErrorClass::UnknownName => "unknown-name",
            DecodeErrorClass::Schema => "schema",
            DecodeErrorClass::Version => "version",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{} error{}: {detail}", class.as_str(), field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
pub struct DecodeError {
    pub class: DecodeErrorClass,
    pub field: Option<String>,
    pub detail: String,
    /// The offending line, truncated to 4 KiB.
    pub raw: String,
}

impl DecodeError {
    fn new(class: DecodeErrorClass, raw: &str, detail: impl Into<String>) -> Self {
        let mut cut = raw.len().min(4096);
        while !raw.is_char_boundary(cut) {
            cut -= 1;
        }
        DecodeError { class, field: None, detail: detail.into(), raw: raw[..cut].to_string() }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }
}

/// Serializes a message as one canonical line ending in `\n`.
pub fn encode_message(msg: &ProtocolMessage) -> Result<String, EncodeError> {
    let mut object = serde_json::Map::new();
    for (key, value) in &msg.payload {
        if ENVELOPE_KEYS.contains(&key.as_str()) {
            return Err(EncodeError::ReservedKey(key.clone()));
        }
        if contains_non_finite(value) {
            return Err(EncodeError::Unserializable(key.clone()));
        }
        object.insert(key.clone(), value.clone());
    }
    object.insert(msg.kind.tag_key().into(), Value::String(msg.name.as_str().into()));
    object.insert("correlation_id".into(), Value::from(msg.correlation_id));
    object.insert("v".into(), Value::String(msg.protocol_version.to_string()));
    let line = canonical::to_line(&Value::Object(object));
    if line.len() - 1 > MAX_LINE_BYTES {
        return Err(EncodeError::TooLong(line.len() - 1));
    }
    Ok(line)
}

fn contains_non_finite(value: &Value) -> bool {
    match value {
        Value::Number(n) => n.as_f64().is_some_and(|f| !f.is_finite()),
        Value::Array(items) => items.iter().any(contains_non_finite),
        Value::Object(map) => map.values().any(contains_non_finite),
        _ => false,
    }
}

/// Parses and validates one line (a trailing `\n` or `\r\n` is allowed).
///
/// Accepts any input; the result is always a valid message or a classified
/// error carrying the raw line.
pub fn decode_message(line: &str) -> Result<ProtocolMessage, DecodeError> {
    let body = line.strip_suffix('\n').unwrap_or(line);
    let body = body.strip_suffix('\r').unwrap_or(body);
    if body.len() > MAX_LINE_BYTES {
        return Err(DecodeError::new(DecodeErrorClass::Framing, body, "line exceeds 1 MiB"));
    }
    if body.contains('\n') {
        return Err(DecodeError::new(DecodeErrorClass::Framing, body, "embedded line break"));
    }
    let value: Value =
        serde_json::from_str(body).map_err(|e| DecodeError::new(DecodeErrorClass::Syntax, body, e.to_string()))?;
    let Value::Object(mut object) = value else {
        return Err(DecodeError::new(DecodeErrorClass::Syntax, body, "message is not a JSON object"));
    };

    let (kind, tag) = match (object.remove("cmd"), object.remove("type")) {
        (Some(tag), None) => (MessageKind::Command, tag),
        (None, Some(tag)) => (MessageKind::Response, tag),
        (Some(_), Some(_)) => {
            return Err(DecodeError::new(DecodeErrorClass::Schema, body, "both `cmd` and `type` present").field("cmd"))
        }
        (None, None) => {
            return Err(DecodeError::new(DecodeErrorClass::Schema, body, "missing `cmd` or `type`").field("cmd"))
        }
    };
    let Value::String(tag) = tag else {
        return Err(
            DecodeError::new(DecodeErrorClass::Schema, body, "message name must be a string").field(kind.tag_key())
        );
    };
    let name = MessageName::lookup(kind, &tag).ok_or_else(|| {
        DecodeError::new(DecodeErrorClass::UnknownName, body, format!("unknown message name `{tag}`"))
            .field(kind.tag_key())
    })?;

    let version = match object.remove("v") {
        Some(Value::String(v)) => Version::parse(&v)
            .map_err(|e| DecodeError::new(DecodeErrorClass::Schema, body, format!("bad version: {e}")).field("v"))?,
        Some(_) => return Err(DecodeError::new(DecodeErrorClass::Schema, body, "version must be a string").field("v")),
        None => return Err(DecodeError::new(DecodeErrorClass::Schema, body, "missing version").field("v")),
    };
    if version.major != protocol_version().major {
        return Err(DecodeError::new(
            DecodeErrorClass::Version,
            body,
            format!("protocol {version} is not compatible with {}", protocol_version()),
        )
        .field("v"));
    }

    let correlation = object.remove("correlation_id");
    let payload: Payload = object.into_iter().collect();
    typed::validate(name, &payload).map_err(|violation| {
        DecodeError::new(DecodeErrorClass::Schema, body, violation.reason).field(violation.field)
    })?;

    let correlation_id = match correlation {
        Some(v) => v.as_u64().ok_or_else(|| {
            DecodeError::new(DecodeErrorClass::Schema, body, "expected a non-negative integer").field("correlation_id")
        })?,
        None => {
            return Err(
                DecodeError::new(DecodeErrorClass::Schema, body, "required field is missing").field("correlation_id")
            )
        }
    };

    Ok(ProtocolMessage { kind, name, payload, protocol_version: version, correlation_id })
}
