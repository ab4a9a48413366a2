use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use semver::Version;
use serde_json::Value;

use crate::version::protocol_version;

/// Message body: every top-level key except the envelope (`cmd`/`type`,
/// `correlation_id`, `v`). Unknown keys survive decode/encode untouched.
pub type Payload = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Command,
    Response,
}

impl MessageKind {
    /// Envelope key naming the message.
    pub fn tag_key(self) -> &'static str {
        match self {
            MessageKind::Command => "cmd",
            MessageKind::Response => "type",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageName {
    Reset,
    Step,
    Stop,
    SelectAction,
    Restore,
    /// Reserved; every built-in worker rejects it.
    Train,
    Handshake,
    Ready,
    StepResult,
    EpisodeEnd,
    Error,
    Heartbeat,
}

impl MessageName {
    pub const ALL: [MessageName; 12] = [
        MessageName::Reset,
        MessageName::Step,
        MessageName::Stop,
        MessageName::SelectAction,
        MessageName::Restore,
        MessageName::Train,
        MessageName::Handshake,
        MessageName::Ready,
        MessageName::StepResult,
        MessageName::EpisodeEnd,
        MessageName::Error,
        MessageName::Heartbeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageName::Reset => "reset",
            MessageName::Step => "step",
            MessageName::Stop => "stop",
            MessageName::SelectAction => "select_action",
            MessageName::Restore => "restore",
            MessageName::Train => "train",
            MessageName::Handshake => "handshake",
            MessageName::Ready => "ready",
            MessageName::StepResult => "step_result",
            MessageName::EpisodeEnd => "episode_end",
            MessageName::Error => "error",
            MessageName::Heartbeat => "heartbeat",
        }
    }

    pub fn kind(self) -> MessageKind {
        match self {
            MessageName::Reset
            | MessageName::Step
            | MessageName::Stop
            | MessageName::SelectAction
            | MessageName::Restore
            | MessageName::Train => MessageKind::Command,
            _ => MessageKind::Response,
        }
    }

    pub fn lookup(kind: MessageKind, name: &str) -> Option<MessageName> {
        name.parse::<MessageName>().ok().filter(|n| n.kind() == kind)
    }
}

impl fmt::Display for MessageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageName {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        MessageName::ALL.into_iter().find(|n| n.as_str() == s).ok_or(())
    }
}

impl serde::Serialize for MessageName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for MessageName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| serde::de::Error::custom(format!("unknown message name `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub name: MessageName,
    pub payload: Payload,
    pub protocol_version: Version,
    pub correlation_id: u64,
}

impl ProtocolMessage {
    /// A message at the current protocol version; kind follows from the name.
    pub fn new(name: MessageName, correlation_id: u64, payload: Payload) -> Self {
        ProtocolMessage { kind: name.kind(), name, payload, protocol_version: protocol_version(), correlation_id }
    }

    pub fn bare(name: MessageName, correlation_id: u64) -> Self {
        Self::new(name, correlation_id, Payload::new())
    }

    pub fn is(&self, name: MessageName) -> bool {
        self.name == name
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.payload.get(key)
    }
}
