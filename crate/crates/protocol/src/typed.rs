//! Typed views over message payloads. Each view validates the fields its
//! message name requires; `decode_message` runs the matching view so a
//! decoded message is always schema-valid.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::manifest::CapabilityManifest;
use crate::message::{MessageName, Payload, ProtocolMessage};
use crate::observation::{decode_b64, encode_b64, ObservationPayload};
use crate::reward::Reward;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("field `{field}`: {reason}")]
pub struct SchemaViolation {
    pub field: String,
    pub reason: String,
}

impl SchemaViolation {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SchemaViolation { field: field.into(), reason: reason.into() }
    }

    fn missing(field: &str) -> Self {
        Self::new(field, "required field is missing")
    }
}

pub fn blob_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn req<'a>(p: &'a Payload, key: &str) -> Result<&'a Value, SchemaViolation> {
    match p.get(key) {
        None | Some(Value::Null) => Err(SchemaViolation::missing(key)),
        Some(v) => Ok(v),
    }
}

fn opt<'a>(p: &'a Payload, key: &str) -> Option<&'a Value> {
    p.get(key).filter(|v| !v.is_null())
}

fn as_u64(key: &str, v: &Value) -> Result<u64, SchemaViolation> {
    v.as_u64().ok_or_else(|| SchemaViolation::new(key, "expected a non-negative integer"))
}

fn as_u32(key: &str, v: &Value) -> Result<u32, SchemaViolation> {
    as_u64(key, v)?.try_into().map_err(|_| SchemaViolation::new(key, "integer out of range"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str, SchemaViolation> {
    v.as_str().ok_or_else(|| SchemaViolation::new(key, "expected a string"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool, SchemaViolation> {
    v.as_bool().ok_or_else(|| SchemaViolation::new(key, "expected a boolean"))
}

fn as_object(key: &str, v: &Value) -> Result<Map<String, Value>, SchemaViolation> {
    v.as_object().cloned().ok_or_else(|| SchemaViolation::new(key, "expected an object"))
}

fn as_typed<T: DeserializeOwned>(key: &str, v: &Value) -> Result<T, SchemaViolation> {
    serde_json::from_value(v.clone()).map_err(|e| SchemaViolation::new(key, e.to_string()))
}

fn as_blob(key: &str, v: &Value) -> Result<Vec<u8>, SchemaViolation> {
    decode_b64(as_str(key, v)?).map_err(|e| SchemaViolation::new(key, format!("bad base64: {e}")))
}

fn opt_bool(p: &Payload, key: &str) -> Result<bool, SchemaViolation> {
    opt(p, key).map(|v| as_bool(key, v)).transpose().map(|b| b.unwrap_or(false))
}

fn put(p: &mut Payload, key: &str, v: impl Into<Value>) {
    p.insert(key.to_string(), v.into());
}

fn put_flag(p: &mut Payload, key: &str, flag: bool) {
    if flag {
        put(p, key, true);
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("protocol types serialize")
}

/// `reset`: start a new episode. With `agent_id` the worker acts as a policy
/// for that slot (action space in `env_metadata`); without it the worker owns
/// an environment instance of `task_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResetCommand {
    pub seed: u64,
    pub task_id: Option<String>,
    pub agent_id: Option<String>,
    pub env_metadata: Option<Map<String, Value>>,
    pub checkpoint: bool,
}

impl ResetCommand {
    pub fn new(seed: u64) -> Self {
        ResetCommand { seed, ..Default::default() }
    }

    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(ResetCommand {
            seed: as_u64("seed", req(p, "seed")?)?,
            task_id: opt(p, "task_id").map(|v| as_str("task_id", v).map(String::from)).transpose()?,
            agent_id: opt(p, "agent_id").map(|v| as_str("agent_id", v).map(String::from)).transpose()?,
            env_metadata: opt(p, "env_metadata").map(|v| as_object("env_metadata", v)).transpose()?,
            checkpoint: opt_bool(p, "checkpoint")?,
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "seed", self.seed);
        if let Some(t) = self.task_id {
            put(&mut p, "task_id", t);
        }
        if let Some(a) = self.agent_id {
            put(&mut p, "agent_id", a);
        }
        if let Some(m) = self.env_metadata {
            put(&mut p, "env_metadata", Value::Object(m));
        }
        put_flag(&mut p, "checkpoint", self.checkpoint);
        p
    }
}

/// `step`: advance the worker-owned environment one step. `action` forces the
/// action (used for replay); the worker's policy still advances as usual.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepCommand {
    pub action: Option<u32>,
    pub checkpoint: bool,
}

impl StepCommand {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(StepCommand {
            action: opt(p, "action").map(|v| as_u32("action", v)).transpose()?,
            checkpoint: opt_bool(p, "checkpoint")?,
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        if let Some(a) = self.action {
            put(&mut p, "action", a);
        }
        put_flag(&mut p, "checkpoint", self.checkpoint);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectActionCommand {
    pub agent_id: String,
    pub observation: ObservationPayload,
    pub info: Map<String, Value>,
    pub checkpoint: bool,
}

impl SelectActionCommand {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        let observation: ObservationPayload = as_typed("observation", req(p, "observation")?)?;
        observation.validate().map_err(|reason| SchemaViolation::new("observation", reason))?;
        Ok(SelectActionCommand {
            agent_id: as_str("agent_id", req(p, "agent_id")?)?.to_string(),
            observation,
            info: opt(p, "info").map(|v| as_object("info", v)).transpose()?.unwrap_or_default(),
            checkpoint: opt_bool(p, "checkpoint")?,
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "agent_id", self.agent_id);
        put(&mut p, "observation", to_value(&self.observation));
        if !self.info.is_empty() {
            put(&mut p, "info", Value::Object(self.info));
        }
        put_flag(&mut p, "checkpoint", self.checkpoint);
        p
    }
}

/// `restore`: reload worker state captured in an earlier checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RestoreCommand {
    pub state: Vec<u8>,
    pub digest: String,
}

impl RestoreCommand {
    pub fn new(state: Vec<u8>) -> Self {
        let digest = blob_digest(&state);
        RestoreCommand { state, digest }
    }

    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(RestoreCommand {
            state: as_blob("state", req(p, "state")?)?,
            digest: as_str("digest", req(p, "digest")?)?.to_string(),
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "state", encode_b64(&self.state));
        put(&mut p, "digest", self.digest);
        p
    }

    pub fn verify(&self) -> bool {
        blob_digest(&self.state) == self.digest
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseReady {
    pub seed: u64,
    pub observation_shape: Vec<usize>,
    pub env_metadata: Map<String, Value>,
    pub restored: bool,
    pub state: Option<Vec<u8>>,
}

impl ResponseReady {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(ResponseReady {
            seed: as_u64("seed", req(p, "seed")?)?,
            observation_shape: as_typed("observation_shape", req(p, "observation_shape")?)?,
            env_metadata: opt(p, "env_metadata").map(|v| as_object("env_metadata", v)).transpose()?.unwrap_or_default(),
            restored: opt_bool(p, "restored")?,
            state: opt(p, "state").map(|v| as_blob("state", v)).transpose()?,
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "seed", self.seed);
        put(&mut p, "observation_shape", to_value(&self.observation_shape));
        put(&mut p, "env_metadata", Value::Object(self.env_metadata));
        put_flag(&mut p, "restored", self.restored);
        if let Some(s) = self.state {
            put(&mut p, "state", encode_b64(&s));
        }
        p
    }
}

/// Render attached to a step: inline ASCII, or a blob file referenced by
/// path and digest when the frame exceeds the inline limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RenderPayload {
    Inline { ascii: String },
    Blob { path: String, digest: String, bytes: u64 },
}

/// `step_result`: either an env step (`action`, `reward`, `terminated`) or a
/// policy decision (`action` or raw `text`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseStep {
    pub action: Option<u32>,
    pub text: Option<String>,
    pub reward: Option<Reward>,
    pub terminated: Option<bool>,
    pub truncated: Option<bool>,
    pub render_payload: Option<RenderPayload>,
    pub state: Option<Vec<u8>>,
}

impl ResponseStep {
    pub fn action(action: u32) -> Self {
        ResponseStep { action: Some(action), ..Default::default() }
    }

    pub fn text(text: impl Into<String>) -> Self {
        ResponseStep { text: Some(text.into()), ..Default::default() }
    }

    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        let step = ResponseStep {
            action: opt(p, "action").map(|v| as_u32("action", v)).transpose()?,
            text: opt(p, "text").map(|v| as_str("text", v).map(String::from)).transpose()?,
            reward: opt(p, "reward").map(|v| as_typed("reward", v)).transpose()?,
            terminated: opt(p, "terminated").map(|v| as_bool("terminated", v)).transpose()?,
            truncated: opt(p, "truncated").map(|v| as_bool("truncated", v)).transpose()?,
            render_payload: opt(p, "render_payload").map(|v| as_typed("render_payload", v)).transpose()?,
            state: opt(p, "state").map(|v| as_blob("state", v)).transpose()?,
        };
        if step.action.is_none() && step.text.is_none() {
            return Err(SchemaViolation::missing("action"));
        }
        if step.terminated == Some(true) && step.truncated == Some(true) {
            return Err(SchemaViolation::new("truncated", "cannot be true alongside terminated"));
        }
        Ok(step)
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        if let Some(a) = self.action {
            put(&mut p, "action", a);
        }
        if let Some(t) = self.text {
            put(&mut p, "text", t);
        }
        if let Some(r) = self.reward {
            put(&mut p, "reward", to_value(&r));
        }
        if let Some(t) = self.terminated {
            put(&mut p, "terminated", t);
        }
        if let Some(t) = self.truncated {
            put(&mut p, "truncated", t);
        }
        if let Some(r) = self.render_payload {
            put(&mut p, "render_payload", to_value(&r));
        }
        if let Some(s) = self.state {
            put(&mut p, "state", encode_b64(&s));
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseEpisodeEnd {
    pub total_reward: Reward,
    pub episode_length: u64,
}

impl ResponseEpisodeEnd {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        let episode_length = as_u64("episode_length", req(p, "episode_length")?)?;
        if episode_length == 0 {
            return Err(SchemaViolation::new("episode_length", "must be positive"));
        }
        Ok(ResponseEpisodeEnd { total_reward: as_typed("total_reward", req(p, "total_reward")?)?, episode_length })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "total_reward", to_value(&self.total_reward));
        put(&mut p, "episode_length", self.episode_length);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorResponse {
    pub message: String,
}

impl ErrorResponse {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(ErrorResponse { message: as_str("message", req(p, "message")?)?.to_string() })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "message", self.message);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Heartbeat {
    pub seq: u64,
}

impl Heartbeat {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        Ok(Heartbeat { seq: opt(p, "seq").map(|v| as_u64("seq", v)).transpose()?.unwrap_or(0) })
    }

    pub fn into_payload(self) -> Payload {
        let mut p = Payload::new();
        put(&mut p, "seq", self.seq);
        p
    }
}

/// First line every worker prints: its capability manifest plus identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Handshake {
    pub manifest: CapabilityManifest,
    pub worker_id: Option<String>,
    pub pid: Option<u32>,
}

impl Handshake {
    pub fn from_payload(p: &Payload) -> Result<Self, SchemaViolation> {
        for key in
            ["worker_kind", "supported_commands", "observation_modalities", "max_image_history", "schema_version"]
        {
            req(p, key)?;
        }
        let value = Value::Object(p.clone().into_iter().collect());
        let manifest: CapabilityManifest =
            serde_json::from_value(value).map_err(|e| SchemaViolation::new("handshake", e.to_string()))?;
        manifest.validate().map_err(|reason| SchemaViolation::new("handshake", reason))?;
        Ok(Handshake {
            manifest,
            worker_id: opt(p, "worker_id").map(|v| as_str("worker_id", v).map(String::from)).transpose()?,
            pid: opt(p, "pid").map(|v| as_u32("pid", v)).transpose()?,
        })
    }

    pub fn into_payload(self) -> Payload {
        let mut p: Payload = match to_value(&self.manifest) {
            Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!("manifest serializes to an object"),
        };
        if let Some(id) = self.worker_id {
            put(&mut p, "worker_id", id);
        }
        if let Some(pid) = self.pid {
            put(&mut p, "pid", pid);
        }
        p
    }
}

/// Validates a payload against the schema of `name`.
pub(crate) fn validate(name: MessageName, p: &Payload) -> Result<(), SchemaViolation> {
    match name {
        MessageName::Reset => ResetCommand::from_payload(p).map(drop),
        MessageName::Step => StepCommand::from_payload(p).map(drop),
        MessageName::SelectAction => SelectActionCommand::from_payload(p).map(drop),
        MessageName::Restore => RestoreCommand::from_payload(p).map(drop),
        MessageName::Stop | MessageName::Train => Ok(()),
        MessageName::Handshake => Handshake::from_payload(p).map(drop),
        MessageName::Ready => ResponseReady::from_payload(p).map(drop),
        MessageName::StepResult => ResponseStep::from_payload(p).map(drop),
        MessageName::EpisodeEnd => ResponseEpisodeEnd::from_payload(p).map(drop),
        MessageName::Error => ErrorResponse::from_payload(p).map(drop),
        MessageName::Heartbeat => Heartbeat::from_payload(p).map(drop),
    }
}

impl ProtocolMessage {
    pub fn reset(correlation_id: u64, cmd: ResetCommand) -> Self {
        Self::new(MessageName::Reset, correlation_id, cmd.into_payload())
    }

    pub fn step(correlation_id: u64, cmd: StepCommand) -> Self {
        Self::new(MessageName::Step, correlation_id, cmd.into_payload())
    }

    pub fn stop(correlation_id: u64) -> Self {
        Self::bare(MessageName::Stop, correlation_id)
    }

    pub fn select_action(correlation_id: u64, cmd: SelectActionCommand) -> Self {
        Self::new(MessageName::SelectAction, correlation_id, cmd.into_payload())
    }

    pub fn restore(correlation_id: u64, cmd: RestoreCommand) -> Self {
        Self::new(MessageName::Restore, correlation_id, cmd.into_payload())
    }

    pub fn ready(correlation_id: u64, r: ResponseReady) -> Self {
        Self::new(MessageName::Ready, correlation_id, r.into_payload())
    }

    pub fn step_result(correlation_id: u64, r: ResponseStep) -> Self {
        Self::new(MessageName::StepResult, correlation_id, r.into_payload())
    }

    pub fn episode_end(correlation_id: u64, r: ResponseEpisodeEnd) -> Self {
        Self::new(MessageName::EpisodeEnd, correlation_id, r.into_payload())
    }

    pub fn error(correlation_id: u64, message: impl Into<String>) -> Self {
        Self::new(MessageName::Error, correlation_id, ErrorResponse { message: message.into() }.into_payload())
    }

    pub fn heartbeat(seq: u64) -> Self {
        Self::new(MessageName::Heartbeat, 0, Heartbeat { seq }.into_payload())
    }

    pub fn handshake(h: Handshake) -> Self {
        Self::new(MessageName::Handshake, 0, h.into_payload())
    }
}
