use std::collections::BTreeSet;
use std::fmt;

use semver::Version;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::message::MessageName;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerKind {
    Rl,
    Llm,
    Vlm,
    Human,
    Baseline,
}

impl WorkerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkerKind::Rl => "rl",
            WorkerKind::Llm => "llm",
            WorkerKind::Vlm => "vlm",
            WorkerKind::Human => "human",
            WorkerKind::Baseline => "baseline",
        }
    }
}

impl fmt::Display for WorkerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw observation channels a worker can consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Tensor,
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityManifest {
    pub worker_kind: WorkerKind,
    pub supported_commands: BTreeSet<MessageName>,
    pub observation_modalities: BTreeSet<ModalityKind>,
    pub max_image_history: u32,
    #[serde(with = "version_str")]
    pub schema_version: Version,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_metadata: Option<Map<String, Value>>,
}

mod version_str {
    use semver::Version;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Version, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Version, D::Error> {
        let text = String::deserialize(d)?;
        Version::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl CapabilityManifest {
    /// Checks the manifest's own invariants.
    pub fn validate(&self) -> Result<(), String> {
        for required in [MessageName::Reset, MessageName::Stop] {
            if !self.supported_commands.contains(&required) {
                return Err(format!("supported_commands must include `{required}`"));
            }
        }
        if let Some(name) = self.supported_commands.iter().find(|n| n.kind() != crate::MessageKind::Command) {
            return Err(format!("`{name}` is not a command"));
        }
        let has_image = self.observation_modalities.contains(&ModalityKind::Image);
        if self.max_image_history > 0 && !has_image {
            return Err("max_image_history > 0 requires the image modality".into());
        }
        if self.worker_kind == WorkerKind::Llm && self.max_image_history != 0 {
            return Err("text-only workers must declare max_image_history = 0".into());
        }
        Ok(())
    }
}

/// One unmet requirement found during negotiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unmet {
    InvalidManifest(String),
    Kind { expected: WorkerKind, offered: WorkerKind },
    Version { ours: Version, theirs: Version },
    MissingCommand(MessageName),
    Modality { requested: BTreeSet<ModalityKind>, offered: BTreeSet<ModalityKind> },
    ImageHistory { requested: u32, offered: u32 },
}

impl fmt::Display for Unmet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unmet::InvalidManifest(reason) => write!(f, "invalid manifest: {reason}"),
            Unmet::Kind { expected, offered } => {
                write!(f, "worker kind {offered} does not match expected {expected}")
            }
            Unmet::Version { ours, theirs } => {
                write!(f, "schema version {theirs} incompatible with {ours} (major differs)")
            }
            Unmet::MissingCommand(name) => write!(f, "command `{name}` not supported"),
            Unmet::Modality { requested, offered } => {
                write!(f, "modality: requested {requested:?}, offered {offered:?}")
            }
            Unmet::ImageHistory { requested, offered } => {
                write!(f, "modality: image history {requested} requested, worker keeps {offered}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("negotiation failed: {}", .unmet.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct NegotiationError {
    pub unmet: Vec<Unmet>,
}

impl NegotiationError {
    pub fn has_modality_error(&self) -> bool {
        self.unmet.iter().any(|u| matches!(u, Unmet::Modality { .. } | Unmet::ImageHistory { .. }))
    }

    pub fn has_version_error(&self) -> bool {
        self.unmet.iter().any(|u| matches!(u, Unmet::Version { .. }))
    }
}

/// What both sides agreed to after the handshake.
#[derive(Debug, Clone, PartialEq)]
pub struct NegotiatedSession {
    pub worker_kind: WorkerKind,
    pub modalities: BTreeSet<ModalityKind>,
    pub schema_version: Version,
    pub supported_commands: BTreeSet<MessageName>,
    pub max_image_history: u32,
    pub env_metadata: Option<Map<String, Value>>,
}

impl NegotiatedSession {
    pub fn supports(&self, name: MessageName) -> bool {
        self.supported_commands.contains(&name)
    }
}

/// Matches a worker's handshake against what the orchestrator needs.
///
/// `required.supported_commands` must be a subset of the worker's, majors must
/// agree, and the modality sets must intersect (every requested image frame
/// must also fit the worker's history). The agreed schema version is the
/// lower of the two.
pub fn negotiate(
    handshake: &CapabilityManifest,
    required: &CapabilityManifest,
) -> Result<NegotiatedSession, NegotiationError> {
    let mut unmet = Vec::new();
    if let Err(reason) = handshake.validate() {
        unmet.push(Unmet::InvalidManifest(reason));
    }
    if handshake.worker_kind != required.worker_kind {
        unmet.push(Unmet::Kind { expected: required.worker_kind, offered: handshake.worker_kind });
    }
    if handshake.schema_version.major != required.schema_version.major {
        unmet.push(Unmet::Version { ours: required.schema_version.clone(), theirs: handshake.schema_version.clone() });
    }
    for name in required.supported_commands.difference(&handshake.supported_commands) {
        unmet.push(Unmet::MissingCommand(*name));
    }
    let modalities: BTreeSet<ModalityKind> =
        handshake.observation_modalities.intersection(&required.observation_modalities).copied().collect();
    if modalities.is_empty() {
        unmet.push(Unmet::Modality {
            requested: required.observation_modalities.clone(),
            offered: handshake.observation_modalities.clone(),
        });
    } else if required.max_image_history > handshake.max_image_history {
        unmet.push(Unmet::ImageHistory { requested: required.max_image_history, offered: handshake.max_image_history });
    }
    if !unmet.is_empty() {
        return Err(NegotiationError { unmet });
    }
    let schema_version = if handshake.schema_version < required.schema_version {
        handshake.schema_version.clone()
    } else {
        required.schema_version.clone()
    };
    Ok(NegotiatedSession {
        worker_kind: handshake.worker_kind,
        schema_version,
        supported_commands: handshake.supported_commands.clone(),
        max_image_history: if modalities.contains(&ModalityKind::Image) {
            handshake.max_image_history.min(required.max_image_history)
        } else {
            0
        },
        modalities,
        env_metadata: handshake.env_metadata.clone(),
    })
}
