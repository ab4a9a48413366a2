//! Worker wire protocol.
//!
//! Every message is one JSON document on one line, keys in lexicographic
//! order, terminated by `\n`. Commands flow orchestrator → worker and carry a
//! `cmd` key; responses flow back and carry a `type` key. Both carry the
//! protocol version under `v` and a `correlation_id`.
//!
//! Correlation id `0` is reserved for unsolicited worker traffic
//! (`handshake`, `heartbeat`, and errors for lines the worker could not
//! parse). Commands start at `1` and increase strictly per worker.

pub mod canonical;
mod codec;
mod manifest;
mod message;
mod observation;
mod reward;
pub mod schema;
mod typed;
mod version;

pub use codec::{decode_message, encode_message, DecodeError, DecodeErrorClass, EncodeError};
pub use manifest::{
    negotiate, CapabilityManifest, ModalityKind, NegotiatedSession, NegotiationError, Unmet, WorkerKind,
};
pub use message::{MessageKind, MessageName, Payload, ProtocolMessage};
pub use observation::{ActionSpace, ActionSpaceError, Modality, ObservationPayload, RgbImage};
pub use reward::{Reward, RewardError};
pub use typed::{
    blob_digest, ErrorResponse, Handshake, Heartbeat, RenderPayload, ResetCommand, ResponseEpisodeEnd, ResponseReady,
    ResponseStep, RestoreCommand, SchemaViolation, SelectActionCommand, StepCommand,
};
pub use version::{protocol_version, PROTOCOL_VERSION};

/// Longest line accepted on the wire, terminator excluded.
pub const MAX_LINE_BYTES: usize = 1 << 20;

/// Render payloads larger than this are written to a blob file and referenced.
pub const INLINE_RENDER_LIMIT: usize = 64 * 1024;
