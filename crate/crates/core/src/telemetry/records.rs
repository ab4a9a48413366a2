use std::collections::BTreeMap;

use mosaic_protocol::{canonical, schema, Reward, WorkerKind};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::operator::phi::ParseOutcome;

/// Version stamped into every record.
pub const RECORD_SCHEMA_VERSION: &str = "1.0.0";

/// One slot's decision and outcome at one env step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub schema_version: String,
    pub run_id: String,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<u32>,
    pub episode_index: u64,
    pub step_index: u64,
    pub slot: String,
    pub paradigm: WorkerKind,
    pub action: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_outcome: Option<ParseOutcome>,
    pub reward: Reward,
    pub terminated: bool,
    pub truncated: bool,
    pub obs_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_ref: Option<String>,
}

impl StepRecord {
    /// Identity within a run: no two persisted records share it.
    pub fn key(&self) -> StepKey {
        StepKey {
            session_id: self.session_id.clone(),
            replica: self.replica,
            episode_index: self.episode_index,
            step_index: self.step_index,
            slot: self.slot.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepKey {
    pub session_id: String,
    pub replica: Option<u32>,
    pub episode_index: u64,
    pub step_index: u64,
    pub slot: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub schema_version: String,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<u32>,
    pub episode_index: u64,
    pub totals: BTreeMap<String, Reward>,
    pub episode_length: u64,
    pub team_scores: BTreeMap<String, i32>,
    /// Winning team, `draw`, or absent for single-team tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<String>,
    #[serde(default)]
    pub terminated: bool,
    #[serde(default)]
    pub truncated: bool,
}

pub const DRAW: &str = "draw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TelemetryRecord {
    Step(StepRecord),
    Episode(EpisodeRecord),
}

impl TelemetryRecord {
    pub fn run_id(&self) -> &str {
        match self {
            TelemetryRecord::Step(s) => &s.run_id,
            TelemetryRecord::Episode(e) => &e.run_id,
        }
    }

    pub fn schema_version(&self) -> &str {
        match self {
            TelemetryRecord::Step(s) => &s.schema_version,
            TelemetryRecord::Episode(e) => &e.schema_version,
        }
    }

    /// Canonical line: sorted keys, newline-terminated.
    pub fn to_line(&self) -> String {
        canonical::to_line_of(self).expect("records serialize")
    }
}

impl From<StepRecord> for TelemetryRecord {
    fn from(r: StepRecord) -> Self {
        TelemetryRecord::Step(r)
    }
}

impl From<EpisodeRecord> for TelemetryRecord {
    fn from(r: EpisodeRecord) -> Self {
        TelemetryRecord::Episode(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TelemetryError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("schema: field `{field}` {reason}")]
    Schema { field: String, reason: String },
    #[error("schema version {found} is not readable by {ours}")]
    Version { found: String, ours: &'static str },
    #[error("record belongs to run `{found}`, expected `{expected}`")]
    RunMismatch { expected: String, found: String },
    #[error("duplicate record {0}")]
    Duplicate(String),
    #[error("record {0} arrived out of order")]
    OutOfOrder(String),
    #[error("episode {episode} totals disagree with step records: {detail}")]
    Reconcile { episode: u64, detail: String },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("io: {0}")]
    Io(String),
}

impl TelemetryError {
    pub fn class(&self) -> &'static str {
        match self {
            TelemetryError::Malformed(_) => "malformed",
            TelemetryError::Schema { .. } => "schema",
            TelemetryError::Version { .. } => "version",
            TelemetryError::RunMismatch { .. } => "run_mismatch",
            TelemetryError::Duplicate(_) => "duplicate",
            TelemetryError::OutOfOrder(_) => "out_of_order",
            TelemetryError::Reconcile { .. } => "reconcile",
            TelemetryError::UnknownRun(_) => "unknown_run",
            TelemetryError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for TelemetryError {
    fn from(e: std::io::Error) -> Self {
        TelemetryError::Io(e.to_string())
    }
}

/// Parses and validates one telemetry line against the v1 record schemas.
/// Hostile input is fine; every failure is a structured error.
pub fn ingest_line(raw: &str, expected_run: &str) -> Result<TelemetryRecord, TelemetryError> {
    let line = raw.strip_suffix('\n').unwrap_or(raw);
    let value: Value = serde_json::from_str(line).map_err(|e| TelemetryError::Malformed(e.to_string()))?;
    let Value::Object(doc) = &value else {
        return Err(TelemetryError::Malformed("record must be a JSON object".into()));
    };
    let kind = match doc.get("record").and_then(Value::as_str) {
        Some("step") => "step_record",
        Some("episode") => "episode_record",
        Some(other) => {
            return Err(TelemetryError::Schema { field: "record".into(), reason: format!("unknown kind `{other}`") })
        }
        None => return Err(TelemetryError::Schema { field: "record".into(), reason: "is required".into() }),
    };
    if let Some(v) = doc.get("schema_version") {
        let found = v.as_str().unwrap_or_default();
        let major = found.split('.').next().unwrap_or_default();
        if major != RECORD_SCHEMA_VERSION.split('.').next().unwrap_or_default() {
            return Err(TelemetryError::Version { found: found.to_string(), ours: RECORD_SCHEMA_VERSION });
        }
    }
    for field in schema::required_fields(kind).unwrap_or_default() {
        if !doc.contains_key(&field) {
            return Err(TelemetryError::Schema { field, reason: "is required".into() });
        }
    }
    let record: TelemetryRecord = serde_json::from_value(value.clone())
        .map_err(|e| TelemetryError::Schema { field: kind.into(), reason: e.to_string() })?;
    if record.run_id() != expected_run {
        return Err(TelemetryError::RunMismatch { expected: expected_run.into(), found: record.run_id().into() });
    }
    if let TelemetryRecord::Episode(e) = &record {
        if e.episode_length == 0 {
            return Err(TelemetryError::Schema { field: "episode_length".into(), reason: "must be at least 1".into() });
        }
    }
    Ok(record)
}
