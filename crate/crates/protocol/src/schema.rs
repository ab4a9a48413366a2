//! Published JSON Schema documents, embedded at build time.

macro_rules! embed {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../../../schemas/v1/", $name, ".json")))),*]
    };
}

/// `(name, document)` for every published schema.
pub const DOCUMENTS: &[(&str, &str)] = embed!(
    "reset",
    "step",
    "stop",
    "select_action",
    "restore",
    "train",
    "handshake",
    "ready",
    "step_result",
    "episode_end",
    "error",
    "heartbeat",
    "run_config",
    "step_record",
    "episode_record",
);

pub fn document(name: &str) -> Option<&'static str> {
    DOCUMENTS.iter().find(|(n, _)| *n == name).map(|(_, doc)| *doc)
}

/// Top-level `required` list of a schema, for cross-checking validators.
pub fn required_fields(name: &str) -> Option<Vec<String>> {
    let doc: serde_json::Value = serde_json::from_str(document(name)?).ok()?;
    Some(doc.get("required")?.as_array()?.iter().filter_map(|v| v.as_str().map(String::from)).collect())
}
