//! Step and episode telemetry: validation, ordered persistence, queries.

mod query;
mod records;
mod store;

pub use query::{query, Aggregates, QueryFilter, SlotStats};
pub use records::{
    ingest_line, EpisodeRecord, StepKey, StepRecord, TelemetryError, TelemetryRecord, DRAW, RECORD_SCHEMA_VERSION,
};
pub use store::{
    export_jsonl, for_each_record, heal, lookup_step, read_document, read_records, unix_now, write_document,
    HealReport, Lookup, Position, RunManifest, RunStore, Stream, CONFIG_FILE, DEAD_LETTER_FILE, EPISODES_FILE,
    EPISODES_INDEX, INDEX_ENTRY, MANIFEST_FILE, RESULT_FILE, STEPS_FILE, STEPS_INDEX,
};
