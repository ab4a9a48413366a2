use std::collections::BTreeMap;
use std::fmt;

use mosaic_envs::{ObservationMode, Task};
use mosaic_protocol::{canonical, WorkerKind};
use serde::de::{DeserializeSeed, Deserializer, MapAccess, SeqAccess, Visitor};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::phi::ParsePolicy;
use crate::policy::{BaselineKind, PolicyKind};

/// Decision-making mechanism behind a slot.
pub type Paradigm = WorkerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerAssignment {
    pub worker_type: Paradigm,
    pub settings: Map<String, Value>,
    pub frozen: bool,
}

impl WorkerAssignment {
    pub fn new(worker_type: Paradigm) -> Self {
        WorkerAssignment { worker_type, settings: Map::new(), frozen: false }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.settings.insert(key.into(), value.into());
        self
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    fn setting_str(&self, key: &str) -> Option<&str> {
        self.settings.get(key).and_then(Value::as_str)
    }

    /// Baseline behavior; `settings.kind` absent means uniform random.
    pub fn baseline_kind(&self) -> Option<BaselineKind> {
        match self.setting_str("kind") {
            None => Some(BaselineKind::Random),
            Some(k) => BaselineKind::parse(k),
        }
    }

    /// Built-in policy run by the native worker for this slot.
    pub fn builtin_policy(&self) -> Option<PolicyKind> {
        if let Some(p) = self.setting_str("policy") {
            return PolicyKind::parse(p);
        }
        match self.worker_type {
            WorkerKind::Rl => Some(PolicyKind::Greedy),
            WorkerKind::Llm => Some(PolicyKind::ScriptedText),
            WorkerKind::Vlm => Some(PolicyKind::ScriptedVision),
            WorkerKind::Baseline => self.baseline_kind().map(PolicyKind::Baseline),
            WorkerKind::Human => None,
        }
    }

    /// `settings.executable` plus `settings.args` for an external worker.
    pub fn external(&self) -> Option<(String, Vec<String>)> {
        let exe = self.setting_str("executable")?.to_string();
        let args = self
            .settings
            .get("args")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(String::from).collect())
            .unwrap_or_default();
        Some((exe, args))
    }

    pub fn observation_mode(&self) -> ObservationMode {
        self.setting_str("observation_mode").and_then(ObservationMode::parse).unwrap_or_default()
    }

    pub fn max_image_history(&self) -> u32 {
        self.settings.get("max_image_history").and_then(Value::as_u64).map_or(1, |n| n as u32)
    }

    pub fn parse_policy(&self) -> ParsePolicy {
        self.settings.get("parse_policy").and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default()
    }

    fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("worker_type".into(), Value::String(self.worker_type.as_str().into()));
        m.insert("settings".into(), Value::Object(self.settings.clone()));
        if self.frozen {
            m.insert("frozen".into(), Value::Bool(true));
        }
        Value::Object(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub operator_id: String,
    pub env_name: String,
    pub task: String,
    pub player_workers: BTreeMap<String, WorkerAssignment>,
    pub seed: Option<u64>,
    pub episodes: Option<u64>,
    pub max_steps: Option<u64>,
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid run config: {}", .errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl ConfigError {
    pub fn paths(&self) -> Vec<&str> {
        self.errors.iter().map(|e| e.path.as_str()).collect()
    }
}

/// Walks a JSON document and records the path of every repeated object key.
struct DupSeed<'a> {
    path: String,
    found: &'a mut Vec<String>,
}

impl<'de> DeserializeSeed<'de> for DupSeed<'_> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, d: D) -> Result<(), D::Error> {
        d.deserialize_any(self)
    }
}

impl<'de> Visitor<'de> for DupSeed<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("any JSON value")
    }

    fn visit_bool<E>(self, _: bool) -> Result<(), E> {
        Ok(())
    }
    fn visit_i64<E>(self, _: i64) -> Result<(), E> {
        Ok(())
    }
    fn visit_u64<E>(self, _: u64) -> Result<(), E> {
        Ok(())
    }
    fn visit_f64<E>(self, _: f64) -> Result<(), E> {
        Ok(())
    }
    fn visit_str<E>(self, _: &str) -> Result<(), E> {
        Ok(())
    }
    fn visit_unit<E>(self) -> Result<(), E> {
        Ok(())
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<(), A::Error> {
        let mut i = 0;
        while seq.next_element_seed(DupSeed { path: format!("{}[{i}]", self.path), found: &mut *self.found })?.is_some()
        {
            i += 1;
        }
        Ok(())
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<(), A::Error> {
        let mut seen = std::collections::BTreeSet::new();
        while let Some(key) = map.next_key::<String>()? {
            let path = if self.path.is_empty() { key.clone() } else { format!("{}.{key}", self.path) };
            if !seen.insert(key) {
                self.found.push(path.clone());
            }
            map.next_value_seed(DupSeed { path, found: &mut *self.found })?;
        }
        Ok(())
    }
}

/// Paths of repeated object keys anywhere in `text`.
pub fn duplicate_keys(text: &str) -> Vec<String> {
    let mut found = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let _ = DupSeed { path: String::new(), found: &mut found }.deserialize(&mut de);
    found
}

struct Checker {
    errors: Vec<FieldError>,
}

impl Checker {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.errors.push(FieldError { path: path.into(), message: message.into() });
    }

    fn string(&mut self, doc: &Map<String, Value>, key: &str, required: bool) -> Option<String> {
        match doc.get(key) {
            Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
            Some(Value::String(_)) => {
                self.err(key, "must not be empty");
                None
            }
            Some(_) => {
                self.err(key, "must be a string");
                None
            }
            None if required => {
                self.err(key, "is required");
                None
            }
            None => None,
        }
    }

    fn count(&mut self, doc: &Map<String, Value>, key: &str, min: u64) -> Option<u64> {
        let v = doc.get(key)?;
        match v.as_u64() {
            Some(n) if n >= min => Some(n),
            _ => {
                self.err(key, format!("must be an integer >= {min}"));
                None
            }
        }
    }
}

fn parse_assignment(c: &mut Checker, path: &str, v: &Value) -> Option<WorkerAssignment> {
    let Some(doc) = v.as_object() else {
        c.err(path, "must be an object");
        return None;
    };
    let worker_type = match doc.get("worker_type") {
        None => {
            c.err(format!("{path}.worker_type"), "is required");
            None
        }
        Some(v) => match serde_json::from_value::<WorkerKind>(v.clone()) {
            Ok(k) => Some(k),
            Err(_) => {
                c.err(format!("{path}.worker_type"), "must be one of rl, llm, vlm, human, baseline");
                None
            }
        },
    };
    let settings = match doc.get("settings") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => {
            c.err(format!("{path}.settings"), "must be an object");
            Map::new()
        }
    };
    let frozen = match doc.get("frozen") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            c.err(format!("{path}.frozen"), "must be a boolean");
            false
        }
    };
    let a = WorkerAssignment { worker_type: worker_type?, settings, frozen };
    let before = c.errors.len();
    if a.worker_type == WorkerKind::Baseline && a.baseline_kind().is_none() {
        c.err(format!("{path}.settings.kind"), "must be one of random, noop, cycle");
    }
    if let Some(p) = a.setting_str("policy") {
        if PolicyKind::parse(p).is_none() {
            c.err(format!("{path}.settings.policy"), format!("unknown built-in policy `{p}`"));
        }
    }
    if let Some(m) = a.setting_str("observation_mode") {
        if ObservationMode::parse(m).is_none() {
            c.err(format!("{path}.settings.observation_mode"), "must be egocentric or visible_teammates");
        }
    }
    if let Some(v) = a.settings.get("max_image_history") {
        if v.as_u64().is_none_or(|n| n > 64) {
            c.err(format!("{path}.settings.max_image_history"), "must be an integer in 0..=64");
        }
    }
    if a.worker_type == WorkerKind::Vlm && a.max_image_history() == 0 {
        c.err(format!("{path}.settings.max_image_history"), "multimodal slots need at least one frame");
    }
    if let Some(v) = a.settings.get("parse_policy") {
        if serde_json::from_value::<ParsePolicy>(v.clone()).is_err() {
            c.err(format!("{path}.settings.parse_policy"), "invalid grammar or fallback");
        }
    }
    if let Some(v) = a.settings.get("executable") {
        if !v.is_string() {
            c.err(format!("{path}.settings.executable"), "must be a string");
        }
    }
    if let Some(v) = a.settings.get("args") {
        if !v.as_array().is_some_and(|a| a.iter().all(Value::is_string)) {
            c.err(format!("{path}.settings.args"), "must be an array of strings");
        }
    }
    if a.worker_type == WorkerKind::Human && a.external().is_some() {
        c.err(format!("{path}.settings.executable"), "human slots bind to a mailbox, not a process");
    }
    (c.errors.len() == before).then_some(a)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        if text.trim().is_empty() {
            return Err(ConfigError {
                errors: vec![FieldError { path: String::new(), message: "empty document".into() }],
            });
        }
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError {
            errors: vec![FieldError { path: String::new(), message: format!("not valid JSON: {e}") }],
        })?;
        let mut c = Checker { errors: Vec::new() };
        for path in duplicate_keys(text) {
            c.err(path, "duplicate key");
        }
        let config = RunConfig::from_value_inner(&value, &mut c);
        match config {
            Some(cfg) if c.errors.is_empty() => Ok(cfg),
            _ => Err(ConfigError { errors: c.errors }),
        }
    }

    pub fn from_value(value: &Value) -> Result<RunConfig, ConfigError> {
        let mut c = Checker { errors: Vec::new() };
        match RunConfig::from_value_inner(value, &mut c) {
            Some(cfg) if c.errors.is_empty() => Ok(cfg),
            _ => Err(ConfigError { errors: c.errors }),
        }
    }

    fn from_value_inner(value: &Value, c: &mut Checker) -> Option<RunConfig> {
        let Some(doc) = value.as_object() else {
            c.err("", "config must be a JSON object");
            return None;
        };
        let operator_id = c.string(doc, "operator_id", true);
        let env_name = c.string(doc, "env_name", true);
        let task_id = c.string(doc, "task", true);
        let task = task_id.as_deref().and_then(|t| {
            let task = Task::from_id(t);
            if task.is_none() {
                c.err("task", format!("unknown task `{t}`"));
            }
            task
        });
        let description = c.string(doc, "description", false);
        let seed = match doc.get("seed") {
            None => None,
            Some(v) => match v.as_u64() {
                Some(s) => Some(s),
                None => {
                    c.err("seed", "must be a non-negative integer");
                    None
                }
            },
        };
        let episodes = c.count(doc, "episodes", 1);
        let max_steps = c.count(doc, "max_steps", 1);

        let mut player_workers = BTreeMap::new();
        match doc.get("player_workers") {
            None => c.err("player_workers", "is required"),
            Some(Value::Object(m)) if m.is_empty() => c.err("player_workers", "must bind at least one slot"),
            Some(Value::Object(m)) => {
                for (slot, v) in m {
                    let path = format!("player_workers.{slot}");
                    if let Some(t) = task {
                        if t.slot_index(slot).is_none() {
                            c.err(&path, format!("unknown slot `{slot}` for {}", t.id()));
                            continue;
                        }
                    }
                    if let Some(a) = parse_assignment(c, &path, v) {
                        player_workers.insert(slot.clone(), a);
                    }
                }
                if let Some(t) = task {
                    for slot in t.slots() {
                        if !m.contains_key(*slot) {
                            c.err(format!("player_workers.{slot}"), "slot has no assignment");
                        }
                    }
                }
            }
            Some(_) => c.err("player_workers", "must be an object"),
        }
        Some(RunConfig {
            operator_id: operator_id?,
            env_name: env_name?,
            task: task_id?,
            player_workers,
            seed,
            episodes,
            max_steps,
            description,
        })
    }

    pub fn task(&self) -> Task {
        Task::from_id(&self.task).expect("validated config names a known task")
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("operator_id".into(), Value::String(self.operator_id.clone()));
        m.insert("env_name".into(), Value::String(self.env_name.clone()));
        m.insert("task".into(), Value::String(self.task.clone()));
        let workers: Map<String, Value> = self.player_workers.iter().map(|(k, a)| (k.clone(), a.to_value())).collect();
        m.insert("player_workers".into(), Value::Object(workers));
        if let Some(s) = self.seed {
            m.insert("seed".into(), s.into());
        }
        if let Some(e) = self.episodes {
            m.insert("episodes".into(), e.into());
        }
        if let Some(s) = self.max_steps {
            m.insert("max_steps".into(), s.into());
        }
        if let Some(d) = &self.description {
            m.insert("description".into(), Value::String(d.clone()));
        }
        Value::Object(m)
    }

    /// Canonical one-document form, keys sorted, newline-terminated.
    pub fn canonical_bytes(&self) -> String {
        canonical::to_line(&self.to_value())
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes().as_bytes()))
    }
}

/// Seed for one slot's decision-maker in one episode.
pub fn slot_seed(run_seed: u64, episode: u64, slot: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(episode.to_le_bytes());
    h.update(slot.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HETERO: &str = r#"{
        "operator_id": "heterogeneous_team",
        "env_name": "mosaic",
        "task": "mosaic/TeamTag-2vs2-v1",
        "player_workers": {
            "green_0": {"worker_type": "rl", "settings": {"algorithm": "ppo", "checkpoint": "mappo_1v1.pt"}},
            "green_1": {"worker_type": "llm", "settings": {"model_id": "scripted", "temperature": 0}},
            "blue_0": {"worker_type": "rl", "settings": {"algorithm": "ppo", "checkpoint": "mappo_1v1.pt"}},
            "blue_1": {"worker_type": "baseline", "settings": {}}
        }
    }"#;

    #[test]
    fn heterogeneous_config_parses() {
        let c = RunConfig::from_json(HETERO).unwrap();
        assert_eq!(c.player_workers.len(), 4);
        assert_eq!(c.player_workers["blue_1"].baseline_kind(), Some(BaselineKind::Random));
        assert_eq!(c.player_workers["green_1"].builtin_policy(), Some(PolicyKind::ScriptedText));
    }

    #[test]
    fn duplicate_slot_named() {
        let text = HETERO.replace("\"blue_1\"", "\"blue_0\"");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.paths().contains(&"player_workers.blue_0"), "{err}");
        assert!(err.paths().contains(&"player_workers.blue_1"), "{err}");
    }

    #[test]
    fn missing_slot_named() {
        let mut v: Value = serde_json::from_str(HETERO).unwrap();
        v["player_workers"].as_object_mut().unwrap().remove("blue_1");
        let err = RunConfig::from_value(&v).unwrap_err();
        assert_eq!(err.paths(), vec!["player_workers.blue_1"]);
    }

    #[test]
    fn unknown_task_and_kind() {
        let text = HETERO
            .replace("mosaic/TeamTag-2vs2-v1", "nope")
            .replace("\"settings\": {}", "\"settings\": {\"kind\": \"dance\"}");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert!(err.paths().contains(&"task"));
        assert!(err.paths().contains(&"player_workers.blue_1.settings.kind"));
    }

    #[test]
    fn empty_and_garbage_rejected() {
        assert!(RunConfig::from_json("").is_err());
        assert!(RunConfig::from_json("[1]").is_err());
        assert!(RunConfig::from_json("{").is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::from_json(HETERO).unwrap();
        let again = RunConfig::from_json(&c.canonical_bytes()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn slot_seeds_differ() {
        assert_ne!(slot_seed(0, 0, "blue_0"), slot_seed(0, 0, "blue_1"));
        assert_ne!(slot_seed(0, 0, "blue_0"), slot_seed(0, 1, "blue_0"));
        assert_eq!(slot_seed(5, 3, "x"), slot_seed(5, 3, "x"));
    }
}
