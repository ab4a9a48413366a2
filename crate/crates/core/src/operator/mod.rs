//! Binds decision-makers to agent slots behind one decision interface.

mod config;
pub mod matrix;
pub mod phi;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use mosaic_envs::{env_metadata, serialize_obs, EnvState, FrameHistory, ObsOptions, Task};
use mosaic_protocol::{
    ActionSpace, MessageName, Modality, ModalityKind, ObservationPayload, ProtocolMessage, ResetCommand,
    SelectActionCommand, WorkerKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

pub use config::{duplicate_keys, slot_seed, ConfigError, FieldError, Paradigm, RunConfig, WorkerAssignment};
use phi::{parse_action, ParseOutcome, ParsePolicy};

use crate::clock::{Clock, SystemClock};
use crate::par;
use crate::supervisor::{spawn_workers, SupervisorError, WorkerHandle, WorkerSpec};

/// Where the native `mosaic-worker` binary lives: `MOSAIC_WORKER_BIN`, else
/// next to the running executable (or one directory up, for test binaries),
/// else whatever `PATH` finds.
pub fn default_worker_bin() -> PathBuf {
    if let Some(p) = std::env::var_os("MOSAIC_WORKER_BIN") {
        return PathBuf::from(p);
    }
    if let Ok(exe) = std::env::current_exe() {
        for dir in exe.ancestors().skip(1).take(2) {
            let candidate = dir.join("mosaic-worker");
            if candidate.is_file() {
                return candidate;
            }
        }
    }
    PathBuf::from("mosaic-worker")
}

#[derive(Clone)]
pub struct BindOptions {
    pub worker_bin: PathBuf,
    pub clock: Arc<dyn Clock>,
    pub request_timeout: Duration,
    pub heartbeat_interval: Duration,
    pub liveness_window: Duration,
    pub max_restarts: u32,
    /// Worker stderr logs and checkpoint blobs go here when set.
    pub log_dir: Option<PathBuf>,
}

impl Default for BindOptions {
    fn default() -> Self {
        BindOptions {
            worker_bin: default_worker_bin(),
            clock: Arc::new(SystemClock::new()),
            request_timeout: Duration::from_secs(300),
            heartbeat_interval: Duration::from_secs(60),
            liveness_window: Duration::from_secs(300),
            max_restarts: 3,
            log_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OperatorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("binding slot `{slot}` failed: {source}")]
    Bind { slot: String, source: SupervisorError },
    #[error("slot `{slot}`: {source}")]
    Worker { slot: String, source: SupervisorError },
    #[error("slot `{slot}`: cannot parse an action from {text:?}")]
    Parse { slot: String, text: String },
    #[error("slot `{slot}` expects {expected} observations, got {got}")]
    Modality { slot: String, expected: &'static str, got: &'static str },
    #[error("slot `{slot}`: {detail}")]
    InvalidResponse { slot: String, detail: String },
    #[error("waiting for human action on {}", .slots.join(", "))]
    Blocked { slots: Vec<String> },
    #[error("joint action failed: {}", .failures.iter().map(|(s, e)| format!("{s}: {e}")).collect::<Vec<_>>().join("; "))]
    Joint { failures: Vec<(String, String)> },
    #[error("slot `{0}` is not bound to a human")]
    NotHuman(String),
    #[error("action {action} is outside the action space of `{slot}`")]
    ActionOutOfRange { slot: String, action: u32 },
    #[error("environment: {0}")]
    Env(String),
}

impl OperatorError {
    /// Slots this error is about.
    pub fn slots(&self) -> Vec<String> {
        match self {
            OperatorError::Bind { slot, .. }
            | OperatorError::Worker { slot, .. }
            | OperatorError::Parse { slot, .. }
            | OperatorError::Modality { slot, .. }
            | OperatorError::InvalidResponse { slot, .. }
            | OperatorError::ActionOutOfRange { slot, .. } => vec![slot.clone()],
            OperatorError::UnknownSlot(s) | OperatorError::NotHuman(s) => vec![s.clone()],
            OperatorError::Blocked { slots } => slots.clone(),
            OperatorError::Joint { failures } => failures.iter().map(|(s, _)| s.clone()).collect(),
            OperatorError::Config(_) | OperatorError::Env(_) => Vec::new(),
        }
    }
}

/// A chosen action plus what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decided {
    pub action: u32,
    pub raw_text: Option<String>,
    pub parse_outcome: Option<ParseOutcome>,
}

impl Decided {
    fn plain(action: u32) -> Self {
        Decided { action, raw_text: None, parse_outcome: None }
    }
}

/// Latest-wins slot for a human's next action.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HumanMailbox {
    pub pending: Option<u32>,
    pub submitted_at_barrier: u64,
}

pub enum SlotDriver {
    Worker(Box<WorkerHandle>),
    Human(HumanMailbox),
}

pub struct SlotBinding {
    pub slot: String,
    pub assignment: WorkerAssignment,
    pub modality: Modality,
    pub obs_options: ObsOptions,
    pub space: ActionSpace,
    parse_policy: ParsePolicy,
    fallback_rng: ChaCha8Rng,
    frames: FrameHistory,
    pub driver: SlotDriver,
}

impl SlotBinding {
    pub fn paradigm(&self) -> Paradigm {
        self.assignment.worker_type
    }

    pub fn worker(&self) -> Option<&WorkerHandle> {
        match &self.driver {
            SlotDriver::Worker(h) => Some(h),
            SlotDriver::Human(_) => None,
        }
    }

    pub fn worker_mut(&mut self) -> Option<&mut WorkerHandle> {
        match &mut self.driver {
            SlotDriver::Worker(h) => Some(h),
            SlotDriver::Human(_) => None,
        }
    }
}

/// Observation channel each paradigm consumes.
pub fn paradigm_modality(p: Paradigm) -> Modality {
    match p {
        WorkerKind::Rl | WorkerKind::Baseline => Modality::Tensor,
        WorkerKind::Llm => Modality::Text,
        WorkerKind::Vlm => Modality::TextImage,
        WorkerKind::Human => Modality::Image,
    }
}

fn worker_spec(slot: &str, a: &WorkerAssignment, modality: Modality, opts: &BindOptions) -> WorkerSpec {
    let (exe, args) = match a.external() {
        Some((exe, args)) => (PathBuf::from(exe), args),
        None => {
            let policy = a.builtin_policy().expect("validated assignment has a policy");
            let mut args = vec!["--policy".to_string(), policy.as_str().to_string()];
            args.extend(["--kind".to_string(), a.worker_type.as_str().to_string()]);
            if modality == Modality::TextImage {
                args.extend(["--max-image-history".to_string(), a.max_image_history().to_string()]);
            }
            (opts.worker_bin.clone(), args)
        }
    };
    let mut spec = WorkerSpec::new(exe, a.worker_type);
    spec.args = args;
    spec.heartbeat_interval = opts.heartbeat_interval;
    spec.liveness_window = opts.liveness_window;
    spec.max_restarts = opts.max_restarts;
    spec.startup_timeout = opts.request_timeout;
    spec.frozen = a.frozen;
    spec.required_commands = [MessageName::Reset, MessageName::Stop, MessageName::SelectAction].into_iter().collect();
    spec.required_modalities = match modality {
        Modality::Tensor => [ModalityKind::Tensor].into(),
        Modality::Text => [ModalityKind::Text].into(),
        Modality::TextImage | Modality::Image => [ModalityKind::Image].into(),
    };
    spec.required_image_history = if modality == Modality::TextImage { a.max_image_history() } else { 0 };
    if let Some(dir) = &opts.log_dir {
        spec.stderr_log = Some(dir.join(format!("{slot}.stderr")));
        spec.checkpoint_dir = Some(dir.join("checkpoints"));
    }
    spec
}

pub struct OperatorHandle {
    pub operator_id: String,
    pub task: Task,
    slots: Vec<SlotBinding>,
    request_timeout: Duration,
}

/// Spawns one worker per non-human slot (concurrently) and binds human
/// slots to mailboxes. Any spawn failure tears down the rest.
pub fn bind_operator(config: &RunConfig, opts: &BindOptions) -> Result<OperatorHandle, OperatorError> {
    let config = RunConfig::from_value(&config.to_value())?;
    let task = config.task();
    let mut specs = Vec::new();
    for (slot, a) in &config.player_workers {
        if a.worker_type != WorkerKind::Human {
            let modality = paradigm_modality(a.worker_type);
            specs.push((worker_spec(slot, a, modality, opts), format!("{}/{slot}", config.operator_id)));
        }
    }
    let mut spawned: BTreeMap<String, WorkerHandle> = BTreeMap::new();
    let mut first_error = None;
    for ((_, id), result) in specs.iter().zip(spawn_workers(specs.clone(), opts.clock.clone())) {
        let slot = id.rsplit('/').next().unwrap_or(id).to_string();
        match result {
            Ok(h) => {
                spawned.insert(slot, h);
            }
            Err(source) => {
                first_error.get_or_insert(OperatorError::Bind { slot, source });
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    let space = task.action_space();
    let mut slots = Vec::new();
    for slot in task.slots() {
        let a = config.player_workers[*slot].clone();
        let modality = paradigm_modality(a.worker_type);
        let driver = match spawned.remove(*slot) {
            Some(h) => SlotDriver::Worker(Box::new(h)),
            None => SlotDriver::Human(HumanMailbox::default()),
        };
        let obs_options = ObsOptions { mode: a.observation_mode(), max_image_history: a.max_image_history().max(1) };
        slots.push(SlotBinding {
            slot: slot.to_string(),
            modality,
            obs_options,
            space: space.clone(),
            parse_policy: a.parse_policy(),
            fallback_rng: ChaCha8Rng::seed_from_u64(0),
            frames: FrameHistory::new(a.max_image_history()),
            assignment: a,
            driver,
        });
    }
    Ok(OperatorHandle { operator_id: config.operator_id, task, slots, request_timeout: opts.request_timeout })
}

fn decode_decision(b: &mut SlotBinding, resp: &ProtocolMessage) -> Result<Decided, OperatorError> {
    let slot = b.slot.clone();
    if !resp.is(MessageName::StepResult) {
        return Err(OperatorError::InvalidResponse {
            slot,
            detail: format!("expected step_result, got `{}`", resp.name),
        });
    }
    if let Some(text) = resp.get("text").and_then(Value::as_str) {
        return match parse_action(text, &b.space, &b.parse_policy, &mut b.fallback_rng) {
            Ok((action, outcome)) => {
                Ok(Decided { action, raw_text: Some(text.to_string()), parse_outcome: Some(outcome) })
            }
            Err(_) => Err(OperatorError::Parse { slot, text: text.to_string() }),
        };
    }
    match resp.get("action").and_then(Value::as_u64) {
        Some(a) if a < b.space.n as u64 => Ok(Decided::plain(a as u32)),
        Some(a) => Err(OperatorError::ActionOutOfRange { slot, action: a as u32 }),
        None => Err(OperatorError::InvalidResponse { slot, detail: "step_result without action or text".into() }),
    }
}

fn ask(
    b: &mut SlotBinding,
    obs: &ObservationPayload,
    info: &Map<String, Value>,
    timeout: Duration,
) -> Result<Decided, OperatorError> {
    let expected = b.modality;
    if obs.modality != expected {
        return Err(OperatorError::Modality {
            slot: b.slot.clone(),
            expected: expected.as_str(),
            got: obs.modality.as_str(),
        });
    }
    let cmd = SelectActionCommand {
        agent_id: b.slot.clone(),
        observation: obs.clone(),
        info: info.clone(),
        checkpoint: false,
    };
    let slot = b.slot.clone();
    let SlotDriver::Worker(h) = &mut b.driver else { unreachable!("human slots are answered from the mailbox") };
    let resp = h
        .request(ProtocolMessage::select_action(0, cmd), timeout)
        .map_err(|source| OperatorError::Worker { slot, source })?;
    decode_decision(b, &resp)
}

impl OperatorHandle {
    pub fn slots(&self) -> &[SlotBinding] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [SlotBinding] {
        &mut self.slots
    }

    pub fn binding(&self, slot: &str) -> Option<&SlotBinding> {
        self.slots.iter().find(|b| b.slot == slot)
    }

    fn index(&self, slot: &str) -> Result<usize, OperatorError> {
        self.slots.iter().position(|b| b.slot == slot).ok_or_else(|| OperatorError::UnknownSlot(slot.to_string()))
    }

    pub fn paradigm(&self, slot: &str) -> Option<Paradigm> {
        self.binding(slot).map(SlotBinding::paradigm)
    }

    pub fn human_slots(&self) -> Vec<String> {
        self.slots.iter().filter(|b| matches!(b.driver, SlotDriver::Human(_))).map(|b| b.slot.clone()).collect()
    }

    /// Human slots with no pending action.
    pub fn blocked_slots(&self) -> Vec<String> {
        self.slots
            .iter()
            .filter(|b| matches!(&b.driver, SlotDriver::Human(m) if m.pending.is_none()))
            .map(|b| b.slot.clone())
            .collect()
    }

    /// Fills a human slot's mailbox. Returns true when it replaced an
    /// unconsumed action.
    pub fn submit_human(&mut self, slot: &str, action: u32, barrier: u64) -> Result<bool, OperatorError> {
        let i = self.index(slot)?;
        let b = &mut self.slots[i];
        if !b.space.contains(action) {
            return Err(OperatorError::ActionOutOfRange { slot: slot.to_string(), action });
        }
        match &mut b.driver {
            SlotDriver::Human(m) => {
                let replaced = m.pending.replace(action).is_some();
                m.submitted_at_barrier = barrier;
                Ok(replaced)
            }
            SlotDriver::Worker(_) => Err(OperatorError::NotHuman(slot.to_string())),
        }
    }

    /// Starts episode `episode` on every slot with its derived seed.
    pub fn reset(&mut self, run_seed: u64, episode: u64) -> Result<(), OperatorError> {
        let meta = env_metadata(self.task);
        let task_id = self.task.id();
        let timeout = self.request_timeout;
        let results = par::map_mut(&mut self.slots, |b| {
            let seed = slot_seed(run_seed, episode, &b.slot);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            b.fallback_rng = rng;
            b.frames.clear();
            let slot = b.slot.clone();
            match &mut b.driver {
                SlotDriver::Human(m) => {
                    m.pending = None;
                    Ok(())
                }
                SlotDriver::Worker(h) => {
                    let cmd = ResetCommand {
                        seed,
                        task_id: Some(task_id.to_string()),
                        agent_id: Some(slot.clone()),
                        env_metadata: Some(meta.clone()),
                        checkpoint: false,
                    };
                    h.request(ProtocolMessage::reset(0, cmd), timeout)
                        .map(|_| ())
                        .map_err(|source| OperatorError::Worker { slot, source })
                }
            }
        });
        joint(&self.slots, results).map(|_| ())
    }

    /// Observation of `slot` in its paradigm's modality. Multimodal slots
    /// append the frame to their history.
    pub fn observe(&mut self, state: &EnvState, slot: &str) -> Result<ObservationPayload, OperatorError> {
        let i = self.index(slot)?;
        let b = &mut self.slots[i];
        let obs = if b.modality == Modality::TextImage {
            b.frames.observe(state, slot, b.modality, &b.obs_options)
        } else {
            serialize_obs(state, slot, b.modality, &b.obs_options)
        };
        obs.map_err(|e| OperatorError::Env(e.to_string()))
    }

    /// Observations for every slot, canonical order.
    pub fn observe_all(&mut self, state: &EnvState) -> Result<BTreeMap<String, ObservationPayload>, OperatorError> {
        let slots: Vec<String> = self.slots.iter().map(|b| b.slot.clone()).collect();
        slots.into_iter().map(|s| self.observe(state, &s).map(|o| (s, o))).collect()
    }

    /// One agent decides (AEC turn).
    pub fn select_action(
        &mut self,
        slot: &str,
        obs: &ObservationPayload,
        info: &Map<String, Value>,
    ) -> Result<Decided, OperatorError> {
        let i = self.index(slot)?;
        let timeout = self.request_timeout;
        let b = &mut self.slots[i];
        match &mut b.driver {
            SlotDriver::Human(m) => {
                m.pending.take().map(Decided::plain).ok_or(OperatorError::Blocked { slots: vec![slot.to_string()] })
            }
            SlotDriver::Worker(_) => ask(b, obs, info, timeout),
        }
    }

    /// Every slot decides at once. Requests fan out concurrently; results
    /// come back in canonical slot order. One failure fails the whole joint
    /// action and no human mailbox is consumed.
    pub fn select_actions(
        &mut self,
        observations: &BTreeMap<String, ObservationPayload>,
    ) -> Result<BTreeMap<String, Decided>, OperatorError> {
        for key in observations.keys() {
            self.index(key)?;
        }
        if let Some(b) = self.slots.iter().find(|b| !observations.contains_key(&b.slot)) {
            return Err(OperatorError::UnknownSlot(format!("no observation for `{}`", b.slot)));
        }
        let blocked = self.blocked_slots();
        if !blocked.is_empty() {
            return Err(OperatorError::Blocked { slots: blocked });
        }
        let timeout = self.request_timeout;
        let info = Map::new();
        let results = par::map_mut(&mut self.slots, |b| match &b.driver {
            SlotDriver::Human(m) => Ok(Decided::plain(m.pending.expect("checked above"))),
            SlotDriver::Worker(_) => ask(b, &observations[&b.slot], &info, timeout),
        });
        let decided = joint(&self.slots, results)?;
        for b in &mut self.slots {
            if let SlotDriver::Human(m) = &mut b.driver {
                m.pending = None;
            }
        }
        Ok(self.slots.iter().map(|b| b.slot.clone()).zip(decided).collect())
    }

    /// Stops every worker; returns per-slot exit reports.
    pub fn shutdown(&mut self, grace: Duration) -> Vec<(String, crate::supervisor::ExitReport)> {
        let reports = par::map_mut(&mut self.slots, |b| {
            let slot = b.slot.clone();
            b.worker_mut().map(|h| (slot, h.stop_worker(grace)))
        });
        reports.into_iter().flatten().collect()
    }
}

fn joint<T>(slots: &[SlotBinding], results: Vec<Result<T, OperatorError>>) -> Result<Vec<T>, OperatorError> {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (b, r) in slots.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push((b.slot.clone(), e)),
        }
    }
    match failures.len() {
        0 => Ok(ok),
        1 => Err(failures.pop().expect("one failure").1),
        _ => Err(OperatorError::Joint { failures: failures.into_iter().map(|(s, e)| (s, e.to_string())).collect() }),
    }
}
