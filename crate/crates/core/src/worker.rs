//! The built-in worker process: one line in, one line out.
//!
//! Runs in one of two modes chosen by `reset`. With `agent_id` it is a policy
//! for one slot and answers `select_action`; without it it owns a
//! single-agent environment and answers `step`.

use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mosaic_envs::{decode_state, encode_state, env_metadata, make_env, render_ascii, EnvState, ObsOptions, Task};
use mosaic_protocol::{
    decode_message, encode_message, ActionSpace, CapabilityManifest, Handshake, MessageKind, MessageName, Modality,
    ModalityKind, ProtocolMessage, RenderPayload, ResetCommand, ResponseEpisodeEnd, ResponseReady, ResponseStep,
    RestoreCommand, Reward, SelectActionCommand, StepCommand, WorkerKind, MAX_LINE_BYTES,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::operator::phi::{parse_action, ParsePolicy};
use crate::policy::{Decision, Policy, PolicyKind};

pub const DEFAULT_HEARTBEAT_SECS: f64 = 60.0;

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub policy: PolicyKind,
    pub worker_kind: Option<WorkerKind>,
    pub worker_id: String,
    pub heartbeat: Option<Duration>,
    pub max_image_history: u32,
    pub support_restore: bool,
    pub ignore_stop: bool,
    pub omit_episode_end: bool,
    pub garbage_handshake: bool,
}

impl WorkerOptions {
    pub fn new(policy: PolicyKind) -> Self {
        WorkerOptions {
            policy,
            worker_kind: None,
            worker_id: "worker".into(),
            heartbeat: Some(Duration::from_secs_f64(DEFAULT_HEARTBEAT_SECS)),
            max_image_history: if policy == PolicyKind::ScriptedVision { 4 } else { 0 },
            support_restore: true,
            ignore_stop: false,
            omit_episode_end: false,
            garbage_handshake: false,
        }
    }

    pub fn manifest(&self) -> CapabilityManifest {
        let mut commands = vec![MessageName::Reset, MessageName::Step, MessageName::Stop, MessageName::SelectAction];
        if self.support_restore {
            commands.push(MessageName::Restore);
        }
        let modalities = match self.policy {
            PolicyKind::ScriptedText => vec![ModalityKind::Text],
            PolicyKind::ScriptedVision => vec![ModalityKind::Text, ModalityKind::Image],
            _ => vec![ModalityKind::Tensor],
        };
        CapabilityManifest {
            worker_kind: self.worker_kind.unwrap_or(self.policy.worker_kind()),
            supported_commands: commands.into_iter().collect(),
            observation_modalities: modalities.into_iter().collect(),
            max_image_history: self.max_image_history,
            schema_version: mosaic_protocol::protocol_version(),
            env_metadata: None,
        }
    }
}

pub type SharedWriter = Arc<Mutex<Box<dyn Write + Send>>>;

fn emit(out: &SharedWriter, msg: &ProtocolMessage) -> std::io::Result<()> {
    let line = encode_message(msg).map_err(|e| std::io::Error::other(e.to_string()))?;
    let mut w = out.lock().unwrap();
    w.write_all(line.as_bytes())?;
    w.flush()
}

struct EnvMode {
    env: EnvState,
    policy: Policy,
    total: Reward,
    length: u64,
}

struct AgentMode {
    agent_id: String,
    space: ActionSpace,
    shape: Vec<usize>,
    meta: Map<String, Value>,
    policy: Policy,
}

enum Mode {
    Idle,
    Env(Box<EnvMode>),
    Agent(Box<AgentMode>),
}

struct Worker {
    opts: WorkerOptions,
    mode: Mode,
}

/// Runs the protocol loop until `stop` or end of input. Returns the exit code.
pub fn run(opts: WorkerOptions, input: impl BufRead, out: SharedWriter) -> i32 {
    if opts.garbage_handshake {
        let mut w = out.lock().unwrap();
        let _ = w.write_all(b"hello, I am not a protocol message\n");
        let _ = w.flush();
    } else {
        let hs = Handshake {
            manifest: opts.manifest(),
            worker_id: Some(opts.worker_id.clone()),
            pid: Some(std::process::id()),
        };
        if emit(&out, &ProtocolMessage::handshake(hs)).is_err() {
            return 1;
        }
    }
    if let Some(every) = opts.heartbeat.filter(|d| !d.is_zero()) {
        let out = out.clone();
        std::thread::spawn(move || {
            let mut seq = 0;
            loop {
                std::thread::sleep(every);
                seq += 1;
                if emit(&out, &ProtocolMessage::heartbeat(seq)).is_err() {
                    return;
                }
            }
        });
    }
    let mut worker = Worker { opts, mode: Mode::Idle };
    let mut input = input;
    let mut buf = String::new();
    loop {
        buf.clear();
        match input.read_line(&mut buf) {
            Ok(0) => return 0,
            Ok(_) => {}
            Err(e) => {
                let _ = emit(&out, &ProtocolMessage::error(0, format!("unreadable input: {e}")));
                continue;
            }
        }
        if buf.trim().is_empty() {
            continue;
        }
        let reply = match decode_message(&buf) {
            Err(e) => Some(ProtocolMessage::error(0, format!("{}: {}", e.class.as_str(), e.detail))),
            Ok(msg) if msg.kind != MessageKind::Command => {
                Some(ProtocolMessage::error(0, format!("`{}` is not a command", msg.name)))
            }
            Ok(msg) if msg.is(MessageName::Stop) => {
                if worker.opts.ignore_stop {
                    None
                } else {
                    return 0;
                }
            }
            Ok(msg) => Some(worker.handle(&msg).unwrap_or_else(|e| ProtocolMessage::error(msg.correlation_id, e))),
        };
        if let Some(reply) = reply {
            let reply = if encode_message(&reply).map(|l| l.len() > MAX_LINE_BYTES).unwrap_or(true) {
                ProtocolMessage::error(reply.correlation_id, "response could not be encoded")
            } else {
                reply
            };
            if emit(&out, &reply).is_err() {
                return 1;
            }
        }
    }
}

impl Worker {
    fn handle(&mut self, msg: &ProtocolMessage) -> Result<ProtocolMessage, String> {
        let cid = msg.correlation_id;
        match msg.name {
            MessageName::Reset => self.reset(cid, ResetCommand::from_payload(&msg.payload).map_err(|e| e.to_string())?),
            MessageName::Step => self.step(cid, StepCommand::from_payload(&msg.payload).map_err(|e| e.to_string())?),
            MessageName::SelectAction => {
                self.select(cid, SelectActionCommand::from_payload(&msg.payload).map_err(|e| e.to_string())?)
            }
            MessageName::Restore if self.opts.support_restore => {
                self.restore(cid, RestoreCommand::from_payload(&msg.payload).map_err(|e| e.to_string())?)
            }
            MessageName::Restore => Err("restore is not supported by this worker".into()),
            MessageName::Train => Err("train is not supported by built-in workers".into()),
            other => Err(format!("unexpected command `{other}`")),
        }
    }

    fn reset(&mut self, cid: u64, cmd: ResetCommand) -> Result<ProtocolMessage, String> {
        let policy = Policy::new(self.opts.policy, cmd.seed);
        if let Some(agent_id) = cmd.agent_id {
            let meta = cmd.env_metadata.unwrap_or_default();
            let space =
                mosaic_envs::action_space_from_metadata(&meta).ok_or("policy reset needs env_metadata.action_space")?;
            let shape: Vec<usize> =
                meta.get("observation_shape").and_then(|v| serde_json::from_value(v.clone()).ok()).unwrap_or_default();
            self.mode =
                Mode::Agent(Box::new(AgentMode { agent_id, space, shape: shape.clone(), meta: meta.clone(), policy }));
            let state = cmd.checkpoint.then(|| self.snapshot());
            return Ok(ProtocolMessage::ready(
                cid,
                ResponseReady { seed: cmd.seed, observation_shape: shape, env_metadata: meta, restored: false, state },
            ));
        }
        let task_id = cmd.task_id.as_deref().unwrap_or(mosaic_envs::CORRIDOR);
        let env = make_env(task_id, cmd.seed).map_err(|e| e.to_string())?;
        if env.slots().len() != 1 {
            return Err(format!("environment mode needs a single-agent task, `{task_id}` has {}", env.slots().len()));
        }
        self.mode = Mode::Env(Box::new(EnvMode { env, policy, total: Reward::ZERO, length: 0 }));
        let state = cmd.checkpoint.then(|| self.snapshot());
        Ok(self.ready(cid, cmd.seed, false, state))
    }

    fn ready(&self, cid: u64, seed: u64, restored: bool, state: Option<Vec<u8>>) -> ProtocolMessage {
        let (shape, meta) = match &self.mode {
            Mode::Env(m) => (m.env.task.observation_shape(), env_metadata(m.env.task)),
            Mode::Agent(a) => (a.shape.clone(), a.meta.clone()),
            Mode::Idle => (Vec::new(), Map::new()),
        };
        ProtocolMessage::ready(
            cid,
            ResponseReady { seed, observation_shape: shape, env_metadata: meta, restored, state },
        )
    }

    fn observe_modality(&self) -> Modality {
        match self.opts.policy {
            PolicyKind::ScriptedText => Modality::Text,
            PolicyKind::ScriptedVision => Modality::TextImage,
            _ => Modality::Tensor,
        }
    }

    fn step(&mut self, cid: u64, cmd: StepCommand) -> Result<ProtocolMessage, String> {
        let modality = self.observe_modality();
        let omit = self.opts.omit_episode_end;
        let Mode::Env(m) = &mut self.mode else {
            return Err("step needs an environment; send reset without agent_id first".into());
        };
        if m.env.is_done() {
            if omit {
                let mut r = ResponseStep::action(m.env.task.action_space().null_action);
                r.reward = Some(Reward::ZERO);
                r.terminated = Some(m.env.terminated);
                r.truncated = Some(m.env.truncated);
                return Ok(ProtocolMessage::step_result(cid, r));
            }
            return Ok(ProtocolMessage::episode_end(
                cid,
                ResponseEpisodeEnd { total_reward: m.total, episode_length: m.length },
            ));
        }
        let space = m.env.task.action_space();
        let opts = ObsOptions { max_image_history: 1, ..ObsOptions::default() };
        let obs = mosaic_envs::serialize_obs(&m.env, m.env.slots()[0], modality, &opts).map_err(|e| e.to_string())?;
        let decided = match m.policy.decide(&obs, &space) {
            Decision::Action(a) => a,
            Decision::Text(t) => {
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                parse_action(&t, &space, &ParsePolicy::default(), &mut unused).map(|r| r.0).unwrap_or(space.null_action)
            }
        };
        let action = match cmd.action {
            Some(a) if !space.contains(a) => return Err(format!("action {a} is outside 0..{}", space.n)),
            Some(a) => a,
            None => decided,
        };
        let joint = [(m.env.slots()[0].to_string(), action)].into_iter().collect();
        let (next, transitions) = mosaic_envs::step_parallel(&m.env, &joint).map_err(|e| e.to_string())?;
        m.env = next;
        let t = &transitions[0];
        m.total += t.reward;
        m.length += 1;
        let mut r = ResponseStep::action(action);
        r.reward = Some(t.reward);
        r.terminated = Some(t.terminated);
        r.truncated = Some(t.truncated);
        r.render_payload = Some(RenderPayload::Inline { ascii: render_ascii(&m.env) });
        if cmd.checkpoint {
            r.state = Some(self.snapshot());
        }
        Ok(ProtocolMessage::step_result(cid, r))
    }

    fn select(&mut self, cid: u64, cmd: SelectActionCommand) -> Result<ProtocolMessage, String> {
        let Mode::Agent(a) = &mut self.mode else {
            return Err("select_action needs a policy reset with agent_id first".into());
        };
        if a.agent_id != cmd.agent_id {
            return Err(format!("bound to `{}`, asked for `{}`", a.agent_id, cmd.agent_id));
        }
        let r = match a.policy.decide(&cmd.observation, &a.space) {
            Decision::Action(x) => ResponseStep::action(x),
            Decision::Text(t) => ResponseStep::text(t),
        };
        let mut r = r;
        if cmd.checkpoint {
            r.state = Some(self.snapshot());
        }
        Ok(ProtocolMessage::step_result(cid, r))
    }

    fn restore(&mut self, cid: u64, cmd: RestoreCommand) -> Result<ProtocolMessage, String> {
        if !cmd.verify() {
            return Err("restore digest does not match state".into());
        }
        self.mode = decode_blob(&cmd.state, self.opts.policy)?;
        let seed = match &self.mode {
            Mode::Env(m) => m.env.seed,
            _ => 0,
        };
        Ok(self.ready(cid, seed, true, None))
    }

    fn snapshot(&self) -> Vec<u8> {
        encode_blob(&self.mode)
    }
}

const BLOB_MAGIC: &[u8; 4] = b"MSWK";

fn put_rng(out: &mut Vec<u8>, rng: &ChaCha8Rng) {
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
}

fn encode_blob(mode: &Mode) -> Vec<u8> {
    let mut out = BLOB_MAGIC.to_vec();
    out.push(1);
    match mode {
        Mode::Idle => out.push(0),
        Mode::Env(m) => {
            out.push(1);
            put_rng(&mut out, &m.policy.rng);
            out.extend_from_slice(&m.policy.calls.to_le_bytes());
            out.extend_from_slice(&m.total.milli().to_le_bytes());
            out.extend_from_slice(&m.length.to_le_bytes());
            out.extend_from_slice(&encode_state(&m.env));
        }
        Mode::Agent(a) => {
            out.push(2);
            put_rng(&mut out, &a.policy.rng);
            out.extend_from_slice(&a.policy.calls.to_le_bytes());
            let doc = json!({"agent_id": a.agent_id, "env_metadata": a.meta, "observation_shape": a.shape});
            out.extend_from_slice(mosaic_protocol::canonical::to_string(&doc).as_bytes());
        }
    }
    out
}

fn take_rng(b: &[u8], kind: PolicyKind) -> Option<(Policy, &[u8])> {
    if b.len() < 32 + 8 + 16 + 8 {
        return None;
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().ok()?);
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().ok()?));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().ok()?));
    let calls = u64::from_le_bytes(b[56..64].try_into().ok()?);
    Some((Policy { kind, rng, calls }, &b[64..]))
}

fn decode_blob(bytes: &[u8], kind: PolicyKind) -> Result<Mode, String> {
    let bad = || "state blob is malformed".to_string();
    if bytes.len() < 6 || &bytes[..4] != BLOB_MAGIC || bytes[4] != 1 {
        return Err(bad());
    }
    let rest = &bytes[6..];
    match bytes[5] {
        0 => Ok(Mode::Idle),
        1 => {
            let (policy, rest) = take_rng(rest, kind).ok_or_else(bad)?;
            if rest.len() < 16 {
                return Err(bad());
            }
            let total = Reward::from_milli(i64::from_le_bytes(rest[..8].try_into().unwrap()));
            let length = u64::from_le_bytes(rest[8..16].try_into().unwrap());
            let env = decode_state(&rest[16..]).map_err(|e| e.to_string())?;
            if env.task != Task::Corridor && env.slots().len() != 1 {
                return Err(bad());
            }
            Ok(Mode::Env(Box::new(EnvMode { env, policy, total, length })))
        }
        2 => {
            let (policy, rest) = take_rng(rest, kind).ok_or_else(bad)?;
            let doc: Value = serde_json::from_slice(rest).map_err(|_| bad())?;
            let meta: Map<String, Value> =
                doc.get("env_metadata").and_then(|v| v.as_object().cloned()).ok_or_else(bad)?;
            let space = mosaic_envs::action_space_from_metadata(&meta).ok_or_else(bad)?;
            Ok(Mode::Agent(Box::new(AgentMode {
                agent_id: doc.get("agent_id").and_then(Value::as_str).ok_or_else(bad)?.to_string(),
                shape: serde_json::from_value(doc.get("observation_shape").cloned().unwrap_or_default())
                    .map_err(|_| bad())?,
                meta,
                space,
                policy,
            })))
        }
        _ => Err(bad()),
    }
}
