//! Worker processes: spawn in a fresh process group, exchange protocol
//! lines, watch heartbeats, checkpoint, recover, stop.

mod checkpoint;
pub mod process;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use mosaic_protocol::{
    decode_message, encode_message, negotiate, protocol_version, CapabilityManifest, Handshake, MessageKind,
    MessageName, ModalityKind, NegotiatedSession, NegotiationError, Payload, ProtocolMessage, RestoreCommand,
    WorkerKind, MAX_LINE_BYTES,
};
use serde_json::Value;

pub use checkpoint::{CheckpointRef, CheckpointStore};

use crate::clock::Clock;

#[derive(Debug, Clone)]
pub struct WorkerSpec {
    pub executable: PathBuf,
    pub args: Vec<String>,
    pub env_vars: BTreeMap<String, String>,
    pub working_dir: Option<PathBuf>,
    pub worker_kind: WorkerKind,
    pub heartbeat_interval: Duration,
    pub liveness_window: Duration,
    pub max_restarts: u32,
    /// Logical time allowed between spawn and the handshake line.
    pub startup_timeout: Duration,
    pub required_commands: BTreeSet<MessageName>,
    pub required_modalities: BTreeSet<ModalityKind>,
    pub required_image_history: u32,
    pub stderr_log: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub frozen: bool,
}

impl WorkerSpec {
    pub fn new(executable: impl Into<PathBuf>, worker_kind: WorkerKind) -> Self {
        WorkerSpec {
            executable: executable.into(),
            args: Vec::new(),
            env_vars: BTreeMap::new(),
            working_dir: None,
            worker_kind,
            heartbeat_interval: Duration::from_secs(60),
            liveness_window: Duration::from_secs(300),
            max_restarts: 3,
            startup_timeout: Duration::from_secs(300),
            required_commands: [MessageName::Reset, MessageName::Stop].into_iter().collect(),
            required_modalities: [ModalityKind::Tensor].into_iter().collect(),
            required_image_history: 0,
            stderr_log: None,
            checkpoint_every: 100,
            checkpoint_dir: None,
            frozen: false,
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn validate(&self) -> Result<(), SupervisorError> {
        if self.heartbeat_interval.is_zero() {
            return Err(SupervisorError::InvalidSpec("heartbeat_interval must be positive".into()));
        }
        if self.liveness_window < self.heartbeat_interval * 2 {
            return Err(SupervisorError::InvalidSpec("liveness_window must be at least 2 x heartbeat_interval".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(SupervisorError::InvalidSpec("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn required_manifest(&self) -> CapabilityManifest {
        CapabilityManifest {
            worker_kind: self.worker_kind,
            supported_commands: self.required_commands.clone(),
            observation_modalities: self.required_modalities.clone(),
            max_image_history: self.required_image_history,
            schema_version: protocol_version(),
            env_metadata: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    Starting,
    Ready,
    Busy,
    Paused,
    Dead,
    Recovering,
}

#[derive(Debug, thiserror::Error)]
pub enum SupervisorError {
    #[error("invalid worker spec: {0}")]
    InvalidSpec(String),
    #[error("spawn failed: {0}")]
    Spawn(std::io::Error),
    #[error("no handshake within the startup timeout")]
    HandshakeTimeout,
    #[error("bad handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Negotiation(#[from] NegotiationError),
    #[error("worker `{worker_id}` is {state:?}")]
    State { worker_id: String, state: WorkerState },
    #[error("worker `{worker_id}` timed out")]
    Timeout { worker_id: String },
    #[error("worker `{worker_id}` exited")]
    Exited { worker_id: String },
    #[error("worker `{worker_id}` reported: {message}")]
    Worker { worker_id: String, message: String },
    #[error("cannot encode command: {0}")]
    Encode(String),
    #[error("`train` is refused for frozen worker `{0}`")]
    Frozen(String),
    #[error("worker `{worker_id}` permanently failed: {reason}")]
    PermanentFailure { worker_id: String, reason: String },
    #[error("replay diverged for `{worker_id}`: {detail}")]
    Replay { worker_id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LivenessKind {
    /// `missed` consecutive heartbeat intervals have passed in silence.
    MissedHeartbeat {
        missed: u64,
    },
    Dead {
        silence: Duration,
    },
    Exited,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LivenessEvent {
    pub worker_id: String,
    pub at: Duration,
    pub kind: LivenessKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitPath {
    /// Exited after the `stop` command.
    Protocol,
    /// Exited after SIGTERM to the group.
    Terminated,
    /// Needed SIGKILL.
    Forced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitReport {
    pub worker_id: String,
    pub path: ExitPath,
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    /// Group members still alive after the leader exited.
    pub survivors_killed: usize,
}

enum EventKind {
    Line(String),
    Oversize,
    Eof,
}

struct Event {
    at: Duration,
    kind: EventKind,
}

fn read_lines(stdout: ChildStdout, tx: Sender<Event>, clock: Arc<dyn Clock>) {
    let mut reader = BufReader::new(stdout);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let limit = (MAX_LINE_BYTES + 2) as u64;
        match reader.by_ref().take(limit).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => {
                let _ = tx.send(Event { at: clock.now(), kind: EventKind::Eof });
                return;
            }
            Ok(_) => {}
        }
        let kind = if !buf.ends_with(b"\n") && buf.len() > MAX_LINE_BYTES {
            let mut skip = Vec::new();
            let _ = reader.read_until(b'\n', &mut skip);
            EventKind::Oversize
        } else {
            EventKind::Line(String::from_utf8_lossy(&buf).into_owned())
        };
        if tx.send(Event { at: clock.now(), kind }).is_err() {
            return;
        }
    }
}

struct Process {
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<Event>,
    pid: u32,
}

#[derive(Debug, Clone)]
struct JournalEntry {
    /// Step count after this command was answered.
    step_index: u64,
    command: ProtocolMessage,
    response: Payload,
}

#[derive(Debug, Clone, Default)]
struct Journal {
    reset: Option<ProtocolMessage>,
    entries: Vec<JournalEntry>,
}

pub struct WorkerHandle {
    worker_id: String,
    spec: WorkerSpec,
    clock: Arc<dyn Clock>,
    proc: Process,
    state: WorkerState,
    last_heartbeat: Duration,
    warned: u64,
    restarts_used: u32,
    session: NegotiatedSession,
    handshake: Handshake,
    next_cid: u64,
    episode_index: Option<u64>,
    step_index: u64,
    seed: u64,
    journal: Journal,
    checkpoints: Vec<CheckpointRef>,
    store: Option<CheckpointStore>,
    garbage_lines: u64,
    report: Option<ExitReport>,
}

fn launch(
    spec: &WorkerSpec,
    worker_id: &str,
    clock: &Arc<dyn Clock>,
) -> Result<(Process, Handshake, NegotiatedSession, Duration), SupervisorError> {
    spec.validate()?;
    let mut cmd = Command::new(&spec.executable);
    cmd.args(&spec.args)
        .envs(&spec.env_vars)
        .env("MOSAIC_WORKER_ID", worker_id)
        .env("MOSAIC_HEARTBEAT_SECS", format!("{}", clock.to_real(spec.heartbeat_interval).as_secs_f64()))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .process_group(0);
    if let Some(dir) = &spec.working_dir {
        cmd.current_dir(dir);
    }
    match &spec.stderr_log {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(SupervisorError::Spawn)?;
            }
            let file =
                std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(SupervisorError::Spawn)?;
            cmd.stderr(file);
        }
        None => {
            cmd.stderr(Stdio::null());
        }
    }
    let mut child = cmd.spawn().map_err(SupervisorError::Spawn)?;
    let pid = child.id();
    let stdout = child.stdout.take().expect("stdout is piped");
    let stdin = child.stdin.take();
    let (tx, rx) = crossbeam_channel::unbounded();
    let reader_clock = clock.clone();
    std::thread::Builder::new()
        .name(format!("mosaic-read-{worker_id}"))
        .spawn(move || read_lines(stdout, tx, reader_clock))
        .map_err(SupervisorError::Spawn)?;
    let mut proc = Process { child, stdin, rx, pid };

    let fail = |proc: &mut Process, err: SupervisorError| {
        process::signal_group(proc.pid as i32, libc::SIGKILL);
        let _ = proc.child.wait();
        err
    };
    let first = match proc.rx.recv_timeout(clock.to_real(spec.startup_timeout)) {
        Ok(ev) => ev,
        Err(_) => return Err(fail(&mut proc, SupervisorError::HandshakeTimeout)),
    };
    let line = match first.kind {
        EventKind::Line(l) => l,
        EventKind::Oversize => return Err(fail(&mut proc, SupervisorError::Handshake("first line too long".into()))),
        EventKind::Eof => {
            return Err(fail(&mut proc, SupervisorError::Handshake("worker exited before handshake".into())))
        }
    };
    let msg = match decode_message(&line) {
        Ok(m) if m.is(MessageName::Handshake) => m,
        Ok(m) => {
            let err = SupervisorError::Handshake(format!("expected handshake, got `{}`", m.name));
            return Err(fail(&mut proc, err));
        }
        Err(e) => {
            let err = SupervisorError::Handshake(format!("{} error: {}", e.class.as_str(), e.detail));
            return Err(fail(&mut proc, err));
        }
    };
    let handshake = match Handshake::from_payload(&msg.payload) {
        Ok(h) => h,
        Err(e) => return Err(fail(&mut proc, SupervisorError::Handshake(e.to_string()))),
    };
    let session = match negotiate(&handshake.manifest, &spec.required_manifest()) {
        Ok(s) => s,
        Err(e) => return Err(fail(&mut proc, e.into())),
    };
    Ok((proc, handshake, session, first.at))
}

/// Starts `spec` in a new process group and negotiates its handshake.
/// Any failure kills the group before returning.
pub fn spawn_worker(spec: WorkerSpec, worker_id: &str, clock: Arc<dyn Clock>) -> Result<WorkerHandle, SupervisorError> {
    let (proc, handshake, session, at) = launch(&spec, worker_id, &clock)?;
    let store = spec.checkpoint_dir.clone().map(CheckpointStore::new);
    Ok(WorkerHandle {
        worker_id: worker_id.to_string(),
        spec,
        clock,
        proc,
        state: WorkerState::Ready,
        last_heartbeat: at,
        warned: 0,
        restarts_used: 0,
        session,
        handshake,
        next_cid: 1,
        episode_index: None,
        step_index: 0,
        seed: 0,
        journal: Journal::default(),
        checkpoints: Vec::new(),
        store,
        garbage_lines: 0,
        report: None,
    })
}

/// Spawns several workers at once, one thread each.
pub fn spawn_workers(
    specs: Vec<(WorkerSpec, String)>,
    clock: Arc<dyn Clock>,
) -> Vec<Result<WorkerHandle, SupervisorError>> {
    std::thread::scope(|s| {
        let joins: Vec<_> = specs
            .into_iter()
            .map(|(spec, id)| {
                let clock = clock.clone();
                s.spawn(move || spawn_worker(spec, &id, clock))
            })
            .collect();
        joins.into_iter().map(|j| j.join().expect("spawn thread panicked")).collect()
    })
}

fn strip_envelope(msg: &ProtocolMessage) -> Payload {
    let mut p = msg.payload.clone();
    p.remove("state");
    p
}

impl WorkerHandle {
    pub fn worker_id(&self) -> &str {
        &self.worker_id
    }

    pub fn pid(&self) -> u32 {
        self.proc.pid
    }

    pub fn process_group_id(&self) -> i32 {
        self.proc.pid as i32
    }

    pub fn state(&self) -> WorkerState {
        self.state
    }

    pub fn last_heartbeat(&self) -> Duration {
        self.last_heartbeat
    }

    pub fn restarts_used(&self) -> u32 {
        self.restarts_used
    }

    pub fn session(&self) -> &NegotiatedSession {
        &self.session
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    pub fn spec(&self) -> &WorkerSpec {
        &self.spec
    }

    pub fn checkpoints(&self) -> &[CheckpointRef] {
        &self.checkpoints
    }

    pub fn episode_index(&self) -> Option<u64> {
        self.episode_index
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn garbage_lines(&self) -> u64 {
        self.garbage_lines
    }

    pub fn pause(&mut self) -> Result<(), SupervisorError> {
        match self.state {
            WorkerState::Ready => {
                self.state = WorkerState::Paused;
                Ok(())
            }
            state => Err(SupervisorError::State { worker_id: self.worker_id.clone(), state }),
        }
    }

    pub fn resume(&mut self) -> Result<(), SupervisorError> {
        match self.state {
            WorkerState::Paused => {
                self.state = WorkerState::Ready;
                Ok(())
            }
            state => Err(SupervisorError::State { worker_id: self.worker_id.clone(), state }),
        }
    }

    fn mark_dead(&mut self) {
        if self.state != WorkerState::Dead {
            self.state = WorkerState::Dead;
        }
    }

    /// Folds one reader event into the handle. Returns a decoded response.
    fn absorb(&mut self, ev: Event) -> Result<Option<ProtocolMessage>, SupervisorError> {
        match ev.kind {
            EventKind::Eof => {
                self.mark_dead();
                Err(SupervisorError::Exited { worker_id: self.worker_id.clone() })
            }
            EventKind::Oversize => {
                self.garbage_lines += 1;
                Ok(None)
            }
            EventKind::Line(line) => match decode_message(&line) {
                Ok(msg) if msg.kind == MessageKind::Response => {
                    if ev.at > self.last_heartbeat {
                        self.last_heartbeat = ev.at;
                    }
                    self.warned = 0;
                    Ok((!msg.is(MessageName::Heartbeat)).then_some(msg))
                }
                _ => {
                    self.garbage_lines += 1;
                    Ok(None)
                }
            },
        }
    }

    fn send_line(&mut self, msg: &ProtocolMessage) -> Result<(), SupervisorError> {
        let line = encode_message(msg).map_err(|e| SupervisorError::Encode(e.to_string()))?;
        let ok = match self.proc.stdin.as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()).is_ok(),
            None => false,
        };
        if !ok {
            self.mark_dead();
            return Err(SupervisorError::Exited { worker_id: self.worker_id.clone() });
        }
        Ok(())
    }

    /// Sends one command and waits for the response carrying its
    /// correlation id. Heartbeats and stale responses are consumed.
    fn exchange(&mut self, mut msg: ProtocolMessage, timeout: Duration) -> Result<ProtocolMessage, SupervisorError> {
        let cid = self.next_cid;
        self.next_cid += 1;
        msg.correlation_id = cid;
        self.send_line(&msg)?;
        let prior = self.state;
        self.state = WorkerState::Busy;
        let deadline = self.clock.now() + timeout;
        loop {
            let now = self.clock.now();
            if now >= deadline {
                self.mark_dead();
                return Err(SupervisorError::Timeout { worker_id: self.worker_id.clone() });
            }
            let wait = self.clock.to_real(deadline - now).min(Duration::from_millis(20));
            let ev = match self.proc.rx.recv_timeout(wait) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    self.mark_dead();
                    return Err(SupervisorError::Exited { worker_id: self.worker_id.clone() });
                }
            };
            let Some(resp) = self.absorb(ev)? else { continue };
            let unsolicited_error = resp.is(MessageName::Error) && resp.correlation_id == 0;
            if resp.correlation_id != cid && !unsolicited_error {
                continue;
            }
            self.state = if prior == WorkerState::Recovering { prior } else { WorkerState::Ready };
            if resp.is(MessageName::Error) {
                let message = resp.get("message").and_then(Value::as_str).unwrap_or("").to_string();
                return Err(SupervisorError::Worker { worker_id: self.worker_id.clone(), message });
            }
            return Ok(resp);
        }
    }

    /// Sends `msg` and returns its response. The handle assigns the
    /// correlation id, injects checkpoint requests on its cadence, and strips
    /// captured state from what it returns.
    pub fn request(&mut self, mut msg: ProtocolMessage, timeout: Duration) -> Result<ProtocolMessage, SupervisorError> {
        if !matches!(self.state, WorkerState::Ready | WorkerState::Busy) {
            return Err(SupervisorError::State { worker_id: self.worker_id.clone(), state: self.state });
        }
        if msg.is(MessageName::Train) && self.spec.frozen {
            return Err(SupervisorError::Frozen(self.worker_id.clone()));
        }
        let counts_step = msg.is(MessageName::Step) || msg.is(MessageName::SelectAction);
        let can_checkpoint = self.session.supports(MessageName::Restore);
        msg.payload.remove("checkpoint");
        let plain = msg.clone();
        let wants_checkpoint = can_checkpoint
            && (msg.is(MessageName::Reset)
                || (counts_step && (self.step_index + 1).is_multiple_of(self.spec.checkpoint_every)));
        if wants_checkpoint {
            msg.payload.insert("checkpoint".into(), Value::Bool(true));
        }
        let resp = self.exchange(msg, timeout)?;

        if plain.is(MessageName::Reset) {
            self.episode_index = Some(self.episode_index.map_or(0, |e| e + 1));
            self.step_index = 0;
            self.seed = plain.get("seed").and_then(Value::as_u64).unwrap_or(0);
            self.journal = Journal { reset: Some(plain), entries: Vec::new() };
            self.checkpoints.clear();
        } else if counts_step && resp.is(MessageName::StepResult) {
            self.step_index += 1;
            self.journal.entries.push(JournalEntry {
                step_index: self.step_index,
                command: plain,
                response: strip_envelope(&resp),
            });
        }
        let mut resp = resp;
        if let Some(Value::String(state)) = resp.payload.remove("state") {
            let blob = mosaic_protocol_b64(&state);
            if let Some(blob) = blob {
                let c = CheckpointRef::new(
                    &self.worker_id,
                    self.episode_index.unwrap_or(0),
                    self.step_index,
                    self.seed,
                    blob,
                );
                if let Some(store) = &self.store {
                    let _ = store.save(&c);
                }
                self.checkpoints.push(c);
            }
        }
        Ok(resp)
    }

    /// Drains pending output and reports liveness against `now`.
    /// Calling it again with the same `now` reports nothing new.
    pub fn monitor(&mut self, now: Duration) -> Vec<LivenessEvent> {
        let mut events = Vec::new();
        while let Ok(ev) = self.proc.rx.try_recv() {
            if self.state == WorkerState::Dead {
                break;
            }
            if self.absorb(ev).is_err() {
                events.push(LivenessEvent { worker_id: self.worker_id.clone(), at: now, kind: LivenessKind::Exited });
            }
        }
        if matches!(self.state, WorkerState::Dead | WorkerState::Recovering) {
            return events;
        }
        let silence = now.saturating_sub(self.last_heartbeat);
        if silence >= self.spec.liveness_window {
            self.mark_dead();
            events.push(LivenessEvent {
                worker_id: self.worker_id.clone(),
                at: now,
                kind: LivenessKind::Dead { silence },
            });
            return events;
        }
        let missed = (silence.as_nanos() / self.spec.heartbeat_interval.as_nanos()) as u64;
        for k in self.warned + 1..=missed {
            events.push(LivenessEvent {
                worker_id: self.worker_id.clone(),
                at: now,
                kind: LivenessKind::MissedHeartbeat { missed: k },
            });
        }
        self.warned = self.warned.max(missed);
        events
    }

    fn kill_group(&mut self) {
        process::signal_group(self.process_group_id(), libc::SIGKILL);
        let _ = self.proc.child.wait();
    }

    /// Respawns a dead worker and brings it back to where it was: reset with
    /// the episode seed, restore the newest checkpoint that verifies, then
    /// replay the journal after it. Without a usable checkpoint the whole
    /// episode is replayed from reset.
    pub fn recover(&mut self) -> Result<(), SupervisorError> {
        if self.state != WorkerState::Dead || self.report.is_some() {
            return Err(SupervisorError::State { worker_id: self.worker_id.clone(), state: self.state });
        }
        if self.restarts_used >= self.spec.max_restarts {
            return Err(SupervisorError::PermanentFailure {
                worker_id: self.worker_id.clone(),
                reason: format!("restart budget of {} used", self.spec.max_restarts),
            });
        }
        self.kill_group();
        self.restarts_used += 1;
        self.state = WorkerState::Recovering;
        let (proc, handshake, session, at) = match launch(&self.spec, &self.worker_id, &self.clock) {
            Ok(x) => x,
            Err(e) => {
                self.state = WorkerState::Dead;
                return Err(e);
            }
        };
        self.proc = proc;
        self.handshake = handshake;
        self.session = session;
        self.last_heartbeat = at;
        self.warned = 0;
        let timeout = self.spec.liveness_window;
        let result = self.replay(timeout);
        self.state = if result.is_ok() { WorkerState::Ready } else { WorkerState::Dead };
        result
    }

    fn usable_checkpoint(&self) -> Option<(CheckpointRef, Vec<u8>)> {
        let episode = self.episode_index?;
        for c in self.checkpoints.iter().rev() {
            if c.episode_index != episode {
                break;
            }
            let blob = match &self.store {
                Some(store) => store.load(c).ok(),
                None => c.verify().then(|| c.state_blob.clone()),
            };
            if let Some(blob) = blob {
                return Some((c.clone(), blob));
            }
        }
        None
    }

    fn replay(&mut self, timeout: Duration) -> Result<(), SupervisorError> {
        let Some(reset) = self.journal.reset.clone() else { return Ok(()) };
        self.exchange(reset, timeout)?;
        let mut from = 0;
        if self.session.supports(MessageName::Restore) {
            if let Some((c, blob)) = self.usable_checkpoint() {
                let restore = ProtocolMessage::restore(0, RestoreCommand::new(blob));
                self.exchange(restore, timeout)?;
                from = c.step_index;
            }
        }
        let entries: Vec<JournalEntry> = self.journal.entries.iter().filter(|e| e.step_index > from).cloned().collect();
        for entry in entries {
            let mut cmd = entry.command.clone();
            if cmd.is(MessageName::Step) {
                if let Some(action) = entry.response.get("action") {
                    cmd.payload.insert("action".into(), action.clone());
                }
            }
            let resp = self.exchange(cmd, timeout)?;
            if strip_envelope(&resp) != entry.response {
                return Err(SupervisorError::Replay {
                    worker_id: self.worker_id.clone(),
                    detail: format!("step {} answered differently", entry.step_index),
                });
            }
        }
        Ok(())
    }

    fn wait_exit(&mut self, grace: Duration) -> Option<std::process::ExitStatus> {
        let until = Instant::now() + grace;
        loop {
            if let Ok(Some(status)) = self.proc.child.try_wait() {
                return Some(status);
            }
            if Instant::now() >= until {
                return None;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    /// `stop`, then SIGTERM to the group after `grace`, then SIGKILL. Always
    /// reaps and sweeps the group. A second call returns the first report.
    pub fn stop_worker(&mut self, grace: Duration) -> ExitReport {
        if let Some(report) = &self.report {
            return report.clone();
        }
        let pgid = self.process_group_id();
        let stop = ProtocolMessage::stop(self.next_cid);
        self.next_cid += 1;
        let _ = self.send_line(&stop);
        let mut path = ExitPath::Protocol;
        let mut status = self.wait_exit(grace);
        if status.is_none() {
            path = ExitPath::Terminated;
            process::signal_group(pgid, libc::SIGTERM);
            process::signal_group(pgid, libc::SIGCONT);
            status = self.wait_exit(grace);
        }
        if status.is_none() {
            path = ExitPath::Forced;
            process::signal_group(pgid, libc::SIGKILL);
            status = self.proc.child.wait().ok();
        }
        self.proc.stdin = None;
        let survivors = process::group_members(pgid).len();
        process::signal_group(pgid, libc::SIGKILL);
        let deadline = Instant::now() + Duration::from_secs(2);
        while !process::group_members(pgid).is_empty() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        self.state = WorkerState::Dead;
        let report = ExitReport {
            worker_id: self.worker_id.clone(),
            path,
            exit_code: status.and_then(|s| s.code()),
            signal: status.and_then(|s| s.signal()),
            survivors_killed: survivors,
        };
        self.report = Some(report.clone());
        report
    }

    pub fn exit_report(&self) -> Option<&ExitReport> {
        self.report.as_ref()
    }
}

fn mosaic_protocol_b64(s: &str) -> Option<Vec<u8>> {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.decode(s.as_bytes()).ok()
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        if self.report.is_none() {
            self.proc.stdin = None;
            process::signal_group(self.process_group_id(), libc::SIGKILL);
            let _ = self.proc.child.wait();
        }
    }
}
