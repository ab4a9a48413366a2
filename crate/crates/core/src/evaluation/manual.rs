use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::time::Duration;

use mosaic_envs::{make_env, render_ascii, reset_episode, step_parallel, EnvState, Task};
use mosaic_protocol::{ObservationPayload, Reward};
use serde::Serialize;

use super::{badge, episode_record, Badge};
use crate::operator::{bind_operator, BindOptions, ConfigError, Decided, OperatorError, OperatorHandle, RunConfig};
use crate::par;
use crate::telemetry::{EpisodeRecord, RunStore, StepRecord, TelemetryError, TelemetryRecord, RECORD_SCHEMA_VERSION};

pub const DEFAULT_MAX_REPLICAS: usize = 6;

#[derive(Clone)]
pub struct SessionOptions {
    pub max_replicas: usize,
    pub bind: BindOptions,
    /// Telemetry goes to `runs_root/<session_id>/` when set.
    pub runs_root: Option<PathBuf>,
    /// Barriers kept for frame lookups.
    pub frame_history: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            max_replicas: DEFAULT_MAX_REPLICAS,
            bind: BindOptions::default(),
            runs_root: None,
            frame_history: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Ready,
    Paused,
    Failed { reason: String },
    Stopped,
}

impl SessionStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SessionStatus::Ready => "ready",
            SessionStatus::Paused => "paused",
            SessionStatus::Failed { .. } => "failed",
            SessionStatus::Stopped => "stopped",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Precondition(String),
    #[error("replica {replica}: {source}")]
    Config { replica: usize, source: ConfigError },
    #[error("replica {replica}: {source}")]
    Bind { replica: usize, source: OperatorError },
    #[error("waiting for human actions: {}", fmt_pairs(.slots))]
    Blocked { slots: Vec<(usize, String)> },
    #[error("replica {replica}: {source}")]
    Human { replica: usize, source: OperatorError },
    #[error("session is {status}")]
    Conflict { status: &'static str },
    #[error("replica {replica}: {message}")]
    Failed { replica: usize, message: String },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

fn fmt_pairs(pairs: &[(usize, String)]) -> String {
    pairs.iter().map(|(r, s)| format!("{r}/{s}")).collect::<Vec<_>>().join(", ")
}

struct Replica {
    operator_id: String,
    op: OperatorHandle,
    env: EnvState,
    totals: BTreeMap<String, Reward>,
    length: u64,
    episodes_done: u64,
    badges: BTreeMap<String, Badge>,
}

/// Per-replica summary after a barrier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaView {
    pub replica: usize,
    pub operator_id: String,
    pub episode_index: u64,
    pub step_index: u64,
    pub episodes_done: u64,
    pub scores: BTreeMap<String, i32>,
    pub badges: BTreeMap<String, Badge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaFrame {
    pub replica: usize,
    pub operator_id: String,
    pub episode_index: u64,
    pub step_index: u64,
    pub badges: BTreeMap<String, Badge>,
    #[serde(skip)]
    pub state: EnvState,
}

impl ReplicaFrame {
    pub fn ascii(&self) -> String {
        render_ascii(&self.state)
    }
}

/// Every replica's state at one barrier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameSet {
    pub barrier: u64,
    pub replicas: Vec<ReplicaFrame>,
}

/// N operators stepped in lock-step over identically seeded replicas.
pub struct ManualSession {
    session_id: String,
    task: Task,
    seed: u64,
    replicas: Vec<Replica>,
    barrier: u64,
    status: SessionStatus,
    store: Option<RunStore>,
    frames: VecDeque<FrameSet>,
    frame_history: usize,
}

/// Binds one operator per config, each over its own replica of `task_id`
/// seeded with `seed`. Fails before spawning anything if the configs do not
/// fit.
pub fn open_manual_session(
    session_id: &str,
    configs: &[RunConfig],
    task_id: &str,
    seed: u64,
    opts: &SessionOptions,
) -> Result<ManualSession, SessionError> {
    if configs.is_empty() || configs.len() > opts.max_replicas {
        return Err(SessionError::Precondition(format!(
            "a manual session takes 1 to {} operators, got {}",
            opts.max_replicas,
            configs.len()
        )));
    }
    let task = Task::from_id(task_id).ok_or_else(|| SessionError::Precondition(format!("unknown task `{task_id}`")))?;
    let mut checked = Vec::with_capacity(configs.len());
    for (i, c) in configs.iter().enumerate() {
        let c = RunConfig::from_value(&c.to_value()).map_err(|source| SessionError::Config { replica: i, source })?;
        if c.task != task_id {
            return Err(SessionError::Precondition(format!(
                "replica {i}: operator `{}` targets `{}`, session runs `{task_id}`",
                c.operator_id, c.task
            )));
        }
        checked.push(c);
    }
    let store = match &opts.runs_root {
        Some(root) => {
            let dir = root.join(session_id);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| TelemetryError::Io(e.to_string()))?;
            }
            Some(RunStore::open(dir, session_id)?)
        }
        None => None,
    };
    let bound = par::map(&checked, |c| {
        let mut bind = opts.bind.clone();
        if let Some(root) = &opts.runs_root {
            bind.log_dir = Some(root.join(session_id).join("workers").join(&c.operator_id));
        }
        bind_operator(c, &bind)
    });
    let env = make_env(task_id, seed).map_err(|e| SessionError::Precondition(e.to_string()))?;
    let mut replicas = Vec::with_capacity(bound.len());
    for (i, (op, config)) in bound.into_iter().zip(&checked).enumerate() {
        let op = op.map_err(|source| SessionError::Bind { replica: i, source })?;
        let badges = op.slots().iter().map(|b| (b.slot.clone(), badge(b.paradigm()))).collect();
        replicas.push(Replica {
            operator_id: config.operator_id.clone(),
            op,
            env: env.clone(),
            totals: zero_totals(task),
            length: 0,
            episodes_done: 0,
            badges,
        });
    }
    let results = par::map_mut(&mut replicas, |r| r.op.reset(seed, 0));
    for (i, res) in results.into_iter().enumerate() {
        res.map_err(|source| SessionError::Bind { replica: i, source })?;
    }
    let mut session = ManualSession {
        session_id: session_id.to_string(),
        task,
        seed,
        replicas,
        barrier: 0,
        status: SessionStatus::Ready,
        store,
        frames: VecDeque::new(),
        frame_history: opts.frame_history.max(1),
    };
    session.record_frames();
    Ok(session)
}

fn zero_totals(task: Task) -> BTreeMap<String, Reward> {
    task.slots().iter().map(|s| (s.to_string(), Reward::ZERO)).collect()
}

/// What one barrier produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierOutcome {
    pub barrier: u64,
    pub records: Vec<TelemetryRecord>,
    pub replicas: Vec<ReplicaView>,
}

impl ManualSession {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn barrier(&self) -> u64 {
        self.barrier
    }

    pub fn status(&self) -> &SessionStatus {
        &self.status
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn replica_state(&self, replica: usize) -> Option<&EnvState> {
        self.replicas.get(replica).map(|r| &r.env)
    }

    pub fn operator(&mut self, replica: usize) -> Option<&mut OperatorHandle> {
        self.replicas.get_mut(replica).map(|r| &mut r.op)
    }

    /// Human slots still owing an action for the current barrier.
    pub fn blocked_slots(&self) -> Vec<(usize, String)> {
        self.replicas
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.op.blocked_slots().into_iter().map(move |s| (i, s)))
            .collect()
    }

    pub fn views(&self) -> Vec<ReplicaView> {
        self.replicas
            .iter()
            .enumerate()
            .map(|(i, r)| ReplicaView {
                replica: i,
                operator_id: r.operator_id.clone(),
                episode_index: r.env.episode_index as u64,
                step_index: r.env.step_index as u64,
                episodes_done: r.episodes_done,
                scores: self.task.teams().iter().zip(&r.env.scores).map(|(t, s)| (t.to_string(), *s)).collect(),
                badges: r.badges.clone(),
            })
            .collect()
    }

    /// Queues a human action for the next barrier; a later submission for
    /// the same barrier replaces it. Returns whether one was replaced.
    pub fn submit_human(&mut self, replica: usize, slot: &str, action: u32) -> Result<bool, SessionError> {
        self.require_open()?;
        let barrier = self.barrier;
        let r = self
            .replicas
            .get_mut(replica)
            .ok_or_else(|| SessionError::Precondition(format!("no replica {replica}")))?;
        r.op.submit_human(slot, action, barrier).map_err(|source| SessionError::Human { replica, source })
    }

    fn require_open(&self) -> Result<(), SessionError> {
        match self.status {
            SessionStatus::Ready | SessionStatus::Paused => Ok(()),
            _ => Err(SessionError::Conflict { status: self.status.name() }),
        }
    }

    /// Advances every replica by one step. Either all replicas advance or
    /// none do: a missing human action returns `Blocked`, a failed decision
    /// fails the session.
    pub fn step_session(&mut self) -> Result<BarrierOutcome, SessionError> {
        if self.status != SessionStatus::Ready {
            return Err(SessionError::Conflict { status: self.status.name() });
        }
        let blocked = self.blocked_slots();
        if !blocked.is_empty() {
            return Err(SessionError::Blocked { slots: blocked });
        }
        type Decisions = (BTreeMap<String, ObservationPayload>, BTreeMap<String, Decided>);
        let decided: Vec<Result<Decisions, OperatorError>> = par::map_mut(&mut self.replicas, |r| {
            let obs = r.op.observe_all(&r.env)?;
            let d = r.op.select_actions(&obs)?;
            Ok((obs, d))
        });
        let mut plans = Vec::with_capacity(decided.len());
        for (i, d) in decided.into_iter().enumerate() {
            match d {
                Ok(p) => plans.push(p),
                Err(e) => return Err(self.fail(i, e.to_string())),
            }
        }
        let mut records = Vec::new();
        for (i, (obs, decided)) in plans.into_iter().enumerate() {
            let actions = decided.iter().map(|(s, d)| (s.clone(), d.action)).collect();
            let r = &mut self.replicas[i];
            let (next, transitions) = match step_parallel(&r.env, &actions) {
                Ok(v) => v,
                Err(e) => return Err(self.fail(i, e.to_string())),
            };
            for t in &transitions {
                let d = &decided[&t.slot];
                *r.totals.get_mut(&t.slot).expect("known slot") += t.reward;
                records.push(TelemetryRecord::Step(StepRecord {
                    schema_version: RECORD_SCHEMA_VERSION.into(),
                    run_id: self.session_id.clone(),
                    session_id: self.session_id.clone(),
                    replica: Some(i as u32),
                    episode_index: r.env.episode_index as u64,
                    step_index: r.env.step_index as u64,
                    slot: t.slot.clone(),
                    paradigm: r.op.paradigm(&t.slot).expect("bound slot"),
                    action: d.action,
                    raw_text: d.raw_text.clone(),
                    parse_outcome: d.parse_outcome,
                    reward: t.reward,
                    terminated: t.terminated,
                    truncated: t.truncated,
                    obs_digest: obs[&t.slot].digest(),
                    render_ref: Some(format!("barrier/{}/replica/{i}", self.barrier + 1)),
                }));
            }
            r.length += 1;
            r.env = next;
            if r.env.is_done() {
                let ep: EpisodeRecord = episode_record(
                    &self.session_id,
                    Some(i as u32),
                    &r.env,
                    r.env.episode_index as u64,
                    &r.totals,
                    r.length,
                    false,
                );
                records.push(TelemetryRecord::Episode(ep));
                r.episodes_done += 1;
                r.env = reset_episode(&r.env);
                r.totals = zero_totals(self.task);
                r.length = 0;
                let episode = r.env.episode_index as u64;
                if let Err(e) = r.op.reset(self.seed, episode) {
                    return Err(self.fail(i, e.to_string()));
                }
            }
        }
        if let Some(store) = &mut self.store {
            for rec in &records {
                store.append(rec)?;
            }
            store.flush()?;
        }
        self.barrier += 1;
        self.record_frames();
        Ok(BarrierOutcome { barrier: self.barrier, records, replicas: self.views() })
    }

    fn fail(&mut self, replica: usize, message: String) -> SessionError {
        self.status = SessionStatus::Failed { reason: format!("replica {replica}: {message}") };
        SessionError::Failed { replica, message }
    }

    fn record_frames(&mut self) {
        let replicas = self
            .replicas
            .iter()
            .enumerate()
            .map(|(i, r)| ReplicaFrame {
                replica: i,
                operator_id: r.operator_id.clone(),
                episode_index: r.env.episode_index as u64,
                step_index: r.env.step_index as u64,
                badges: r.badges.clone(),
                state: r.env.clone(),
            })
            .collect();
        self.frames.push_back(FrameSet { barrier: self.barrier, replicas });
        while self.frames.len() > self.frame_history {
            self.frames.pop_front();
        }
    }

    /// Frames at `barrier`, or the latest.
    pub fn frames(&self, barrier: Option<u64>) -> Option<&FrameSet> {
        match barrier {
            None => self.frames.back(),
            Some(b) => self.frames.iter().find(|f| f.barrier == b),
        }
    }

    pub fn pause(&mut self) -> Result<(), SessionError> {
        match self.status {
            SessionStatus::Ready => {
                self.status = SessionStatus::Paused;
                Ok(())
            }
            _ => Err(SessionError::Conflict { status: self.status.name() }),
        }
    }

    pub fn resume(&mut self) -> Result<(), SessionError> {
        match self.status {
            SessionStatus::Paused => {
                self.status = SessionStatus::Ready;
                Ok(())
            }
            _ => Err(SessionError::Conflict { status: self.status.name() }),
        }
    }

    /// Stops every worker. Telemetry written so far stays on disk.
    pub fn stop(&mut self, grace: Duration) -> Result<(), SessionError> {
        if self.status == SessionStatus::Stopped {
            return Err(SessionError::Conflict { status: "stopped" });
        }
        self.status = SessionStatus::Stopped;
        par::map_mut(&mut self.replicas, |r| {
            r.op.shutdown(grace);
        });
        if let Some(store) = &mut self.store {
            store.finalize()?;
        }
        Ok(())
    }
}
