use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use mosaic_envs::{make_env, reset_episode, step_aec, step_parallel, EnvState};
use mosaic_protocol::Reward;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sha2::{Digest, Sha256};

use super::episode_record;
use crate::operator::{bind_operator, BindOptions, Decided, OperatorError, OperatorHandle, RunConfig, SlotDriver};
use crate::par;
use crate::supervisor::WorkerState;
use crate::telemetry::{
    write_document, EpisodeRecord, RunManifest, RunStore, StepRecord, TelemetryError, CONFIG_FILE, MANIFEST_FILE,
    RECORD_SCHEMA_VERSION, RESULT_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    #[default]
    Parallel,
    Aec,
}

/// Blocks a run between steps while paused; `stop` ends it at the next
/// boundary.
#[derive(Debug, Default)]
pub struct PauseGate {
    state: Mutex<(bool, bool)>,
    cv: Condvar,
}

impl PauseGate {
    pub fn new() -> Arc<PauseGate> {
        Arc::new(PauseGate::default())
    }

    pub fn pause(&self) {
        self.state.lock().expect("gate lock").0 = true;
    }

    pub fn resume(&self) {
        self.state.lock().expect("gate lock").0 = false;
        self.cv.notify_all();
    }

    pub fn stop(&self) {
        self.state.lock().expect("gate lock").1 = true;
        self.cv.notify_all();
    }

    pub fn is_paused(&self) -> bool {
        self.state.lock().expect("gate lock").0
    }

    /// Waits out a pause. Returns false once stopped.
    fn pass(&self) -> bool {
        let mut s = self.state.lock().expect("gate lock");
        while s.0 && !s.1 {
            s = self.cv.wait(s).expect("gate lock");
        }
        !s.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    Step(StepRecord),
    Episode(EpisodeRecord),
}

#[derive(Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub episodes: u64,
    pub max_steps: Option<u64>,
    pub mode: StepMode,
    /// Run directories are created under here.
    pub runs_root: PathBuf,
    pub bind: BindOptions,
    pub gate: Option<Arc<PauseGate>>,
}

impl RunOptions {
    pub fn new(runs_root: impl Into<PathBuf>, seed: u64, episodes: u64) -> Self {
        RunOptions {
            seed,
            episodes,
            max_steps: None,
            mode: StepMode::Parallel,
            runs_root: runs_root.into(),
            bind: BindOptions::default(),
            gate: None,
        }
    }

    /// Seed, episode budget and step cap taken from the config where set.
    pub fn from_config(runs_root: impl Into<PathBuf>, config: &RunConfig) -> Self {
        let mut opts = RunOptions::new(runs_root, config.seed.unwrap_or(0), config.episodes.unwrap_or(1));
        opts.max_steps = config.max_steps;
        opts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub status: RunStatus,
    #[serde(default)]
    pub mode: StepMode,
    pub episodes: u64,
    pub team_returns: BTreeMap<String, Reward>,
    pub slot_returns: BTreeMap<String, Reward>,
    pub wins: BTreeMap<String, u64>,
    pub draws: u64,
    pub terminated: u64,
    pub truncated: u64,
    pub restarts: u64,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_completed_episode: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub run_dir: PathBuf,
}

impl RunResult {
    pub fn win_rate(&self, team: &str) -> f64 {
        if self.episodes == 0 {
            return 0.0;
        }
        *self.wins.get(team).unwrap_or(&0) as f64 / self.episodes as f64
    }
}

/// Stable id from the config, seed and budget, so a re-run lands in the
/// same directory.
pub fn run_id_for(config: &RunConfig, seed: u64, episodes: u64) -> String {
    let mut h = Sha256::new();
    h.update(config.canonical_bytes().as_bytes());
    h.update(seed.to_le_bytes());
    h.update(episodes.to_le_bytes());
    let digest = hex::encode(h.finalize());
    let name: String = config
        .operator_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{name}-s{seed}-{}", &digest[..12])
}

struct Driver<'a> {
    run_id: String,
    op: OperatorHandle,
    store: RunStore,
    opts: &'a RunOptions,
    restarts: u64,
    observer: &'a mut dyn FnMut(&RunEvent),
}

#[derive(Debug)]
enum Halt {
    Stopped,
    Failed(String),
}

impl From<TelemetryError> for Halt {
    fn from(e: TelemetryError) -> Self {
        Halt::Failed(e.to_string())
    }
}

impl Driver<'_> {
    /// Recovers dead workers named by `err`. Returns false when recovery is
    /// impossible.
    fn recover(&mut self, err: &OperatorError) -> bool {
        let slots = err.slots();
        if slots.is_empty() {
            return false;
        }
        let mut recovered = false;
        for b in self.op.slots_mut() {
            if !slots.contains(&b.slot) {
                continue;
            }
            let SlotDriver::Worker(h) = &mut b.driver else { return false };
            if h.state() != WorkerState::Dead || h.recover().is_err() {
                return false;
            }
            recovered = true;
        }
        self.restarts += recovered as u64;
        recovered
    }

    fn with_retry<T>(&mut self, mut f: impl FnMut(&mut OperatorHandle) -> Result<T, OperatorError>) -> Result<T, Halt> {
        loop {
            match f(&mut self.op) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    if !self.recover(&e) {
                        return Err(Halt::Failed(e.to_string()));
                    }
                }
            }
        }
    }

    fn step_record(&self, env: &EnvState, slot: &str, d: &Decided, obs_digest: String) -> StepRecord {
        StepRecord {
            schema_version: RECORD_SCHEMA_VERSION.into(),
            run_id: self.run_id.clone(),
            session_id: self.run_id.clone(),
            replica: None,
            episode_index: env.episode_index as u64,
            step_index: env.step_index as u64,
            slot: slot.to_string(),
            paradigm: self.op.paradigm(slot).expect("bound slot"),
            action: d.action,
            raw_text: d.raw_text.clone(),
            parse_outcome: d.parse_outcome,
            reward: Reward::ZERO,
            terminated: false,
            truncated: false,
            obs_digest,
            render_ref: None,
        }
    }

    fn emit_step(&mut self, r: StepRecord) -> Result<(), Halt> {
        self.store.append_step(&r)?;
        (self.observer)(&RunEvent::Step(r));
        Ok(())
    }

    /// Plays one episode. Returns the finished env, per-slot totals, the
    /// length, and whether the step budget cut it short.
    fn episode(&mut self, mut env: EnvState) -> Result<(EnvState, BTreeMap<String, Reward>, u64, bool), Halt> {
        let seed = self.opts.seed;
        let episode = env.episode_index as u64;
        self.with_retry(|op| op.reset(seed, episode))?;
        let mut totals: BTreeMap<String, Reward> =
            env.task.slots().iter().map(|s| (s.to_string(), Reward::ZERO)).collect();
        let mut length = 0u64;
        let budget = self.opts.max_steps.unwrap_or(u64::MAX);
        while !env.is_done() {
            if let Some(gate) = &self.opts.gate {
                if !gate.pass() {
                    return Err(Halt::Stopped);
                }
            }
            let last = length + 1 >= budget;
            match self.opts.mode {
                StepMode::Parallel => {
                    let observations = self.op.observe_all(&env).map_err(|e| Halt::Failed(e.to_string()))?;
                    let decided = self.with_retry(|op| op.select_actions(&observations))?;
                    let actions = decided.iter().map(|(s, d)| (s.clone(), d.action)).collect();
                    let (next, transitions) = step_parallel(&env, &actions).map_err(|e| Halt::Failed(e.to_string()))?;
                    for t in &transitions {
                        let mut r = self.step_record(&env, &t.slot, &decided[&t.slot], observations[&t.slot].digest());
                        r.reward = t.reward;
                        r.terminated = t.terminated;
                        r.truncated = t.truncated || (last && !t.terminated);
                        *totals.get_mut(&t.slot).expect("known slot") += t.reward;
                        self.emit_step(r)?;
                    }
                    env = next;
                }
                StepMode::Aec => {
                    let before = env.step_index;
                    loop {
                        let slot = env.task.slots()[env.turn as usize].to_string();
                        let obs = self.op.observe(&env, &slot).map_err(|e| Halt::Failed(e.to_string()))?;
                        let d = self.with_retry(|op| op.select_action(&slot, &obs, &Map::new()))?;
                        let (next, t, _) = step_aec(&env, &slot, d.action).map_err(|e| Halt::Failed(e.to_string()))?;
                        let mut r = self.step_record(&env, &slot, &d, obs.digest());
                        r.reward = t.reward;
                        r.terminated = t.terminated;
                        r.truncated = t.truncated || (last && !t.terminated && next.turn == 0);
                        *totals.get_mut(&slot).expect("known slot") += t.reward;
                        env = next;
                        self.emit_step(r)?;
                        if env.is_done() || env.step_index != before {
                            break;
                        }
                    }
                }
            }
            length += 1;
            if last && !env.is_done() {
                return Ok((env, totals, length, true));
            }
        }
        Ok((env, totals, length, false))
    }
}

/// Runs a scripted evaluation: one shared env, joint actions per step,
/// telemetry per step and episode under `runs_root/<run_id>/`. A re-run
/// with the same inputs replaces the directory and reproduces the logs
/// byte for byte.
pub fn run_script(
    config: &RunConfig,
    opts: &RunOptions,
    observer: &mut dyn FnMut(&RunEvent),
) -> Result<RunResult, crate::operator::OperatorError> {
    let config = RunConfig::from_value(&config.to_value())?;
    if opts.episodes == 0 || opts.max_steps == Some(0) {
        return Err(crate::operator::ConfigError {
            errors: vec![crate::operator::FieldError {
                path: "episodes".into(),
                message: "budget must be positive".into(),
            }],
        }
        .into());
    }
    let started = Instant::now();
    let run_id = run_id_for(&config, opts.seed, opts.episodes);
    let dir = opts.runs_root.join(&run_id);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| OperatorError::Env(e.to_string()))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| OperatorError::Env(e.to_string()))?;
    let io = |e: TelemetryError| OperatorError::Env(e.to_string());
    std::fs::write(dir.join(CONFIG_FILE), config.canonical_bytes()).map_err(|e| OperatorError::Env(e.to_string()))?;
    let mut manifest = RunManifest {
        run_id: run_id.clone(),
        config_digest: config.digest(),
        seed: opts.seed,
        created_at: crate::telemetry::unix_now(),
        finished_at: None,
        software_version: env!("CARGO_PKG_VERSION").into(),
        workers: BTreeMap::new(),
        status: "running".into(),
    };
    write_document(&dir.join(MANIFEST_FILE), &manifest).map_err(io)?;

    let mut bind = opts.bind.clone();
    bind.log_dir = Some(dir.join("workers"));
    let op = bind_operator(&config, &bind)?;
    for b in op.slots() {
        let doc = match b.worker() {
            Some(h) => serde_json::to_value(&h.handshake().manifest).unwrap_or(Value::Null),
            None => serde_json::json!({"worker_kind": "human"}),
        };
        manifest.workers.insert(b.slot.clone(), doc);
    }
    let store = RunStore::open(&dir, &run_id).map_err(io)?;
    let mut driver = Driver { run_id: run_id.clone(), op, store, opts, restarts: 0, observer };

    let mut result = RunResult {
        run_id: run_id.clone(),
        status: RunStatus::Completed,
        mode: opts.mode,
        episodes: 0,
        team_returns: BTreeMap::new(),
        slot_returns: BTreeMap::new(),
        wins: BTreeMap::new(),
        draws: 0,
        terminated: 0,
        truncated: 0,
        restarts: 0,
        wall_time_ms: 0,
        last_completed_episode: None,
        error: None,
        run_dir: dir.clone(),
    };
    let task = config.task();
    for team in task.teams() {
        result.team_returns.insert(team.to_string(), Reward::ZERO);
    }
    let mut env = make_env(task.id(), opts.seed).map_err(|e| OperatorError::Env(e.to_string()))?;
    for episode in 0..opts.episodes {
        if episode > 0 {
            env = reset_episode(&env);
        }
        match driver.episode(env.clone()) {
            Ok((done, totals, length, cut)) => {
                let record = episode_record(&run_id, None, &done, episode, &totals, length, cut);
                if let Err(e) = driver.store.append_episode(&record) {
                    result.status = RunStatus::Failed;
                    result.error = Some(e.to_string());
                    break;
                }
                (driver.observer)(&RunEvent::Episode(record.clone()));
                for (slot, r) in &totals {
                    *result.slot_returns.entry(slot.clone()).or_insert(Reward::ZERO) += *r;
                    if let Some(team) = task.team_of(slot) {
                        *result.team_returns.entry(team.to_string()).or_insert(Reward::ZERO) += *r;
                    }
                }
                match record.winner.as_deref() {
                    Some(crate::telemetry::DRAW) => result.draws += 1,
                    Some(team) => *result.wins.entry(team.to_string()).or_insert(0) += 1,
                    None => {}
                }
                result.terminated += record.terminated as u64;
                result.truncated += record.truncated as u64;
                result.episodes += 1;
                result.last_completed_episode = Some(episode);
                env = done;
            }
            Err(Halt::Stopped) => {
                result.status = RunStatus::Stopped;
                break;
            }
            Err(Halt::Failed(e)) => {
                result.status = RunStatus::Failed;
                result.error = Some(e);
                break;
            }
        }
    }
    result.restarts = driver.restarts;
    let _ = driver.store.finalize();
    driver.op.shutdown(std::time::Duration::from_secs(2));
    result.wall_time_ms = started.elapsed().as_millis() as u64;
    manifest.finished_at = Some(crate::telemetry::unix_now());
    manifest.status =
        serde_json::to_value(result.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    write_document(&dir.join(MANIFEST_FILE), &manifest).map_err(io)?;
    write_document(&dir.join(RESULT_FILE), &result).map_err(io)?;
    Ok(result)
}

/// Runs every (config, seed) pair, fanned out over the pool. Results keep
/// input order.
pub fn sweep(jobs: &[(RunConfig, u64)], base: &RunOptions) -> Vec<Result<RunResult, OperatorError>> {
    par::map(jobs, |(config, seed)| {
        let mut opts = base.clone();
        opts.seed = *seed;
        run_script(config, &opts, &mut |_| {})
    })
}
