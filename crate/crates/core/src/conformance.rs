//! Golden transcript checks any worker executable must pass to
//! interoperate. Talks to the worker over raw lines so framing, timing and
//! canonical encoding are all observable.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};
use mosaic_envs::{env_metadata, make_env, serialize_obs, step_parallel, EnvState, ObsOptions, Task, CORRIDOR};
use mosaic_protocol::{
    decode_message, encode_message, Handshake, MessageName, Modality, ModalityKind, ObservationPayload,
    ProtocolMessage, ResetCommand, ResponseEpisodeEnd, ResponseReady, ResponseStep, RestoreCommand, Reward,
    SelectActionCommand, StepCommand,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Map;

use crate::operator::phi::{parse_action, ParsePolicy};
use crate::supervisor::process;

pub const GOLDEN_SEED: u64 = 42;
/// Scaled heartbeat interval handed to the worker under test.
pub const HEARTBEAT_SECS: f64 = 0.25;
/// Select-action steps in the golden transcript.
pub const TRANSCRIPT_STEPS: usize = 12;

#[derive(Debug, Clone)]
pub struct ConformanceOptions {
    pub executable: PathBuf,
    pub args: Vec<String>,
    pub response_timeout: Duration,
}

impl ConformanceOptions {
    pub fn new(executable: impl Into<PathBuf>) -> Self {
        ConformanceOptions {
            executable: executable.into(),
            args: Vec::new(),
            response_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub mandatory: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub worker: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| c.mandatory && !c.passed).map(|c| c.name).collect()
    }
}

type Check = Result<String, String>;

struct Conn {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<(Instant, Option<String>)>,
    next_cid: u64,
    timeout: Duration,
    heartbeats: Vec<(Instant, u64)>,
}

impl Conn {
    fn spawn(opts: &ConformanceOptions, id: &str) -> Result<Conn, String> {
        let mut cmd = Command::new(&opts.executable);
        cmd.args(&opts.args)
            .env("MOSAIC_WORKER_ID", id)
            .env("MOSAIC_HEARTBEAT_SECS", HEARTBEAT_SECS.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .process_group(0);
        let mut child = cmd.spawn().map_err(|e| format!("cannot start {}: {e}", opts.executable.display()))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = crossbeam_channel::unbounded();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) | Err(_) => {
                        let _ = tx.send((Instant::now(), None));
                        return;
                    }
                    Ok(_) => {
                        if tx.send((Instant::now(), Some(line))).is_err() {
                            return;
                        }
                    }
                }
            }
        });
        let stdin = child.stdin.take();
        Ok(Conn { child, stdin, lines: rx, next_cid: 1, timeout: opts.response_timeout, heartbeats: Vec::new() })
    }

    fn write_raw(&mut self, line: &str) -> Result<(), String> {
        let w = self.stdin.as_mut().ok_or("stdin closed")?;
        w.write_all(line.as_bytes()).and_then(|_| w.flush()).map_err(|e| format!("write failed: {e}"))
    }

    /// Next line, raw. Heartbeats are recorded and skipped.
    fn next_line(&mut self, deadline: Instant) -> Result<(String, ProtocolMessage), String> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.lines.recv_timeout(left) {
                Ok((_, None)) => return Err("worker closed stdout".into()),
                Ok((at, Some(line))) => {
                    let msg = decode_message(&line).map_err(|e| format!("undecodable line: {e}"))?;
                    if msg.is(MessageName::Heartbeat) {
                        let seq = msg.get("seq").and_then(|v| v.as_u64()).unwrap_or(0);
                        self.heartbeats.push((at, seq));
                        continue;
                    }
                    return Ok((line, msg));
                }
                Err(RecvTimeoutError::Timeout) => return Err("timed out waiting for a response".into()),
                Err(RecvTimeoutError::Disconnected) => return Err("worker closed stdout".into()),
            }
        }
    }

    /// Sends `msg` with a fresh correlation id and returns the raw reply
    /// line plus its decoded form. Checks the id and canonical encoding.
    fn request(&mut self, mut msg: ProtocolMessage) -> Result<(String, ProtocolMessage), String> {
        msg.correlation_id = self.next_cid;
        self.next_cid += 1;
        let line = encode_message(&msg).map_err(|e| e.to_string())?;
        self.write_raw(&line)?;
        let deadline = Instant::now() + self.timeout;
        let (raw, reply) = self.next_line(deadline)?;
        if reply.correlation_id != msg.correlation_id {
            return Err(format!(
                "reply carries correlation_id {}, expected {}",
                reply.correlation_id, msg.correlation_id
            ));
        }
        let canonical = encode_message(&reply).map_err(|e| e.to_string())?;
        if canonical != raw.trim_end_matches(['\r', '\n']).to_string() + "\n" {
            return Err(format!("reply is not canonically encoded: {}", raw.trim_end()));
        }
        Ok((raw, reply))
    }

    fn kill(&mut self) {
        let pgid = self.child.id() as i32;
        process::signal_group(pgid, libc::SIGKILL);
        let _ = self.child.wait();
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        if matches!(self.child.try_wait(), Ok(None)) {
            self.kill();
        }
    }
}

fn expect(reply: &ProtocolMessage, name: MessageName) -> Result<(), String> {
    if reply.is(name) {
        return Ok(());
    }
    let detail = reply.get("message").and_then(|v| v.as_str()).unwrap_or("");
    Err(format!("expected `{name}`, got `{}` {detail}", reply.name))
}

fn modality_for(hs: &Handshake) -> Modality {
    let m = &hs.manifest.observation_modalities;
    if m.contains(&ModalityKind::Tensor) {
        Modality::Tensor
    } else if m.contains(&ModalityKind::Text) && m.contains(&ModalityKind::Image) {
        Modality::TextImage
    } else if m.contains(&ModalityKind::Text) {
        Modality::Text
    } else {
        Modality::Image
    }
}

fn policy_reset(seed: u64, checkpoint: bool) -> ProtocolMessage {
    ProtocolMessage::reset(
        0,
        ResetCommand {
            seed,
            task_id: Some(CORRIDOR.into()),
            agent_id: Some("agent_0".into()),
            env_metadata: Some(env_metadata(Task::Corridor)),
            checkpoint,
        },
    )
}

fn select(obs: ObservationPayload) -> ProtocolMessage {
    ProtocolMessage::select_action(
        0,
        SelectActionCommand { agent_id: "agent_0".into(), observation: obs, info: Map::new(), checkpoint: false },
    )
}

/// The action a reply stands for, after φ for text replies.
fn action_of(reply: &ProtocolMessage, env: &EnvState) -> Result<u32, String> {
    expect(reply, MessageName::StepResult)?;
    let r = ResponseStep::from_payload(&reply.payload).map_err(|e| e.to_string())?;
    let space = env.task.action_space();
    match (r.action, r.text) {
        (Some(a), _) if space.contains(a) => Ok(a),
        (Some(a), _) => Err(format!("action {a} outside 0..{}", space.n)),
        (None, Some(t)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(parse_action(&t, &space, &ParsePolicy::default(), &mut rng).map_or(space.null_action, |(a, _)| a))
        }
        (None, None) => Err("step_result carries neither action nor text".into()),
    }
}

/// Plays the golden corridor episode from `env` and returns the raw reply
/// lines in order.
fn transcript(conn: &mut Conn, modality: Modality, mut env: EnvState, steps: usize) -> Result<Vec<String>, String> {
    let opts = ObsOptions::default();
    let mut out = Vec::new();
    for _ in 0..steps {
        if env.is_done() {
            env = mosaic_envs::reset_episode(&env);
        }
        let obs = serialize_obs(&env, "agent_0", modality, &opts).map_err(|e| e.to_string())?;
        let (raw, reply) = conn.request(select(obs))?;
        let a = action_of(&reply, &env)?;
        env = step_parallel(&env, &[("agent_0".to_string(), a)].into()).map_err(|e| e.to_string())?.0;
        out.push(raw);
    }
    Ok(out)
}

fn check_handshake(conn: &mut Conn) -> Result<(Handshake, String), String> {
    let deadline = Instant::now() + conn.timeout;
    let (_, msg) = conn.next_line(deadline)?;
    expect(&msg, MessageName::Handshake)?;
    let hs = Handshake::from_payload(&msg.payload).map_err(|e| e.to_string())?;
    if hs.manifest.schema_version.major != mosaic_protocol::protocol_version().major {
        return Err(format!("schema major {} is not supported", hs.manifest.schema_version.major));
    }
    for needed in [MessageName::Reset, MessageName::Stop, MessageName::SelectAction] {
        if !hs.manifest.supported_commands.contains(&needed) {
            return Err(format!("does not advertise `{needed}`"));
        }
    }
    Ok((hs.clone(), format!("{} worker, {} commands", hs.manifest.worker_kind, hs.manifest.supported_commands.len())))
}

fn check_heartbeats(conn: &mut Conn) -> Check {
    let window = Duration::from_secs_f64(HEARTBEAT_SECS * 5.0);
    let start = Instant::now();
    // Heartbeats are absorbed by the reader; anything else is unsolicited.
    match conn.next_line(start + window) {
        Ok((_, msg)) => return Err(format!("unsolicited `{}` while idle", msg.name)),
        Err(e) if e.starts_with("timed out") => {}
        Err(e) => return Err(e),
    }
    let beats: Vec<(Instant, u64)> = conn.heartbeats.clone();
    if beats.len() < 3 {
        return Err(format!(
            "{} heartbeats in {:.2}s at a {HEARTBEAT_SECS}s interval",
            beats.len(),
            window.as_secs_f64()
        ));
    }
    let limit = Duration::from_secs_f64(HEARTBEAT_SECS * 2.0);
    for pair in beats.windows(2) {
        if pair[1].1 <= pair[0].1 {
            return Err("heartbeat seq is not increasing".into());
        }
        if pair[1].0 - pair[0].0 > limit {
            return Err(format!("gap of {:?} between heartbeats", pair[1].0 - pair[0].0));
        }
    }
    Ok(format!("{} heartbeats, gaps within {:?}", beats.len(), limit))
}

fn check_reset(conn: &mut Conn) -> Check {
    let (_, reply) = conn.request(policy_reset(GOLDEN_SEED, false))?;
    expect(&reply, MessageName::Ready)?;
    let r = ResponseReady::from_payload(&reply.payload).map_err(|e| e.to_string())?;
    if r.seed != GOLDEN_SEED {
        return Err(format!("ready echoes seed {}", r.seed));
    }
    if r.observation_shape != Task::Corridor.observation_shape() {
        return Err(format!("observation_shape {:?}", r.observation_shape));
    }
    Ok("ready for seed 42".into())
}

fn check_restore(conn: &mut Conn, modality: Modality) -> Check {
    let (_, reply) = conn.request(policy_reset(GOLDEN_SEED, true))?;
    expect(&reply, MessageName::Ready)?;
    let state = ResponseReady::from_payload(&reply.payload)
        .map_err(|e| e.to_string())?
        .state
        .ok_or("reset with checkpoint returned no state")?;
    let env = make_env(CORRIDOR, GOLDEN_SEED).map_err(|e| e.to_string())?;
    let first = transcript(conn, modality, env.clone(), 4)?;
    let (_, reply) = conn.request(ProtocolMessage::restore(0, RestoreCommand::new(state.clone())))?;
    expect(&reply, MessageName::Ready)?;
    if !ResponseReady::from_payload(&reply.payload).map_err(|e| e.to_string())?.restored {
        return Err("ready after restore is not marked restored".into());
    }
    let second = transcript(conn, modality, env, 4)?;
    if strip_cids(&first) != strip_cids(&second) {
        return Err("replies after restore differ from the original".into());
    }
    let mut bad = RestoreCommand::new(state);
    bad.digest = "0".repeat(64);
    let (_, reply) = conn.request(ProtocolMessage::restore(0, bad))?;
    expect(&reply, MessageName::Error).map_err(|_| "a restore with a wrong digest was accepted".to_string())?;
    Ok("restored state replays identically; bad digest refused".into())
}

/// Reply lines with correlation ids removed, for comparing two passes.
fn strip_cids(lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .map(|l| {
            let mut m = decode_message(l).expect("checked earlier");
            m.correlation_id = 0;
            encode_message(&m).expect("re-encodes")
        })
        .collect()
}

fn check_episode_end(conn: &mut Conn) -> Check {
    let (_, reply) = conn.request(ProtocolMessage::reset(
        0,
        ResetCommand { task_id: Some(CORRIDOR.into()), ..ResetCommand::new(GOLDEN_SEED) },
    ))?;
    expect(&reply, MessageName::Ready)?;
    let mut total = Reward::ZERO;
    let mut length = 0u64;
    for _ in 0..=Task::Corridor.horizon() {
        let (_, reply) = conn.request(ProtocolMessage::step(0, StepCommand::default()))?;
        expect(&reply, MessageName::StepResult)?;
        let r = ResponseStep::from_payload(&reply.payload).map_err(|e| e.to_string())?;
        total += r.reward.unwrap_or(Reward::ZERO);
        length += 1;
        if r.terminated == Some(true) || r.truncated == Some(true) {
            let (_, end) = conn.request(ProtocolMessage::step(0, StepCommand::default()))?;
            expect(&end, MessageName::EpisodeEnd)?;
            let e = ResponseEpisodeEnd::from_payload(&end.payload).map_err(|e| e.to_string())?;
            if e.total_reward != total || e.episode_length != length {
                return Err(format!(
                    "episode_end reports ({}, {}), transcript gives ({total}, {length})",
                    e.total_reward, e.episode_length
                ));
            }
            return Ok(format!("episode_end after {length} steps, total {total}"));
        }
    }
    Err("episode never ended within the horizon".into())
}

fn check_malformed(conn: &mut Conn) -> Check {
    conn.write_raw("{this is not json\n")?;
    let (_, reply) = conn.next_line(Instant::now() + conn.timeout)?;
    expect(&reply, MessageName::Error)?;
    if reply.correlation_id != 0 {
        return Err(format!("error for an unparseable line carries correlation_id {}", reply.correlation_id));
    }
    let (_, reply) = conn.request(policy_reset(GOLDEN_SEED, false))?;
    expect(&reply, MessageName::Ready).map_err(|e| format!("worker unusable after malformed line: {e}"))?;
    Ok("error reply, worker still serving".into())
}

fn check_train(conn: &mut Conn) -> Check {
    let (_, reply) = conn.request(ProtocolMessage::bare(MessageName::Train, 0))?;
    expect(&reply, MessageName::Error)?;
    Ok("train refused".into())
}

fn check_stop(conn: &mut Conn) -> Check {
    let mut msg = ProtocolMessage::stop(0);
    msg.correlation_id = conn.next_cid;
    conn.write_raw(&encode_message(&msg).map_err(|e| e.to_string())?)?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if let Some(status) = conn.child.try_wait().map_err(|e| e.to_string())? {
            return if status.success() { Ok("exited 0".into()) } else { Err(format!("exited with {status}")) };
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    Err("still running 5s after stop".into())
}

fn record(checks: &mut Vec<CheckResult>, name: &'static str, mandatory: bool, outcome: Check) {
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    checks.push(CheckResult { name, mandatory, passed, detail });
}

/// Runs the full suite. Each check group gets a fresh process so one
/// failure does not mask the rest.
pub fn run_conformance(opts: &ConformanceOptions) -> ConformanceReport {
    let mut checks = Vec::new();
    let worker = std::iter::once(opts.executable.display().to_string())
        .chain(opts.args.iter().cloned())
        .collect::<Vec<_>>()
        .join(" ");
    let mut conn = match Conn::spawn(opts, "conformance-0") {
        Ok(c) => c,
        Err(e) => {
            record(&mut checks, "handshake", true, Err(e));
            return ConformanceReport { worker, passed: false, checks };
        }
    };
    let hs = match check_handshake(&mut conn) {
        Ok((hs, detail)) => {
            record(&mut checks, "handshake", true, Ok(detail));
            hs
        }
        Err(e) => {
            record(&mut checks, "handshake", true, Err(e));
            return ConformanceReport { worker, passed: false, checks };
        }
    };
    let modality = modality_for(&hs);
    let commands = hs.manifest.supported_commands.clone();
    record(&mut checks, "heartbeat_timing", true, check_heartbeats(&mut conn));
    record(&mut checks, "reset_seed_42", true, check_reset(&mut conn));

    let env = make_env(CORRIDOR, GOLDEN_SEED).expect("built-in task");
    let first = transcript(&mut conn, modality, env.clone(), TRANSCRIPT_STEPS);
    record(
        &mut checks,
        "golden_transcript",
        true,
        first.as_ref().map(|t| format!("{} canonical replies", t.len())).map_err(Clone::clone),
    );
    let replay = conn
        .request(policy_reset(GOLDEN_SEED, false))
        .and_then(|_| transcript(&mut conn, modality, env, TRANSCRIPT_STEPS));
    record(
        &mut checks,
        "deterministic_replay",
        true,
        match (&first, replay) {
            (Ok(a), Ok(b)) if strip_cids(a) == strip_cids(&b) => Ok("second pass identical".into()),
            (Ok(_), Ok(_)) => Err("second pass with seed 42 differs".into()),
            (_, Err(e)) => Err(e),
            (Err(_), _) => Err("no first pass to compare".into()),
        },
    );
    record(&mut checks, "malformed_line", true, check_malformed(&mut conn));
    record(&mut checks, "train_rejected", true, check_train(&mut conn));
    if commands.contains(&MessageName::Restore) {
        record(&mut checks, "restore_round_trip", true, check_restore(&mut conn, modality));
    } else {
        record(
            &mut checks,
            "restore_round_trip",
            false,
            Err("restore not advertised; supervisor falls back to replay".into()),
        );
    }
    if commands.contains(&MessageName::Step) {
        record(&mut checks, "episode_end", true, check_episode_end(&mut conn));
    }
    record(&mut checks, "clean_stop", true, check_stop(&mut conn));
    let leftovers = process::group_members(conn.child.id() as i32);
    if !leftovers.is_empty() {
        process::signal_group(conn.child.id() as i32, libc::SIGKILL);
    }
    record(
        &mut checks,
        "no_survivors",
        false,
        if leftovers.is_empty() {
            Ok("process group empty".into())
        } else {
            Err(format!("{} processes left in the group", leftovers.len()))
        },
    );
    let passed = checks.iter().all(|c| c.passed || !c.mandatory);
    ConformanceReport { worker, passed, checks }
}
