//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Runs without the libtest harness so the lines
//! always reach the output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mosaic_core::clock::{Clock, ScaledClock};
use mosaic_core::conformance::{run_conformance, ConformanceOptions};
use mosaic_core::evaluation::{open_manual_session, run_script, RunOptions, RunStatus, SessionOptions};
use mosaic_core::operator::phi::{parse_action, Fallback, Grammar, ParseOutcome, ParsePolicy};
use mosaic_core::operator::{BindOptions, RunConfig};
use mosaic_core::supervisor::{process, spawn_worker, LivenessKind, WorkerSpec, WorkerState};
use mosaic_core::telemetry::{read_records, RunStore, Stream, TelemetryRecord, STEPS_FILE};
use mosaic_envs::TEAMTAG;
use mosaic_protocol::{
    canonical, decode_message, encode_message, MessageName, ObservationPayload, ProtocolMessage, ResetCommand,
    ResponseEpisodeEnd, ResponseReady, ResponseStep, RestoreCommand, Reward, SelectActionCommand, StepCommand,
    WorkerKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

const MOSAIC: &str = env!("CARGO_BIN_EXE_mosaic");
const WORKER: &str = env!("CARGO_BIN_EXE_mosaic-worker");

// Pinned tolerances.
const DETERMINISM_EPISODES: u64 = 100;
const DETERMINISM_MAX_DIFF_BYTES: usize = 0;
const DETERMINISM_BUDGET: Duration = Duration::from_secs(60);
const LOCKSTEP_BARRIERS: u64 = 200;
const LOCKSTEP_MAX_VIOLATIONS: usize = 0;
const CLOCK_SCALE: f64 = 120.0;
const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(60);
const LIVENESS_WINDOW: Duration = Duration::from_secs(300);
/// Real-time gap between liveness polls. One tick is this times the scale.
const POLL_REAL: Duration = Duration::from_millis(10);
/// Longest poll gap accepted before the window check is judged unreliable.
const POLL_GAP_LIMIT: Duration = Duration::from_secs(12);
const GREEDY_EPISODES: u64 = 200;
const GREEDY_MIN_WIN_RATE: f64 = 0.9;
const PHI_CASES: usize = 50;
const FUZZ_LINES: usize = 10_000;
const ROUND_TRIPS: usize = 1_000;
const FUZZ_MAX_FAILURES: usize = 0;
const TRUNCATION_MAX_ESCAPES: usize = 0;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bind() -> BindOptions {
    BindOptions { worker_bin: WORKER.into(), ..BindOptions::default() }
}

fn load(path: &Path) -> RunConfig {
    RunConfig::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cli_run(root: &Path, config: &Path, seed: u64, episodes: u64) -> Result<PathBuf, String> {
    let out = Command::new(MOSAIC)
        .args(["run", "--config", config.to_str().unwrap(), "--seed", &seed.to_string()])
        .args(["--episodes", &episodes.to_string(), "--runs-root", root.to_str().unwrap()])
        .env("MOSAIC_WORKER_BIN", WORKER)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!("run exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let doc: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    Ok(PathBuf::from(doc["run_dir"].as_str().ok_or("no run_dir")?))
}

fn diff_bytes(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len())
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let config = workspace().join("configs/teamtag_4random.json");
    let mut logs = Vec::new();
    let mut slowest = Duration::ZERO;
    for i in 0..2 {
        let root = tmp.path().join(format!("r{i}"));
        let started = Instant::now();
        let dir = cli_run(&root, &config, 0, DETERMINISM_EPISODES)?;
        slowest = slowest.max(started.elapsed());
        logs.push((
            std::fs::read(dir.join("steps.jsonl")).unwrap(),
            std::fs::read(dir.join("episodes.jsonl")).unwrap(),
        ));
    }
    let diff = diff_bytes(&logs[0].0, &logs[1].0) + diff_bytes(&logs[0].1, &logs[1].1);
    ensure(diff == DETERMINISM_MAX_DIFF_BYTES, || format!("{diff} bytes differ"))?;
    ensure(slowest < DETERMINISM_BUDGET, || format!("slowest run took {slowest:?}"))?;
    Ok(format!("{} step bytes identical, slowest run {:.1}s", logs[0].0.len(), slowest.as_secs_f64()))
}

fn lockstep() -> Check {
    let configs = vec![
        load(&workspace().join("configs/heterogeneous_team.json")),
        RunConfig::from_value(&serde_json::json!({
            "operator_id": "text_and_vision",
            "env_name": "mosaic",
            "task": TEAMTAG,
            "player_workers": {
                "blue_0": {"worker_type": "llm"},
                "blue_1": {"worker_type": "vlm"},
                "green_0": {"worker_type": "rl"},
                "green_1": {"worker_type": "baseline", "settings": {"kind": "noop"}},
            },
        }))
        .unwrap(),
        load(&workspace().join("configs/teamtag_4random.json")),
    ];
    let opts = SessionOptions { bind: bind(), ..SessionOptions::default() };
    let mut s = open_manual_session("acceptance-lockstep", &configs, TEAMTAG, 11, &opts).map_err(|e| e.to_string())?;
    let mut counts = vec![0u64; configs.len()];
    let mut violations = 0;
    for b in 1..=LOCKSTEP_BARRIERS {
        let out = s.step_session().map_err(|e| format!("barrier {b}: {e}"))?;
        let mut this = vec![0u64; configs.len()];
        for r in &out.records {
            if let TelemetryRecord::Step(r) = r {
                this[r.replica.unwrap() as usize] += 1;
            }
        }
        for (c, n) in counts.iter_mut().zip(&this) {
            *c += n / 4;
        }
        let positions: Vec<(u64, u64)> = out.replicas.iter().map(|v| (v.episode_index, v.step_index)).collect();
        if counts.iter().any(|c| *c != b) || positions.windows(2).any(|w| w[0] != w[1]) {
            violations += 1;
        }
    }
    s.stop(Duration::from_secs(2)).map_err(|e| e.to_string())?;
    ensure(violations == LOCKSTEP_MAX_VIOLATIONS, || format!("{violations} barriers out of step"))?;
    Ok(format!("{} replicas, {LOCKSTEP_BARRIERS} barriers, {violations} violations", configs.len()))
}

fn corridor_steps(seed: u64) -> Vec<ProtocolMessage> {
    vec![ProtocolMessage::reset(0, ResetCommand::new(seed))]
        .into_iter()
        .chain((0..30).map(|_| ProtocolMessage::step(0, StepCommand { action: None, checkpoint: false })))
        .collect()
}

fn payload(m: &ProtocolMessage) -> String {
    format!(
        "{}:{}",
        m.name.as_str(),
        canonical::to_string(&Value::Object(m.payload.clone().into_iter().collect::<Map<String, Value>>()))
    )
}

fn heartbeat_window() -> Check {
    const SILENCE_AFTER: usize = 6;
    let t = Duration::from_secs(10);
    let clock = Arc::new(ScaledClock::new(CLOCK_SCALE));
    let dyn_clock: Arc<dyn Clock> = clock.clone();
    let ckpt = tempfile::tempdir().unwrap();
    let mut spec = WorkerSpec::new(WORKER, WorkerKind::Baseline);
    spec.args = vec!["--policy".into(), "random".into()];
    spec.heartbeat_interval = HEARTBEAT_INTERVAL;
    spec.liveness_window = LIVENESS_WINDOW;
    spec.startup_timeout = Duration::from_secs(1200);
    spec.checkpoint_every = 2;
    spec.checkpoint_dir = Some(ckpt.path().to_path_buf());
    let script = corridor_steps(5);

    // Uninterrupted reference stream.
    let mut twin = spawn_worker(spec.clone(), "twin", dyn_clock.clone()).map_err(|e| e.to_string())?;
    let mut reference = Vec::new();
    for m in &script {
        let r = twin.request(m.clone(), t).map_err(|e| e.to_string())?;
        let end = r.is(MessageName::EpisodeEnd);
        reference.push(payload(&r));
        if end {
            break;
        }
    }
    drop(twin);

    let mut h = spawn_worker(spec, "silenced", dyn_clock).map_err(|e| e.to_string())?;
    for m in &script[..=SILENCE_AFTER] {
        h.request(m.clone(), t).map_err(|e| e.to_string())?;
    }
    h.monitor(clock.now());
    process::signal_group(h.process_group_id(), libc::SIGSTOP);

    let mut warned_at = None;
    let mut dead = None;
    let mut prev = clock.now();
    let mut worst_gap = Duration::ZERO;
    let give_up = Instant::now() + Duration::from_secs(20);
    while dead.is_none() && Instant::now() < give_up {
        std::thread::sleep(POLL_REAL);
        let now = clock.now();
        worst_gap = worst_gap.max(now - prev);
        for ev in h.monitor(now) {
            match ev.kind {
                LivenessKind::MissedHeartbeat { missed: 1 } => warned_at = Some((prev, ev.at)),
                LivenessKind::Dead { .. } => dead = Some((prev, ev.at)),
                _ => {}
            }
        }
        prev = now;
    }
    let last = h.last_heartbeat();
    let (warn_prev, warn_at) = warned_at.ok_or("no missed-heartbeat warning")?;
    let (dead_prev, dead_at) = dead.ok_or("no dead verdict")?;
    ensure(worst_gap <= POLL_GAP_LIMIT, || format!("poll gap {worst_gap:?} too coarse"))?;
    // Each verdict must land on the first poll past its deadline.
    let warn_deadline = last + HEARTBEAT_INTERVAL;
    ensure(warn_at >= warn_deadline && warn_prev < warn_deadline, || {
        format!("warning at {:?} after last heartbeat", warn_at - last)
    })?;
    let dead_deadline = last + LIVENESS_WINDOW;
    ensure(dead_at >= dead_deadline && dead_prev < dead_deadline, || {
        format!("dead verdict at {:?} after last heartbeat", dead_at - last)
    })?;
    ensure(h.state() == WorkerState::Dead, || format!("state {:?}", h.state()))?;

    h.recover().map_err(|e| format!("recover: {e}"))?;
    ensure(!h.checkpoints().is_empty(), || "no checkpoint to restore from".into())?;
    let mut resumed = Vec::new();
    for m in &script[SILENCE_AFTER + 1..] {
        let r = h.request(m.clone(), t).map_err(|e| e.to_string())?;
        let end = r.is(MessageName::EpisodeEnd);
        resumed.push(payload(&r));
        if end {
            break;
        }
    }
    let suffix = &reference[SILENCE_AFTER + 1..];
    ensure(resumed == suffix, || format!("resumed stream differs: {resumed:?} vs {suffix:?}"))?;
    Ok(format!(
        "warning at +{:.1}s, dead at +{:.1}s (window {}s, poll gap <= {:.1}s), {} resumed messages match",
        (warn_at - last).as_secs_f64(),
        (dead_at - last).as_secs_f64(),
        LIVENESS_WINDOW.as_secs(),
        worst_gap.as_secs_f64(),
        resumed.len()
    ))
}

fn member_label(config: &RunConfig, slot: &str) -> String {
    let a = &config.player_workers[slot];
    match a.worker_type {
        WorkerKind::Baseline => a.settings.get("kind").and_then(Value::as_str).unwrap_or("?").to_string(),
        k => serde_json::to_value(k).unwrap().as_str().unwrap().to_string(),
    }
}

fn matrix_exactness() -> Check {
    // Team A (green) and team B (blue) per row, as sorted paradigm multisets.
    let table: [(&str, [&str; 2], [&str; 2]); 15] = [
        ("A1", ["rl", "rl"], ["rl", "rl"]),
        ("A2", ["llm", "llm"], ["llm", "llm"]),
        ("A3", ["vlm", "vlm"], ["vlm", "vlm"]),
        ("A4", ["rl", "rl"], ["llm", "llm"]),
        ("A5", ["rl", "rl"], ["vlm", "vlm"]),
        ("A6", ["llm", "llm"], ["vlm", "vlm"]),
        ("A7", ["rl", "rl"], ["random", "random"]),
        ("C1", ["llm", "rl"], ["random", "rl"]),
        ("C2", ["llm", "rl"], ["noop", "rl"]),
        ("C3", ["rl", "vlm"], ["random", "rl"]),
        ("C4", ["rl", "vlm"], ["noop", "rl"]),
        ("C5", ["rl", "rl"], ["rl", "rl"]),
        ("C6", ["llm", "rl"], ["rl", "rl"]),
        ("C7", ["rl", "vlm"], ["rl", "rl"]),
        ("C8", ["llm", "rl"], ["rl", "vlm"]),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(MOSAIC)
        .args(["matrix", "--family", "both", "--out", tmp.path().to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let mut files: Vec<String> =
        std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    let want: Vec<String> = table.iter().map(|(id, _, _)| format!("{id}.config")).collect();
    ensure(files == want, || format!("files {files:?}"))?;
    let mut frozen_rl = 0;
    for (id, team_a, team_b) in table {
        let c = load(&tmp.path().join(format!("{id}.config")));
        let team = |slots: [&str; 2]| {
            let mut v: Vec<String> = slots.iter().map(|s| member_label(&c, s)).collect();
            v.sort();
            v
        };
        let got = (team(["green_0", "green_1"]), team(["blue_0", "blue_1"]));
        ensure(got.0 == team_a && got.1 == team_b, || format!("{id}: got {got:?}"))?;
        if id.starts_with('C') {
            for (slot, a) in &c.player_workers {
                if a.worker_type == WorkerKind::Rl {
                    ensure(a.frozen, || format!("{id}.{slot} is not frozen"))?;
                    frozen_rl += 1;
                }
            }
        }
    }
    Ok(format!("15 rows exact, {frozen_rl} cooperative rl slots frozen"))
}

fn greedy_vs_random() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(MOSAIC)
        .args(["matrix", "--family", "adversarial", "--out", tmp.path().to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || "matrix failed".into())?;
    let a7 = load(&tmp.path().join("A7.config"));
    let mut opts = RunOptions::new(tmp.path().join("runs"), 0, GREEDY_EPISODES);
    opts.bind = bind();
    let r = run_script(&a7, &opts, &mut |_| {}).map_err(|e| e.to_string())?;
    ensure(r.status == RunStatus::Completed, || format!("status {:?}", r.status))?;
    let rate = r.win_rate("green");
    ensure(rate > GREEDY_MIN_WIN_RATE, || format!("win rate {rate:.3}, wins {:?}", r.wins))?;
    Ok(format!("greedy win rate {rate:.3} over {} episodes", r.episodes))
}

fn phi_corpus() -> Check {
    let doc: Value = serde_json::from_str(include_str!("../../../fixtures/phi/corpus.json")).unwrap();
    let cases = doc["cases"].as_array().unwrap();
    ensure(cases.len() == PHI_CASES, || format!("{} cases", cases.len()))?;
    let mut grid = BTreeMap::new();
    for c in cases {
        let id = c["id"].as_str().unwrap();
        let grammar: Grammar = serde_json::from_value(c["grammar"].clone()).unwrap();
        let fallback: Fallback = serde_json::from_value(c["fallback"].clone()).unwrap();
        *grid.entry((c["grammar"].to_string(), c["fallback"].to_string(), c["kind"].to_string())).or_insert(0) += 1;
        let labels: Vec<String> = serde_json::from_value(c["labels"].clone()).unwrap();
        let space = mosaic_protocol::ActionSpace::labeled(labels, c["null_action"].as_u64().unwrap() as u32).unwrap();
        let policy = ParsePolicy { grammar, fallback };
        let text = c["text"].as_str().unwrap();
        let seed = c["rng_seed"].as_u64().unwrap();
        let run = || parse_action(text, &space, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let (first, second) = (run(), run());
        ensure(first == second, || format!("{id} differs between replays"))?;
        let want: ParseOutcome = serde_json::from_value(c["expect"]["outcome"].clone()).unwrap();
        let want_action = c["expect"]["action"].as_u64().map(|a| a as u32);
        match first {
            Err(_) => ensure(want == ParseOutcome::Error, || format!("{id}: unexpected error"))?,
            Ok((action, outcome)) => {
                ensure(outcome == want, || format!("{id}: {outcome:?} != {want:?}"))?;
                ensure(want_action.is_none_or(|a| a == action), || format!("{id}: action {action}"))?;
                ensure(space.contains(action), || format!("{id}: action {action} out of range"))?;
            }
        }
    }
    let grammars: std::collections::BTreeSet<_> = grid.keys().map(|k| k.0.clone()).collect();
    let fallbacks: std::collections::BTreeSet<_> = grid.keys().map(|k| k.1.clone()).collect();
    ensure(grammars.len() == 3 && fallbacks.len() == 3, || "corpus does not span the grid".into())?;
    Ok(format!("{PHI_CASES} cases match, replayed twice"))
}

fn random_message(rng: &mut ChaCha8Rng) -> ProtocolMessage {
    let c = rng.random_range(1..1_000_000u64);
    let text = |rng: &mut ChaCha8Rng, n: usize| -> String {
        let len = rng.random_range(0..n);
        (0..len).map(|_| char::from_u32(rng.random_range(0x20..0x2FF)).unwrap_or('?')).collect()
    };
    let mut msg = match rng.random_range(0..10) {
        0 => {
            let mut cmd = ResetCommand::new(rng.random());
            cmd.checkpoint = rng.random();
            ProtocolMessage::reset(c, cmd)
        }
        1 => ProtocolMessage::step(
            c,
            StepCommand { action: rng.random_bool(0.5).then(|| rng.random_range(0..10)), checkpoint: rng.random() },
        ),
        2 => ProtocolMessage::stop(c),
        3 => ProtocolMessage::select_action(
            c,
            SelectActionCommand {
                agent_id: format!("agent_{}", rng.random_range(0..9)),
                observation: ObservationPayload::text(text(rng, 40)),
                info: Map::new(),
                checkpoint: false,
            },
        ),
        4 => ProtocolMessage::restore(
            c,
            RestoreCommand::new((0..rng.random_range(0..64)).map(|_| rng.random()).collect()),
        ),
        5 => ProtocolMessage::ready(
            c,
            ResponseReady {
                seed: rng.random(),
                observation_shape: (0..rng.random_range(0..4)).map(|_| rng.random_range(0..64)).collect(),
                env_metadata: Map::new(),
                restored: false,
                state: None,
            },
        ),
        6 => {
            let mut s = ResponseStep::action(rng.random_range(0..7));
            s.reward = Some(Reward::from_milli(rng.random_range(-5000..5000)));
            s.terminated = Some(rng.random());
            s.truncated = Some(false);
            ProtocolMessage::step_result(c, s)
        }
        7 => ProtocolMessage::episode_end(
            c,
            ResponseEpisodeEnd {
                total_reward: Reward::from_milli(rng.random_range(-100_000..100_000)),
                episode_length: rng.random_range(1..1000),
            },
        ),
        8 => ProtocolMessage::error(c, text(rng, 60)),
        _ => ProtocolMessage::heartbeat(rng.random()),
    };
    if rng.random_bool(0.3) {
        msg.payload.insert(format!("x_{}", rng.random_range(0..1000)), Value::from(rng.random::<i32>()));
    }
    msg
}

fn protocol_fuzz() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    let mut valid = Vec::with_capacity(ROUND_TRIPS);
    for _ in 0..ROUND_TRIPS {
        let msg = random_message(&mut rng);
        let line = encode_message(&msg).map_err(|e| e.to_string())?;
        match decode_message(&line) {
            Ok(back) if back == msg && encode_message(&back).ok().as_deref() == Some(line.as_str()) => {}
            _ => failures += 1,
        }
        valid.push(line);
    }
    let mut rejected = 0;
    for i in 0..FUZZ_LINES {
        let line = if i % 2 == 0 {
            let len = rng.random_range(0..160);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let mut b = valid[rng.random_range(0..valid.len())].clone().into_bytes();
            for _ in 0..rng.random_range(1..5) {
                if b.is_empty() {
                    break;
                }
                let at = rng.random_range(0..b.len());
                match rng.random_range(0..3) {
                    0 => b[at] = rng.random(),
                    1 => {
                        b.remove(at);
                    }
                    _ => b.insert(at, rng.random()),
                }
            }
            String::from_utf8_lossy(&b).into_owned()
        };
        match std::panic::catch_unwind(|| decode_message(&line)) {
            Ok(Ok(_)) => {}
            Ok(Err(_)) => rejected += 1,
            Err(_) => failures += 1,
        }
    }
    ensure(failures == FUZZ_MAX_FAILURES, || format!("{failures} failures"))?;
    Ok(format!("{FUZZ_LINES} fuzzed lines ({rejected} rejected, 0 panics), {ROUND_TRIPS} round trips"))
}

fn telemetry_truncation() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let dir = cli_run(tmp.path(), &workspace().join("configs/teamtag_4random.json"), 9, 1)?;
    let run_id = dir.file_name().unwrap().to_str().unwrap().to_string();
    let log = dir.join(STEPS_FILE);
    let full = std::fs::read(&log).unwrap();
    let all = read_records(&dir, Stream::Steps).map_err(|e| e.to_string())?;
    let earlier = &all[..all.len() - 1];
    let last_start = full[..full.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
    let mut escapes = 0;
    for cut in last_start..full.len() {
        std::fs::write(&log, &full[..cut]).unwrap();
        match RunStore::open(&dir, &run_id) {
            Ok(store) => drop(store),
            Err(_) => {
                escapes += 1;
                continue;
            }
        }
        if std::fs::read(&log).unwrap() != full[..last_start] {
            escapes += 1;
        }
        if read_records(&dir, Stream::Steps).map_err(|e| e.to_string())? != earlier {
            escapes += 1;
        }
    }
    ensure(escapes == TRUNCATION_MAX_ESCAPES, || format!("{escapes} corruptions escaped"))?;
    Ok(format!("{} offsets healed, {} earlier records intact", full.len() - last_start, earlier.len()))
}

fn builtin_conformance() -> Check {
    let mut opts = ConformanceOptions::new(WORKER);
    opts.args = vec!["--policy".into(), "random".into()];
    let report = run_conformance(&opts);
    let failed = report.failed();
    ensure(report.passed, || format!("failed checks {failed:?}"))?;
    Ok(format!("{} checks passed", report.checks.iter().filter(|c| c.passed).count()))
}

fn main() {
    let checks: [Criterion; 9] = [
        ("shared_seed_determinism", determinism),
        ("lockstep_barriers", lockstep),
        ("heartbeat_fault_window", heartbeat_window),
        ("matrix_exactness", matrix_exactness),
        ("greedy_beats_random", greedy_vs_random),
        ("phi_grammar_corpus", phi_corpus),
        ("protocol_fuzz_round_trip", protocol_fuzz),
        ("telemetry_truncation", telemetry_truncation),
        ("builtin_worker_conformance", builtin_conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} failed");
        std::process::exit(1);
    }
    println!("acceptance: all passed");
}
