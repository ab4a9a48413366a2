use std::sync::Arc;
use std::time::Duration;

use mosaic_core::clock::{Clock, ManualClock, ScaledClock, SystemClock};
use mosaic_core::supervisor::{
    process, spawn_worker, spawn_workers, ExitPath, LivenessKind, SupervisorError, WorkerSpec, WorkerState,
};
use mosaic_protocol::{MessageName, ProtocolMessage, ResetCommand, StepCommand, WorkerKind};
use serde_json::Value;

const WORKER: &str = env!("CARGO_BIN_EXE_mosaic-worker");
const T: Duration = Duration::from_secs(10);

fn spec(args: &[&str]) -> WorkerSpec {
    let mut s = WorkerSpec::new(WORKER, WorkerKind::Baseline);
    s.args = args.iter().map(|a| a.to_string()).collect();
    s.startup_timeout = Duration::from_secs(10);
    s
}

fn system() -> Arc<dyn Clock> {
    Arc::new(SystemClock::new())
}

fn reset(seed: u64) -> ProtocolMessage {
    ProtocolMessage::reset(0, ResetCommand::new(seed))
}

fn step(action: Option<u32>) -> ProtocolMessage {
    ProtocolMessage::step(0, StepCommand { action, checkpoint: false })
}

#[test]
fn spawn_negotiates_and_reports_pid() {
    let mut h = spawn_worker(spec(&["--policy", "random"]), "w0", system()).unwrap();
    assert_eq!(h.state(), WorkerState::Ready);
    assert_eq!(h.handshake().pid, Some(h.pid()));
    assert_eq!(h.process_group_id(), h.pid() as i32);
    assert!(h.session().supports(MessageName::Restore));
    let r = h.request(reset(42), T).unwrap();
    assert!(r.is(MessageName::Ready));
    assert_eq!(r.get("seed").and_then(Value::as_u64), Some(42));
    assert!(r.get("state").is_none(), "checkpoint state is stripped");
    assert_eq!(h.checkpoints().len(), 1);
    let report = h.stop_worker(Duration::from_secs(2));
    assert_eq!(report.path, ExitPath::Protocol);
    assert_eq!(report.exit_code, Some(0));
}

#[test]
fn garbage_handshake_is_reaped() {
    let err = spawn_worker(spec(&["--garbage-handshake"]), "bad", system()).err().unwrap();
    assert!(matches!(err, SupervisorError::Handshake(_)), "{err}");
}

#[test]
fn missing_executable_fails_to_spawn() {
    let s = WorkerSpec::new("/nonexistent/worker", WorkerKind::Baseline);
    assert!(matches!(spawn_worker(s, "x", system()), Err(SupervisorError::Spawn(_))));
}

#[test]
fn kind_mismatch_rejected() {
    let mut s = spec(&["--policy", "random"]);
    s.worker_kind = WorkerKind::Llm;
    let err = spawn_worker(s, "x", system()).err().unwrap();
    assert!(matches!(err, SupervisorError::Negotiation(_)), "{err}");
}

#[test]
fn liveness_window_must_cover_two_intervals() {
    let mut s = spec(&[]);
    s.liveness_window = Duration::from_secs(100);
    assert!(matches!(spawn_worker(s, "x", system()), Err(SupervisorError::InvalidSpec(_))));
}

#[test]
fn concurrent_spawns_get_distinct_groups() {
    let specs = (0..8).map(|i| (spec(&["--policy", "noop"]), format!("w{i}"))).collect();
    let handles: Vec<_> = spawn_workers(specs, system()).into_iter().map(Result::unwrap).collect();
    let mut groups: Vec<i32> = handles.iter().map(|h| h.process_group_id()).collect();
    groups.sort();
    groups.dedup();
    assert_eq!(groups.len(), 8);
    for h in &handles {
        assert_eq!(process::group_members(h.process_group_id()), vec![h.pid() as i32]);
    }
}

#[test]
fn corridor_episode_ends_with_totals() {
    let mut h = spawn_worker(spec(&[]), "w", system()).unwrap();
    h.request(reset(0), T).unwrap();
    let mut rewards = Vec::new();
    for _ in 0..4 {
        let r = h.request(step(Some(1)), T).unwrap();
        rewards.push(r.get("reward").and_then(Value::as_f64).unwrap());
    }
    assert_eq!(rewards, vec![0.0, 0.0, 0.0, 1.0]);
    let end = h.request(step(None), T).unwrap();
    assert!(end.is(MessageName::EpisodeEnd));
    assert_eq!(end.get("total_reward").and_then(Value::as_f64), Some(1.0));
    assert_eq!(end.get("episode_length").and_then(Value::as_u64), Some(4));
}

#[test]
fn worker_errors_surface_and_handle_stays_ready() {
    let mut h = spawn_worker(spec(&[]), "w", system()).unwrap();
    let err = h.request(step(None), T).unwrap_err();
    assert!(matches!(err, SupervisorError::Worker { .. }), "{err}");
    assert_eq!(h.state(), WorkerState::Ready);
    let train = ProtocolMessage::bare(MessageName::Train, 0);
    assert!(matches!(h.request(train, T), Err(SupervisorError::Worker { .. })));
}

#[test]
fn frozen_handle_refuses_train_locally() {
    let mut s = spec(&[]);
    s.frozen = true;
    let mut h = spawn_worker(s, "w", system()).unwrap();
    let train = ProtocolMessage::bare(MessageName::Train, 0);
    assert!(matches!(h.request(train, T), Err(SupervisorError::Frozen(_))));
}

#[test]
fn dead_handle_refuses_requests() {
    let mut h = spawn_worker(spec(&[]), "w", system()).unwrap();
    process::signal_group(h.process_group_id(), libc::SIGKILL);
    assert!(h.request(reset(1), T).is_err());
    assert_eq!(h.state(), WorkerState::Dead);
    let err = h.request(reset(1), T).unwrap_err();
    assert!(matches!(err, SupervisorError::State { state: WorkerState::Dead, .. }), "{err}");
}

#[test]
fn stopped_worker_times_out_and_is_dead() {
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(120.0));
    let mut h = spawn_worker(spec(&[]), "w", clock).unwrap();
    process::signal_group(h.process_group_id(), libc::SIGSTOP);
    let started = std::time::Instant::now();
    let err = h.request(reset(1), Duration::from_secs(300)).unwrap_err();
    assert!(matches!(err, SupervisorError::Timeout { .. }), "{err}");
    assert!(started.elapsed() < Duration::from_secs(5));
    assert_eq!(h.state(), WorkerState::Dead);
    let report = h.stop_worker(Duration::from_millis(200));
    assert_ne!(report.path, ExitPath::Protocol);
    assert!(process::group_members(report_pgid(&h)).is_empty());
}

fn report_pgid(h: &mosaic_core::supervisor::WorkerHandle) -> i32 {
    h.process_group_id()
}

#[test]
fn monitor_warns_then_declares_dead() {
    let clock = Arc::new(ManualClock::new());
    let dyn_clock: Arc<dyn Clock> = clock.clone();
    // A long real heartbeat period keeps the worker quiet during the test.
    let mut h = spawn_worker(spec(&[]), "w", dyn_clock).unwrap();
    let base = h.last_heartbeat();
    assert!(h.monitor(base + Duration::from_secs(59)).is_empty());
    let ev = h.monitor(base + Duration::from_secs(61));
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].kind, LivenessKind::MissedHeartbeat { missed: 1 });
    assert!(h.monitor(base + Duration::from_secs(61)).is_empty());
    let ev = h.monitor(base + Duration::from_secs(185));
    assert_eq!(
        ev.iter().map(|e| e.kind.clone()).collect::<Vec<_>>(),
        vec![LivenessKind::MissedHeartbeat { missed: 2 }, LivenessKind::MissedHeartbeat { missed: 3 }]
    );
    let ev = h.monitor(base + Duration::from_secs(301));
    assert!(matches!(ev[0].kind, LivenessKind::Dead { .. }));
    assert_eq!(h.state(), WorkerState::Dead);
    assert!(h.monitor(base + Duration::from_secs(900)).is_empty(), "dead verdict is stable");
}

#[test]
fn regular_heartbeats_never_warn() {
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(120.0));
    let mut s = spec(&[]);
    s.heartbeat_interval = Duration::from_secs(59);
    s.liveness_window = Duration::from_secs(300);
    let mut h = spawn_worker(s, "w", clock.clone()).unwrap();
    // 1.5 s real is three minutes logical.
    let until = std::time::Instant::now() + Duration::from_millis(1500);
    let mut warnings = Vec::new();
    while std::time::Instant::now() < until {
        warnings.extend(h.monitor(clock.now()));
        std::thread::sleep(Duration::from_millis(10));
    }
    assert!(warnings.is_empty(), "{warnings:?}");
    assert!(h.last_heartbeat() > Duration::from_secs(100));
}

#[test]
fn recover_restores_checkpoint_and_replays() {
    let mut s = spec(&["--policy", "random"]);
    s.checkpoint_every = 3;
    let dir = tempfile::tempdir().unwrap();
    s.checkpoint_dir = Some(dir.path().to_path_buf());
    let mut h = spawn_worker(s, "w", system()).unwrap();
    h.request(reset(7), T).unwrap();
    let mut seen = Vec::new();
    for _ in 0..5 {
        seen.push(h.request(step(None), T).unwrap());
    }
    assert_eq!(h.checkpoints().len(), 2, "reset plus step 3");
    let old_pid = h.pid();
    process::signal_group(h.process_group_id(), libc::SIGKILL);
    assert!(h.request(step(None), T).is_err());
    h.recover().unwrap();
    assert_ne!(h.pid(), old_pid);
    assert_eq!(h.restarts_used(), 1);
    assert_eq!(h.state(), WorkerState::Ready);
    let next = h.request(step(None), T).unwrap();

    let mut twin = spawn_worker(spec(&["--policy", "random"]), "twin", system()).unwrap();
    twin.request(reset(7), T).unwrap();
    for _ in 0..5 {
        twin.request(step(None), T).unwrap();
    }
    let expected = twin.request(step(None), T).unwrap();
    assert_eq!(next.payload, expected.payload);
}

#[test]
fn recover_without_restore_replays_from_reset() {
    let mut h = spawn_worker(spec(&["--policy", "random", "--no-restore"]), "w", system()).unwrap();
    h.request(reset(3), T).unwrap();
    for _ in 0..4 {
        h.request(step(None), T).unwrap();
    }
    assert!(h.checkpoints().is_empty());
    process::signal_group(h.process_group_id(), libc::SIGKILL);
    let _ = h.request(step(None), T);
    h.recover().unwrap();
    let next = h.request(step(None), T).unwrap();

    let mut twin = spawn_worker(spec(&["--policy", "random"]), "twin", system()).unwrap();
    twin.request(reset(3), T).unwrap();
    for _ in 0..4 {
        twin.request(step(None), T).unwrap();
    }
    let mut expected = twin.request(step(None), T).unwrap();
    expected.correlation_id = next.correlation_id;
    assert_eq!(next.payload, expected.payload);
}

#[test]
fn restart_budget_exhausted_is_permanent() {
    let mut s = spec(&[]);
    s.max_restarts = 0;
    let mut h = spawn_worker(s, "w", system()).unwrap();
    process::signal_group(h.process_group_id(), libc::SIGKILL);
    let _ = h.request(reset(1), T);
    assert!(matches!(h.recover(), Err(SupervisorError::PermanentFailure { .. })));
    assert_eq!(h.state(), WorkerState::Dead);
}

#[test]
fn forced_stop_sweeps_the_group() {
    let mut h = spawn_worker(spec(&["--ignore-stop", "--spawn-sleeper"]), "w", system()).unwrap();
    let pgid = h.process_group_id();
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while process::group_members(pgid).len() < 2 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(process::group_members(pgid).len(), 2);
    let report = h.stop_worker(Duration::from_millis(300));
    assert_eq!(report.path, ExitPath::Forced);
    assert_eq!(report.signal, Some(libc::SIGKILL));
    assert!(process::group_members(pgid).is_empty());
    assert_eq!(h.stop_worker(Duration::from_millis(300)), report, "report is cached");
}

#[test]
fn sleeper_survivor_is_killed_after_clean_stop() {
    let mut h = spawn_worker(spec(&["--spawn-sleeper"]), "w", system()).unwrap();
    let pgid = h.process_group_id();
    std::thread::sleep(Duration::from_millis(100));
    let report = h.stop_worker(Duration::from_secs(2));
    assert_eq!(report.path, ExitPath::Protocol);
    assert_eq!(report.survivors_killed, 1);
    assert!(process::group_members(pgid).is_empty());
}

#[test]
fn drop_kills_the_group() {
    let h = spawn_worker(spec(&["--spawn-sleeper"]), "w", system()).unwrap();
    let pgid = h.process_group_id();
    std::thread::sleep(Duration::from_millis(100));
    drop(h);
    let deadline = std::time::Instant::now() + Duration::from_secs(2);
    while !process::group_members(pgid).is_empty() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert!(process::group_members(pgid).is_empty());
}
