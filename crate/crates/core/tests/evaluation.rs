use std::collections::BTreeMap;
use std::time::Duration;

use mosaic_core::evaluation::{
    open_manual_session, rollout, rollouts, rollouts_seq, run_script, PauseGate, RunEvent, RunOptions, RunStatus,
    SessionError, SessionOptions, SessionStatus, StepMode,
};
use mosaic_core::operator::matrix::{build_matrix, Family, MatrixSpec};
use mosaic_core::operator::{BindOptions, RunConfig, WorkerAssignment};
use mosaic_core::policy::{BaselineKind, PolicyKind};
use mosaic_core::telemetry::{read_records, Stream, TelemetryRecord, EPISODES_FILE, STEPS_FILE};
use mosaic_envs::{Task, CORRIDOR, TEAMTAG};
use mosaic_protocol::{Reward, WorkerKind};

fn bind() -> BindOptions {
    BindOptions { worker_bin: env!("CARGO_BIN_EXE_mosaic-worker").into(), ..BindOptions::default() }
}

fn opts(root: &std::path::Path, seed: u64, episodes: u64) -> RunOptions {
    let mut o = RunOptions::new(root, seed, episodes);
    o.bind = bind();
    o
}

fn teamtag(id: &str, workers: [(&str, WorkerAssignment); 4]) -> RunConfig {
    RunConfig {
        operator_id: id.into(),
        env_name: "mosaic".into(),
        task: TEAMTAG.into(),
        player_workers: workers.into_iter().map(|(s, a)| (s.to_string(), a)).collect(),
        seed: None,
        episodes: None,
        max_steps: None,
        description: None,
    }
}

fn baseline(kind: &str) -> WorkerAssignment {
    WorkerAssignment::new(WorkerKind::Baseline).with("kind", kind)
}

fn four_random() -> RunConfig {
    teamtag(
        "teamtag_4random",
        [
            ("blue_0", baseline("random")),
            ("blue_1", baseline("random")),
            ("green_0", baseline("random")),
            ("green_1", baseline("random")),
        ],
    )
}

fn corridor(kind: WorkerAssignment) -> RunConfig {
    RunConfig {
        operator_id: "corridor".into(),
        env_name: "mosaic".into(),
        task: CORRIDOR.into(),
        player_workers: [("agent_0".to_string(), kind)].into(),
        seed: None,
        episodes: None,
        max_steps: None,
        description: None,
    }
}

#[test]
fn episode_budget_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut events = 0;
    let r = run_script(&four_random(), &opts(dir.path(), 1, 10), &mut |e| {
        if matches!(e, RunEvent::Episode(_)) {
            events += 1;
        }
    })
    .unwrap();
    assert_eq!(r.status, RunStatus::Completed);
    assert_eq!(r.episodes, 10);
    assert_eq!(events, 10);
    let eps = read_records(&r.run_dir, Stream::Episodes).unwrap();
    assert_eq!(eps.len(), 10);
    let steps = read_records(&r.run_dir, Stream::Steps).unwrap();
    assert_eq!(steps.len(), 10 * 200 * 4);
    assert_eq!(r.wins.values().sum::<u64>() + r.draws, 10);
    for f in ["manifest", "result", "config"] {
        assert!(r.run_dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn rerun_reproduces_logs_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_script(&four_random(), &opts(a.path(), 42, 3), &mut |_| {}).unwrap();
    let rb = run_script(&four_random(), &opts(b.path(), 42, 3), &mut |_| {}).unwrap();
    assert_eq!(ra.run_id, rb.run_id);
    for f in [STEPS_FILE, EPISODES_FILE] {
        assert_eq!(std::fs::read(ra.run_dir.join(f)).unwrap(), std::fs::read(rb.run_dir.join(f)).unwrap(), "{f}");
    }
    let rc = run_script(&four_random(), &opts(a.path(), 43, 3), &mut |_| {}).unwrap();
    assert_ne!(
        std::fs::read(ra.run_dir.join(STEPS_FILE)).unwrap(),
        std::fs::read(rc.run_dir.join(STEPS_FILE)).unwrap()
    );
    // Same directory is replaced, not appended to.
    let again = run_script(&four_random(), &opts(a.path(), 42, 3), &mut |_| {}).unwrap();
    assert_eq!(read_records(&again.run_dir, Stream::Episodes).unwrap().len(), 3);
}

#[test]
fn scripted_run_matches_in_process_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let config = teamtag(
        "mixed",
        [
            ("blue_0", baseline("random")),
            ("blue_1", WorkerAssignment::new(WorkerKind::Llm)),
            ("green_0", WorkerAssignment::new(WorkerKind::Rl)),
            ("green_1", baseline("cycle")),
        ],
    );
    let r = run_script(&config, &opts(dir.path(), 5, 2), &mut |_| {}).unwrap();
    let policies: BTreeMap<String, PolicyKind> = [
        ("blue_0".to_string(), PolicyKind::Baseline(BaselineKind::Random)),
        ("blue_1".to_string(), PolicyKind::ScriptedText),
        ("green_0".to_string(), PolicyKind::Greedy),
        ("green_1".to_string(), PolicyKind::Baseline(BaselineKind::Cycle)),
    ]
    .into();
    let local = rollout(Task::TeamTag, &policies, 5, 2);
    assert_eq!(local.slot_returns, r.slot_returns);
    assert_eq!(local.wins, r.wins);
}

#[test]
fn parallel_and_sequential_rollouts_agree() {
    let policies: BTreeMap<String, PolicyKind> =
        Task::TeamTag.slots().iter().map(|s| (s.to_string(), PolicyKind::Baseline(BaselineKind::Random))).collect();
    let seeds: Vec<u64> = (0..8).collect();
    assert_eq!(rollouts(Task::TeamTag, &policies, &seeds, 2), rollouts_seq(Task::TeamTag, &policies, &seeds, 2));
}

#[test]
fn greedy_beats_random_in_a7() {
    let configs = build_matrix(&MatrixSpec::standard(Family::Adversarial)).unwrap();
    let a7 = configs.iter().find(|c| c.operator_id == "A7").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_script(a7, &opts(dir.path(), 0, 20), &mut |_| {}).unwrap();
    assert!(r.win_rate("green") > 0.9, "{:?}", r.wins);
}

#[test]
fn corridor_run_scores_goal_reward() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_script(&corridor(WorkerAssignment::new(WorkerKind::Rl)), &opts(dir.path(), 0, 3), &mut |_| {}).unwrap();
    assert_eq!(r.slot_returns["agent_0"], Reward::from_int(3));
    assert!(r.wins.is_empty() && r.draws == 0);
    assert_eq!(r.terminated, 3);
}

#[test]
fn aec_mode_and_step_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = opts(dir.path(), 2, 2);
    o.mode = StepMode::Aec;
    o.max_steps = Some(10);
    let r = run_script(&four_random(), &o, &mut |_| {}).unwrap();
    assert_eq!(r.truncated, 2);
    let eps = read_records(&r.run_dir, Stream::Episodes).unwrap();
    for e in eps {
        let TelemetryRecord::Episode(e) = e else { panic!() };
        assert_eq!(e.episode_length, 10);
        assert!(e.truncated);
    }
    assert_eq!(read_records(&r.run_dir, Stream::Steps).unwrap().len(), 2 * 10 * 4);
}

#[test]
fn paused_run_resumes_and_stops() {
    let dir = tempfile::tempdir().unwrap();
    let gate = PauseGate::new();
    gate.pause();
    let mut o = opts(dir.path(), 1, 1);
    o.gate = Some(gate.clone());
    let g = gate.clone();
    let resumer = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(300));
        g.resume();
    });
    let paused = run_script(&four_random(), &o, &mut |_| {}).unwrap();
    resumer.join().unwrap();
    let plain = run_script(&four_random(), &opts(tempfile::tempdir().unwrap().path(), 1, 1), &mut |_| {}).unwrap();
    assert_eq!(paused.slot_returns, plain.slot_returns);

    let stop = PauseGate::new();
    stop.stop();
    let mut o = opts(dir.path(), 9, 5);
    o.gate = Some(stop);
    let r = run_script(&four_random(), &o, &mut |_| {}).unwrap();
    assert_eq!(r.status, RunStatus::Stopped);
    assert_eq!(r.episodes, 0);
}

fn session_opts(root: Option<&std::path::Path>) -> SessionOptions {
    SessionOptions { bind: bind(), runs_root: root.map(Into::into), ..SessionOptions::default() }
}

#[test]
fn lockstep_replicas_share_barrier() {
    let configs = vec![four_random(), corridor_free_teamtag("b"), corridor_free_teamtag("c")];
    let mut s = open_manual_session("lock", &configs, TEAMTAG, 7, &session_opts(None)).unwrap();
    for i in 1..=50 {
        let out = s.step_session().unwrap();
        assert_eq!(out.barrier, i);
        for v in &out.replicas {
            assert_eq!(v.step_index, i);
        }
    }
    let frames = s.frames(None).unwrap();
    assert_eq!(frames.barrier, 50);
    assert_eq!(frames.replicas.len(), 3);
    assert_eq!(frames.replicas[1].badges["green_0"].color, "purple");
    assert!(frames.replicas[0].ascii().lines().count() >= 7);
}

fn corridor_free_teamtag(id: &str) -> RunConfig {
    teamtag(
        id,
        [
            ("blue_0", WorkerAssignment::new(WorkerKind::Llm)),
            ("blue_1", WorkerAssignment::new(WorkerKind::Vlm)),
            ("green_0", WorkerAssignment::new(WorkerKind::Rl)),
            ("green_1", baseline("noop")),
        ],
    )
}

#[test]
fn replicas_auto_reset_and_write_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let configs = vec![four_random(), four_random()];
    let mut s = open_manual_session("auto", &configs, TEAMTAG, 3, &session_opts(Some(dir.path()))).unwrap();
    for _ in 0..205 {
        s.step_session().unwrap();
    }
    let views = s.views();
    assert!(views.iter().all(|v| v.episode_index == 1 && v.step_index == 5 && v.episodes_done == 1));
    s.stop(Duration::from_secs(1)).unwrap();
    let run = dir.path().join("auto");
    let steps = read_records(&run, Stream::Steps).unwrap();
    assert_eq!(steps.len(), 2 * 205 * 4);
    // Identical operators over identical replicas see identical streams.
    let by_replica = |r: u32| -> Vec<(u64, u64, String, u32)> {
        steps
            .iter()
            .filter_map(|t| match t {
                TelemetryRecord::Step(s) if s.replica == Some(r) => {
                    Some((s.episode_index, s.step_index, s.slot.clone(), s.action))
                }
                _ => None,
            })
            .collect()
    };
    assert_eq!(by_replica(0), by_replica(1));
    assert_eq!(read_records(&run, Stream::Episodes).unwrap().len(), 2);
    assert!(matches!(s.step_session(), Err(SessionError::Conflict { status: "stopped" })));
}

#[test]
fn session_preconditions() {
    let too_many = vec![four_random(); 7];
    assert!(matches!(
        open_manual_session("x", &too_many, TEAMTAG, 0, &session_opts(None)),
        Err(SessionError::Precondition(_))
    ));
    assert!(matches!(
        open_manual_session("x", &[], TEAMTAG, 0, &session_opts(None)),
        Err(SessionError::Precondition(_))
    ));
    let wrong = vec![corridor(WorkerAssignment::new(WorkerKind::Rl))];
    assert!(matches!(
        open_manual_session("x", &wrong, TEAMTAG, 0, &session_opts(None)),
        Err(SessionError::Precondition(_))
    ));
    let mut bad = four_random();
    bad.player_workers.remove("blue_0");
    match open_manual_session("x", &[four_random(), bad], TEAMTAG, 0, &session_opts(None)) {
        Err(SessionError::Config { replica, source }) => {
            assert_eq!(replica, 1);
            assert_eq!(source.paths(), vec!["player_workers.blue_0"]);
        }
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn human_slot_blocks_until_submitted() {
    let mut human = four_random();
    human.player_workers.insert("green_0".into(), WorkerAssignment::new(WorkerKind::Human));
    let mut s = open_manual_session("h", &[four_random(), human], TEAMTAG, 0, &session_opts(None)).unwrap();
    match s.step_session() {
        Err(SessionError::Blocked { slots }) => assert_eq!(slots, vec![(1, "green_0".to_string())]),
        other => panic!("{:?}", other.map(|o| o.barrier)),
    }
    assert_eq!(s.barrier(), 0);
    assert_eq!(s.replica_state(0).unwrap().step_index, 0);
    assert!(!s.submit_human(1, "green_0", 2).unwrap());
    assert!(s.submit_human(1, "green_0", 4).unwrap());
    let out = s.step_session().unwrap();
    let acted: Vec<u32> = out
        .records
        .iter()
        .filter_map(|r| match r {
            TelemetryRecord::Step(st) if st.replica == Some(1) && st.slot == "green_0" => Some(st.action),
            _ => None,
        })
        .collect();
    assert_eq!(acted, vec![4]);
    assert!(matches!(s.step_session(), Err(SessionError::Blocked { .. })));
    assert_eq!(s.frames(None).unwrap().replicas[1].badges["green_0"].color, "orange");
}

#[test]
fn killed_replica_fails_session_without_advancing() {
    let mut s = open_manual_session("k", &[four_random(), four_random()], TEAMTAG, 0, &session_opts(None)).unwrap();
    s.step_session().unwrap();
    let before: Vec<_> = (0..2).map(|i| s.replica_state(i).unwrap().clone()).collect();
    let op = s.operator(1).unwrap();
    let pid = op.binding("blue_1").unwrap().worker().unwrap().process_group_id();
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    std::thread::sleep(Duration::from_millis(100));
    match s.step_session() {
        Err(SessionError::Failed { replica, .. }) => assert_eq!(replica, 1),
        other => panic!("{:?}", other.map(|o| o.barrier)),
    }
    assert!(matches!(s.status(), SessionStatus::Failed { .. }));
    assert_eq!(s.barrier(), 1);
    for (i, b) in before.iter().enumerate() {
        assert_eq!(s.replica_state(i).unwrap(), b);
    }
    assert!(matches!(s.step_session(), Err(SessionError::Conflict { status: "failed" })));
}

#[test]
fn pause_resume_conflicts() {
    let mut s = open_manual_session("p", &[four_random()], TEAMTAG, 0, &session_opts(None)).unwrap();
    s.pause().unwrap();
    assert!(matches!(s.step_session(), Err(SessionError::Conflict { status: "paused" })));
    assert!(matches!(s.pause(), Err(SessionError::Conflict { .. })));
    s.resume().unwrap();
    assert!(matches!(s.resume(), Err(SessionError::Conflict { .. })));
    s.step_session().unwrap();
}
