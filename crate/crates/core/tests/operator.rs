use std::collections::BTreeMap;
use std::time::Duration;

use mosaic_core::operator::phi::ParseOutcome;
use mosaic_core::operator::{bind_operator, BindOptions, OperatorError, RunConfig, WorkerAssignment};
use mosaic_core::supervisor::process;
use mosaic_envs::{make_env, step_parallel, CORRIDOR, TEAMTAG};
use mosaic_protocol::{Modality, ObservationPayload, WorkerKind};
use serde_json::{json, Map};

fn opts() -> BindOptions {
    BindOptions { worker_bin: env!("CARGO_BIN_EXE_mosaic-worker").into(), ..BindOptions::default() }
}

fn teamtag(workers: [(&str, WorkerAssignment); 4]) -> RunConfig {
    RunConfig {
        operator_id: "t".into(),
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

fn heterogeneous() -> RunConfig {
    teamtag([
        ("green_0", WorkerAssignment::new(WorkerKind::Rl).with("checkpoint", "mappo_1v1.pt")),
        ("green_1", WorkerAssignment::new(WorkerKind::Llm).with("temperature", 0)),
        ("blue_0", WorkerAssignment::new(WorkerKind::Rl).with("checkpoint", "mappo_1v1.pt")),
        ("blue_1", WorkerAssignment::new(WorkerKind::Baseline)),
    ])
}

#[test]
fn heterogeneous_team_binds_four_workers() {
    let op = bind_operator(&heterogeneous(), &opts()).unwrap();
    let pgids: std::collections::BTreeSet<i32> =
        op.slots().iter().map(|b| b.worker().unwrap().process_group_id()).collect();
    assert_eq!(pgids.len(), 4);
    assert_eq!(op.paradigm("green_1"), Some(WorkerKind::Llm));
    assert_eq!(op.binding("green_1").unwrap().modality, Modality::Text);
}

#[test]
fn missing_slot_is_a_binding_error() {
    let mut config = heterogeneous();
    config.player_workers.remove("blue_1");
    let err = bind_operator(&config, &opts()).err().unwrap();
    match err {
        OperatorError::Config(e) => assert_eq!(e.paths(), vec!["player_workers.blue_1"]),
        other => panic!("{other}"),
    }
}

#[test]
fn corridor_single_slot_serves_both_modes() {
    let config = RunConfig {
        operator_id: "solo".into(),
        env_name: "mosaic".into(),
        task: CORRIDOR.into(),
        player_workers: [("agent_0".to_string(), WorkerAssignment::new(WorkerKind::Rl))].into(),
        seed: None,
        episodes: None,
        max_steps: None,
        description: None,
    };
    let mut op = bind_operator(&config, &opts()).unwrap();
    op.reset(0, 0).unwrap();
    let env = make_env(CORRIDOR, 0).unwrap();
    let obs = op.observe(&env, "agent_0").unwrap();
    let aec = op.select_action("agent_0", &obs, &Map::new()).unwrap();
    let par = op.select_actions(&[("agent_0".to_string(), obs)].into()).unwrap();
    assert_eq!(aec.action, 1);
    assert_eq!(par["agent_0"].action, 1);
}

#[test]
fn noop_slot_returns_null_action() {
    let config = teamtag([
        ("green_0", baseline("noop")),
        ("green_1", baseline("noop")),
        ("blue_0", baseline("noop")),
        ("blue_1", baseline("noop")),
    ]);
    let mut op = bind_operator(&config, &opts()).unwrap();
    op.reset(3, 0).unwrap();
    let env = make_env(TEAMTAG, 3).unwrap();
    for _ in 0..5 {
        let obs = op.observe_all(&env).unwrap();
        assert!(op.select_actions(&obs).unwrap().values().all(|d| d.action == 0));
    }
}

#[test]
fn text_slot_keeps_raw_text_and_outcome() {
    let mut op = bind_operator(&heterogeneous(), &opts()).unwrap();
    op.reset(0, 0).unwrap();
    let env = make_env(TEAMTAG, 0).unwrap();
    let obs = op.observe(&env, "green_1").unwrap();
    let d = op.select_action("green_1", &obs, &Map::new()).unwrap();
    let text = d.raw_text.unwrap();
    assert!(text.contains("ACTION:"), "{text}");
    assert_eq!(d.parse_outcome, Some(ParseOutcome::Parsed));
}

#[test]
fn wrong_modality_rejected() {
    let mut op = bind_operator(&heterogeneous(), &opts()).unwrap();
    op.reset(0, 0).unwrap();
    let err = op.select_action("green_1", &ObservationPayload::tensor(vec![1], vec![0.0]), &Map::new()).unwrap_err();
    assert!(matches!(err, OperatorError::Modality { .. }), "{err}");
}

/// First three decisions of a uniform-random slot whose episode seed is 7.
const RANDOM_SEED7_FIRST_THREE: [u32; 3] = [0, 0, 0];

#[test]
fn seeded_random_baseline_is_pinned() {
    use mosaic_core::policy::{BaselineKind, Decision, Policy, PolicyKind};
    let env = make_env(TEAMTAG, 7).unwrap();
    let space = env.task.action_space();
    let obs = mosaic_envs::serialize_obs(&env, "blue_0", Modality::Tensor, &Default::default()).unwrap();
    for _ in 0..2 {
        let mut p = Policy::new(PolicyKind::Baseline(BaselineKind::Random), 7);
        let got: Vec<u32> = (0..3)
            .map(|_| match p.decide(&obs, &space) {
                Decision::Action(a) => a,
                Decision::Text(_) => unreachable!(),
            })
            .collect();
        assert_eq!(got, RANDOM_SEED7_FIRST_THREE);
    }
}

#[test]
fn joint_equals_sequential() {
    let config = teamtag([
        ("green_0", WorkerAssignment::new(WorkerKind::Rl)),
        ("green_1", WorkerAssignment::new(WorkerKind::Llm)),
        ("blue_0", baseline("random")),
        ("blue_1", baseline("cycle")),
    ]);
    let mut joint = bind_operator(&config, &opts()).unwrap();
    let mut single = bind_operator(&config, &opts()).unwrap();
    joint.reset(11, 0).unwrap();
    single.reset(11, 0).unwrap();
    let mut env = make_env(TEAMTAG, 11).unwrap();
    for _ in 0..30 {
        let obs = joint.observe_all(&env).unwrap();
        let a = joint.select_actions(&obs).unwrap();
        let obs2 = single.observe_all(&env).unwrap();
        let mut b = BTreeMap::new();
        for (slot, o) in &obs2 {
            b.insert(slot.clone(), single.select_action(slot, o, &Map::new()).unwrap());
        }
        assert_eq!(a, b);
        let actions = a.iter().map(|(s, d)| (s.clone(), d.action)).collect();
        env = step_parallel(&env, &actions).unwrap().0;
    }
}

#[test]
fn one_stalled_slot_fails_the_joint_action() {
    let config = teamtag([
        ("green_0", baseline("random")),
        ("green_1", baseline("random")),
        ("blue_0", baseline("random")),
        ("blue_1", baseline("random")),
    ]);
    let mut o = opts();
    o.request_timeout = Duration::from_millis(500);
    let mut op = bind_operator(&config, &o).unwrap();
    op.reset(0, 0).unwrap();
    let pgid = op.binding("blue_1").unwrap().worker().unwrap().process_group_id();
    process::signal_group(pgid, libc::SIGSTOP);
    let env = make_env(TEAMTAG, 0).unwrap();
    let obs = op.observe_all(&env).unwrap();
    let err = op.select_actions(&obs).unwrap_err();
    assert_eq!(err.slots(), vec!["blue_1".to_string()], "{err}");
}

#[test]
fn frozen_policy_maps_observations_identically_across_episodes() {
    let config = teamtag([
        ("green_0", WorkerAssignment::new(WorkerKind::Rl).frozen(true)),
        ("green_1", WorkerAssignment::new(WorkerKind::Rl).frozen(true)),
        ("blue_0", baseline("random")),
        ("blue_1", baseline("random")),
    ]);
    let mut op = bind_operator(&config, &opts()).unwrap();
    let observations: Vec<_> = (0..20)
        .map(|seed| {
            let env = make_env(TEAMTAG, seed).unwrap();
            mosaic_envs::serialize_obs(&env, "green_0", Modality::Tensor, &Default::default()).unwrap()
        })
        .collect();
    let mut runs = Vec::new();
    for episode in 0..3 {
        op.reset(99, episode).unwrap();
        let actions: Vec<u32> =
            observations.iter().map(|o| op.select_action("green_0", o, &Map::new()).unwrap().action).collect();
        runs.push(actions);
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
    let train = mosaic_protocol::ProtocolMessage::bare(mosaic_protocol::MessageName::Train, 0);
    let h = op.slots_mut()[2].worker_mut().unwrap();
    assert!(h.request(train, Duration::from_secs(5)).is_err());
}

#[test]
fn noop_stays_put_random_moves() {
    let config = teamtag([
        ("green_0", baseline("random")),
        ("green_1", baseline("noop")),
        ("blue_0", baseline("noop")),
        ("blue_1", baseline("noop")),
    ]);
    let mut op = bind_operator(&config, &opts()).unwrap();
    op.reset(5, 0).unwrap();
    let mut env = make_env(TEAMTAG, 5).unwrap();
    let noop_start = env.position("green_1");
    let random_start = env.position("green_0");
    let mut random_moved = false;
    for _ in 0..120 {
        let obs = op.observe_all(&env).unwrap();
        let actions = op.select_actions(&obs).unwrap().into_iter().map(|(s, d)| (s, d.action)).collect();
        env = step_parallel(&env, &actions).unwrap().0;
        assert_eq!(env.position("green_1"), noop_start);
        random_moved |= env.position("green_0") != random_start;
    }
    assert!(random_moved);
}

#[test]
fn human_mailbox_latest_wins_and_blocks() {
    let config = teamtag([
        ("green_0", WorkerAssignment::new(WorkerKind::Human)),
        ("green_1", baseline("noop")),
        ("blue_0", baseline("noop")),
        ("blue_1", baseline("noop")),
    ]);
    let mut op = bind_operator(&config, &opts()).unwrap();
    op.reset(0, 0).unwrap();
    let env = make_env(TEAMTAG, 0).unwrap();
    let obs = op.observe_all(&env).unwrap();
    assert_eq!(obs["green_0"].modality, Modality::Image);
    let err = op.select_actions(&obs).unwrap_err();
    assert!(matches!(&err, OperatorError::Blocked { slots } if slots == &["green_0"]), "{err}");
    assert!(!op.submit_human("green_0", 1, 0).unwrap());
    assert!(op.submit_human("green_0", 3, 0).unwrap());
    assert!(matches!(op.submit_human("blue_0", 1, 0), Err(OperatorError::NotHuman(_))));
    assert!(matches!(op.submit_human("green_0", 9, 0), Err(OperatorError::ActionOutOfRange { .. })));
    let d = op.select_actions(&obs).unwrap();
    assert_eq!(d["green_0"].action, 3);
    assert_eq!(op.blocked_slots(), vec!["green_0".to_string()], "consumed exactly once");
}

#[test]
fn every_paradigm_honors_the_same_contract() {
    for a in [
        WorkerAssignment::new(WorkerKind::Rl),
        WorkerAssignment::new(WorkerKind::Llm),
        WorkerAssignment::new(WorkerKind::Vlm).with("max_image_history", 2),
        baseline("random"),
        baseline("noop"),
        baseline("cycle"),
        WorkerAssignment::new(WorkerKind::Llm)
            .with("parse_policy", json!({"grammar": "strict_integer", "fallback": "random_logged"})),
    ] {
        let config = teamtag([
            ("green_0", a.clone()),
            ("green_1", baseline("noop")),
            ("blue_0", baseline("noop")),
            ("blue_1", baseline("noop")),
        ]);
        let mut op = bind_operator(&config, &opts()).unwrap();
        op.reset(1, 0).unwrap();
        let mut env = make_env(TEAMTAG, 1).unwrap();
        for _ in 0..10 {
            let obs = op.observe_all(&env).unwrap();
            let d = op.select_actions(&obs).unwrap();
            assert!(d.values().all(|d| d.action < 5));
            let actions = d.into_iter().map(|(s, d)| (s, d.action)).collect();
            env = step_parallel(&env, &actions).unwrap().0;
        }
    }
}
