use std::collections::BTreeMap;
use std::fs;

use mosaic_core::operator::phi::ParseOutcome;
use mosaic_core::telemetry::*;
use mosaic_protocol::{Reward, WorkerKind};
use proptest::prelude::*;

fn step(ep: u64, st: u64, slot: &str, reward: i64) -> StepRecord {
    StepRecord {
        schema_version: RECORD_SCHEMA_VERSION.into(),
        run_id: "r".into(),
        session_id: "s".into(),
        replica: None,
        episode_index: ep,
        step_index: st,
        slot: slot.into(),
        paradigm: WorkerKind::Baseline,
        action: (st % 5) as u32,
        raw_text: None,
        parse_outcome: None,
        reward: Reward::from_int(reward),
        terminated: false,
        truncated: false,
        obs_digest: format!("{ep:04}{st:04}"),
        render_ref: None,
    }
}

fn episode(ep: u64, len: u64, totals: &[(&str, i64)], winner: &str) -> EpisodeRecord {
    EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION.into(),
        run_id: "r".into(),
        replica: None,
        episode_index: ep,
        totals: totals.iter().map(|(s, r)| (s.to_string(), Reward::from_int(*r))).collect(),
        episode_length: len,
        team_scores: BTreeMap::new(),
        winner: Some(winner.into()),
        terminated: false,
        truncated: true,
    }
}

#[test]
fn append_then_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    let a = step(0, 0, "a", 1);
    let b = step(0, 0, "b", -1);
    store.append_step(&a).unwrap();
    store.append_step(&b).unwrap();
    store.append_episode(&episode(0, 1, &[("a", 1), ("b", -1)], "blue")).unwrap();
    store.flush().unwrap();
    let steps = read_records(dir.path(), Stream::Steps).unwrap();
    assert_eq!(steps, vec![TelemetryRecord::Step(a), TelemetryRecord::Step(b)]);
    assert_eq!(read_records(dir.path(), Stream::Episodes).unwrap().len(), 1);
}

#[test]
fn duplicates_and_disorder_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    store.append_step(&step(0, 1, "a", 0)).unwrap();
    assert!(matches!(store.append_step(&step(0, 1, "a", 0)), Err(TelemetryError::Duplicate(_))));
    assert!(matches!(store.append_step(&step(0, 0, "b", 0)), Err(TelemetryError::OutOfOrder(_))));
    let mut other = step(0, 0, "a", 0);
    other.replica = Some(1);
    store.append_step(&other).unwrap();
}

#[test]
fn reconciliation_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    store.append_step(&step(0, 0, "a", 1)).unwrap();
    store.append_step(&step(0, 1, "a", 0)).unwrap();
    let err = store.append_episode(&episode(0, 2, &[("a", 2)], "blue")).unwrap_err();
    assert!(matches!(err, TelemetryError::Reconcile { .. }), "{err}");
    store.append_step(&step(1, 0, "a", 0)).unwrap();
    let err = store.append_episode(&episode(1, 3, &[("a", 0)], "blue")).unwrap_err();
    assert!(matches!(err, TelemetryError::Reconcile { .. }), "{err}");
}

fn write_run(dir: &std::path::Path, episodes: u64, steps: u64) {
    let mut store = RunStore::open(dir, "r").unwrap();
    for ep in 0..episodes {
        for st in 0..steps {
            for slot in ["a", "b"] {
                store.append_step(&step(ep, st, slot, 0)).unwrap();
            }
        }
        store.append_episode(&episode(ep, steps, &[("a", 0), ("b", 0)], DRAW)).unwrap();
    }
    store.finalize().unwrap();
}

#[test]
fn truncation_at_every_offset_of_the_last_record_heals() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), 2, 3);
    let log = dir.path().join(STEPS_FILE);
    let full = fs::read(&log).unwrap();
    let index = fs::read(dir.path().join(STEPS_INDEX)).unwrap();
    let last_start = full[..full.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
    let earlier = read_records(dir.path(), Stream::Steps).unwrap();
    let earlier = &earlier[..earlier.len() - 1];
    let mut escapes = 0;
    for cut in last_start..full.len() {
        fs::write(&log, &full[..cut]).unwrap();
        fs::write(dir.path().join(STEPS_INDEX), &index).unwrap();
        let store = RunStore::open(dir.path(), "r").unwrap();
        drop(store);
        let bytes = fs::read(&log).unwrap();
        if bytes != full[..last_start] {
            escapes += 1;
        }
        if read_records(dir.path(), Stream::Steps).unwrap() != earlier {
            escapes += 1;
        }
        let found = lookup_step(dir.path(), 1, 2).unwrap();
        if found.records.len() != 1 {
            escapes += 1;
        }
    }
    assert_eq!(escapes, 0);
    fs::write(&log, &full[..last_start + 5]).unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    assert_eq!(store.heal.0.truncated_bytes, 5);
    store.append_step(&step(9, 0, "a", 0)).unwrap();
    store.flush().unwrap();
    assert_eq!(lookup_step(dir.path(), 9, 0).unwrap().records.len(), 1);
}

#[test]
fn damaged_index_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), 3, 4);
    let idx = dir.path().join(STEPS_INDEX);
    let good = fs::read(&idx).unwrap();
    let mut bad = good.clone();
    bad.truncate(bad.len() - 7);
    fs::write(&idx, &bad).unwrap();
    let store = RunStore::open(dir.path(), "r").unwrap();
    assert!(store.heal.0.index_rebuilt);
    drop(store);
    assert_eq!(fs::read(&idx).unwrap(), good);
    fs::write(&idx, vec![0xAB; 48]).unwrap();
    RunStore::open(dir.path(), "r").unwrap();
    assert_eq!(fs::read(&idx).unwrap(), good);
}

#[test]
fn indexed_lookup_is_logarithmic() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    let n: u64 = 100_000;
    for i in 0..n {
        store.append_step(&step(i / 1000, i % 1000, "a", 0)).unwrap();
    }
    store.finalize().unwrap();
    let bound = (n as f64).log2().ceil() as u32 + 2;
    for i in [0, 1, 999, 50_000, 77_777, n - 1] {
        let found = lookup_step(dir.path(), i / 1000, i % 1000).unwrap();
        assert_eq!(found.records.len(), 1);
        assert_eq!(found.records[0].step_index, i % 1000);
        assert!(found.seeks <= bound, "{} seeks", found.seeks);
    }
    assert!(lookup_step(dir.path(), 500, 0).unwrap().records.is_empty());
}

#[test]
fn ingest_validates_and_quarantines() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    let good = TelemetryRecord::Step(step(0, 0, "a", 1)).to_line();
    assert!(matches!(ingest_line(&good, "r"), Ok(TelemetryRecord::Step(_))));
    store.ingest(&good).unwrap();

    let v2 = good.replace("\"schema_version\":\"1.0.0\"", "\"schema_version\":\"2.0.0\"");
    assert!(matches!(store.ingest(&v2), Err(TelemetryError::Version { .. })));
    assert!(matches!(store.ingest(&good), Err(TelemetryError::Duplicate(_))));
    let foreign = good.replace("\"run_id\":\"r\"", "\"run_id\":\"q\"");
    assert!(matches!(store.ingest(&foreign), Err(TelemetryError::RunMismatch { .. })));
    let missing = good.replace("\"obs_digest\":\"00000000\",", "");
    assert!(matches!(store.ingest(&missing), Err(TelemetryError::Schema { field, .. }) if field == "obs_digest"));
    assert!(matches!(store.ingest("{nope"), Err(TelemetryError::Malformed(_))));
    let extra = good.replace("{", "{\"surprise\":1,");
    assert!(matches!(store.ingest(&extra), Err(TelemetryError::Schema { .. })));
    store.flush().unwrap();

    let dead = fs::read_to_string(dir.path().join(DEAD_LETTER_FILE)).unwrap();
    assert_eq!(dead.lines().count(), 6);
    assert_eq!(read_records(dir.path(), Stream::Steps).unwrap().len(), 1);
}

#[test]
fn queries_agree_with_episode_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RunStore::open(dir.path(), "r").unwrap();
    let winners = ["blue", "green", DRAW, "green"];
    for (ep, winner) in winners.iter().enumerate() {
        let ep = ep as u64;
        let mut text = step(ep, 0, "b", 1);
        text.raw_text = Some("banana".into());
        text.parse_outcome = Some(ParseOutcome::FellBackNoop);
        store.append_step(&step(ep, 0, "a", -1)).unwrap();
        store.append_step(&text).unwrap();
        store.append_episode(&episode(ep, 1, &[("a", -1), ("b", 1)], winner)).unwrap();
    }
    store.flush().unwrap();
    let agg = query(dir.path(), &QueryFilter::default()).unwrap();
    assert_eq!(agg.episodes, 4);
    assert_eq!(agg.wins.values().sum::<u64>(), agg.episodes - agg.draws);
    assert_eq!(agg.wins["green"], 2);
    assert_eq!(agg.slots["b"].fallback_rate(), 1.0);
    assert_eq!(agg.slots["a"].fallback_rate(), 0.0);
    for slot in ["a", "b"] {
        let from_episodes: Reward = agg.episode_returns.values().map(|t| t[slot]).sum();
        assert_eq!(agg.slots[slot].return_sum, from_episodes);
    }
    let one = query(dir.path(), &QueryFilter { episodes: Some(1..2), ..Default::default() }).unwrap();
    assert_eq!(one.episodes, 1);
    assert!(matches!(query(&dir.path().join("missing"), &QueryFilter::default()), Err(TelemetryError::UnknownRun(_))));
}

#[test]
fn export_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), 2, 2);
    let a = export_jsonl(dir.path(), Stream::Steps).unwrap();
    let b = export_jsonl(dir.path(), Stream::Steps).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, fs::read(dir.path().join(STEPS_FILE)).unwrap());
    let empty = tempfile::tempdir().unwrap();
    RunStore::open(empty.path(), "r").unwrap();
    assert!(export_jsonl(empty.path(), Stream::Episodes).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_round_trip_through_lines(
        ep in 0u64..1000, st in 0u64..1000, reward in -5000i64..5000, action in 0u32..5,
        text in proptest::option::of("[ -~]{0,40}"),
    ) {
        let mut r = step(ep, st, "green_0", 0);
        r.reward = Reward::from_milli(reward);
        r.action = action;
        r.raw_text = text;
        let line = TelemetryRecord::Step(r.clone()).to_line();
        prop_assert_eq!(ingest_line(&line, "r").unwrap(), TelemetryRecord::Step(r));
    }

    #[test]
    fn hostile_lines_never_panic(raw in ".{0,200}") {
        let _ = ingest_line(&raw, "r");
    }
}
