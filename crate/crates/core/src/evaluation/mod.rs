//! Evaluation modes: scripted runs over one shared env, lock-step manual
//! sessions over per-operator replicas, and in-process rollouts.

mod manual;
mod replay;
mod rollout;
mod script;

use std::collections::BTreeMap;

use mosaic_envs::EnvState;
use mosaic_protocol::{Reward, WorkerKind};
use serde::Serialize;

use crate::telemetry::{EpisodeRecord, DRAW, RECORD_SCHEMA_VERSION};

pub use manual::{
    open_manual_session, BarrierOutcome, FrameSet, ManualSession, ReplicaFrame, ReplicaView, SessionError,
    SessionOptions, SessionStatus, DEFAULT_MAX_REPLICAS,
};
pub use replay::{replay_ascii, Replay, ReplayError};
pub use rollout::{rollout, rollouts, rollouts_seq, RolloutSummary};
pub use script::{run_id_for, run_script, sweep, PauseGate, RunEvent, RunOptions, RunResult, RunStatus, StepMode};

/// Display badge for a paradigm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Badge {
    pub paradigm: WorkerKind,
    pub color: &'static str,
}

pub fn badge(p: WorkerKind) -> Badge {
    let color = match p {
        WorkerKind::Rl => "purple",
        WorkerKind::Llm => "blue",
        WorkerKind::Human => "orange",
        WorkerKind::Vlm => "teal",
        WorkerKind::Baseline => "gray",
    };
    Badge { paradigm: p, color }
}

/// Winner label for a finished state: team name, `draw`, or none for
/// single-team tasks.
pub fn winner_label(state: &EnvState) -> Option<String> {
    if state.task.teams().len() < 2 {
        return None;
    }
    Some(state.winner().unwrap_or(DRAW).to_string())
}

pub(crate) fn episode_record(
    run_id: &str,
    replica: Option<u32>,
    state: &EnvState,
    episode_index: u64,
    totals: &BTreeMap<String, Reward>,
    length: u64,
    truncated_by_budget: bool,
) -> EpisodeRecord {
    EpisodeRecord {
        schema_version: RECORD_SCHEMA_VERSION.into(),
        run_id: run_id.into(),
        replica,
        episode_index,
        totals: totals.clone(),
        episode_length: length,
        team_scores: state.task.teams().iter().zip(&state.scores).map(|(t, s)| (t.to_string(), *s)).collect(),
        winner: winner_label(state),
        terminated: state.terminated,
        truncated: state.truncated || truncated_by_budget,
    }
}
