use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mosaic_envs::{make_env, render_ascii, reset_episode, step_aec, step_parallel, EnvState};

use super::{RunResult, StepMode};
use crate::operator::RunConfig;
use crate::telemetry::{
    read_document, read_records, RunManifest, StepRecord, Stream, TelemetryRecord, CONFIG_FILE, MANIFEST_FILE,
    RESULT_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("`{0}` is not a run directory")]
    NotARun(String),
    #[error("{0}")]
    Io(String),
    #[error("episode {episode} step {step}: {detail}")]
    Diverged { episode: u64, step: u64, detail: String },
}

/// Frames produced by [`replay_ascii`].
#[derive(Debug, Clone, Default)]
pub struct Replay {
    pub episodes: u64,
    pub frames: u64,
    pub text: String,
}

fn frame(out: &mut Replay, env: &EnvState, episode: u64) {
    let _ = writeln!(out.text, "episode {episode} step {}", env.step_index);
    out.text.push_str(&render_ascii(env));
    if !out.text.ends_with('\n') {
        out.text.push('\n');
    }
    out.text.push('\n');
    out.frames += 1;
}

fn diverged(r: &StepRecord, detail: impl Into<String>) -> ReplayError {
    ReplayError::Diverged { episode: r.episode_index, step: r.step_index, detail: detail.into() }
}

/// Re-simulates a finished run from its config and step log and renders one
/// ascii frame per env step. Logged rewards are checked on the way.
pub fn replay_ascii(dir: &Path) -> Result<Replay, ReplayError> {
    if !dir.join(MANIFEST_FILE).is_file() || !dir.join(CONFIG_FILE).is_file() {
        return Err(ReplayError::NotARun(dir.display().to_string()));
    }
    let io = |e: &dyn std::fmt::Display| ReplayError::Io(e.to_string());
    let manifest: RunManifest = read_document(&dir.join(MANIFEST_FILE)).map_err(|e| io(&e))?;
    let text = std::fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| io(&e))?;
    let config = RunConfig::from_json(&text).map_err(|e| io(&e))?;
    let mode = read_document::<RunResult>(&dir.join(RESULT_FILE)).map(|r| r.mode).unwrap_or_default();
    let steps: Vec<StepRecord> = read_records(dir, Stream::Steps)
        .map_err(|e| io(&e))?
        .into_iter()
        .filter_map(|r| match r {
            TelemetryRecord::Step(s) => Some(s),
            TelemetryRecord::Episode(_) => None,
        })
        .collect();

    let mut out = Replay::default();
    let mut env = make_env(config.task().id(), manifest.seed).map_err(|e| io(&e))?;
    let mut episode = 0u64;
    let mut seen_episode = false;
    let mut i = 0;
    while i < steps.len() {
        let r = &steps[i];
        while episode < r.episode_index {
            env = reset_episode(&env);
            episode += 1;
            seen_episode = false;
        }
        if !seen_episode {
            out.episodes += 1;
            seen_episode = true;
        }
        match mode {
            StepMode::Parallel => {
                let mut j = i;
                let mut actions = BTreeMap::new();
                while j < steps.len()
                    && steps[j].episode_index == r.episode_index
                    && steps[j].step_index == r.step_index
                {
                    actions.insert(steps[j].slot.clone(), steps[j].action);
                    j += 1;
                }
                let (next, transitions) = step_parallel(&env, &actions).map_err(|e| diverged(r, e.to_string()))?;
                for (t, logged) in transitions.iter().zip(&steps[i..j]) {
                    if t.slot != logged.slot || t.reward != logged.reward {
                        return Err(diverged(logged, format!("reward of `{}` differs from the log", logged.slot)));
                    }
                }
                env = next;
                frame(&mut out, &env, episode);
                i = j;
            }
            StepMode::Aec => {
                let (next, t, _) = step_aec(&env, &r.slot, r.action).map_err(|e| diverged(r, e.to_string()))?;
                if t.reward != r.reward {
                    return Err(diverged(r, format!("reward of `{}` differs from the log", r.slot)));
                }
                let cycle_done = next.turn == 0 || next.is_done();
                env = next;
                if cycle_done {
                    frame(&mut out, &env, episode);
                }
                i += 1;
            }
        }
    }
    Ok(out)
}
