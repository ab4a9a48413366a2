//! Built-in grid worlds.
//!
//! `mosaic/Corridor-v1` is a single-agent hallway; `mosaic/TeamTag-2vs2-v1`
//! is a 2v2 tag game on a torus. Both are pure values: stepping returns a new
//! [`EnvState`] and every bit of randomness comes from the ChaCha8 stream
//! stored inside the state. The rules are written out in `docs/envs.md`.

mod corridor;
mod encoding;
mod obs;
mod render;
mod state;
mod teamtag;

use std::collections::BTreeMap;

use mosaic_protocol::ActionSpace;
use serde_json::{json, Map, Value};

pub use encoding::{decode_state, encode_state, STATE_MAGIC, STATE_VERSION};
pub use obs::{serialize_obs, FrameHistory, ObsOptions, ObservationMode};
pub use render::{render, render_ascii, render_rgb, RenderMode, Rendered, TILE};
pub use state::{Dir, EnvState, Task, TeamPartition, Transition};

pub const CORRIDOR: &str = "mosaic/Corridor-v1";
pub const TEAMTAG: &str = "mosaic/TeamTag-2vs2-v1";

pub const TASKS: [&str; 2] = [CORRIDOR, TEAMTAG];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("no action for slot `{0}`")]
    MissingSlot(String),
    #[error("slot `{0}` is not part of this environment")]
    ExtraSlot(String),
    #[error("action {action} is outside the action space of slot `{slot}`")]
    InvalidAction { slot: String, action: u32 },
    #[error("it is `{expected}`'s turn, not `{got}`'s")]
    OutOfTurn { expected: String, got: String },
    #[error("episode is over; reset first")]
    EpisodeOver,
    #[error("modality `{0}` is not supported")]
    UnsupportedModality(String),
    #[error("state decode failed: {0}")]
    Decode(String),
}

/// Creates the initial state of `task_id`. Fully determined by the arguments.
pub fn make_env(task_id: &str, seed: u64) -> Result<EnvState, EnvError> {
    let task = Task::from_id(task_id).ok_or_else(|| EnvError::UnknownTask(task_id.to_string()))?;
    Ok(match task {
        Task::Corridor => corridor::initial(seed),
        Task::TeamTag => teamtag::initial(seed),
    })
}

/// Same seed, next episode index.
pub fn reset_episode(state: &EnvState) -> EnvState {
    let mut next = match state.task {
        Task::Corridor => corridor::initial(state.seed),
        Task::TeamTag => teamtag::initial(state.seed),
    };
    next.episode_index = state.episode_index + 1;
    next
}

/// Advances every slot at once. Transitions come back in canonical slot order.
pub fn step_parallel(
    state: &EnvState,
    actions: &BTreeMap<String, u32>,
) -> Result<(EnvState, Vec<Transition>), EnvError> {
    if state.is_done() {
        return Err(EnvError::EpisodeOver);
    }
    let slots = state.task.slots();
    for key in actions.keys() {
        if !slots.contains(&key.as_str()) {
            return Err(EnvError::ExtraSlot(key.clone()));
        }
    }
    let space = state.task.action_space();
    let mut joint = Vec::with_capacity(slots.len());
    for slot in slots {
        let a = *actions.get(*slot).ok_or_else(|| EnvError::MissingSlot(slot.to_string()))?;
        if !space.contains(a) {
            return Err(EnvError::InvalidAction { slot: slot.to_string(), action: a });
        }
        joint.push(a);
    }
    if state.turn != 0 {
        return Err(EnvError::OutOfTurn { expected: slots[state.turn as usize].to_string(), got: "<all>".to_string() });
    }
    Ok(match state.task {
        Task::Corridor => corridor::step(state, joint[0]),
        Task::TeamTag => teamtag::step_parallel(state, &joint),
    })
}

/// Advances one slot. Turn order cycles through the canonical slot order and
/// `step_index` increases when a cycle completes.
pub fn step_aec(state: &EnvState, slot: &str, action: u32) -> Result<(EnvState, Transition, String), EnvError> {
    if state.is_done() {
        return Err(EnvError::EpisodeOver);
    }
    let slots = state.task.slots();
    let Some(index) = slots.iter().position(|s| *s == slot) else {
        return Err(EnvError::ExtraSlot(slot.to_string()));
    };
    if index != state.turn as usize {
        return Err(EnvError::OutOfTurn { expected: slots[state.turn as usize].to_string(), got: slot.to_string() });
    }
    if !state.task.action_space().contains(action) {
        return Err(EnvError::InvalidAction { slot: slot.to_string(), action });
    }
    let (next, transition) = match state.task {
        Task::Corridor => {
            let (next, mut ts) = corridor::step(state, action);
            (next, ts.remove(0))
        }
        Task::TeamTag => teamtag::step_aec(state, index, action),
    };
    let next_slot = slots[next.turn as usize].to_string();
    Ok((next, transition, next_slot))
}

/// The `env_metadata` document announced in `ready` responses.
pub fn env_metadata(task: Task) -> Map<String, Value> {
    let space = task.action_space();
    let mut m = Map::new();
    m.insert("task_id".into(), json!(task.id()));
    m.insert("slots".into(), json!(task.slots()));
    m.insert("action_space".into(), serde_json::to_value(&space).expect("action space serializes"));
    m.insert("observation_shape".into(), json!(task.observation_shape()));
    m.insert("horizon".into(), json!(task.horizon()));
    m
}

/// Reads an action space back out of `env_metadata`.
pub fn action_space_from_metadata(meta: &Map<String, Value>) -> Option<ActionSpace> {
    let space: ActionSpace = serde_json::from_value(meta.get("action_space")?.clone()).ok()?;
    space.validate().ok()?;
    Some(space)
}
