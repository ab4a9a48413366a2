use mosaic_protocol::Reward;
use serde_json::{json, Map};

use crate::obs::{serialize_obs, ObsOptions};
use crate::state::{Dir, EnvState, Task, Transition, CORRIDOR_LEN};

pub(crate) const FORWARD: u32 = 1;
pub(crate) const BACK: u32 = 2;

pub(crate) fn goal() -> u8 {
    CORRIDOR_LEN - 1
}

pub(crate) fn initial(seed: u64) -> EnvState {
    EnvState::blank(Task::Corridor, seed)
}

pub(crate) fn step(state: &EnvState, action: u32) -> (EnvState, Vec<Transition>) {
    let mut next = state.clone();
    let (x, _) = next.positions[0];
    let x = match action {
        FORWARD => (x + 1).min(goal()),
        BACK => x.saturating_sub(1),
        _ => x,
    };
    next.positions[0] = (x, 0);
    match action {
        FORWARD => next.orientations[0] = Dir::Right,
        BACK => next.orientations[0] = Dir::Left,
        _ => {}
    }
    next.step_index += 1;
    let mut reward = Reward::ZERO;
    if x == goal() {
        reward = Reward::ONE;
        next.terminated = true;
        next.scores[0] += 1;
    } else if next.step_index >= Task::Corridor.horizon() {
        next.truncated = true;
    }
    let mut info = Map::new();
    info.insert("position".into(), json!(x));
    let observation = serialize_obs(&next, "agent_0", mosaic_protocol::Modality::Tensor, &ObsOptions::default())
        .expect("tensor is always supported");
    let t = Transition {
        slot: "agent_0".into(),
        observation,
        reward,
        terminated: next.terminated,
        truncated: next.truncated,
        info,
    };
    (next, vec![t])
}
