use mosaic_protocol::{Modality, Reward};
use rand::Rng;
use serde_json::{json, Map};

use crate::obs::{serialize_obs, ObsOptions};
use crate::state::{Dir, EnvState, Task, Transition, TEAMTAG_HORIZON, TEAMTAG_SIZE};

pub(crate) const STAY: u32 = 0;

fn dir_of(action: u32) -> Option<Dir> {
    match action {
        1 => Some(Dir::Up),
        2 => Some(Dir::Down),
        3 => Some(Dir::Left),
        4 => Some(Dir::Right),
        _ => None,
    }
}

pub(crate) fn offset((x, y): (u8, u8), dir: Dir) -> (u8, u8) {
    let n = TEAMTAG_SIZE;
    match dir {
        Dir::Up => (x, (y + n - 1) % n),
        Dir::Down => (x, (y + 1) % n),
        Dir::Left => ((x + n - 1) % n, y),
        Dir::Right => ((x + 1) % n, y),
    }
}

fn free_cell(state: &mut EnvState) -> (u8, u8) {
    let n = TEAMTAG_SIZE;
    loop {
        let i: u8 = state.rng.random_range(0..n * n);
        let cell = (i % n, i / n);
        if state.occupant(cell).is_none() {
            return cell;
        }
    }
}

pub(crate) fn initial(seed: u64) -> EnvState {
    let mut s = EnvState::blank(Task::TeamTag, seed);
    s.positions = vec![(u8::MAX, u8::MAX); 4];
    for i in 0..4 {
        s.positions[i] = free_cell(&mut s);
    }
    // blue faces down toward the middle, green faces up
    s.orientations = vec![Dir::Down, Dir::Down, Dir::Up, Dir::Up];
    s
}

fn opponents(a: usize, b: usize) -> bool {
    a / 2 != b / 2
}

/// Tags `victim`, moving it to a fresh cell drawn from the state's stream.
fn tag(state: &mut EnvState, tagger: usize, victim: usize, rewards: &mut [i64; 4]) {
    rewards[tagger] += 1;
    rewards[victim] -= 1;
    state.scores[tagger / 2] += 1;
    state.scores[victim / 2] -= 1;
    let target = state.positions[victim];
    state.positions[victim] = (u8::MAX, u8::MAX);
    state.positions[tagger] = target;
    state.positions[victim] = free_cell(state);
    state.immune[victim] = true;
}

pub(crate) fn step_parallel(state: &EnvState, actions: &[u32]) -> (EnvState, Vec<Transition>) {
    let mut next = state.clone();
    next.immune = vec![false; 4];
    let mut rewards = [0i64; 4];
    let mut tagged: Vec<Option<usize>> = vec![None; 4];
    for i in 0..4 {
        if next.immune[i] {
            continue;
        }
        let Some(dir) = dir_of(actions[i]) else { continue };
        next.orientations[i] = dir;
        let target = offset(next.positions[i], dir);
        match next.occupant(target) {
            None => next.positions[i] = target,
            Some(j) if opponents(i, j) && actions[j] == STAY && !next.immune[j] => {
                tag(&mut next, i, j, &mut rewards);
                tagged[i] = Some(j);
            }
            Some(_) => {}
        }
    }
    next.step_index += 1;
    if next.step_index >= TEAMTAG_HORIZON {
        next.truncated = true;
    }
    let transitions = (0..4).map(|i| transition(&next, i, rewards[i], tagged[i])).collect();
    next.immune = vec![false; 4];
    (next, transitions)
}

pub(crate) fn step_aec(state: &EnvState, i: usize, action: u32) -> (EnvState, Transition) {
    let mut next = state.clone();
    if i == 0 {
        next.immune = vec![false; 4];
    }
    let mut rewards = [0i64; 4];
    let mut tagged = None;
    if let (false, Some(dir)) = (next.immune[i], dir_of(action)) {
        next.orientations[i] = dir;
        let target = offset(next.positions[i], dir);
        match next.occupant(target) {
            None => next.positions[i] = target,
            Some(j) if opponents(i, j) && !next.immune[j] => {
                tag(&mut next, i, j, &mut rewards);
                tagged = Some(j);
            }
            Some(_) => {}
        }
    }
    next.turn = ((i + 1) % 4) as u8;
    if next.turn == 0 {
        next.step_index += 1;
        next.immune = vec![false; 4];
        if next.step_index >= TEAMTAG_HORIZON {
            next.truncated = true;
        }
    }
    let t = transition(&next, i, rewards[i], tagged);
    (next, t)
}

fn transition(state: &EnvState, i: usize, reward: i64, tagged: Option<usize>) -> Transition {
    let slot = Task::TeamTag.slots()[i];
    let mut info = Map::new();
    if let Some(j) = tagged {
        info.insert("tagged".into(), json!(Task::TeamTag.slots()[j]));
    }
    Transition {
        slot: slot.to_string(),
        observation: serialize_obs(state, slot, Modality::Tensor, &ObsOptions::default())
            .expect("tensor is always supported"),
        reward: Reward::from_int(reward),
        terminated: false,
        truncated: state.truncated,
        info,
    }
}
