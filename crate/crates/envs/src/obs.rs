use std::collections::VecDeque;

use mosaic_protocol::{Modality, ObservationPayload, RgbImage};

use crate::corridor;
use crate::render::render_rgb;
use crate::state::{EnvState, Task, CORRIDOR_LEN, TEAMTAG_SIZE};
use crate::EnvError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObservationMode {
    #[default]
    Egocentric,
    VisibleTeammates,
}

impl ObservationMode {
    pub fn parse(s: &str) -> Option<ObservationMode> {
        match s {
            "egocentric" => Some(ObservationMode::Egocentric),
            "visible_teammates" => Some(ObservationMode::VisibleTeammates),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsOptions {
    pub mode: ObservationMode,
    pub max_image_history: u32,
}

impl Default for ObsOptions {
    fn default() -> Self {
        ObsOptions { mode: ObservationMode::Egocentric, max_image_history: 1 }
    }
}

/// Builds the observation of `slot` in the requested modality.
///
/// `text_image` carries only the current frame; [`FrameHistory`] extends it
/// with earlier frames.
pub fn serialize_obs(
    state: &EnvState,
    slot: &str,
    modality: Modality,
    opts: &ObsOptions,
) -> Result<ObservationPayload, EnvError> {
    let index = state.task.slot_index(slot).ok_or_else(|| EnvError::ExtraSlot(slot.to_string()))?;
    Ok(match modality {
        Modality::Tensor => ObservationPayload::tensor(state.task.observation_shape(), tensor(state, index)),
        Modality::Text => ObservationPayload::text(text(state, index, opts.mode)),
        Modality::TextImage => {
            if opts.max_image_history == 0 {
                return Err(EnvError::UnsupportedModality("text_image without image history".into()));
            }
            ObservationPayload::text_image(text(state, index, opts.mode), vec![render_rgb(state)])
        }
        Modality::Image => ObservationPayload::image(render_rgb(state)),
    })
}

fn tensor(state: &EnvState, index: usize) -> Vec<f32> {
    match state.task {
        Task::Corridor => {
            let x = state.positions[0].0 as i32;
            let mut out = vec![0.0; 15];
            for (col, off) in (-2..=2).enumerate() {
                let cell = x + off;
                let base = col * 3;
                if off == 0 {
                    out[base] = 1.0;
                }
                if cell == corridor::goal() as i32 {
                    out[base + 1] = 1.0;
                }
                if !(0..CORRIDOR_LEN as i32).contains(&cell) {
                    out[base + 2] = 1.0;
                }
            }
            out
        }
        Task::TeamTag => {
            let n = TEAMTAG_SIZE as i32;
            let (x, y) = state.positions[index];
            let mut out = vec![0.0; 7 * 7 * 3];
            for row in 0..7 {
                for col in 0..7 {
                    let cx = (x as i32 + col - 3).rem_euclid(n) as u8;
                    let cy = (y as i32 + row - 3).rem_euclid(n) as u8;
                    if let Some(j) = state.occupant((cx, cy)) {
                        let channel = if j == index {
                            0
                        } else if j / 2 == index / 2 {
                            1
                        } else {
                            2
                        };
                        out[((row * 7 + col) * 3) as usize + channel] = 1.0;
                    }
                }
            }
            out
        }
    }
}

fn steps(n: i32) -> String {
    if n == 1 {
        "1 step".to_string()
    } else {
        format!("{n} steps")
    }
}

/// Shortest displacement on the torus, in `-3..=3`.
fn wrap(d: i32) -> i32 {
    let n = TEAMTAG_SIZE as i32;
    let d = d.rem_euclid(n);
    if d > n / 2 {
        d - n
    } else {
        d
    }
}

pub(crate) fn relative(from: (u8, u8), to: (u8, u8)) -> String {
    let dx = wrap(to.0 as i32 - from.0 as i32);
    let dy = wrap(to.1 as i32 - from.1 as i32);
    let mut parts = Vec::new();
    if dy != 0 {
        parts.push(format!("{} {}", steps(dy.abs()), if dy < 0 { "up" } else { "down" }));
    }
    if dx != 0 {
        parts.push(format!("{} {}", steps(dx.abs()), if dx < 0 { "left" } else { "right" }));
    }
    parts.join(" and ")
}

fn text(state: &EnvState, index: usize, mode: ObservationMode) -> String {
    match state.task {
        Task::Corridor => {
            let x = state.positions[0].0;
            let ahead = corridor::goal() - x;
            if ahead == 0 {
                format!("You are in a corridor at cell {x} of {CORRIDOR_LEN}. You are at the goal.")
            } else {
                format!(
                    "You are in a corridor at cell {x} of {CORRIDOR_LEN}. The goal is {} ahead.",
                    steps(ahead as i32)
                )
            }
        }
        Task::TeamTag => {
            let slots = state.task.slots();
            let team = state.task.team_of(slots[index]).expect("slot has a team");
            let mut out = format!(
                "You are {} on the {team} team. Score: green {}, blue {}.",
                slots[index], state.scores[1], state.scores[0]
            );
            for j in 0..slots.len() {
                if j == index {
                    continue;
                }
                let who = if j / 2 == index / 2 {
                    if mode == ObservationMode::Egocentric {
                        continue;
                    }
                    "a teammate"
                } else {
                    "an opponent"
                };
                out.push_str(&format!(" You see {who} {}.", relative(state.positions[index], state.positions[j])));
            }
            out
        }
    }
}

/// Bounded buffer of rendered frames for multimodal slots.
#[derive(Debug, Clone)]
pub struct FrameHistory {
    capacity: usize,
    frames: VecDeque<RgbImage>,
}

impl FrameHistory {
    pub fn new(max_image_history: u32) -> Self {
        FrameHistory { capacity: max_image_history as usize, frames: VecDeque::new() }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Records the current frame and returns the observation with up to
    /// `max_image_history` frames, oldest first.
    pub fn observe(
        &mut self,
        state: &EnvState,
        slot: &str,
        modality: Modality,
        opts: &ObsOptions,
    ) -> Result<ObservationPayload, EnvError> {
        let mut obs = serialize_obs(state, slot, modality, opts)?;
        if modality == Modality::TextImage && self.capacity > 0 {
            let current = obs.images.take().unwrap_or_default();
            self.frames.extend(current);
            while self.frames.len() > self.capacity {
                self.frames.pop_front();
            }
            obs.images = Some(self.frames.iter().cloned().collect());
        }
        Ok(obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_directions() {
        assert_eq!(relative((3, 3), (3, 1)), "2 steps up");
        assert_eq!(relative((3, 3), (2, 5)), "2 steps down and 1 step left");
        assert_eq!(relative((0, 0), (6, 0)), "1 step left");
    }
}
