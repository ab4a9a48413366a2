use mosaic_protocol::{ActionSpace, ObservationPayload, Reward};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::{CORRIDOR, TEAMTAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Corridor,
    TeamTag,
}

pub(crate) const CORRIDOR_LEN: u8 = 5;
pub(crate) const TEAMTAG_SIZE: u8 = 7;
pub(crate) const TEAMTAG_HORIZON: u32 = 200;

const CORRIDOR_SLOTS: [&str; 1] = ["agent_0"];
const TEAMTAG_SLOTS: [&str; 4] = ["blue_0", "blue_1", "green_0", "green_1"];

impl Task {
    pub fn from_id(id: &str) -> Option<Task> {
        match id {
            CORRIDOR => Some(Task::Corridor),
            TEAMTAG => Some(Task::TeamTag),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Task::Corridor => CORRIDOR,
            Task::TeamTag => TEAMTAG,
        }
    }

    /// Agent slots in canonical (lexicographic) order.
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            Task::Corridor => &CORRIDOR_SLOTS,
            Task::TeamTag => &TEAMTAG_SLOTS,
        }
    }

    pub fn slot_index(self, slot: &str) -> Option<usize> {
        self.slots().iter().position(|s| *s == slot)
    }

    /// Team names in canonical order; index into [`EnvState::scores`].
    pub fn teams(self) -> &'static [&'static str] {
        match self {
            Task::Corridor => &["solo"],
            Task::TeamTag => &["blue", "green"],
        }
    }

    pub fn team_index(self, slot_index: usize) -> usize {
        match self {
            Task::Corridor => 0,
            Task::TeamTag => slot_index / 2,
        }
    }

    pub fn team_of(self, slot: &str) -> Option<&'static str> {
        self.slot_index(slot).map(|i| self.teams()[self.team_index(i)])
    }

    pub fn partition(self) -> Option<TeamPartition> {
        match self {
            Task::Corridor => None,
            Task::TeamTag => Some(TeamPartition {
                team_a: vec!["green_0".into(), "green_1".into()],
                team_b: vec!["blue_0".into(), "blue_1".into()],
            }),
        }
    }

    pub fn action_space(self) -> ActionSpace {
        let space = match self {
            Task::Corridor => ActionSpace::labeled(["stay", "forward", "back"], 0),
            Task::TeamTag => ActionSpace::labeled(["stay", "up", "down", "left", "right"], 0),
        };
        space.expect("built-in action spaces are valid")
    }

    pub fn dims(self) -> (u8, u8) {
        match self {
            Task::Corridor => (CORRIDOR_LEN, 1),
            Task::TeamTag => (TEAMTAG_SIZE, TEAMTAG_SIZE),
        }
    }

    pub fn horizon(self) -> u32 {
        match self {
            Task::Corridor => 4 * CORRIDOR_LEN as u32,
            Task::TeamTag => TEAMTAG_HORIZON,
        }
    }

    /// Tensor observation shape `[view_h, view_w, channels]`.
    pub fn observation_shape(self) -> Vec<usize> {
        match self {
            Task::Corridor => vec![1, 5, 3],
            Task::TeamTag => vec![7, 7, 3],
        }
    }
}

/// Two disjoint teams covering every slot. Team A is green.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeamPartition {
    pub team_a: Vec<String>,
    pub team_b: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    Up,
    Down,
    Left,
    Right,
}

impl Dir {
    pub(crate) fn code(self) -> u8 {
        match self {
            Dir::Up => 0,
            Dir::Down => 1,
            Dir::Left => 2,
            Dir::Right => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Dir> {
        Some(match code {
            0 => Dir::Up,
            1 => Dir::Down,
            2 => Dir::Left,
            3 => Dir::Right,
            _ => return None,
        })
    }
}

/// Complete environment state. Positions, orientations and the per-step
/// `immune` flags are indexed by canonical slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvState {
    pub task: Task,
    pub seed: u64,
    pub width: u8,
    pub height: u8,
    pub positions: Vec<(u8, u8)>,
    pub orientations: Vec<Dir>,
    pub immune: Vec<bool>,
    pub step_index: u32,
    pub episode_index: u32,
    /// AEC turn holder; always 0 between parallel steps.
    pub turn: u8,
    pub terminated: bool,
    pub truncated: bool,
    pub scores: Vec<i32>,
    pub rng: ChaCha8Rng,
}

impl EnvState {
    pub(crate) fn blank(task: Task, seed: u64) -> EnvState {
        let n = task.slots().len();
        let (width, height) = task.dims();
        EnvState {
            task,
            seed,
            width,
            height,
            positions: vec![(0, 0); n],
            orientations: vec![Dir::Right; n],
            immune: vec![false; n],
            step_index: 0,
            episode_index: 0,
            turn: 0,
            terminated: false,
            truncated: false,
            scores: vec![0; task.teams().len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn task_id(&self) -> &'static str {
        self.task.id()
    }

    pub fn slots(&self) -> &'static [&'static str] {
        self.task.slots()
    }

    pub fn is_done(&self) -> bool {
        self.terminated || self.truncated
    }

    pub fn position(&self, slot: &str) -> Option<(u8, u8)> {
        self.task.slot_index(slot).map(|i| self.positions[i])
    }

    pub fn score(&self, team: &str) -> Option<i32> {
        self.task.teams().iter().position(|t| *t == team).map(|i| self.scores[i])
    }

    /// Team with the strictly higher score, `None` for a draw.
    pub fn winner(&self) -> Option<&'static str> {
        let teams = self.task.teams();
        if teams.len() != 2 || self.scores[0] == self.scores[1] {
            return None;
        }
        Some(if self.scores[0] > self.scores[1] { teams[0] } else { teams[1] })
    }

    pub(crate) fn occupant(&self, cell: (u8, u8)) -> Option<usize> {
        self.positions.iter().position(|p| *p == cell)
    }
}

/// Outcome of one step for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub slot: String,
    pub observation: ObservationPayload,
    pub reward: Reward,
    pub terminated: bool,
    pub truncated: bool,
    pub info: Map<String, Value>,
}
