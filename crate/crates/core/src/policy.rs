//! Native decision rules run by the built-in worker.
//!
//! `greedy` stands in for a frozen RL policy, `scripted_text` for a text
//! agent and `scripted_vision` for a multimodal one. None of them learn.

use mosaic_protocol::{ActionSpace, ObservationPayload, WorkerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    Random,
    Noop,
    Cycle,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Option<BaselineKind> {
        match s {
            "random" => Some(BaselineKind::Random),
            "noop" => Some(BaselineKind::Noop),
            "cycle" => Some(BaselineKind::Cycle),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Noop => "noop",
            BaselineKind::Cycle => "cycle",
        }
    }
}

/// ρ draws uniformly from the slot's stream, ν returns the null action,
/// cycle walks the action indices.
pub fn baseline_action(kind: BaselineKind, space: &ActionSpace, step_index: u64, rng: &mut ChaCha8Rng) -> u32 {
    match kind {
        BaselineKind::Random => rng.random_range(0..space.n),
        BaselineKind::Noop => space.null_action,
        BaselineKind::Cycle => (step_index % space.n as u64) as u32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Baseline(BaselineKind),
    Greedy,
    ScriptedText,
    ScriptedVision,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Option<PolicyKind> {
        if let Some(b) = BaselineKind::parse(s) {
            return Some(PolicyKind::Baseline(b));
        }
        match s {
            "greedy" => Some(PolicyKind::Greedy),
            "scripted_text" => Some(PolicyKind::ScriptedText),
            "scripted_vision" => Some(PolicyKind::ScriptedVision),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Baseline(b) => b.as_str(),
            PolicyKind::Greedy => "greedy",
            PolicyKind::ScriptedText => "scripted_text",
            PolicyKind::ScriptedVision => "scripted_vision",
        }
    }

    pub fn worker_kind(self) -> WorkerKind {
        match self {
            PolicyKind::Baseline(_) => WorkerKind::Baseline,
            PolicyKind::Greedy => WorkerKind::Rl,
            PolicyKind::ScriptedText => WorkerKind::Llm,
            PolicyKind::ScriptedVision => WorkerKind::Vlm,
        }
    }

    pub fn emits_text(self) -> bool {
        matches!(self, PolicyKind::ScriptedText | PolicyKind::ScriptedVision)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Action(u32),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub rng: ChaCha8Rng,
    pub calls: u64,
}

impl Policy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        Policy { kind, rng: ChaCha8Rng::seed_from_u64(seed), calls: 0 }
    }

    pub fn decide(&mut self, obs: &ObservationPayload, space: &ActionSpace) -> Decision {
        let step = self.calls;
        self.calls += 1;
        match self.kind {
            PolicyKind::Baseline(b) => Decision::Action(baseline_action(b, space, step, &mut self.rng)),
            PolicyKind::Greedy => Decision::Action(greedy(obs, space)),
            PolicyKind::ScriptedText => Decision::Text(scripted_text(obs.text.as_deref().unwrap_or(""), space)),
            PolicyKind::ScriptedVision => {
                let frames = obs.frame_count();
                let text = scripted_text(obs.text.as_deref().unwrap_or(""), space);
                Decision::Text(format!("Looked at {frames} frame(s). {text}"))
            }
        }
    }

    /// Advances the stream exactly as `decide` would without using the result.
    /// Keeps replayed steps aligned with the original run.
    pub fn skip(&mut self, space: &ActionSpace) {
        if let PolicyKind::Baseline(BaselineKind::Random) = self.kind {
            let _ = self.rng.random_range(0..space.n);
        }
        self.calls += 1;
    }
}

fn label_or_index(space: &ActionSpace, label: &str, fallback: u32) -> u32 {
    space.index_of(label).unwrap_or(fallback)
}

/// Moves toward the nearest opponent in the egocentric tensor, vertical axis
/// first. On the corridor it heads for the goal.
pub fn greedy(obs: &ObservationPayload, space: &ActionSpace) -> u32 {
    let (Some(shape), Some(t)) = (obs.shape.as_deref(), obs.tensor.as_deref()) else {
        return space.null_action;
    };
    match shape {
        [1, w, 3] => {
            let center = (*w / 2) as i64;
            let goal = (0..*w).find(|c| t[c * 3 + 1] > 0.5);
            // the goal sits at the far end, so out of view means ahead
            match goal.map(|g| g as i64 - center) {
                Some(0) => space.null_action,
                Some(d) if d < 0 => label_or_index(space, "back", 2),
                _ => label_or_index(space, "forward", 1),
            }
        }
        [h, w, 3] => {
            let (ch, cw) = ((*h / 2) as i64, (*w / 2) as i64);
            let mut best: Option<(i64, i64, i64)> = None;
            for r in 0..*h {
                for c in 0..*w {
                    if t[(r * w + c) * 3 + 2] > 0.5 {
                        let (dr, dc) = (r as i64 - ch, c as i64 - cw);
                        let d = dr.abs() + dc.abs();
                        if best.is_none_or(|b| d < b.0) {
                            best = Some((d, dr, dc));
                        }
                    }
                }
            }
            match best {
                Some((_, dr, _)) if dr < 0 => label_or_index(space, "up", 1),
                Some((_, dr, _)) if dr > 0 => label_or_index(space, "down", 2),
                Some((_, _, dc)) if dc < 0 => label_or_index(space, "left", 3),
                Some((_, _, dc)) if dc > 0 => label_or_index(space, "right", 4),
                _ => space.null_action,
            }
        }
        _ => space.null_action,
    }
}

fn opponent_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"You see an opponent ([^.]*)\.").unwrap())
}

fn part_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+) steps? (up|down|left|right)").unwrap())
}

fn goal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"The goal is (\d+) steps? ahead").unwrap())
}

fn say(space: &ActionSpace, reason: &str, fallback_label: &str, fallback_index: u32) -> String {
    let index = label_or_index(space, fallback_label, fallback_index);
    let token = space.label(index).map(str::to_string).unwrap_or_else(|| index.to_string());
    format!("{reason} ACTION: {token}")
}

/// Rule table over the v1 text templates. Output always ends in
/// `ACTION: <label>`.
pub fn scripted_text(text: &str, space: &ActionSpace) -> String {
    if goal_re().is_match(text) {
        return say(space, "The goal is ahead, so I walk toward it.", "forward", 1);
    }
    let mut best: Option<(i64, i64, i64)> = None;
    for cap in opponent_re().captures_iter(text) {
        let (mut dy, mut dx) = (0i64, 0i64);
        for part in part_re().captures_iter(&cap[1]) {
            let n: i64 = part[1].parse().unwrap_or(0);
            match &part[2] {
                "up" => dy = -n,
                "down" => dy = n,
                "left" => dx = -n,
                _ => dx = n,
            }
        }
        let d = dy.abs() + dx.abs();
        if best.is_none_or(|b| d < b.0) {
            best = Some((d, dy, dx));
        }
    }
    match best {
        Some((_, dy, _)) if dy < 0 => say(space, "The nearest opponent is above me.", "up", 1),
        Some((_, dy, _)) if dy > 0 => say(space, "The nearest opponent is below me.", "down", 2),
        Some((_, _, dx)) if dx < 0 => say(space, "The nearest opponent is to my left.", "left", 3),
        Some((_, _, dx)) if dx > 0 => say(space, "The nearest opponent is to my right.", "right", 4),
        _ => say(space, "Nothing to do.", "stay", space.null_action),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corridor_space() -> ActionSpace {
        ActionSpace::labeled(["stay", "forward", "back"], 0).unwrap()
    }

    fn tag_space() -> ActionSpace {
        ActionSpace::labeled(["stay", "up", "down", "left", "right"], 0).unwrap()
    }

    #[test]
    fn cycle_wraps() {
        let space = ActionSpace::new(5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(baseline_action(BaselineKind::Cycle, &space, 7, &mut rng), 2);
    }

    #[test]
    fn noop_is_null_action() {
        let space = ActionSpace::new(5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..10 {
            assert_eq!(baseline_action(BaselineKind::Noop, &space, step, &mut rng), 3);
        }
    }

    #[test]
    fn random_is_roughly_uniform() {
        let space = ActionSpace::new(5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = [0u32; 5];
        for step in 0..10_000 {
            counts[baseline_action(BaselineKind::Random, &space, step, &mut rng) as usize] += 1;
        }
        // sigma = sqrt(10000 * 0.2 * 0.8) = 40
        for c in counts {
            assert!((c as i64 - 2000).abs() <= 120, "{counts:?}");
        }
    }

    #[test]
    fn scripted_text_rules() {
        assert!(scripted_text("You see an opponent 2 steps up and 1 step left.", &tag_space()).ends_with("ACTION: up"));
        assert!(scripted_text("You see an opponent 3 steps down. You see an opponent 1 step right.", &tag_space())
            .ends_with("ACTION: right"));
        assert!(scripted_text("The goal is 2 steps ahead.", &corridor_space()).ends_with("ACTION: forward"));
        assert!(scripted_text("garbage", &tag_space()).ends_with("ACTION: stay"));
    }

    #[test]
    fn greedy_heads_for_goal() {
        let obs =
            ObservationPayload::tensor(vec![1, 5, 3], vec![0., 0., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 1., 0.]);
        assert_eq!(greedy(&obs, &corridor_space()), 1);
    }
}
