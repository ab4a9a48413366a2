use std::collections::BTreeMap;

use mosaic_envs::{make_env, reset_episode, step_parallel, FrameHistory, ObsOptions, Task};
use mosaic_protocol::Reward;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::winner_label;
use crate::operator::phi::{parse_action, ParsePolicy};
use crate::operator::{paradigm_modality, slot_seed};
use crate::par;
use crate::policy::{Decision, Policy, PolicyKind};
use crate::telemetry::DRAW;

/// Outcome of an in-process rollout: no worker processes, no telemetry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RolloutSummary {
    pub seed: u64,
    pub episodes: u64,
    pub steps: u64,
    pub slot_returns: BTreeMap<String, Reward>,
    pub wins: BTreeMap<String, u64>,
    pub draws: u64,
}

/// Plays `episodes` episodes of `task` with built-in policies. Policies and
/// fallbacks are seeded per slot and episode exactly as bound operators are.
pub fn rollout(task: Task, policies: &BTreeMap<String, PolicyKind>, seed: u64, episodes: u64) -> RolloutSummary {
    let space = task.action_space();
    let parse = ParsePolicy::default();
    let mut summary = RolloutSummary {
        seed,
        episodes,
        steps: 0,
        slot_returns: task.slots().iter().map(|s| (s.to_string(), Reward::ZERO)).collect(),
        wins: BTreeMap::new(),
        draws: 0,
    };
    let mut env = make_env(task.id(), seed).expect("built-in task");
    for episode in 0..episodes {
        if episode > 0 {
            env = reset_episode(&env);
        }
        let mut agents: Vec<(String, Policy, ChaCha8Rng, FrameHistory)> = task
            .slots()
            .iter()
            .map(|slot| {
                let kind =
                    policies.get(*slot).copied().unwrap_or(PolicyKind::Baseline(crate::policy::BaselineKind::Noop));
                let s = slot_seed(seed, episode, slot);
                let mut fallback = ChaCha8Rng::seed_from_u64(s);
                fallback.set_stream(1);
                (slot.to_string(), Policy::new(kind, s), fallback, FrameHistory::new(1))
            })
            .collect();
        while !env.is_done() {
            let mut actions = BTreeMap::new();
            for (slot, policy, fallback, frames) in &mut agents {
                let modality = paradigm_modality(policy.kind.worker_kind());
                let obs = frames.observe(&env, slot, modality, &ObsOptions::default()).expect("valid slot");
                let action = match policy.decide(&obs, &space) {
                    Decision::Action(a) => a,
                    Decision::Text(t) => {
                        parse_action(&t, &space, &parse, fallback).map_or(space.null_action, |(a, _)| a)
                    }
                };
                actions.insert(slot.clone(), action);
            }
            let (next, transitions) = step_parallel(&env, &actions).expect("valid joint action");
            for t in transitions {
                *summary.slot_returns.get_mut(&t.slot).expect("known slot") += t.reward;
            }
            summary.steps += 1;
            env = next;
        }
        match winner_label(&env).as_deref() {
            Some(DRAW) => summary.draws += 1,
            Some(team) => *summary.wins.entry(team.to_string()).or_insert(0) += 1,
            None => {}
        }
    }
    summary
}

/// One rollout per seed, fanned out over the pool.
pub fn rollouts(
    task: Task,
    policies: &BTreeMap<String, PolicyKind>,
    seeds: &[u64],
    episodes: u64,
) -> Vec<RolloutSummary> {
    par::map(seeds, |s| rollout(task, policies, *s, episodes))
}

/// Sequential twin of [`rollouts`].
pub fn rollouts_seq(
    task: Task,
    policies: &BTreeMap<String, PolicyKind>,
    seeds: &[u64],
    episodes: u64,
) -> Vec<RolloutSummary> {
    par::map_seq(seeds, |s| rollout(task, policies, *s, episodes))
}
