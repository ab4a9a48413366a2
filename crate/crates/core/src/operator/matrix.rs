//! Experiment matrices: the adversarial (A1–A7) and cooperative (C1–C8)
//! team compositions on a two-team task.

use std::collections::BTreeMap;
use std::fmt;

use mosaic_envs::Task;
use mosaic_protocol::WorkerKind;

use super::config::{RunConfig, WorkerAssignment};
use crate::policy::BaselineKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Adversarial,
    Cooperative,
}

impl Family {
    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "adversarial" => Some(Family::Adversarial),
            "cooperative" => Some(Family::Cooperative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Adversarial => "adversarial",
            Family::Cooperative => "cooperative",
        }
    }
}

/// One member of a team composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Member {
    Rl,
    /// Frozen RL policy trained alongside its teammate.
    RlCoTrained,
    Llm,
    Vlm,
    Human,
    Random,
    Noop,
}

impl Member {
    pub fn paradigm(self) -> WorkerKind {
        match self {
            Member::Rl | Member::RlCoTrained => WorkerKind::Rl,
            Member::Llm => WorkerKind::Llm,
            Member::Vlm => WorkerKind::Vlm,
            Member::Human => WorkerKind::Human,
            Member::Random | Member::Noop => WorkerKind::Baseline,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Member::Rl => "rl",
            Member::RlCoTrained => "rl_co_trained",
            Member::Llm => "llm",
            Member::Vlm => "vlm",
            Member::Human => "human",
            Member::Random => "random",
            Member::Noop => "noop",
        }
    }
}

impl fmt::Display for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Agents of each paradigm available to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pools {
    pub rl: u32,
    pub llm: u32,
    pub vlm: u32,
    pub human: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixSpec {
    pub family: Family,
    pub task: Task,
    pub n: u32,
    pub team_sizes: (u32, u32),
    pub pools: Pools,
}

impl MatrixSpec {
    /// Four agents, two per team, every paradigm available for every seat.
    pub fn standard(family: Family) -> Self {
        MatrixSpec {
            family,
            task: Task::TeamTag,
            n: 4,
            team_sizes: (2, 2),
            pools: Pools { rl: 4, llm: 4, vlm: 4, human: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixRow {
    pub id: &'static str,
    pub team_a: [Member; 2],
    pub team_b: [Member; 2],
    pub purpose: &'static str,
}

use Member::*;

const ADVERSARIAL: [MatrixRow; 7] = [
    MatrixRow { id: "A1", team_a: [Rl, Rl], team_b: [Rl, Rl], purpose: "single-paradigm reference, rl" },
    MatrixRow { id: "A2", team_a: [Llm, Llm], team_b: [Llm, Llm], purpose: "single-paradigm reference, llm" },
    MatrixRow { id: "A3", team_a: [Vlm, Vlm], team_b: [Vlm, Vlm], purpose: "single-paradigm reference, vlm" },
    MatrixRow { id: "A4", team_a: [Rl, Rl], team_b: [Llm, Llm], purpose: "rl against llm" },
    MatrixRow { id: "A5", team_a: [Rl, Rl], team_b: [Vlm, Vlm], purpose: "rl against vlm" },
    MatrixRow { id: "A6", team_a: [Llm, Llm], team_b: [Vlm, Vlm], purpose: "llm against vlm" },
    MatrixRow { id: "A7", team_a: [Rl, Rl], team_b: [Random, Random], purpose: "sanity, rl against uniform random" },
];

const COOPERATIVE: [MatrixRow; 8] = [
    MatrixRow { id: "C1", team_a: [Rl, Llm], team_b: [Rl, Random], purpose: "llm teammate versus random teammate" },
    MatrixRow { id: "C2", team_a: [Rl, Llm], team_b: [Rl, Noop], purpose: "llm teammate versus idle teammate" },
    MatrixRow { id: "C3", team_a: [Rl, Vlm], team_b: [Rl, Random], purpose: "vlm teammate versus random teammate" },
    MatrixRow { id: "C4", team_a: [Rl, Vlm], team_b: [Rl, Noop], purpose: "vlm teammate versus idle teammate" },
    MatrixRow { id: "C5", team_a: [Rl, Rl], team_b: [Rl, Rl], purpose: "independently trained rl pair" },
    MatrixRow {
        id: "C6",
        team_a: [Rl, Llm],
        team_b: [RlCoTrained, RlCoTrained],
        purpose: "zero-shot llm teaming against co-trained rl",
    },
    MatrixRow {
        id: "C7",
        team_a: [Rl, Vlm],
        team_b: [RlCoTrained, RlCoTrained],
        purpose: "zero-shot vlm teaming against co-trained rl",
    },
    MatrixRow { id: "C8", team_a: [Rl, Llm], team_b: [Rl, Vlm], purpose: "llm teammate against vlm teammate" },
];

pub fn rows(family: Family) -> &'static [MatrixRow] {
    match family {
        Family::Adversarial => &ADVERSARIAL,
        Family::Cooperative => &COOPERATIVE,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MatrixError {
    #[error("matrix needs {needed} agents in teams of {team_sizes:?} on {task}, spec asks for {n} in {asked:?}")]
    Shape { needed: u32, team_sizes: (u32, u32), task: &'static str, n: u32, asked: (u32, u32) },
    #[error("infeasible with the given pools, blocked rows: {}", .blocked.join(", "))]
    Infeasible { blocked: Vec<String> },
}

impl MatrixRow {
    fn needs(&self) -> BTreeMap<WorkerKind, u32> {
        let mut m = BTreeMap::new();
        for member in self.team_a.iter().chain(&self.team_b) {
            if member.paradigm() != WorkerKind::Baseline {
                *m.entry(member.paradigm()).or_insert(0) += 1;
            }
        }
        m
    }

    fn feasible(&self, pools: &Pools) -> bool {
        self.needs().into_iter().all(|(kind, count)| {
            let available = match kind {
                WorkerKind::Rl => pools.rl,
                WorkerKind::Llm => pools.llm,
                WorkerKind::Vlm => pools.vlm,
                WorkerKind::Human => pools.human,
                WorkerKind::Baseline => u32::MAX,
            };
            count <= available
        })
    }

    /// Mixed-paradigm teams play zero-shot: no member was trained with its
    /// partner.
    pub fn is_zero_shot(&self) -> bool {
        let mixed = |t: &[Member; 2]| t[0].paradigm() != t[1].paradigm();
        mixed(&self.team_a) || mixed(&self.team_b)
    }

    pub fn is_cross_paradigm(&self) -> bool {
        let kinds = |t: &[Member; 2]| {
            let mut k: Vec<WorkerKind> = t.iter().map(|m| m.paradigm()).collect();
            k.sort();
            k
        };
        kinds(&self.team_a) != kinds(&self.team_b)
    }
}

fn assignment(member: Member, family: Family) -> WorkerAssignment {
    let a = WorkerAssignment::new(member.paradigm());
    match member {
        Rl => {
            let a = a.frozen(family == Family::Cooperative);
            if family == Family::Cooperative {
                a.with("training", "solo")
            } else {
                a
            }
        }
        RlCoTrained => a.frozen(true).with("training", "co_trained"),
        Random => a.with("kind", BaselineKind::Random.as_str()),
        Noop => a.with("kind", BaselineKind::Noop.as_str()),
        Llm | Vlm | Human => a,
    }
}

/// Expands a spec into one run config per row, in row order. Team A takes
/// the task's first partition.
pub fn build_matrix(spec: &MatrixSpec) -> Result<Vec<RunConfig>, MatrixError> {
    let partition = spec.task.partition();
    let shape_ok = partition.as_ref().is_some_and(|p| {
        spec.n == spec.task.slots().len() as u32
            && spec.team_sizes == (p.team_a.len() as u32, p.team_b.len() as u32)
            && spec.team_sizes == (2, 2)
    });
    let Some(partition) = partition.filter(|_| shape_ok) else {
        return Err(MatrixError::Shape {
            needed: 4,
            team_sizes: (2, 2),
            task: spec.task.id(),
            n: spec.n,
            asked: spec.team_sizes,
        });
    };
    let rows = rows(spec.family);
    let blocked: Vec<String> = rows.iter().filter(|r| !r.feasible(&spec.pools)).map(|r| r.id.to_string()).collect();
    if !blocked.is_empty() {
        return Err(MatrixError::Infeasible { blocked });
    }
    Ok(rows
        .iter()
        .map(|row| {
            let mut player_workers = BTreeMap::new();
            for (slot, member) in partition.team_a.iter().zip(row.team_a) {
                player_workers.insert(slot.clone(), assignment(member, spec.family));
            }
            for (slot, member) in partition.team_b.iter().zip(row.team_b) {
                player_workers.insert(slot.clone(), assignment(member, spec.family));
            }
            let mut tags = vec![spec.family.as_str()];
            if row.is_cross_paradigm() {
                tags.push("cross_paradigm");
            }
            if row.is_zero_shot() {
                tags.push("zero_shot");
            }
            RunConfig {
                operator_id: row.id.to_string(),
                env_name: "mosaic".into(),
                task: spec.task.id().into(),
                player_workers,
                seed: None,
                episodes: None,
                max_steps: None,
                description: Some(format!("{} [{}]", row.purpose, tags.join(","))),
            }
        })
        .collect())
}

/// Sorted members of each team of a config, team A first.
pub fn team_composition(config: &RunConfig) -> Option<(Vec<Member>, Vec<Member>)> {
    let partition = config.task().partition()?;
    let member = |slot: &String| -> Option<Member> {
        let a = config.player_workers.get(slot)?;
        Some(match a.worker_type {
            WorkerKind::Rl if a.settings.get("training").and_then(|v| v.as_str()) == Some("co_trained") => RlCoTrained,
            WorkerKind::Rl => Rl,
            WorkerKind::Llm => Llm,
            WorkerKind::Vlm => Vlm,
            WorkerKind::Human => Human,
            WorkerKind::Baseline => match a.baseline_kind()? {
                BaselineKind::Noop => Noop,
                _ => Random,
            },
        })
    };
    let mut a: Vec<Member> = partition.team_a.iter().map(member).collect::<Option<_>>()?;
    let mut b: Vec<Member> = partition.team_b.iter().map(member).collect::<Option<_>>()?;
    a.sort();
    b.sort();
    Some((a, b))
}
