use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use mosaic_protocol::Reward;
use serde::Serialize;

use super::records::{TelemetryError, TelemetryRecord, DRAW};
use super::store::{for_each_record, Stream};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryFilter {
    pub episodes: Option<Range<u64>>,
    pub slot: Option<String>,
    pub replica: Option<u32>,
}

impl QueryFilter {
    fn episode(&self, e: u64) -> bool {
        self.episodes.as_ref().is_none_or(|r| r.contains(&e))
    }

    fn replica(&self, r: Option<u32>) -> bool {
        self.replica.is_none_or(|want| r == Some(want))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SlotStats {
    pub return_sum: Reward,
    pub steps: u64,
    /// Steps whose action came from parsing text.
    pub parsed_steps: u64,
    pub fallbacks: u64,
}

impl SlotStats {
    /// Share of text decisions that fell back, or 0 for slots that never
    /// produced text.
    pub fn fallback_rate(&self) -> f64 {
        if self.parsed_steps == 0 {
            0.0
        } else {
            self.fallbacks as f64 / self.parsed_steps as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Aggregates {
    pub episodes: u64,
    pub episode_returns: BTreeMap<u64, BTreeMap<String, Reward>>,
    pub slots: BTreeMap<String, SlotStats>,
    pub wins: BTreeMap<String, u64>,
    pub draws: u64,
    pub terminated: u64,
    pub truncated: u64,
}

/// Streams both logs of a run directory and folds them into aggregates.
/// Memory grows with episodes and slots, never with steps.
pub fn query(dir: &Path, filter: &QueryFilter) -> Result<Aggregates, TelemetryError> {
    if !dir.is_dir() {
        return Err(TelemetryError::UnknownRun(dir.display().to_string()));
    }
    let mut agg = Aggregates::default();
    for_each_record(dir, Stream::Steps, |r| {
        if let TelemetryRecord::Step(s) = r {
            if !filter.episode(s.episode_index) || !filter.replica(s.replica) {
                return Ok(());
            }
            if filter.slot.as_ref().is_some_and(|want| *want != s.slot) {
                return Ok(());
            }
            let st = agg.slots.entry(s.slot.clone()).or_default();
            st.return_sum += s.reward;
            st.steps += 1;
            if let Some(o) = s.parse_outcome {
                st.parsed_steps += 1;
                st.fallbacks += o.is_fallback() as u64;
            }
        }
        Ok(())
    })?;
    for_each_record(dir, Stream::Episodes, |r| {
        if let TelemetryRecord::Episode(e) = r {
            if !filter.episode(e.episode_index) || !filter.replica(e.replica) {
                return Ok(());
            }
            agg.episodes += 1;
            agg.terminated += e.terminated as u64;
            agg.truncated += e.truncated as u64;
            match e.winner.as_deref() {
                Some(DRAW) => agg.draws += 1,
                Some(team) => *agg.wins.entry(team.to_string()).or_insert(0) += 1,
                None => {}
            }
            let totals = match &filter.slot {
                Some(slot) => e.totals.into_iter().filter(|(s, _)| s == slot).collect(),
                None => e.totals,
            };
            agg.episode_returns.insert(e.episode_index, totals);
        }
        Ok(())
    })?;
    Ok(agg)
}
