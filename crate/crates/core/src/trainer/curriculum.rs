//! Per-environment terrain difficulty progression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{TerrainKind, MAX_LEVEL, MIN_LEVEL};

/// Outcome of one finished episode as seen by the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeResult {
    pub env: usize,
    pub level: u32,
    pub traversed: bool,
}

/// Next level after an episode at `level`. Flat ground has the single level 0.
pub fn next_level(kind: TerrainKind, level: u32, traversed: bool) -> u32 {
    if kind == TerrainKind::Flat {
        return 0;
    }
    let level = level.clamp(MIN_LEVEL, MAX_LEVEL);
    if traversed {
        (level + 1).min(MAX_LEVEL)
    } else {
        level
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumState {
    pub kinds: Vec<TerrainKind>,
    pub levels: Vec<u32>,
    /// Highest level each environment may reach.
    pub max_levels: Vec<u32>,
    /// Successful traversals per environment.
    pub traversals: Vec<u64>,
    pub episodes: Vec<u64>,
    /// Training iterations so far; drives the tolerance schedule.
    pub iteration: u64,
}

impl CurriculumState {
    /// Every environment starts at the easiest level of its terrain kind.
    pub fn new(kinds: Vec<TerrainKind>) -> Self {
        let levels = kinds
            .iter()
            .map(|k| if *k == TerrainKind::Flat { 0 } else { MIN_LEVEL })
            .collect();
        let n = kinds.len();
        CurriculumState {
            kinds,
            levels,
            max_levels: vec![MAX_LEVEL; n],
            traversals: vec![0; n],
            episodes: vec![0; n],
            iteration: 0,
        }
    }

    /// Splits `num_envs` as evenly as possible across `kinds`, in order.
    pub fn split(kinds: &[TerrainKind], num_envs: usize) -> Self {
        let assigned = if kinds.is_empty() {
            vec![TerrainKind::Flat; num_envs]
        } else {
            (0..num_envs).map(|e| kinds[e * kinds.len() / num_envs.max(1)]).collect()
        };
        Self::new(assigned)
    }

    /// Like [`Self::split`], with each kind starting at `range.0` and capped at `range.1`.
    pub fn split_ranges(ranges: &[(TerrainKind, u32, u32)], num_envs: usize) -> Self {
        let kinds: Vec<TerrainKind> = ranges.iter().map(|r| r.0).collect();
        let mut s = Self::split(&kinds, num_envs);
        if ranges.is_empty() {
            return s;
        }
        for e in 0..num_envs {
            let (kind, lo, hi) = ranges[e * ranges.len() / num_envs.max(1)];
            if kind != TerrainKind::Flat {
                s.levels[e] = lo.clamp(MIN_LEVEL, MAX_LEVEL);
                s.max_levels[e] = hi.clamp(s.levels[e], MAX_LEVEL);
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Applies one finished episode.
    pub fn record(&mut self, r: &EpisodeResult) -> Result<()> {
        if r.env >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "episode result for environment {} of {}",
                r.env,
                self.len()
            )));
        }
        let kind = self.kinds[r.env];
        let next = next_level(kind, r.level, r.traversed).min(self.max_levels[r.env]);
        self.levels[r.env] = next.max(self.levels[r.env]);
        self.episodes[r.env] += 1;
        self.traversals[r.env] += u64::from(r.traversed);
        Ok(())
    }

    /// Mean level per terrain kind present, in [`TerrainKind::ALL`] order.
    pub fn mean_levels(&self) -> Vec<(TerrainKind, f64)> {
        TerrainKind::ALL
            .into_iter()
            .filter_map(|kind| {
                let lv: Vec<f64> = self
                    .kinds
                    .iter()
                    .zip(&self.levels)
                    .filter(|(k, _)| **k == kind)
                    .map(|(_, l)| f64::from(*l))
                    .collect();
                (!lv.is_empty()).then(|| (kind, lv.iter().sum::<f64>() / lv.len() as f64))
            })
            .collect()
    }
}

/// Applies finished-episode results, then advances the iteration counter once.
pub fn curriculum_update(state: &mut CurriculumState, results: &[EpisodeResult]) -> Result<()> {
    for r in results {
        state.record(r)?;
    }
    state.iteration += 1;
    Ok(())
}
