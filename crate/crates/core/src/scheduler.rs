//! Two-layer control loop: greedy coverage-constrained vehicle pruning on a
//! slow epoch clock, and a per-request offloading decision delegated to the
//! learned policy for scheduled vehicles. Unscheduled vehicles back off.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{grid_area, CoverageGrid, GeometryError};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no coverage snapshot for any vehicle")]
    EmptySnapshot,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Minimum fraction of the total achievable coverage that scheduled
    /// vehicles must jointly retain.
    pub beta: f64,
    pub epoch_period_ms: i64,
    pub backoff_ms: i64,
    /// Recompute average overlaps over the shrinking active set each pruning
    /// iteration; `false` freezes them at the full-set values.
    pub recompute_overlap: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { beta: 0.8, epoch_period_ms: 1000, backoff_ms: 500, recompute_overlap: true }
    }
}

/// Jaccard overlap of two coverage grids; 0 when the union is empty.
pub fn overlap_ratio(ci: &CoverageGrid, cj: &CoverageGrid) -> Result<f64, GeometryError> {
    let union = grid_area(&ci.union(cj)?);
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(grid_area(&ci.intersection(cj)?) / union)
}

/// Complete graph of pairwise coverage overlap ratios.
#[derive(Debug, Clone)]
pub struct OverlapGraph {
    pub ids: Vec<u32>,
    /// Symmetric matrix indexed by position in `ids`.
    pub ratios: Vec<Vec<f64>>,
}

impl OverlapGraph {
    pub fn build(coverages: &BTreeMap<u32, CoverageGrid>) -> Result<Self, SchedulerError> {
        let ids: Vec<u32> = coverages.keys().copied().collect();
        let n = ids.len();
        let mut ratios = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let o = overlap_ratio(&coverages[&ids[i]], &coverages[&ids[j]])?;
                ratios[i][j] = o;
                ratios[j][i] = o;
            }
        }
        Ok(Self { ids, ratios })
    }

    fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|v| *v == id)
    }
}

/// Mean overlap of vehicle `id` against the other members of `active`.
/// A singleton active set has no neighbours and scores 0.
pub fn avg_overlap(id: u32, graph: &OverlapGraph, active: &BTreeSet<u32>) -> f64 {
    let Some(i) = graph.index_of(id) else { return 0.0 };
    let mut sum = 0.0;
    let mut n = 0usize;
    for other in active {
        if *other == id {
            continue;
        }
        if let Some(j) = graph.index_of(*other) {
            sum += graph.ratios[i][j];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn union_area_of(
    active: &BTreeSet<u32>,
    coverages: &BTreeMap<u32, CoverageGrid>,
) -> Result<f64, SchedulerError> {
    let mut iter = active.iter();
    let Some(first) = iter.next() else { return Ok(0.0) };
    let mut acc = coverages[first].clone();
    for id in iter {
        acc.union_with(&coverages[id])?;
    }
    Ok(grid_area(&acc))
}

/// Greedy pruning: starting from everything scheduled, repeatedly drop the
/// vehicle with the largest average overlap (ties to the lowest id) until
/// dropping one would push the joint coverage to or below beta times the
/// total; that drop is restored. Never empties a non-empty vehicle set.
pub fn greedy_prune(
    coverages: &BTreeMap<u32, CoverageGrid>,
    config: &SchedulerConfig,
) -> Result<BTreeMap<u32, bool>, SchedulerError> {
    if coverages.is_empty() {
        return Err(SchedulerError::EmptySnapshot);
    }
    let graph = OverlapGraph::build(coverages)?;
    let all: BTreeSet<u32> = coverages.keys().copied().collect();
    let total_area = union_area_of(&all, coverages)?;
    let mut active = all.clone();

    loop {
        // Candidate with the maximum average overlap over the reference set.
        let reference = if config.recompute_overlap { &active } else { &all };
        let mut candidate: Option<(u32, f64)> = None;
        for id in &active {
            let score = avg_overlap(*id, &graph, reference);
            let better = match candidate {
                None => true,
                Some((_, best)) => score > best,
            };
            if better {
                candidate = Some((*id, score));
            }
        }
        let (victim, _) = candidate.expect("active set never empty here");
        active.remove(&victim);
        if union_area_of(&active, coverages)? <= config.beta * total_area {
            active.insert(victim);
            break;
        }
    }
    Ok(all.iter().map(|id| (*id, active.contains(id))).collect())
}

/// Decision for one service request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDecision {
    pub scheduled: bool,
    /// Offloading decision, -1 when the vehicle was not scheduled.
    pub action: i32,
}

#[derive(Debug)]
pub struct Scheduler {
    pub config: SchedulerConfig,
    scheduled: BTreeMap<u32, bool>,
    last_epoch_ms: Option<i64>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Self { config, scheduled: BTreeMap::new(), last_epoch_ms: None }
    }

    pub fn epoch_due(&self, now_ms: i64) -> bool {
        match self.last_epoch_ms {
            None => true,
            Some(last) => now_ms - last >= self.config.epoch_period_ms,
        }
    }

    pub fn scheduled_map(&self) -> &BTreeMap<u32, bool> {
        &self.scheduled
    }

    pub fn scheduled_count(&self) -> usize {
        self.scheduled.values().filter(|v| **v).count()
    }

    pub fn is_scheduled(&self, vehicle_id: u32) -> bool {
        // Vehicles that joined after the last epoch default to scheduled.
        *self.scheduled.get(&vehicle_id).unwrap_or(&true)
    }

    /// Installs an externally built schedule (baselines schedule everyone).
    pub fn set_schedule(&mut self, scheduled: BTreeMap<u32, bool>, now_ms: i64) {
        self.scheduled = scheduled;
        self.last_epoch_ms = Some(now_ms);
    }

    /// Runs the pruning pass over a fresh coverage snapshot.
    pub fn reschedule(
        &mut self,
        coverages: &BTreeMap<u32, CoverageGrid>,
        now_ms: i64,
    ) -> Result<(), SchedulerError> {
        self.scheduled = greedy_prune(coverages, &self.config)?;
        self.last_epoch_ms = Some(now_ms);
        Ok(())
    }

    /// Full request handling: prune first if an epoch boundary has passed,
    /// then either delegate the offloading decision or tell the vehicle to
    /// back off.
    pub fn head_decide(
        &mut self,
        vehicle_id: u32,
        now_ms: i64,
        coverages: &BTreeMap<u32, CoverageGrid>,
        choose_action: impl FnOnce() -> usize,
    ) -> Result<HeadDecision, SchedulerError> {
        if self.epoch_due(now_ms) {
            self.reschedule(coverages, now_ms)?;
        }
        Ok(self.decide(vehicle_id, choose_action))
    }

    /// Lower-layer decision against the current scheduled map.
    pub fn decide(&self, vehicle_id: u32, choose_action: impl FnOnce() -> usize) -> HeadDecision {
        if self.is_scheduled(vehicle_id) {
            HeadDecision { scheduled: true, action: choose_action() as i32 }
        } else {
            HeadDecision { scheduled: false, action: -1 }
        }
    }
}
