//! Reuse distances and Belady's optimal eviction rule.
//!
//! The reuse distance of a resident line at time `t` is the number of accesses
//! until that line is touched again: `next_index - t`, so the very next access
//! counts as distance 1. Lines never touched again have [`ReuseDistance::Infinite`],
//! which compares above every finite value. Where a finite number is needed
//! (losses, metrics, smoothing) the infinite value is capped at
//! `D_max = remaining trace length + 1`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{ReplacementPolicy, ReplacementState};
use crate::trace::{AccessTrace, CacheGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReuseDistance {
    Finite(u64),
    Infinite,
}

impl Ord for ReuseDistance {
    fn cmp(&self, other: &Self) -> Ordering {
        use ReuseDistance::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a.cmp(b),
            (Finite(_), Infinite) => Ordering::Less,
            (Infinite, Finite(_)) => Ordering::Greater,
            (Infinite, Infinite) => Ordering::Equal,
        }
    }
}

impl PartialOrd for ReuseDistance {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ReuseDistance {
    pub fn is_finite(&self) -> bool {
        matches!(self, ReuseDistance::Finite(_))
    }

    /// Distances beyond the window become infinite.
    pub fn windowed(self, window: u64) -> Self {
        match self {
            ReuseDistance::Finite(d) if d > window => ReuseDistance::Infinite,
            other => other,
        }
    }

    pub fn capped(self, cap: f64) -> f64 {
        match self {
            ReuseDistance::Finite(d) => d as f64,
            ReuseDistance::Infinite => cap,
        }
    }
}

/// Next-use index of every trace position, built in one backward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReuseDistanceTable {
    lines: Vec<u64>,
    next_use: Vec<Option<usize>>,
}

impl ReuseDistanceTable {
    pub fn from_lines(lines: &[u64]) -> Self {
        let mut next_use = vec![None; lines.len()];
        let mut upcoming: HashMap<u64, usize> = HashMap::new();
        for t in (0..lines.len()).rev() {
            next_use[t] = upcoming.insert(lines[t], t);
        }
        Self {
            lines: lines.to_vec(),
            next_use,
        }
    }

    pub fn build(trace: &AccessTrace, geometry: &CacheGeometry) -> Self {
        Self::from_lines(&trace.line_ids(geometry))
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn line(&self, t: usize) -> u64 {
        self.lines[t]
    }

    pub fn next_use(&self, t: usize) -> Option<usize> {
        self.next_use[t]
    }

    /// Distance from `t` to the next access of the line accessed at `t`.
    pub fn distance_after(&self, t: usize) -> ReuseDistance {
        match self.next_use[t] {
            Some(n) => ReuseDistance::Finite((n - t) as u64),
            None => ReuseDistance::Infinite,
        }
    }

    /// Reuse distance at time `now` of a line whose latest access was at
    /// `last_access` (strictly before `now`).
    pub fn distance(&self, now: usize, last_access: usize) -> ReuseDistance {
        match self.next_use[last_access] {
            Some(n) => {
                debug_assert!(
                    n > now,
                    "line reused at {n} before its last access was updated"
                );
                ReuseDistance::Finite((n - now) as u64)
            }
            None => ReuseDistance::Infinite,
        }
    }

    /// Finite stand-in for an infinite distance at time `now`.
    pub fn cap(&self, now: usize) -> f64 {
        (self.lines.len() - now + 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleDecision {
    pub way: usize,
    pub distances: Vec<ReuseDistance>,
    pub optimal_set: Vec<usize>,
}

pub enum TieBreak<'r> {
    LowestWay,
    Random(&'r mut dyn RngCore),
}

/// Reuse distances of every resident way of `state` at its timestep.
pub fn resident_distances(
    state: &ReplacementState<'_>,
    table: &ReuseDistanceTable,
) -> Vec<ReuseDistance> {
    state
        .cache_set
        .slots()
        .iter()
        .map(|slot| table.distance(state.timestep, slot.last_access))
        .collect()
}

/// Evicts the line reused furthest in the future. With a window, distances
/// beyond it count as infinite.
pub fn belady_decide(
    state: &ReplacementState<'_>,
    table: &ReuseDistanceTable,
    window: Option<u64>,
    tie: TieBreak<'_>,
) -> OracleDecision {
    let mut distances = resident_distances(state, table);
    if let Some(x) = window {
        for d in &mut distances {
            *d = d.windowed(x);
        }
    }
    let max = *distances.iter().max().expect("decision on an empty set");
    let optimal_set: Vec<usize> = distances
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == max)
        .map(|(w, _)| w)
        .collect();
    let way = match tie {
        TieBreak::LowestWay => optimal_set[0],
        TieBreak::Random(rng) => optimal_set[rng.gen_range(0..optimal_set.len())],
    };
    OracleDecision {
        way,
        distances,
        optimal_set,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

/// `softmax(distances / temperature)`: Belady's smoothed into a distribution
/// that prefers evicting lines with larger (capped) reuse distances.
pub fn smoothed_oracle_distribution(
    capped_distances: &[f64],
    temperature: f64,
) -> Result<Vec<f64>, OracleError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(OracleError::Temperature(temperature));
    }
    let max = capped_distances
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = capped_distances
        .iter()
        .map(|d| ((d - max) / temperature).exp())
        .collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Belady's as a [`ReplacementPolicy`], reading the future from a table built
/// over the same trace it is rolled out on.
pub struct BeladyPolicy {
    table: Arc<ReuseDistanceTable>,
    window: Option<u64>,
    rng: Option<ChaCha8Rng>,
}

impl BeladyPolicy {
    /// Unwindowed, ties to the lowest way.
    pub fn new(table: Arc<ReuseDistanceTable>) -> Self {
        Self {
            table,
            window: None,
            rng: None,
        }
    }

    /// Windowed variant with seeded random tie-breaking.
    pub fn windowed(table: Arc<ReuseDistanceTable>, window: Option<u64>, tie_seed: u64) -> Self {
        Self {
            table,
            window,
            rng: Some(ChaCha8Rng::seed_from_u64(tie_seed)),
        }
    }

    pub fn decide(&mut self, state: &ReplacementState<'_>) -> OracleDecision {
        let tie = match self.rng.as_mut() {
            Some(rng) => TieBreak::Random(rng),
            None => TieBreak::LowestWay,
        };
        belady_decide(state, &self.table, self.window, tie)
    }
}

impl ReplacementPolicy for BeladyPolicy {
    fn name(&self) -> String {
        match self.window {
            Some(x) => format!("belady_x{x}"),
            None => "belady".into(),
        }
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        self.decide(state).way
    }
}
