//! Set-associative cache model and the replacement decision process.
//!
//! At every access the harness builds a [`ReplacementState`]: the contents of
//! the accessed set, the current access, and the strictly-past accesses. A
//! [`ReplacementPolicy`] is asked for a victim way only when the access misses
//! a full set. Hits earn reward 1, misses 0.
//!
//! Way indices are 0-based and stable: a new line takes over the way of the
//! line it evicts, and a cold set fills its lowest empty way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{AccessTrace, CacheGeometry, MemoryAccess};

/// `(address >> log2(line_size)) mod num_sets`.
pub fn set_index(address: u64, geometry: &CacheGeometry) -> usize {
    geometry.set_of(address)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("policy `{policy}` chose way {way} in a {ways}-way set")]
    InvalidWay {
        policy: String,
        way: usize,
        ways: usize,
    },
}

/// A resident line with the bookkeeping baseline policies rely on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineSlot {
    pub line: u64,
    pub inserted_at: usize,
    pub last_access: usize,
}

/// Contents of one cache set; position in `slots` is the way index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheSetState {
    ways: usize,
    slots: Vec<LineSlot>,
}

impl CacheSetState {
    pub fn new(ways: usize) -> Self {
        Self {
            ways,
            slots: Vec::with_capacity(ways),
        }
    }

    /// Builds a set from explicit slots; mostly useful in tests.
    pub fn from_slots(ways: usize, slots: Vec<LineSlot>) -> Self {
        assert!(slots.len() <= ways, "more slots than ways");
        Self { ways, slots }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.ways
    }

    pub fn slots(&self) -> &[LineSlot] {
        &self.slots
    }

    pub fn lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.slots.iter().map(|s| s.line)
    }

    pub fn way_of(&self, line: u64) -> Option<usize> {
        self.slots.iter().position(|s| s.line == line)
    }
}

/// Everything a policy may look at when it decides.
#[derive(Clone, Copy, Debug)]
pub struct ReplacementState<'a> {
    pub timestep: usize,
    pub set: usize,
    pub cache_set: &'a CacheSetState,
    pub access: MemoryAccess,
    /// Line id of `access`.
    pub line: u64,
    history: &'a [MemoryAccess],
}

impl<'a> ReplacementState<'a> {
    pub fn new(
        timestep: usize,
        set: usize,
        cache_set: &'a CacheSetState,
        access: MemoryAccess,
        line: u64,
        history: &'a [MemoryAccess],
    ) -> Self {
        Self {
            timestep,
            set,
            cache_set,
            access,
            line,
            history,
        }
    }

    /// All past accesses, oldest first. Never includes the current access.
    pub fn history(&self) -> &'a [MemoryAccess] {
        self.history
    }

    /// The last `h` past accesses.
    pub fn recent_history(&self, h: usize) -> &'a [MemoryAccess] {
        &self.history[self.history.len().saturating_sub(h)..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeKind {
    Hit { way: usize },
    Eviction { way: usize, evicted_line: u64 },
    ColdInsert { way: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub timestep: usize,
    pub set: usize,
    pub kind: OutcomeKind,
}

impl AccessOutcome {
    pub fn is_hit(&self) -> bool {
        matches!(self.kind, OutcomeKind::Hit { .. })
    }

    pub fn reward(&self) -> u32 {
        u32::from(self.is_hit())
    }
}

/// A replacement policy. It sees only the state it is handed; nothing in the
/// interface exposes future accesses.
pub trait ReplacementPolicy {
    fn name(&self) -> String;

    /// Victim way for a miss on a full set.
    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize;

    /// Per-way eviction scores behind the most recent choice, higher meaning
    /// more eager to evict, when the policy has them.
    fn eviction_scores(&self) -> Option<&[f64]> {
        None
    }

    /// Called after every access has been applied.
    fn on_access(&mut self, _timestep: usize, _access: &MemoryAccess, _outcome: &AccessOutcome) {}

    /// Decisions so far that were handed to a fallback rule, for policies
    /// that have one.
    fn fallback_decisions(&self) -> Option<u64> {
        None
    }
}

impl<P: ReplacementPolicy + ?Sized> ReplacementPolicy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        (**self).choose_victim(state)
    }

    fn eviction_scores(&self) -> Option<&[f64]> {
        (**self).eviction_scores()
    }

    fn on_access(&mut self, timestep: usize, access: &MemoryAccess, outcome: &AccessOutcome) {
        (**self).on_access(timestep, access, outcome)
    }

    fn fallback_decisions(&self) -> Option<u64> {
        (**self).fallback_decisions()
    }
}

impl<P: ReplacementPolicy + ?Sized> ReplacementPolicy for &mut P {
    fn name(&self) -> String {
        (**self).name()
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        (**self).choose_victim(state)
    }

    fn eviction_scores(&self) -> Option<&[f64]> {
        (**self).eviction_scores()
    }

    fn on_access(&mut self, timestep: usize, access: &MemoryAccess, outcome: &AccessOutcome) {
        (**self).on_access(timestep, access, outcome)
    }

    fn fallback_decisions(&self) -> Option<u64> {
        (**self).fallback_decisions()
    }
}

/// A state at which the policy had to evict, as seen before the eviction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitedState {
    pub timestep: usize,
    pub set: usize,
    pub access: MemoryAccess,
    pub line: u64,
    pub slots: Vec<LineSlot>,
    pub chosen_way: usize,
    pub scores: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Cache {
    geometry: CacheGeometry,
    sets: Vec<CacheSetState>,
}

impl Cache {
    pub fn new(geometry: CacheGeometry) -> Self {
        Self {
            sets: vec![CacheSetState::new(geometry.associativity); geometry.num_sets()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn set(&self, set: usize) -> &CacheSetState {
        &self.sets[set]
    }

    /// Applies access `timestep`; `history` must hold exactly the accesses
    /// before it.
    pub fn step<P: ReplacementPolicy + ?Sized>(
        &mut self,
        timestep: usize,
        access: MemoryAccess,
        history: &[MemoryAccess],
        policy: &mut P,
    ) -> Result<AccessOutcome, CacheError> {
        self.step_inner(timestep, access, history, policy, None)
    }

    fn step_inner<P: ReplacementPolicy + ?Sized>(
        &mut self,
        timestep: usize,
        access: MemoryAccess,
        history: &[MemoryAccess],
        policy: &mut P,
        visited: Option<&mut Vec<VisitedState>>,
    ) -> Result<AccessOutcome, CacheError> {
        let line = self.geometry.line_of(access.address);
        let set_id = self.geometry.set_of(access.address);
        let set = &mut self.sets[set_id];
        let kind = if let Some(way) = set.way_of(line) {
            set.slots[way].last_access = timestep;
            OutcomeKind::Hit { way }
        } else if !set.is_full() {
            set.slots.push(LineSlot {
                line,
                inserted_at: timestep,
                last_access: timestep,
            });
            OutcomeKind::ColdInsert {
                way: set.slots.len() - 1,
            }
        } else {
            let state = ReplacementState::new(timestep, set_id, set, access, line, history);
            let way = policy.choose_victim(&state);
            if way >= set.ways {
                return Err(CacheError::InvalidWay {
                    policy: policy.name(),
                    way,
                    ways: set.ways,
                });
            }
            if let Some(visited) = visited {
                visited.push(VisitedState {
                    timestep,
                    set: set_id,
                    access,
                    line,
                    slots: set.slots.clone(),
                    chosen_way: way,
                    scores: policy.eviction_scores().map(<[f64]>::to_vec),
                });
            }
            let evicted_line = set.slots[way].line;
            set.slots[way] = LineSlot {
                line,
                inserted_at: timestep,
                last_access: timestep,
            };
            OutcomeKind::Eviction { way, evicted_line }
        };
        let outcome = AccessOutcome {
            timestep,
            set: set_id,
            kind,
        };
        policy.on_access(timestep, &access, &outcome);
        Ok(outcome)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RolloutOptions {
    pub record_outcomes: bool,
    pub record_states: bool,
}

#[derive(Clone, Debug)]
pub struct HitStats {
    pub policy: String,
    pub hits: u64,
    pub misses: u64,
    pub outcomes: Option<Vec<AccessOutcome>>,
    pub states: Option<Vec<VisitedState>>,
}

/// The JSON view of [`HitStats`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitSummary {
    pub policy: String,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
}

impl HitStats {
    pub fn accesses(&self) -> u64 {
        self.hits + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        if self.accesses() == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses() as f64
        }
    }

    pub fn summary(&self) -> HitSummary {
        HitSummary {
            policy: self.policy.clone(),
            hits: self.hits,
            misses: self.misses,
            hit_rate: self.hit_rate(),
        }
    }

    /// Hit rate over the accesses at or after `skip`. Needs recorded outcomes.
    pub fn hit_rate_after(&self, skip: usize) -> Option<f64> {
        let outcomes = self.outcomes.as_ref()?;
        let tail = outcomes.get(skip..).unwrap_or(&[]);
        if tail.is_empty() {
            return Some(0.0);
        }
        Some(tail.iter().filter(|o| o.is_hit()).count() as f64 / tail.len() as f64)
    }
}

/// Runs `policy` over every access of `trace` on a cold cache.
pub fn rollout<P: ReplacementPolicy + ?Sized>(
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    policy: &mut P,
    options: RolloutOptions,
) -> Result<HitStats, CacheError> {
    let mut cache = Cache::new(*geometry);
    let mut outcomes = options
        .record_outcomes
        .then(|| Vec::with_capacity(trace.len()));
    let mut states = options.record_states.then(Vec::new);
    let (mut hits, mut misses) = (0u64, 0u64);
    for (t, &access) in trace.accesses.iter().enumerate() {
        let outcome = cache.step_inner(t, access, &trace.accesses[..t], policy, states.as_mut())?;
        if outcome.is_hit() {
            hits += 1;
        } else {
            misses += 1;
        }
        if let Some(o) = outcomes.as_mut() {
            o.push(outcome);
        }
    }
    Ok(HitStats {
        policy: policy.name(),
        hits,
        misses,
        outcomes,
        states,
    })
}
