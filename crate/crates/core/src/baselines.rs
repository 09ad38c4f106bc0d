//! Baseline policies: LRU, uniform random, and a nearest-neighbor version of
//! Belady's that replays the oracle decision of the training position whose
//! recent access history matches the current one best.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{rollout, ReplacementPolicy, ReplacementState, RolloutOptions};
use crate::oracle::{BeladyPolicy, ReuseDistanceTable};
use crate::trace::{AccessTrace, CacheGeometry, MemoryAccess};

/// Way whose line has the oldest last-access tick; ties go to the lowest way.
pub fn lru_decide(state: &ReplacementState<'_>) -> usize {
    state
        .cache_set
        .slots()
        .iter()
        .enumerate()
        .min_by_key(|(w, s)| (s.last_access, *w))
        .map(|(w, _)| w)
        .expect("decision on an empty set")
}

pub fn random_decide(state: &ReplacementState<'_>, rng: &mut dyn RngCore) -> usize {
    rng.gen_range(0..state.cache_set.ways())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LruPolicy;

impl ReplacementPolicy for LruPolicy {
    fn name(&self) -> String {
        "lru".into()
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        lru_decide(state)
    }
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ReplacementPolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        random_decide(state, &mut self.rng)
    }
}

// Polynomial hashing modulo the Mersenne prime 2^61 - 1.
const MODULUS: u64 = (1 << 61) - 1;
const BASE: u64 = 0x1F3D_5B79_A2C4_E681 % MODULUS;

fn mul_mod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % MODULUS as u128) as u64
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn symbol(a: &MemoryAccess) -> u64 {
    splitmix(a.pc ^ splitmix(a.address)) % MODULUS
}

/// Training-trace index for longest-suffix lookups.
///
/// For every training miss that Belady's resolved by evicting, and every
/// suffix length up to `max_len`, the hash of the `(pc, address)` suffix
/// ending at that position maps to the earliest such position. A suffix match
/// of length L implies matches of every shorter length, so the longest match
/// is found by binary search over L.
pub struct SuffixIndex {
    accesses: Vec<MemoryAccess>,
    max_len: usize,
    powers: Vec<u64>,
    // Evicted line id per labelled training position.
    labels: HashMap<usize, u64>,
    // by_len[L - 1]: suffix hash -> earliest labelled position.
    by_len: Vec<HashMap<u64, usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuffixMatch {
    pub position: usize,
    pub length: usize,
    pub evicted_line: u64,
}

impl SuffixIndex {
    /// Labels the training trace with lowest-way Belady's and indexes it.
    pub fn build(train: &AccessTrace, geometry: &CacheGeometry, max_len: usize) -> Self {
        let table = Arc::new(ReuseDistanceTable::build(train, geometry));
        let stats = rollout(
            train,
            geometry,
            &mut BeladyPolicy::new(table),
            RolloutOptions {
                record_states: true,
                ..Default::default()
            },
        )
        .expect("belady always returns a resident way");
        let labels = stats
            .states
            .unwrap_or_default()
            .into_iter()
            .map(|s| (s.timestep, s.slots[s.chosen_way].line));
        Self::from_labels(train.accesses.clone(), labels, max_len)
    }

    /// An index with no training data; every lookup misses.
    pub fn empty(max_len: usize) -> Self {
        Self::from_labels(Vec::new(), std::iter::empty(), max_len)
    }

    pub fn from_labels(
        accesses: Vec<MemoryAccess>,
        labels: impl IntoIterator<Item = (usize, u64)>,
        max_len: usize,
    ) -> Self {
        let max_len = max_len.max(1);
        let mut powers = vec![1u64; max_len + 1];
        for i in 1..=max_len {
            powers[i] = mul_mod(powers[i - 1], BASE);
        }
        // prefix[i] = hash of accesses[..i], most recent symbol at power 0.
        let mut prefix = vec![0u64; accesses.len() + 1];
        for (i, a) in accesses.iter().enumerate() {
            prefix[i + 1] = (mul_mod(prefix[i], BASE) + symbol(a)) % MODULUS;
        }
        let labels: HashMap<usize, u64> = labels.into_iter().collect();
        let mut positions: Vec<usize> = labels.keys().copied().collect();
        positions.sort_unstable();
        let mut by_len = vec![HashMap::new(); max_len];
        for &p in &positions {
            for len in 1..=max_len.min(p + 1) {
                let start = p + 1 - len;
                let h = (prefix[p + 1] + MODULUS - mul_mod(prefix[start], powers[len])) % MODULUS;
                by_len[len - 1].entry(h).or_insert(p);
            }
        }
        Self {
            accesses,
            max_len,
            powers,
            labels,
            by_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn verified(&self, len: usize, hash: u64, query: &[MemoryAccess]) -> Option<usize> {
        let &p = self.by_len[len - 1].get(&hash)?;
        let train = &self.accesses[p + 1 - len..=p];
        (train == &query[query.len() - len..]).then_some(p)
    }

    /// Longest match for the sequence `history ++ [current]`.
    pub fn lookup(&self, history: &[MemoryAccess], current: MemoryAccess) -> Option<SuffixMatch> {
        if self.is_empty() {
            return None;
        }
        let take = history.len().min(self.max_len - 1);
        let mut query = Vec::with_capacity(take + 1);
        query.extend_from_slice(&history[history.len() - take..]);
        query.push(current);
        // hashes[L - 1] = hash of the last L symbols.
        let mut hashes = Vec::with_capacity(query.len());
        let mut h = 0u64;
        for (l, a) in query.iter().rev().enumerate() {
            h = (h + mul_mod(symbol(a), self.powers[l])) % MODULUS;
            hashes.push(h);
        }
        let (mut lo, mut hi) = (0usize, query.len());
        let mut best = None;
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            match self.verified(mid, hashes[mid - 1], &query) {
                Some(p) => {
                    best = Some((mid, p));
                    lo = mid;
                }
                None => hi = mid - 1,
            }
        }
        best.map(|(length, position)| SuffixMatch {
            position,
            length,
            evicted_line: self.labels[&position],
        })
    }
}

/// Follows the memorised Belady decision when its victim is resident,
/// otherwise falls back to LRU.
pub struct NearestNeighborPolicy {
    index: Arc<SuffixIndex>,
    pub followed: u64,
    pub fallbacks: u64,
}

impl NearestNeighborPolicy {
    pub fn new(index: Arc<SuffixIndex>) -> Self {
        Self {
            index,
            followed: 0,
            fallbacks: 0,
        }
    }
}

pub fn nn_belady_decide(state: &ReplacementState<'_>, index: &SuffixIndex) -> Option<usize> {
    let m = index.lookup(state.history(), state.access)?;
    state.cache_set.way_of(m.evicted_line)
}

impl ReplacementPolicy for NearestNeighborPolicy {
    fn name(&self) -> String {
        "nn_belady".into()
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        match nn_belady_decide(state, &self.index) {
            Some(way) => {
                self.followed += 1;
                way
            }
            None => {
                self.fallbacks += 1;
                lru_decide(state)
            }
        }
    }

    fn fallback_decisions(&self) -> Option<u64> {
        Some(self.fallbacks)
    }
}
