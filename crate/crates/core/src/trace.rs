//! Memory access traces.
//!
//! A trace is the ordered list of `(pc, address)` pairs a program issues. This
//! module reads and writes the line-oriented text format, generates synthetic
//! traces, filters raw traces down to last-level-cache accesses through an
//! L1/L2 LRU hierarchy, samples cache sets and cuts temporal splits.
//!
//! Text format: one access per line, `0x<pc>,0x<address>`; lines starting
//! with `#` and blank lines are ignored.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One load/store: the issuing instruction and the byte address it touched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryAccess {
    pub pc: u64,
    pub address: u64,
}

impl MemoryAccess {
    pub fn new(pc: u64, address: u64) -> Self {
        Self { pc, address }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceOrigin {
    Raw,
    LlcFiltered,
    Synthetic,
}

/// Accesses in program order. The index of an access is its timestep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessTrace {
    pub accesses: Vec<MemoryAccess>,
    pub origin: TraceOrigin,
}

impl AccessTrace {
    pub fn new(accesses: Vec<MemoryAccess>, origin: TraceOrigin) -> Self {
        Self { accesses, origin }
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MemoryAccess> {
        self.accesses.iter()
    }

    /// Contiguous sub-trace with the same origin.
    pub fn slice(&self, range: std::ops::Range<usize>) -> AccessTrace {
        AccessTrace::new(self.accesses[range].to_vec(), self.origin)
    }

    /// Line ids (`address >> log2(line_size)`) of every access.
    pub fn line_ids(&self, geometry: &CacheGeometry) -> Vec<u64> {
        self.accesses
            .iter()
            .map(|a| geometry.line_of(a.address))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("line size {0} is not a positive power of two")]
    LineSize(u64),
    #[error("associativity must be positive")]
    Associativity,
    #[error("capacity {capacity} is not a multiple of associativity x line size ({way_bytes})")]
    Capacity { capacity: u64, way_bytes: u64 },
    #[error("number of sets {0} is not a positive power of two")]
    NumSets(u64),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("syntax error at line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("set id {set} out of range for {num_sets} sets")]
    SetOutOfRange { set: usize, num_sets: usize },
    #[error("cannot sample {count} sets from {num_sets}")]
    SampleTooLarge { count: usize, num_sets: usize },
    #[error("unsatisfiable set constraint: {0}")]
    Unsatisfiable(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("trace too short to split: {0} accesses, need at least 10")]
    TooShort(usize),
    #[error("split fractions must be nonnegative and sum to 1, got {0}/{1}/{2}")]
    InvalidSplit(f64, f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape of one set-associative cache level.
///
/// `num_sets = capacity / (associativity * line_size)` must be a power of two,
/// so that the set index is a contiguous bit field above the line offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry")]
pub struct CacheGeometry {
    pub capacity_bytes: u64,
    pub associativity: usize,
    pub line_size_bytes: u64,
}

#[derive(Deserialize)]
struct RawGeometry {
    capacity_bytes: u64,
    associativity: usize,
    #[serde(default = "default_line_size")]
    line_size_bytes: u64,
}

fn default_line_size() -> u64 {
    64
}

impl TryFrom<RawGeometry> for CacheGeometry {
    type Error = GeometryError;

    fn try_from(raw: RawGeometry) -> Result<Self, Self::Error> {
        CacheGeometry::new(raw.capacity_bytes, raw.associativity, raw.line_size_bytes)
    }
}

impl CacheGeometry {
    pub fn new(
        capacity_bytes: u64,
        associativity: usize,
        line_size_bytes: u64,
    ) -> Result<Self, GeometryError> {
        if line_size_bytes == 0 || !line_size_bytes.is_power_of_two() {
            return Err(GeometryError::LineSize(line_size_bytes));
        }
        if associativity == 0 {
            return Err(GeometryError::Associativity);
        }
        let way_bytes = associativity as u64 * line_size_bytes;
        if capacity_bytes == 0 || !capacity_bytes.is_multiple_of(way_bytes) {
            return Err(GeometryError::Capacity {
                capacity: capacity_bytes,
                way_bytes,
            });
        }
        let sets = capacity_bytes / way_bytes;
        if !sets.is_power_of_two() {
            return Err(GeometryError::NumSets(sets));
        }
        Ok(Self {
            capacity_bytes,
            associativity,
            line_size_bytes,
        })
    }

    /// Geometry with an explicit set count.
    pub fn with_sets(
        num_sets: usize,
        associativity: usize,
        line_size_bytes: u64,
    ) -> Result<Self, GeometryError> {
        let capacity = num_sets as u64 * associativity as u64 * line_size_bytes;
        Self::new(capacity, associativity, line_size_bytes)
    }

    /// 4-way 32KB L1 with 64B lines.
    pub fn default_l1() -> Self {
        Self::new(32 * 1024, 4, 64).expect("valid preset")
    }

    /// 8-way 256KB L2 with 64B lines.
    pub fn default_l2() -> Self {
        Self::new(256 * 1024, 8, 64).expect("valid preset")
    }

    /// 16-way 2MB last-level cache with 64B lines (2048 sets).
    pub fn default_llc() -> Self {
        Self::new(2 * 1024 * 1024, 16, 64).expect("valid preset")
    }

    pub fn num_sets(&self) -> usize {
        (self.capacity_bytes / (self.associativity as u64 * self.line_size_bytes)) as usize
    }

    pub fn offset_bits(&self) -> u32 {
        self.line_size_bytes.trailing_zeros()
    }

    pub fn set_bits(&self) -> u32 {
        (self.num_sets() as u64).trailing_zeros()
    }

    /// Line id: the address with the in-line offset shifted away.
    pub fn line_of(&self, address: u64) -> u64 {
        address >> self.offset_bits()
    }

    /// Set index: the low-order bits of the line id.
    pub fn set_of(&self, address: u64) -> usize {
        (self.line_of(address) & (self.num_sets() as u64 - 1)) as usize
    }

    /// Set index of a line id.
    pub fn set_of_line(&self, line: u64) -> usize {
        (line & (self.num_sets() as u64 - 1)) as usize
    }
}

fn parse_hex(field: &str) -> Option<u64> {
    let field = field.trim();
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .unwrap_or(field);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses the text trace format. Fails on the first malformed line.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<AccessTrace, TraceError> {
    let mut accesses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = content.split(',');
        let (pc, address) = match (fields.next(), fields.next(), fields.next()) {
            (Some(pc), Some(addr), None) => (pc, addr),
            _ => {
                return Err(TraceError::Syntax {
                    line: lineno,
                    reason: format!("expected `<pc_hex>,<address_hex>`, got {content:?}"),
                })
            }
        };
        let pc = parse_hex(pc).ok_or_else(|| TraceError::Syntax {
            line: lineno,
            reason: format!("bad pc {pc:?}"),
        })?;
        let address = parse_hex(address).ok_or_else(|| TraceError::Syntax {
            line: lineno,
            reason: format!("bad address {address:?}"),
        })?;
        accesses.push(MemoryAccess { pc, address });
    }
    if accesses.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(AccessTrace::new(accesses, TraceOrigin::Raw))
}

pub fn parse_trace_str(text: &str) -> Result<AccessTrace, TraceError> {
    parse_trace(text.as_bytes())
}

pub fn write_trace<W: Write>(trace: &AccessTrace, mut out: W) -> std::io::Result<()> {
    for a in &trace.accesses {
        writeln!(out, "{:#x},{:#x}", a.pc, a.address)?;
    }
    Ok(())
}

/// Synthetic access pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `n_lines` distinct lines visited in a fixed order, forever.
    Cyclic { n_lines: usize },
    /// Independent draws with `P(rank k) ∝ 1 / (k + 1)^exponent`.
    Zipf {
        n_lines: usize,
        exponent: f64,
        #[serde(default = "default_pc_pool")]
        pc_pool: usize,
    },
    /// Sub-patterns played in order, round after round, each for its own
    /// length. Every phase owns a disjoint address region and pc range.
    Phased { phases: Vec<Phase> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub length: usize,
}

fn default_pc_pool() -> usize {
    16
}

const PC_BASE: u64 = 0x40_0000;

/// Per-pattern generator state; phases keep their cursor across rounds.
enum PatternState {
    Cyclic {
        n_lines: usize,
        cursor: usize,
    },
    Zipf {
        sampler: WeightedIndex<f64>,
        pc_pool: usize,
    },
}

struct AddressMap<'a> {
    geometry: &'a CacheGeometry,
    target_sets: &'a [usize],
}

impl AddressMap<'_> {
    /// Byte address of line `k` of region `region`. Lines are dealt
    /// round-robin over the target sets.
    fn address(&self, region: u64, k: usize) -> u64 {
        let n = self.target_sets.len();
        let set = self.target_sets[k % n] as u64;
        let tag = (region << 32) | (k / n) as u64;
        let line = (tag << self.geometry.set_bits()) | set;
        line << self.geometry.offset_bits()
    }
}

impl PatternState {
    fn new(kind: &SyntheticKind) -> Result<Self, TraceError> {
        match *kind {
            SyntheticKind::Cyclic { n_lines } => {
                if n_lines == 0 {
                    return Err(TraceError::InvalidSpec("cyclic needs n_lines >= 1".into()));
                }
                Ok(PatternState::Cyclic { n_lines, cursor: 0 })
            }
            SyntheticKind::Zipf {
                n_lines,
                exponent,
                pc_pool,
            } => {
                if n_lines == 0 || pc_pool == 0 {
                    return Err(TraceError::InvalidSpec(
                        "zipf needs n_lines >= 1 and pc_pool >= 1".into(),
                    ));
                }
                if !exponent.is_finite() || exponent < 0.0 {
                    return Err(TraceError::InvalidSpec(format!(
                        "zipf exponent must be finite and >= 0, got {exponent}"
                    )));
                }
                let weights = (0..n_lines).map(|k| 1.0 / ((k + 1) as f64).powf(exponent));
                let sampler = WeightedIndex::new(weights)
                    .map_err(|e| TraceError::InvalidSpec(e.to_string()))?;
                Ok(PatternState::Zipf { sampler, pc_pool })
            }
            SyntheticKind::Phased { .. } => Err(TraceError::InvalidSpec(
                "phases cannot nest another phased pattern".into(),
            )),
        }
    }

    fn max_lines(kind: &SyntheticKind) -> usize {
        match *kind {
            SyntheticKind::Cyclic { n_lines } | SyntheticKind::Zipf { n_lines, .. } => n_lines,
            SyntheticKind::Phased { ref phases } => phases
                .iter()
                .map(|p| Self::max_lines(&p.kind))
                .max()
                .unwrap_or(0),
        }
    }

    fn next(&mut self, map: &AddressMap<'_>, region: u64, rng: &mut ChaCha8Rng) -> MemoryAccess {
        let pc_region = PC_BASE + region * 0x1_0000;
        match self {
            PatternState::Cyclic { n_lines, cursor } => {
                let k = *cursor;
                *cursor = (*cursor + 1) % *n_lines;
                MemoryAccess::new(pc_region + 4 * k as u64, map.address(region, k))
            }
            PatternState::Zipf { sampler, pc_pool } => {
                let k = sampler.sample(rng);
                let pc = rng.gen_range(0..*pc_pool) as u64;
                MemoryAccess::new(pc_region + 4 * pc, map.address(region, k))
            }
        }
    }
}

/// Generates `length` accesses whose addresses all map to `target_sets`.
///
/// Deterministic in `(kind, length, geometry, target_sets, seed)`.
pub fn generate_synthetic(
    kind: &SyntheticKind,
    length: usize,
    geometry: &CacheGeometry,
    target_sets: &[usize],
    seed: u64,
) -> Result<AccessTrace, TraceError> {
    if length == 0 {
        return Err(TraceError::InvalidSpec("length must be positive".into()));
    }
    if target_sets.is_empty() {
        return Err(TraceError::Unsatisfiable("no target sets given".into()));
    }
    let num_sets = geometry.num_sets();
    if let Some(&bad) = target_sets.iter().find(|&&s| s >= num_sets) {
        return Err(TraceError::Unsatisfiable(format!(
            "set {bad} does not exist in a {num_sets}-set cache"
        )));
    }
    let mut seen = target_sets.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != target_sets.len() {
        return Err(TraceError::Unsatisfiable("duplicate target sets".into()));
    }

    let phases: Vec<(SyntheticKind, usize)> = match kind {
        SyntheticKind::Phased { phases } => {
            if phases.is_empty() || phases.iter().any(|p| p.length == 0) {
                return Err(TraceError::InvalidSpec(
                    "phased needs at least one phase, each with positive length".into(),
                ));
            }
            phases.iter().map(|p| (p.kind.clone(), p.length)).collect()
        }
        other => vec![(other.clone(), length)],
    };

    // The tag must fit above the set and offset bits.
    let tag_bits = 64 - geometry.set_bits() - geometry.offset_bits();
    let lines_per_set = PatternState::max_lines(kind).div_ceil(target_sets.len()) as u64;
    let regions = phases.len() as u64;
    let needed_bits = 32 + (64 - regions.leading_zeros());
    if tag_bits < needed_bits || lines_per_set > u32::MAX as u64 {
        return Err(TraceError::Unsatisfiable(format!(
            "{tag_bits} tag bits cannot address {regions} regions of {lines_per_set} lines per set"
        )));
    }

    let map = AddressMap {
        geometry,
        target_sets,
    };
    let mut states = phases
        .iter()
        .map(|(k, _)| PatternState::new(k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accesses = Vec::with_capacity(length);
    'outer: loop {
        for (region, (_, phase_len)) in phases.iter().enumerate() {
            for _ in 0..*phase_len {
                if accesses.len() == length {
                    break 'outer;
                }
                accesses.push(states[region].next(&map, region as u64, &mut rng));
            }
        }
    }
    Ok(AccessTrace::new(accesses, TraceOrigin::Synthetic))
}

/// LRU set-associative cache used only for hierarchy filtering.
struct LruLevel {
    geometry: CacheGeometry,
    // Per set, resident lines ordered from least to most recently used.
    sets: Vec<Vec<u64>>,
}

impl LruLevel {
    fn new(geometry: CacheGeometry) -> Self {
        Self {
            sets: vec![Vec::with_capacity(geometry.associativity); geometry.num_sets()],
            geometry,
        }
    }

    /// Returns true on a hit. Misses insert the line, evicting the LRU line.
    fn access(&mut self, address: u64) -> bool {
        let line = self.geometry.line_of(address);
        let set = &mut self.sets[self.geometry.set_of(address)];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            let l = set.remove(pos);
            set.push(l);
            return true;
        }
        if set.len() == self.geometry.associativity {
            set.remove(0);
        }
        set.push(line);
        false
    }
}

/// Keeps exactly the accesses that miss in L1 and then in L2.
///
/// Both levels use LRU; L2 sees only L1 misses and a miss fills both levels.
pub fn filter_to_llc(raw: &AccessTrace, l1: &CacheGeometry, l2: &CacheGeometry) -> AccessTrace {
    let mut first = LruLevel::new(*l1);
    let mut second = LruLevel::new(*l2);
    let accesses = raw
        .accesses
        .iter()
        .copied()
        .filter(|a| !first.access(a.address) && !second.access(a.address))
        .collect();
    AccessTrace::new(accesses, TraceOrigin::LlcFiltered)
}

/// The 64 sets (of 2048) sampled from the 16-way 2MB LLC in the reference
/// experiments.
pub const REFERENCE_LLC_SETS: [usize; 64] = [
    6, 35, 38, 53, 67, 70, 113, 143, 157, 196, 287, 324, 332, 348, 362, 398, 406, 456, 458, 488,
    497, 499, 558, 611, 718, 725, 754, 775, 793, 822, 862, 895, 928, 1062, 1086, 1101, 1102, 1137,
    1144, 1175, 1210, 1211, 1223, 1237, 1268, 1308, 1342, 1348, 1353, 1424, 1437, 1456, 1574, 1599,
    1604, 1662, 1683, 1782, 1789, 1812, 1905, 1940, 1967, 1973,
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetSelection {
    Explicit(Vec<usize>),
    Random { count: usize, seed: u64 },
}

impl SetSelection {
    pub fn reference_llc() -> Self {
        SetSelection::Explicit(REFERENCE_LLC_SETS.to_vec())
    }

    /// Resolves to a sorted list of distinct set ids.
    pub fn resolve(&self, geometry: &CacheGeometry) -> Result<Vec<usize>, TraceError> {
        let num_sets = geometry.num_sets();
        let mut sets = match self {
            SetSelection::Explicit(sets) => {
                if let Some(&set) = sets.iter().find(|&&s| s >= num_sets) {
                    return Err(TraceError::SetOutOfRange { set, num_sets });
                }
                sets.clone()
            }
            SetSelection::Random { count, seed } => {
                if *count > num_sets {
                    return Err(TraceError::SampleTooLarge {
                        count: *count,
                        num_sets,
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rand::seq::index::sample(&mut rng, num_sets, *count).into_vec()
            }
        };
        sets.sort_unstable();
        sets.dedup();
        Ok(sets)
    }
}

/// Keeps the accesses whose set is selected, in order.
pub fn sample_sets(
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    selection: &SetSelection,
) -> Result<AccessTrace, TraceError> {
    let sets = selection.resolve(geometry)?;
    let mut keep = vec![false; geometry.num_sets()];
    for s in sets {
        keep[s] = true;
    }
    let accesses = trace
        .accesses
        .iter()
        .copied()
        .filter(|a| keep[geometry.set_of(a.address)])
        .collect();
    Ok(AccessTrace::new(accesses, trace.origin))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let parts = [self.train, self.valid, self.test];
        let ok = parts.iter().all(|f| f.is_finite() && *f >= 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(TraceError::InvalidSplit(self.train, self.valid, self.test))
        }
    }

    /// Segment lengths for a trace of `len` accesses; the remainder goes to test.
    pub fn lengths(&self, len: usize) -> (usize, usize, usize) {
        // The epsilon absorbs representation error such as 0.29 * 100 = 28.999…
        let floor = |f: f64| ((f * len as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(len);
        let valid = floor(self.valid).min(len - train);
        (train, valid, len - train - valid)
    }
}

/// Contiguous train / valid / test split, never shuffled.
pub fn split(
    trace: &AccessTrace,
    spec: &SplitSpec,
) -> Result<(AccessTrace, AccessTrace, AccessTrace), TraceError> {
    spec.validate()?;
    if trace.len() < 10 {
        return Err(TraceError::TooShort(trace.len()));
    }
    let (train, valid, _) = spec.lengths(trace.len());
    Ok((
        trace.slice(0..train),
        trace.slice(train..train + valid),
        trace.slice(train + valid..trace.len()),
    ))
}

/// Distinct line ids in order of first appearance, with access counts.
pub fn line_census(trace: &AccessTrace, geometry: &CacheGeometry) -> Vec<(u64, usize)> {
    let mut order = Vec::new();
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for a in &trace.accesses {
        let line = geometry.line_of(a.address);
        let c = counts.entry(line).or_insert(0);
        if *c == 0 {
            order.push(line);
        }
        *c += 1;
    }
    order.into_iter().map(|l| (l, counts[&l])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_set(ways: usize) -> CacheGeometry {
        CacheGeometry::with_sets(1, ways, 64).unwrap()
    }

    #[test]
    fn parses_one_access() {
        let t = parse_trace_str("0x400a2c,0x7f1b2e40\n").unwrap();
        assert_eq!(t.accesses, vec![MemoryAccess::new(0x400a2c, 0x7f1b2e40)]);
    }

    #[test]
    fn empty_and_comment_only_traces_are_rejected() {
        assert!(matches!(parse_trace_str(""), Err(TraceError::Empty)));
        assert!(matches!(
            parse_trace_str("# nothing here\n\n"),
            Err(TraceError::Empty)
        ));
    }

    #[test]
    fn syntax_error_reports_line() {
        match parse_trace_str("zz,0x1") {
            Err(TraceError::Syntax { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_trace_str("# header\n0x1,0x2\n0x3\n") {
            Err(TraceError::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_parse_round_trips() {
        let t = AccessTrace::new(
            vec![MemoryAccess::new(1, 2), MemoryAccess::new(u64::MAX, 0)],
            TraceOrigin::Raw,
        );
        let mut buf = Vec::new();
        write_trace(&t, &mut buf).unwrap();
        assert_eq!(parse_trace(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn geometry_validation() {
        assert_eq!(CacheGeometry::default_llc().num_sets(), 2048);
        assert_eq!(CacheGeometry::default_l1().num_sets(), 128);
        assert_eq!(CacheGeometry::default_l2().num_sets(), 512);
        assert!(CacheGeometry::new(3 * 64 * 4, 4, 64).is_err());
        assert!(CacheGeometry::new(1024, 4, 48).is_err());
        assert!(CacheGeometry::new(1000, 4, 64).is_err());
        assert!(CacheGeometry::new(1024, 0, 64).is_err());
    }

    #[test]
    fn geometry_json_is_validated() {
        let g: CacheGeometry =
            serde_json::from_str(r#"{"capacity_bytes": 2097152, "associativity": 16}"#).unwrap();
        assert_eq!(g, CacheGeometry::default_llc());
        let bad = serde_json::from_str::<CacheGeometry>(
            r#"{"capacity_bytes": 1000, "associativity": 16, "line_size_bytes": 64}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn cyclic_visits_lines_in_order() {
        let g = single_set(4);
        let t = generate_synthetic(&SyntheticKind::Cyclic { n_lines: 3 }, 6, &g, &[0], 7).unwrap();
        let lines = t.line_ids(&g);
        assert_eq!(&lines[..3], &lines[3..]);
        assert_eq!(
            lines[..3]
                .iter()
                .collect::<std::collections::HashSet<_>>()
                .len(),
            3
        );
        // One distinct pc per distinct line.
        let pcs: Vec<u64> = t.iter().map(|a| a.pc).collect();
        assert_eq!(&pcs[..3], &pcs[3..]);
        assert_ne!(pcs[0], pcs[1]);
    }

    #[test]
    fn synthetic_addresses_stay_in_target_sets() {
        let g = CacheGeometry::default_llc();
        let sets = [3, 100, 2047];
        let kind = SyntheticKind::Phased {
            phases: vec![
                Phase {
                    kind: SyntheticKind::Cyclic { n_lines: 11 },
                    length: 50,
                },
                Phase {
                    kind: SyntheticKind::Zipf {
                        n_lines: 40,
                        exponent: 1.0,
                        pc_pool: 16,
                    },
                    length: 30,
                },
            ],
        };
        let t = generate_synthetic(&kind, 1000, &g, &sets, 1).unwrap();
        assert_eq!(t.len(), 1000);
        assert!(t.iter().all(|a| sets.contains(&g.set_of(a.address))));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let g = CacheGeometry::with_sets(4, 4, 64).unwrap();
        let kind = SyntheticKind::Zipf {
            n_lines: 50,
            exponent: 0.8,
            pc_pool: 16,
        };
        let a = generate_synthetic(&kind, 500, &g, &[0, 1, 2, 3], 9).unwrap();
        let b = generate_synthetic(&kind, 500, &g, &[0, 1, 2, 3], 9).unwrap();
        let c = generate_synthetic(&kind, 500, &g, &[0, 1, 2, 3], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_sets() {
        let g = CacheGeometry::with_sets(4, 4, 64).unwrap();
        let kind = SyntheticKind::Cyclic { n_lines: 3 };
        assert!(matches!(
            generate_synthetic(&kind, 10, &g, &[4], 0),
            Err(TraceError::Unsatisfiable(_))
        ));
        assert!(matches!(
            generate_synthetic(&kind, 10, &g, &[], 0),
            Err(TraceError::Unsatisfiable(_))
        ));
        assert!(
            generate_synthetic(&SyntheticKind::Cyclic { n_lines: 0 }, 10, &g, &[0], 0).is_err()
        );
    }

    #[test]
    fn llc_filter_drops_l1_hits() {
        let a = MemoryAccess::new(1, 0x1000);
        let raw = AccessTrace::new(vec![a, a], TraceOrigin::Raw);
        let llc = filter_to_llc(
            &raw,
            &CacheGeometry::default_l1(),
            &CacheGeometry::default_l2(),
        );
        assert_eq!(llc.accesses, vec![a]);
        assert_eq!(llc.origin, TraceOrigin::LlcFiltered);
    }

    #[test]
    fn llc_filter_keeps_all_distinct_lines() {
        let raw = AccessTrace::new(
            (0..5000u64).map(|i| MemoryAccess::new(i, i * 64)).collect(),
            TraceOrigin::Raw,
        );
        let llc = filter_to_llc(
            &raw,
            &CacheGeometry::default_l1(),
            &CacheGeometry::default_l2(),
        );
        assert_eq!(llc.accesses, raw.accesses);
    }

    #[test]
    fn sampling_all_sets_is_identity() {
        let g = CacheGeometry::with_sets(8, 2, 64).unwrap();
        let t = generate_synthetic(
            &SyntheticKind::Zipf {
                n_lines: 30,
                exponent: 1.0,
                pc_pool: 4,
            },
            300,
            &g,
            &[0, 1, 2, 3, 4, 5, 6, 7],
            3,
        )
        .unwrap();
        let all = SetSelection::Explicit((0..8).collect());
        assert_eq!(sample_sets(&t, &g, &all).unwrap(), t);
        let one =
            generate_synthetic(&SyntheticKind::Cyclic { n_lines: 5 }, 40, &g, &[5], 0).unwrap();
        assert_eq!(
            sample_sets(&one, &g, &SetSelection::Explicit(vec![5])).unwrap(),
            one
        );
    }

    #[test]
    fn sampling_rejects_out_of_range_sets() {
        let g = CacheGeometry::with_sets(8, 2, 64).unwrap();
        let t = AccessTrace::new(vec![MemoryAccess::new(0, 0)], TraceOrigin::Raw);
        assert!(matches!(
            sample_sets(&t, &g, &SetSelection::Explicit(vec![8])),
            Err(TraceError::SetOutOfRange { set: 8, .. })
        ));
        assert!(sample_sets(&t, &g, &SetSelection::Random { count: 9, seed: 0 }).is_err());
    }

    #[test]
    fn reference_sets_fit_the_default_llc() {
        let g = CacheGeometry::default_llc();
        let sets = SetSelection::reference_llc().resolve(&g).unwrap();
        assert_eq!(sets.len(), 64);
        assert_eq!(sets[0], 6);
        assert_eq!(sets[63], 1973);
    }

    #[test]
    fn random_selection_is_deterministic_and_distinct() {
        let g = CacheGeometry::default_llc();
        let a = SetSelection::Random { count: 64, seed: 5 }
            .resolve(&g)
            .unwrap();
        let b = SetSelection::Random { count: 64, seed: 5 }
            .resolve(&g)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn split_lengths() {
        let mk = |n: usize| {
            AccessTrace::new(
                (0..n as u64).map(|i| MemoryAccess::new(0, i)).collect(),
                TraceOrigin::Raw,
            )
        };
        let spec = SplitSpec::default();
        let (a, b, c) = split(&mk(100), &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let (a, b, c) = split(&mk(101), &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 11));
        assert!(matches!(split(&mk(5), &spec), Err(TraceError::TooShort(5))));
        let bad = SplitSpec {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
        };
        assert!(split(&mk(100), &bad).is_err());
    }
}
