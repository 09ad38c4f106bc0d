//! Metrics, sweeps and reports.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::LruPolicy;
use crate::cache::{rollout, CacheError, HitStats, ReplacementPolicy, RolloutOptions};
use crate::imitation::{self, ImitationError, TrainConfig};
use crate::oracle::{BeladyPolicy, ReuseDistanceTable};
use crate::trace::{AccessTrace, CacheGeometry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("normalized hit rate is undefined: Belady and LRU both hit {0}")]
    ZeroGap(f64),
    #[error("k = {k} exceeds associativity {ways}")]
    TopKTooLarge { k: usize, ways: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Imitation(#[from] ImitationError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `(r − r_lru) / (r_opt − r_lru)`: 0 at LRU, 1 at Belady's.
pub fn normalized_hit_rate(r: f64, r_lru: f64, r_opt: f64) -> Result<f64> {
    let gap = r_opt - r_lru;
    if gap.abs() < 1e-12 {
        return Err(EvalError::ZeroGap(r_opt));
    }
    Ok((r - r_lru) / gap)
}

/// Ways ordered by descending score, lowest way first among equals.
pub fn rank_ways(scores: &[f64]) -> Vec<usize> {
    let mut ways: Vec<usize> = (0..scores.len()).collect();
    ways.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ways
}

/// Percentage of states whose oracle way is among the `k` highest-scored
/// ways.
pub fn topk_accuracy(scores: &[Vec<f64>], oracle_ways: &[usize], k: usize) -> Result<f64> {
    assert_eq!(
        scores.len(),
        oracle_ways.len(),
        "one oracle way per scored state"
    );
    if scores.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (s, &o) in scores.iter().zip(oracle_ways) {
        if k > s.len() {
            return Err(EvalError::TopKTooLarge { k, ways: s.len() });
        }
        if rank_ways(s)[..k].contains(&o) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// Mean of `d(optimal) − d(chosen)` over states, using capped distances.
pub fn reuse_distance_gap(capped: &[Vec<f64>], chosen: &[usize]) -> f64 {
    assert_eq!(capped.len(), chosen.len(), "one choice per state");
    if capped.is_empty() {
        return 0.0;
    }
    let total: f64 = capped
        .iter()
        .zip(chosen)
        .map(|(d, &c)| d.iter().copied().fold(f64::NEG_INFINITY, f64::max) - d[c])
        .sum();
    total / capped.len() as f64
}

/// One policy's results on one trace, measured after a warm-up prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    /// Absent when Belady's and LRU tie.
    pub normalized_hit_rate: Option<f64>,
    /// Present for policies that expose eviction scores.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub reuse_gap: f64,
    /// Decisions (over the whole rollout) the policy handed to its fallback
    /// rule; present only for policies with one, such as nn_belady.
    pub fallbacks: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub trace_id: String,
    pub geometry: CacheGeometry,
    pub policies: Vec<PolicyReport>,
}

/// Raw measurements of a policy before normalisation.
#[derive(Clone, Debug)]
pub struct PolicyRun {
    pub name: String,
    pub hits: u64,
    pub misses: u64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub reuse_gap: f64,
    pub fallbacks: Option<u64>,
}

impl PolicyRun {
    pub fn hit_rate(&self) -> f64 {
        let n = self.hits + self.misses;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }
}

/// Hits and misses at or after `skip`.
pub fn counts_after(stats: &HitStats, skip: usize) -> (u64, u64) {
    let outcomes = stats
        .outcomes
        .as_deref()
        .expect("rollout must record outcomes");
    let tail = outcomes.get(skip..).unwrap_or(&[]);
    let hits = tail.iter().filter(|o| o.is_hit()).count() as u64;
    (hits, tail.len() as u64 - hits)
}

/// Rolls `policy` over `trace` and measures it against the oracle.
pub fn run_policy<P: ReplacementPolicy + ?Sized>(
    policy: &mut P,
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    table: &ReuseDistanceTable,
    skip: usize,
) -> Result<PolicyRun> {
    let stats = rollout(
        trace,
        geometry,
        policy,
        RolloutOptions {
            record_outcomes: true,
            record_states: true,
        },
    )?;
    let (hits, misses) = counts_after(&stats, skip);
    let states: Vec<_> = stats
        .states
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .filter(|s| s.timestep >= skip)
        .collect();
    let mut capped = Vec::with_capacity(states.len());
    let mut oracle = Vec::with_capacity(states.len());
    let mut chosen = Vec::with_capacity(states.len());
    let mut scores = Vec::with_capacity(states.len());
    for s in &states {
        let cap = table.cap(s.timestep);
        let dists: Vec<_> = s
            .slots
            .iter()
            .map(|sl| table.distance(s.timestep, sl.last_access))
            .collect();
        let max = *dists.iter().max().expect("full set");
        oracle.push(dists.iter().position(|d| *d == max).unwrap());
        capped.push(dists.iter().map(|d| d.capped(cap)).collect::<Vec<f64>>());
        chosen.push(s.chosen_way);
        if let Some(sc) = &s.scores {
            scores.push(sc.clone());
        }
    }
    let scored = !states.is_empty() && scores.len() == states.len();
    let topk = |k: usize| -> Result<Option<f64>> {
        if !scored {
            return Ok(None);
        }
        let k = k.min(geometry.associativity);
        Ok(Some(topk_accuracy(&scores, &oracle, k)?))
    };
    Ok(PolicyRun {
        name: stats.policy,
        hits,
        misses,
        top1: topk(1)?,
        top5: topk(5)?,
        reuse_gap: reuse_distance_gap(&capped, &chosen),
        fallbacks: policy.fallback_decisions(),
    })
}

/// Hit rates of LRU and (lowest-way) Belady's after `skip`.
pub fn reference_rates(
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    table: &Arc<ReuseDistanceTable>,
    skip: usize,
) -> Result<(f64, f64)> {
    let opts = RolloutOptions {
        record_outcomes: true,
        ..Default::default()
    };
    let rate = |stats: HitStats| {
        let (h, m) = counts_after(&stats, skip);
        if h + m == 0 {
            0.0
        } else {
            h as f64 / (h + m) as f64
        }
    };
    let lru = rate(rollout(trace, geometry, &mut LruPolicy, opts)?);
    let opt = rate(rollout(
        trace,
        geometry,
        &mut BeladyPolicy::new(Arc::clone(table)),
        opts,
    )?);
    Ok((lru, opt))
}

/// Evaluates each policy on `trace` and assembles a report.
pub fn build_report(
    trace_id: &str,
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    policies: &mut [Box<dyn ReplacementPolicy + Send>],
    table: &Arc<ReuseDistanceTable>,
    skip: usize,
) -> Result<Report> {
    let (r_lru, r_opt) = reference_rates(trace, geometry, table, skip)?;
    let mut out = Vec::with_capacity(policies.len());
    for p in policies.iter_mut() {
        let run = run_policy(p.as_mut(), trace, geometry, table, skip)?;
        out.push(PolicyReport {
            hit_rate: run.hit_rate(),
            normalized_hit_rate: normalized_hit_rate(run.hit_rate(), r_lru, r_opt).ok(),
            name: run.name,
            hits: run.hits,
            misses: run.misses,
            top1: run.top1,
            top5: run.top5,
            reuse_gap: run.reuse_gap,
            fallbacks: run.fallbacks,
        });
    }
    Ok(Report {
        trace_id: trace_id.into(),
        geometry: *geometry,
        policies: out,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "trace_id,policy,hits,misses,hit_rate,normalized_hit_rate,top1,top5,reuse_gap,fallbacks";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per (trace, policy), under [`REPORT_CSV_HEADER`].
pub fn reports_csv(reports: &[Report]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        for p in &r.policies {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.trace_id,
                p.name,
                p.hits,
                p.misses,
                p.hit_rate,
                opt(p.normalized_hit_rate),
                opt(p.top1),
                opt(p.top5),
                p.reuse_gap,
                p.fallbacks.map(|n| n.to_string()).unwrap_or_default()
            );
        }
    }
    s
}

/// Writes `<stem>.json` (an array of reports) and `<stem>.csv`.
pub fn emit_report(reports: &[Report], json_path: &Path, csv_path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    fs::write(json_path, json)?;
    fs::write(csv_path, reports_csv(reports))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub value: f64,
    pub stderr: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("x,value,stderr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.x, p.value, p.stderr);
    }
    s
}

/// Mean and standard error of the mean (0 for fewer than two samples).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Largest finite reuse distance anywhere in the trace.
pub fn max_finite_reuse(table: &ReuseDistanceTable) -> u64 {
    (0..table.len())
        .filter_map(|t| table.next_use(t).map(|n| (n - t) as u64))
        .max()
        .unwrap_or(0)
}

/// Normalised hit rate of windowed Belady's for each window size, averaged
/// over random tie-breaking seeds.
pub fn sweep_window(
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    windows: &[u64],
    tie_seeds: &[u64],
    skip: usize,
) -> Result<Vec<CurvePoint>> {
    let table = Arc::new(ReuseDistanceTable::build(trace, geometry));
    let (r_lru, r_opt) = reference_rates(trace, geometry, &table, skip)?;
    let jobs: Vec<(u64, u64)> = windows
        .iter()
        .flat_map(|&x| tie_seeds.iter().map(move |&s| (x, s)))
        .collect();
    let rates: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(x, seed)| {
            let mut p = BeladyPolicy::windowed(Arc::clone(&table), Some(x), seed);
            let stats = rollout(
                trace,
                geometry,
                &mut p,
                RolloutOptions {
                    record_outcomes: true,
                    ..Default::default()
                },
            )?;
            let (h, m) = counts_after(&stats, skip);
            let r = if h + m == 0 {
                0.0
            } else {
                h as f64 / (h + m) as f64
            };
            normalized_hit_rate(r, r_lru, r_opt)
        })
        .collect();
    let rates = rates.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(windows
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let chunk = &rates[i * tie_seeds.len()..(i + 1) * tie_seeds.len()];
            let (value, stderr) = mean_stderr(chunk);
            CurvePoint {
                x: x as f64,
                value,
                stderr,
            }
        })
        .collect())
}

pub const DEFAULT_HISTORY_GRID: [usize; 7] = [20, 40, 60, 80, 100, 120, 140];

/// Trains one model per (history length, seed) and reports the test-split
/// normalised hit rate of each history length.
pub fn sweep_history(
    train: &AccessTrace,
    valid: &AccessTrace,
    test: &AccessTrace,
    geometry: &CacheGeometry,
    base: &TrainConfig,
    history_lens: &[usize],
    seeds: &[u64],
) -> Result<Vec<CurvePoint>> {
    let test_table = Arc::new(ReuseDistanceTable::build(test, geometry));
    let (r_lru, r_opt) = reference_rates(test, geometry, &test_table, 0)?;
    let jobs: Vec<(usize, u64)> = history_lens
        .iter()
        .flat_map(|&h| seeds.iter().map(move |&s| (h, s)))
        .collect();
    let values: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(h, seed)| {
            let mut cfg = base.clone();
            cfg.model.history_len = h;
            cfg.seed = seed;
            let out = imitation::train(train, valid, geometry, &cfg)?;
            let model = Arc::new(out.model);
            let stats = imitation::evaluate_model(
                &model,
                test,
                geometry,
                cfg.loss_config().act_mode(),
                RolloutOptions::default(),
            )?;
            normalized_hit_rate(stats.hit_rate(), r_lru, r_opt)
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(history_lens
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let (value, stderr) = mean_stderr(&values[i * seeds.len()..(i + 1) * seeds.len()]);
            CurvePoint {
                x: h as f64,
                value,
                stderr,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::RandomPolicy;
    use crate::trace::{generate_synthetic, SyntheticKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalized_rate_examples() {
        assert_eq!(normalized_hit_rate(0.3, 0.3, 0.5).unwrap(), 0.0);
        assert_eq!(normalized_hit_rate(0.5, 0.3, 0.5).unwrap(), 1.0);
        let v = normalized_hit_rate(0.414, 0.261, 0.451).unwrap();
        assert!((v - 0.805).abs() < 5e-4, "{v}");
        assert!(matches!(
            normalized_hit_rate(0.2, 0.4, 0.4),
            Err(EvalError::ZeroGap(_))
        ));
        assert!(normalized_hit_rate(0.1, 0.3, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn topk_examples() {
        let scores = vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.0]];
        assert_eq!(topk_accuracy(&scores, &[1, 1], 1).unwrap(), 50.0);
        assert_eq!(topk_accuracy(&scores, &[1, 1], 2).unwrap(), 100.0);
        assert_eq!(topk_accuracy(&scores, &[2, 2], 3).unwrap(), 100.0);
        assert!(topk_accuracy(&scores, &[0, 0], 4).is_err());
    }

    #[test]
    fn topk_random_scores_near_one_in_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..16).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let oracle: Vec<usize> = (0..n).map(|_| rng.gen_range(0..16)).collect();
        let acc = topk_accuracy(&scores, &oracle, 1).unwrap();
        assert!((acc - 6.25).abs() < 1.0, "{acc}");
    }

    #[test]
    fn gap_examples() {
        assert_eq!(reuse_distance_gap(&[vec![5.0, 2.0]], &[1]), 3.0);
        assert_eq!(reuse_distance_gap(&[vec![5.0, 2.0]], &[0]), 0.0);
        assert_eq!(reuse_distance_gap(&[vec![9.0, 9.0, 1.0]], &[1]), 0.0);
    }

    fn zipf_trace() -> (AccessTrace, CacheGeometry) {
        let g = CacheGeometry::with_sets(4, 4, 64).unwrap();
        let t = generate_synthetic(
            &SyntheticKind::Zipf {
                n_lines: 80,
                exponent: 0.9,
                pc_pool: 8,
            },
            4000,
            &g,
            &[0, 1, 2, 3],
            2,
        )
        .unwrap();
        (t, g)
    }

    #[test]
    fn report_normalises_reference_policies() {
        let (t, g) = zipf_trace();
        let table = Arc::new(ReuseDistanceTable::build(&t, &g));
        let mut policies: Vec<Box<dyn ReplacementPolicy + Send>> = vec![
            Box::new(LruPolicy),
            Box::new(BeladyPolicy::new(Arc::clone(&table))),
            Box::new(RandomPolicy::new(1)),
        ];
        let r = build_report("zipf", &t, &g, &mut policies, &table, 0).unwrap();
        assert_eq!(r.policies[0].normalized_hit_rate, Some(0.0));
        assert_eq!(r.policies[1].normalized_hit_rate, Some(1.0));
        assert_eq!(r.policies[1].reuse_gap, 0.0);
        assert!(r.policies[2].reuse_gap > 0.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let csv = reports_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    #[test]
    fn window_sweep_reaches_belady_above_max_distance() {
        let (t, g) = zipf_trace();
        let table = ReuseDistanceTable::build(&t, &g);
        let max = max_finite_reuse(&table);
        let pts = sweep_window(&t, &g, &[0, 10, max], &[0, 1, 2, 3, 4], 0).unwrap();
        assert!((pts[2].value - 1.0).abs() < 1e-9);
        assert!(pts[2].value >= pts[0].value);
        assert!(curve_csv(&pts).starts_with("x,value,stderr\n"));
    }

    #[test]
    fn mean_stderr_basics() {
        assert_eq!(mean_stderr(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
