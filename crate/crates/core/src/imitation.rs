//! Imitation of Belady's: eviction losses, labelled state collection and the
//! DAgger-style training loop.
//!
//! Training repeatedly rolls a policy over the training trace, records every
//! miss on a full set together with the oracle's reuse distances, and fits
//! the model on windows of consecutive accesses around those states. The first
//! collection follows the oracle; later ones follow the model being trained
//! (or keep following the oracle when `dagger` is off).

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{rollout, CacheError, HitStats, ReplacementPolicy, RolloutOptions};
use crate::kernel::{adam_step, AdamConfig, AdamState, GradBuffer, KernelError};
use crate::model::{
    ActMode, Decision, LearnedPolicy, Model, ModelConfig, ModelError, ModelVocab, PolicyOutput,
    StateGrad,
};
use crate::oracle::{BeladyPolicy, ReuseDistance, ReuseDistanceTable};
use crate::trace::{AccessTrace, CacheGeometry};

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("no miss on a full set in the training trace; nothing to learn from")]
    EmptyBuffer,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

pub type Result<T> = std::result::Result<T, ImitationError>;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothed negative NDCG of the eviction distribution against the oracle
/// ranking.
///
/// Line `w` gets soft rank `pos_w = 1 + Σ_{i≠w} σ(α(π_i − π_w))`, roughly one
/// plus the number of lines more likely to be evicted, and relevance
/// `d_w − 1`. The loss is `−DCG/IDCG` with `DCG = Σ_w (d_w − 1)/ln(pos_w + 1)`
/// and `IDCG` the same sum over hard ranks with distances sorted descending,
/// so it lies in `[−1, 0]`. Returns the loss and its gradient in `probs`.
pub fn ranking_loss(probs: &[f64], distances: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let n = probs.len();
    assert_eq!(
        n,
        distances.len(),
        "ranking_loss: probs and distances differ in length"
    );
    let zero = vec![0.0; n];
    let mut sorted: Vec<f64> = distances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, d)| (d - 1.0) / ((k + 2) as f64).ln())
        .sum();
    if idcg <= 0.0 {
        return (0.0, zero);
    }
    if sorted.first() == sorted.last() {
        // Every ordering is ideal.
        return (-1.0, zero);
    }
    let mut pos = vec![1.0; n];
    let mut slope = vec![vec![0.0; n]; n]; // slope[w][i] = σ'(α(π_i − π_w))·α
    for w in 0..n {
        for i in 0..n {
            if i != w {
                let s = sigmoid(alpha * (probs[i] - probs[w]));
                pos[w] += s;
                slope[w][i] = alpha * s * (1.0 - s);
            }
        }
    }
    let mut dcg = 0.0;
    let mut grad = vec![0.0; n];
    for w in 0..n {
        let rel = distances[w] - 1.0;
        let l = (pos[w] + 1.0).ln();
        dcg += rel / l;
        let d_pos = -rel / ((pos[w] + 1.0) * l * l);
        for i in 0..n {
            if i != w {
                grad[i] += d_pos * slope[w][i];
                grad[w] -= d_pos * slope[w][i];
            }
        }
    }
    let loss = -dcg / idcg;
    grad.iter_mut().for_each(|g| *g *= -1.0 / idcg);
    (loss, grad)
}

/// Negative log-likelihood of the oracle's way, with the probability floored
/// at 1e-12.
pub fn ll_loss(probs: &[f64], oracle_way: usize) -> (f64, Vec<f64>) {
    let p = probs[oracle_way].max(1e-12);
    let mut grad = vec![0.0; probs.len()];
    if probs[oracle_way] > 1e-12 {
        grad[oracle_way] = -1.0 / p;
    }
    (-p.ln(), grad)
}

/// Mean squared error between predicted and actual log reuse distances.
pub fn reuse_loss(pred_log_reuse: &[f64], distances: &[f64]) -> (f64, Vec<f64>) {
    let n = pred_log_reuse.len();
    assert_eq!(
        n,
        distances.len(),
        "reuse_loss: predictions and distances differ in length"
    );
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for w in 0..n {
        let diff = pred_log_reuse[w] - distances[w].ln();
        loss += diff * diff / n as f64;
        grad[w] = 2.0 * diff / n as f64;
    }
    (loss, grad)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    RankingReuse,
    Ll,
    RankingOnly,
    LlReuse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseHead {
    /// Never train the reuse head.
    Off,
    /// Train it alongside the eviction loss when the loss kind asks for it.
    #[default]
    Aux,
    /// Always train it and act on it: evict the line with the highest
    /// predicted reuse distance.
    DirectEvict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub reuse_head: ReuseHead,
    pub alpha: f64,
}

impl LossConfig {
    pub fn uses_reuse(&self) -> bool {
        match self.reuse_head {
            ReuseHead::Off => false,
            ReuseHead::DirectEvict => true,
            ReuseHead::Aux => matches!(self.kind, LossKind::RankingReuse | LossKind::LlReuse),
        }
    }

    pub fn act_mode(&self) -> ActMode {
        match self.reuse_head {
            ReuseHead::DirectEvict => ActMode::DirectReuse,
            _ => ActMode::Policy,
        }
    }
}

/// The configured loss at one labelled state.
pub fn combined_loss(
    output: &PolicyOutput,
    label: &LabelledState,
    config: &LossConfig,
) -> StateGrad {
    let (loss, d_probs) = match config.kind {
        LossKind::RankingReuse | LossKind::RankingOnly => {
            ranking_loss(&output.evict_probs, &label.capped, config.alpha)
        }
        LossKind::Ll | LossKind::LlReuse => ll_loss(&output.evict_probs, label.oracle_way),
    };
    let (reuse, d_reuse) = if config.uses_reuse() {
        reuse_loss(&output.pred_log_reuse, &label.capped)
    } else {
        (0.0, vec![0.0; output.pred_log_reuse.len()])
    };
    StateGrad {
        loss: loss + reuse,
        d_probs,
        d_reuse,
    }
}

/// A miss on a full set with the oracle's view of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledState {
    pub timestep: usize,
    pub set: usize,
    /// Resident lines in way order.
    pub lines: Vec<u64>,
    pub distances: Vec<ReuseDistance>,
    /// `distances` with infinity replaced by the trace-position cap.
    pub capped: Vec<f64>,
    /// Belady's choice, lowest way on ties.
    pub oracle_way: usize,
    /// The way the collecting policy actually evicted.
    pub chosen_way: usize,
}

/// Labelled states in trace order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateBuffer {
    pub policy: String,
    pub states: Vec<LabelledState>,
}

impl StateBuffer {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// States whose timestep lies in `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> &[LabelledState] {
        let lo = self.states.partition_point(|s| s.timestep < start);
        let hi = self.states.partition_point(|s| s.timestep < end);
        &self.states[lo..hi]
    }
}

/// Rolls `policy` over `trace`, labelling every eviction with oracle reuse
/// distances from `table` (built over the same trace).
pub fn collect_states<P: ReplacementPolicy + ?Sized>(
    policy: &mut P,
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    table: &ReuseDistanceTable,
) -> Result<StateBuffer> {
    let stats = rollout(
        trace,
        geometry,
        policy,
        RolloutOptions {
            record_states: true,
            ..Default::default()
        },
    )?;
    let states = stats
        .states
        .unwrap_or_default()
        .into_iter()
        .map(|v| {
            let distances: Vec<ReuseDistance> = v
                .slots
                .iter()
                .map(|s| table.distance(v.timestep, s.last_access))
                .collect();
            let cap = table.cap(v.timestep);
            let capped = distances.iter().map(|d| d.capped(cap)).collect();
            let max = *distances.iter().max().expect("full set");
            let oracle_way = distances.iter().position(|d| *d == max).unwrap();
            LabelledState {
                timestep: v.timestep,
                set: v.set,
                lines: v.slots.iter().map(|s| s.line).collect(),
                distances,
                capped,
                oracle_way,
                chosen_way: v.chosen_way,
            }
        })
        .collect();
    Ok(StateBuffer {
        policy: stats.policy,
        states,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Parameter updates.
    pub steps: usize,
    pub batch_size: usize,
    pub recollect_period: usize,
    pub loss: LossKind,
    pub reuse_head: ReuseHead,
    /// Collect under the model after the first collection.
    pub dagger: bool,
    /// Soft-rank sharpness.
    pub alpha: f64,
    pub seed: u64,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// Batch elements per parallel work unit.
    pub chunk_size: usize,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            recollect_period: 5000,
            loss: LossKind::default(),
            reuse_head: ReuseHead::default(),
            dagger: true,
            alpha: 10.0,
            seed: 0,
            patience: None,
            chunk_size: 4,
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ImitationError::InvalidConfig(m.into()));
        if self.recollect_period == 0 {
            return bad("recollect_period must be positive");
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            reuse_head: self.reuse_head,
            alpha: self.alpha,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Collect,
    Validate,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub event: LogEvent,
    /// Mean per-window loss since the previous validation.
    pub train_loss: Option<f64>,
    pub valid_hit_rate: Option<f64>,
    pub collected_buffer_size: usize,
    /// Policy behind the current buffer: `oracle` or `learned`.
    pub collection_policy: String,
    /// `dagger`, or `off-policy` when every collection follows the oracle.
    pub regime: String,
    /// Seconds since training started.
    pub wall_time: f64,
}

pub struct TrainOutcome {
    /// The model with the best validation hit rate.
    pub model: Model,
    pub best_step: usize,
    pub best_valid_hit_rate: f64,
    pub log: Vec<LogRecord>,
}

/// Greedy rollout of `model` over `trace` on a cold cache.
pub fn evaluate_model(
    model: &Arc<Model>,
    trace: &AccessTrace,
    geometry: &CacheGeometry,
    mode: ActMode,
    options: RolloutOptions,
) -> Result<HitStats> {
    let mut policy = LearnedPolicy::new(Arc::clone(model), mode);
    Ok(rollout(trace, geometry, &mut policy, options)?)
}

/// Trains a fresh model on `train`, selecting the checkpoint by greedy hit
/// rate on `valid`.
pub fn train(
    train: &AccessTrace,
    valid: &AccessTrace,
    geometry: &CacheGeometry,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(ImitationError::EmptySplit("training"));
    }
    if valid.is_empty() {
        return Err(ImitationError::EmptySplit("validation"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offset_bits = geometry.offset_bits();
    let vocab = ModelVocab::build(train, offset_bits, config.model.pc_vocab_size);
    let mut model = Model::new(config.model.clone(), vocab, offset_bits, rng.next_u64())?;
    let table = Arc::new(ReuseDistanceTable::build(train, geometry));
    let loss_cfg = config.loss_config();
    let mode = loss_cfg.act_mode();
    let regime = if config.dagger {
        "dagger"
    } else {
        "off-policy"
    };
    let mut adam = AdamState::new(model.params(), config.adam);
    let mut log = Vec::new();
    let mut buffer = StateBuffer::default();
    let mut collection_policy = String::new();
    let (mut loss_sum, mut loss_batches) = (0.0, 0usize);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut stale = 0usize;

    let mut validate = |step: usize,
                        model: &Model,
                        loss: Option<f64>,
                        buffer_len: usize,
                        collection_policy: &str,
                        log: &mut Vec<LogRecord>|
     -> Result<bool> {
        let shared = Arc::new(model.clone());
        let rate =
            evaluate_model(&shared, valid, geometry, mode, RolloutOptions::default())?.hit_rate();
        log.push(LogRecord {
            step,
            event: LogEvent::Validate,
            train_loss: loss,
            valid_hit_rate: Some(rate),
            collected_buffer_size: buffer_len,
            collection_policy: collection_policy.into(),
            regime: regime.into(),
            wall_time: start.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| rate > *b);
        if improved {
            best = Some((rate, step, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        Ok(config.patience.is_some_and(|p| stale > p))
    };

    let mut stopped = validate(0, &model, None, 0, "", &mut log)?;
    let mut step = 0;
    while step < config.steps && !stopped {
        if step % config.recollect_period == 0 {
            if step > 0 {
                let mean = (loss_batches > 0).then(|| loss_sum / loss_batches as f64);
                (loss_sum, loss_batches) = (0.0, 0);
                stopped = validate(
                    step,
                    &model,
                    mean,
                    buffer.len(),
                    &collection_policy,
                    &mut log,
                )?;
                if stopped {
                    break;
                }
            }
            buffer = if step == 0 || !config.dagger {
                collection_policy = "oracle".into();
                collect_states(
                    &mut BeladyPolicy::new(Arc::clone(&table)),
                    train,
                    geometry,
                    &table,
                )?
            } else {
                collection_policy = "learned".into();
                let mut p = LearnedPolicy::new(Arc::new(model.clone()), mode);
                collect_states(&mut p, train, geometry, &table)?
            };
            if buffer.is_empty() {
                return Err(ImitationError::EmptyBuffer);
            }
            log.push(LogRecord {
                step,
                event: LogEvent::Collect,
                train_loss: None,
                valid_hit_rate: None,
                collected_buffer_size: buffer.len(),
                collection_policy: collection_policy.clone(),
                regime: regime.into(),
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        let anchors: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.gen_range(0..buffer.len()))
            .collect();
        let (loss, grads) = batch_gradient(
            &model,
            train,
            &buffer,
            &anchors,
            &loss_cfg,
            config.chunk_size,
        )?;
        model.params_mut().accumulate(&grads)?;
        adam_step(model.params_mut(), &mut adam);
        loss_sum += loss;
        loss_batches += 1;
        step += 1;
    }
    if !stopped && config.steps > 0 {
        let mean = (loss_batches > 0).then(|| loss_sum / loss_batches as f64);
        validate(
            step,
            &model,
            mean,
            buffer.len(),
            &collection_policy,
            &mut log,
        )?;
    }
    let (rate, best_step, best_model) = best.expect("validated at least once");
    Ok(TrainOutcome {
        model: best_model,
        best_step,
        best_valid_hit_rate: rate,
        log,
    })
}

/// Loss over one window anchored at a buffered state: warm up on the `H`
/// accesses before it, then score every buffered state in the next `H`.
pub fn window_loss(
    model: &Model,
    trace: &AccessTrace,
    buffer: &StateBuffer,
    anchor: usize,
    loss: &LossConfig,
    grads: Option<&mut GradBuffer>,
) -> Result<f64> {
    let h = model.config().history_len;
    let l = buffer.states[anchor].timestep;
    let end = (l + h).min(trace.len());
    let warmup = &trace.accesses[l.saturating_sub(h)..l];
    let window = &trace.accesses[l..end];
    let states = buffer.range(l, end);
    let decisions: Vec<Decision<'_>> = states
        .iter()
        .map(|s| Decision {
            step: s.timestep - l,
            lines: &s.lines,
        })
        .collect();
    Ok(model.window_loss(
        warmup,
        window,
        &decisions,
        |k, out| combined_loss(out, &states[k], loss),
        grads,
    )?)
}

/// Mean window loss over `anchors` and its gradient. Work is split into
/// fixed-size chunks whose results are summed in order, so the outcome does
/// not depend on the number of threads.
pub fn batch_gradient(
    model: &Model,
    trace: &AccessTrace,
    buffer: &StateBuffer,
    anchors: &[usize],
    loss: &LossConfig,
    chunk_size: usize,
) -> Result<(f64, GradBuffer)> {
    let parts: Vec<Result<(f64, GradBuffer)>> = anchors
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let mut g = GradBuffer::zeros_like(model.params());
            let mut total = 0.0;
            for &a in chunk {
                total += window_loss(model, trace, buffer, a, loss, Some(&mut g))?;
            }
            Ok((total, g))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = GradBuffer::zeros_like(model.params());
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add(&g)?;
    }
    let n = anchors.len().max(1) as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::LruPolicy;
    use crate::trace::{generate_synthetic, SyntheticKind};

    #[test]
    fn ranking_loss_equal_distances_is_minus_one() {
        let (l, g) = ranking_loss(&[0.1, 0.6, 0.3], &[4.0, 4.0, 4.0], 10.0);
        assert_eq!(l, -1.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ranking_loss_unit_distances_is_zero() {
        let (l, g) = ranking_loss(&[0.5, 0.5], &[1.0, 1.0], 10.0);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ranking_loss_two_lines_near_one_hot() {
        let (l, _) = ranking_loss(&[0.999, 0.001], &[3.0, 1.0], 10.0);
        assert!((l + 1.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn ll_loss_values() {
        assert_eq!(ll_loss(&[0.0, 1.0], 1).0, 0.0);
        let (l, _) = ll_loss(&[1.0 / 16.0; 16], 3);
        assert!((l - 16f64.ln()).abs() < 1e-12);
        let (l, g) = ll_loss(&[1.0, 0.0], 1);
        assert!((l - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn reuse_loss_values() {
        assert_eq!(reuse_loss(&[2f64.ln(), 5f64.ln()], &[2.0, 5.0]).0, 0.0);
        let (l, _) = reuse_loss(&[0.0], &[std::f64::consts::E.powi(2)]);
        assert!((l - 4.0).abs() < 1e-12);
    }

    fn label(capped: Vec<f64>, oracle_way: usize) -> LabelledState {
        LabelledState {
            timestep: 0,
            set: 0,
            lines: vec![0; capped.len()],
            distances: vec![],
            capped,
            oracle_way,
            chosen_way: 0,
        }
    }

    #[test]
    fn combined_loss_components() {
        let out = PolicyOutput {
            evict_probs: vec![0.2, 0.5, 0.3],
            pred_log_reuse: vec![0.1, 1.0, -0.4],
            line_contexts: vec![],
        };
        let lab = label(vec![7.0, 2.0, 3.0], 0);
        let cfg = |kind, reuse_head| LossConfig {
            kind,
            reuse_head,
            alpha: 10.0,
        };
        let rank = ranking_loss(&out.evict_probs, &lab.capped, 10.0).0;
        let ll = ll_loss(&out.evict_probs, 0).0;
        let reuse = reuse_loss(&out.pred_log_reuse, &lab.capped).0;
        let l = |c| combined_loss(&out, &lab, &c).loss;
        assert_eq!(l(cfg(LossKind::RankingOnly, ReuseHead::Aux)), rank);
        assert_eq!(l(cfg(LossKind::RankingReuse, ReuseHead::Aux)), rank + reuse);
        assert_eq!(l(cfg(LossKind::LlReuse, ReuseHead::Aux)), ll + reuse);
        assert_eq!(l(cfg(LossKind::Ll, ReuseHead::Aux)), ll);
        assert_eq!(l(cfg(LossKind::RankingReuse, ReuseHead::Off)), rank);
        assert_eq!(l(cfg(LossKind::Ll, ReuseHead::DirectEvict)), ll + reuse);
    }

    #[test]
    fn lru_collection_on_thrashing_trace_records_every_miss() {
        let g = CacheGeometry::with_sets(1, 2, 64).unwrap();
        let t = generate_synthetic(&SyntheticKind::Cyclic { n_lines: 3 }, 30, &g, &[0], 0).unwrap();
        let table = ReuseDistanceTable::build(&t, &g);
        let b = collect_states(&mut LruPolicy, &t, &g, &table).unwrap();
        assert_eq!(b.len(), 28);
        assert_eq!(
            b.states.iter().map(|s| s.timestep).collect::<Vec<_>>(),
            (2..30).collect::<Vec<_>>()
        );
        let again = collect_states(&mut LruPolicy, &t, &g, &table).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn oracle_labels_replay_belady() {
        let g = CacheGeometry::with_sets(2, 4, 64).unwrap();
        let t = generate_synthetic(
            &SyntheticKind::Zipf {
                n_lines: 40,
                exponent: 1.0,
                pc_pool: 8,
            },
            2000,
            &g,
            &[0, 1],
            1,
        )
        .unwrap();
        let table = Arc::new(ReuseDistanceTable::build(&t, &g));
        let b = collect_states(&mut BeladyPolicy::new(Arc::clone(&table)), &t, &g, &table).unwrap();
        assert!(b.states.iter().all(|s| s.oracle_way == s.chosen_way));
        struct Replay(std::vec::IntoIter<usize>);
        impl ReplacementPolicy for Replay {
            fn name(&self) -> String {
                "replay".into()
            }
            fn choose_victim(&mut self, _: &crate::cache::ReplacementState<'_>) -> usize {
                self.0.next().unwrap()
            }
        }
        let ways: Vec<usize> = b.states.iter().map(|s| s.oracle_way).collect();
        let replay = rollout(
            &t,
            &g,
            &mut Replay(ways.into_iter()),
            RolloutOptions::default(),
        )
        .unwrap();
        let belady = rollout(
            &t,
            &g,
            &mut BeladyPolicy::new(table),
            RolloutOptions::default(),
        )
        .unwrap();
        assert_eq!(replay.hits, belady.hits);
    }

    fn small_setup() -> (AccessTrace, AccessTrace, CacheGeometry, TrainConfig) {
        let g = CacheGeometry::with_sets(2, 2, 64).unwrap();
        let t =
            generate_synthetic(&SyntheticKind::Cyclic { n_lines: 6 }, 400, &g, &[0, 1], 0).unwrap();
        let config = TrainConfig {
            steps: 6,
            batch_size: 4,
            recollect_period: 3,
            chunk_size: 2,
            model: ModelConfig::uniform(4, 6),
            ..Default::default()
        };
        let valid = t.slice(300..400);
        (t.slice(0..300), valid, g, config)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (train_t, valid, g, mut config) = small_setup();
        config.steps = 0;
        let out = train(&train_t, &valid, &g, &config).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].event, LogEvent::Validate);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = ModelVocab::build(&train_t, 6, 5000);
        let fresh = Model::new(config.model.clone(), vocab, 6, rng.next_u64()).unwrap();
        assert_eq!(fresh.params().values(), out.model.params().values());
    }

    #[test]
    fn training_is_reproducible_and_recollects() {
        let (train_t, valid, g, config) = small_setup();
        let a = train(&train_t, &valid, &g, &config).unwrap();
        let b = train(&train_t, &valid, &g, &config).unwrap();
        assert_eq!(a.model.params().values(), b.model.params().values());
        let strip = |log: &[LogRecord]| {
            log.iter()
                .map(|r| LogRecord {
                    wall_time: 0.0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
        let collects: Vec<(usize, &str)> = a
            .log
            .iter()
            .filter(|r| r.event == LogEvent::Collect)
            .map(|r| (r.step, r.collection_policy.as_str()))
            .collect();
        assert_eq!(collects, vec![(0, "oracle"), (3, "learned")]);
    }

    #[test]
    fn off_policy_collects_under_oracle() {
        let (train_t, valid, g, mut config) = small_setup();
        config.dagger = false;
        let out = train(&train_t, &valid, &g, &config).unwrap();
        assert!(out.log.iter().all(|r| r.regime == "off-policy"));
        assert!(out
            .log
            .iter()
            .filter(|r| r.event == LogEvent::Collect)
            .all(|r| r.collection_policy == "oracle"));
    }

    #[test]
    fn chunking_does_not_change_gradient() {
        let (train_t, _, g, config) = small_setup();
        let vocab = ModelVocab::build(&train_t, 6, 5000);
        let model = Model::new(config.model.clone(), vocab, 6, 3).unwrap();
        let table = ReuseDistanceTable::build(&train_t, &g);
        let b = collect_states(&mut LruPolicy, &train_t, &g, &table).unwrap();
        let anchors = [0, 5, 9, 17, 3];
        let lc = config.loss_config();
        let (l1, g1) = batch_gradient(&model, &train_t, &b, &anchors, &lc, 1).unwrap();
        let (l2, g2) = batch_gradient(&model, &train_t, &b, &anchors, &lc, 5).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for id in model.params().ids() {
            for (a, b) in g1.get(id).data().iter().zip(g2.get(id).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_without_full_set_misses_is_an_error() {
        let g = CacheGeometry::with_sets(1, 8, 64).unwrap();
        let t = generate_synthetic(&SyntheticKind::Cyclic { n_lines: 3 }, 30, &g, &[0], 0).unwrap();
        let config = TrainConfig {
            steps: 2,
            batch_size: 2,
            model: ModelConfig::uniform(4, 4),
            ..Default::default()
        };
        assert!(matches!(
            train(&t, &t, &g, &config),
            Err(ImitationError::EmptyBuffer)
        ));
    }
}
