//! The eviction network.
//!
//! Each access is embedded as `[e(line); e(pc)]` and fed through an LSTM whose
//! last `H` hidden states are kept. At a miss on a full set, every resident
//! line attends over those hidden states (keys are `[h_i; pos_i]` with
//! sinusoidal position embeddings, values are `h_i`) through a bilinear
//! score `e(line)ᵀ W [h_i; pos_i]`. The resulting per-line context feeds two
//! scalar heads: an eviction logit, softmaxed over the set, and a predicted
//! log reuse distance.
//!
//! Addresses are embedded at cache-line granularity (`address >> offset_bits`)
//! so resident lines and accesses share one embedder.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{ReplacementPolicy, ReplacementState};
use crate::kernel::{
    concat, embedding_backward, embedding_lookup, linear, linear_backward, lstm_cell,
    lstm_cell_backward, softmax, softmax_backward, weighted_sum, weighted_sum_backward, GradBuffer,
    KernelError, LstmGrads, LstmStep, LstmWeights, ManifestEntry, ParamId, ParameterStore, Tensor,
};
use crate::trace::{AccessTrace, MemoryAccess};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CACHELAB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("history buffer is empty")]
    EmptyHistory,
    #[error("no lines to score")]
    NoLines,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("checkpoint not found: {0}")]
    NotFound(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// One learned row per distinct training value plus a shared unknown row.
    Vocab,
    /// Each of the 8 little-endian bytes through its own 256-row table, then
    /// one linear layer.
    Byte,
}

impl std::fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbedderKind::Vocab => "vocab",
            EmbedderKind::Byte => "byte",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub address_dim: usize,
    pub pc_dim: usize,
    /// Upper bound on distinct pcs given their own row.
    pub pc_vocab_size: usize,
    /// Distinct training lines; filled in from the vocabulary.
    pub address_vocab_size: usize,
    pub position_dim: usize,
    pub lstm_dim: usize,
    pub history_len: usize,
    pub embedder: EmbedderKind,
    pub byte_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            address_dim: 64,
            pc_dim: 64,
            pc_vocab_size: 5000,
            address_vocab_size: 0,
            position_dim: 128,
            lstm_dim: 128,
            history_len: 80,
            embedder: EmbedderKind::Vocab,
            byte_dim: 16,
        }
    }
}

impl ModelConfig {
    /// Every dimension set to `d` and history length `h`.
    pub fn uniform(d: usize, h: usize) -> Self {
        Self {
            address_dim: d,
            pc_dim: d,
            position_dim: d,
            lstm_dim: d,
            history_len: h,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("address_dim", self.address_dim),
            ("pc_dim", self.pc_dim),
            ("pc_vocab_size", self.pc_vocab_size),
            ("position_dim", self.position_dim),
            ("lstm_dim", self.lstm_dim),
            ("history_len", self.history_len),
            ("byte_dim", self.byte_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Dense ids in first-appearance order. Row `k` belongs to the `k`-th key;
/// every unknown key shares the final row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<u64>", into = "Vec<u64>")]
pub struct Vocab {
    keys: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl From<Vec<u64>> for Vocab {
    fn from(keys: Vec<u64>) -> Self {
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        Self { keys, index }
    }
}

impl From<Vocab> for Vec<u64> {
    fn from(v: Vocab) -> Self {
        v.keys
    }
}

impl Vocab {
    /// Every distinct key, in order of first appearance.
    pub fn build(keys: impl IntoIterator<Item = u64>) -> Self {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for k in keys {
            if seen.insert(k) {
                out.push(k);
            }
        }
        Self::from(out)
    }

    /// At most `cap` keys: the most frequent ones (earlier first appearance
    /// wins ties), still numbered in first-appearance order.
    pub fn build_capped(keys: impl IntoIterator<Item = u64>, cap: usize) -> Self {
        let mut stats: HashMap<u64, (usize, usize)> = HashMap::new();
        for (pos, k) in keys.into_iter().enumerate() {
            stats.entry(k).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(u64, usize, usize)> = stats
            .into_iter()
            .map(|(k, (n, first))| (k, n, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);
        ranked.sort_by_key(|r| r.2);
        Self::from(ranked.into_iter().map(|r| r.0).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Number of embedding rows, including the unknown row.
    pub fn rows(&self) -> usize {
        self.keys.len() + 1
    }

    pub fn unknown_row(&self) -> usize {
        self.keys.len()
    }

    pub fn row(&self, key: u64) -> usize {
        self.index.get(&key).copied().unwrap_or(self.keys.len())
    }

    pub fn contains(&self, key: u64) -> bool {
        self.index.contains_key(&key)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelVocab {
    pub lines: Vocab,
    pub pcs: Vocab,
}

impl ModelVocab {
    pub fn build(train: &AccessTrace, offset_bits: u32, pc_cap: usize) -> Self {
        Self {
            lines: Vocab::build(train.iter().map(|a| a.address >> offset_bits)),
            pcs: Vocab::build_capped(train.iter().map(|a| a.pc), pc_cap),
        }
    }
}

/// `sin(pos / 10000^(2i/d))` at even index `2i`, the matching cosine at `2i+1`.
pub fn positional_embedding(pos: i64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| {
            let pair = (k / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / dim as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum EmbedderIds {
    Vocab {
        table: ParamId,
    },
    Byte {
        tables: ParamId,
        proj_w: ParamId,
        proj_b: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
struct ParamIds {
    line: EmbedderIds,
    pc: EmbedderIds,
    w_ih: ParamId,
    w_hh: ParamId,
    lstm_b: ParamId,
    attention: ParamId,
    policy_w: ParamId,
    policy_b: ParamId,
    reuse_w: ParamId,
    reuse_b: ParamId,
}

#[derive(Clone, Debug)]
enum EmbedInput {
    Row(usize),
    Bytes { rows: [usize; 8], cat: Tensor },
}

/// LSTM state plus the most recent hidden states, oldest first.
#[derive(Clone, Debug)]
pub struct HistoryState {
    h: Tensor,
    c: Tensor,
    buffer: VecDeque<Tensor>,
    capacity: usize,
    steps: u64,
}

impl HistoryState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            h: Tensor::zeros(&[config.lstm_dim]),
            c: Tensor::zeros(&[config.lstm_dim]),
            buffer: VecDeque::with_capacity(config.history_len),
            capacity: config.history_len,
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Accesses consumed so far; the newest buffered state belongs to step
    /// `steps() - 1`.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn hidden(&self) -> &Tensor {
        &self.h
    }

    pub fn cell(&self) -> &Tensor {
        &self.c
    }

    pub fn buffered(&self) -> impl Iterator<Item = &Tensor> {
        self.buffer.iter()
    }

    fn push(&mut self, h: Tensor, c: Tensor) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(h.clone());
        self.h = h;
        self.c = c;
        self.steps += 1;
    }
}

/// Scores for the resident lines of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub evict_probs: Vec<f64>,
    pub pred_log_reuse: Vec<f64>,
    pub line_contexts: Vec<Tensor>,
}

/// Greedy action: the most probable way, lowest way on ties.
pub fn act(output: &PolicyOutput) -> usize {
    argmax(&output.evict_probs)
}

/// The way with the highest predicted reuse distance.
pub fn act_by_reuse(output: &PolicyOutput) -> usize {
    argmax(&output.pred_log_reuse)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct LineTape {
    embed: Tensor,
    input: EmbedInput,
    query: Tensor,
    attn: Tensor,
    context: Tensor,
}

struct ScoreTape {
    keys: Tensor,
    values: Tensor,
    lines: Vec<LineTape>,
    probs: Tensor,
}

/// A decision point inside a training window: the window step it follows
/// and the resident lines, in way order.
#[derive(Clone, Copy, Debug)]
pub struct Decision<'a> {
    pub step: usize,
    pub lines: &'a [u64],
}

/// A loss value and its gradients with respect to the two heads' outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub loss: f64,
    pub d_probs: Vec<f64>,
    pub d_reuse: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    offset_bits: u32,
    vocab: ModelVocab,
    params: ParameterStore,
    ids: ParamIds,
    // Row r holds the embedding of relative position r - (H - 1).
    positions: Tensor,
}

impl Model {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn new(
        config: ModelConfig,
        vocab: ModelVocab,
        offset_bits: u32,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        config.address_vocab_size = vocab.lines.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let c = &config;
        let mut embedder = |p: &mut ParameterStore, prefix: &str, dim: usize, rows: usize| {
            Ok::<_, KernelError>(match c.embedder {
                EmbedderKind::Vocab => EmbedderIds::Vocab {
                    table: p.add_glorot(&format!("{prefix}.table"), &[rows, dim], &mut rng)?,
                },
                EmbedderKind::Byte => EmbedderIds::Byte {
                    tables: p.add_glorot(
                        &format!("{prefix}.bytes"),
                        &[8 * 256, c.byte_dim],
                        &mut rng,
                    )?,
                    proj_w: p.add_glorot(
                        &format!("{prefix}.proj.w"),
                        &[dim, 8 * c.byte_dim],
                        &mut rng,
                    )?,
                    proj_b: p.add_zeros(&format!("{prefix}.proj.b"), &[dim])?,
                },
            })
        };
        let line = embedder(&mut p, "line", c.address_dim, vocab.lines.rows())?;
        let pc = embedder(&mut p, "pc", c.pc_dim, vocab.pcs.rows())?;
        let n = c.lstm_dim;
        let w_ih = p.add_glorot("lstm.w_ih", &[4 * n, c.address_dim + c.pc_dim], &mut rng)?;
        let w_hh = p.add_glorot("lstm.w_hh", &[4 * n, n], &mut rng)?;
        let mut bias = Tensor::zeros(&[4 * n]);
        bias.data_mut()[n..2 * n].fill(1.0);
        let lstm_b = p.add("lstm.b", bias)?;
        let attention = p.add_glorot(
            "attention.w",
            &[c.address_dim, n + c.position_dim],
            &mut rng,
        )?;
        let policy_w = p.add_glorot("policy.w", &[1, n], &mut rng)?;
        let policy_b = p.add_zeros("policy.b", &[1])?;
        let reuse_w = p.add_glorot("reuse.w", &[1, n], &mut rng)?;
        let reuse_b = p.add_zeros("reuse.b", &[1])?;
        let ids = ParamIds {
            line,
            pc,
            w_ih,
            w_hh,
            lstm_b,
            attention,
            policy_w,
            policy_b,
            reuse_w,
            reuse_b,
        };
        let h = c.history_len;
        let mut pos = Vec::with_capacity(h * c.position_dim);
        for r in 0..h {
            pos.extend(positional_embedding(
                r as i64 - (h as i64 - 1),
                c.position_dim,
            ));
        }
        let positions = Tensor::from_vec(&[h, c.position_dim], pos)?;
        Ok(Self {
            config,
            offset_bits,
            vocab,
            params: p,
            ids,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn offset_bits(&self) -> u32 {
        self.offset_bits
    }

    pub fn vocab(&self) -> &ModelVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Scalar parameter count of the line (address) embedder.
    pub fn address_embedder_params(&self) -> usize {
        self.embedder_params(self.ids.line)
    }

    pub fn pc_embedder_params(&self) -> usize {
        self.embedder_params(self.ids.pc)
    }

    fn embedder_params(&self, e: EmbedderIds) -> usize {
        match e {
            EmbedderIds::Vocab { table } => self.params.value(table).len(),
            EmbedderIds::Byte {
                tables,
                proj_w,
                proj_b,
            } => [tables, proj_w, proj_b]
                .iter()
                .map(|&id| self.params.value(id).len())
                .sum(),
        }
    }

    fn lstm(&self) -> LstmWeights<'_> {
        LstmWeights {
            w_ih: self.params.value(self.ids.w_ih),
            w_hh: self.params.value(self.ids.w_hh),
            bias: self.params.value(self.ids.lstm_b),
        }
    }

    fn embed(&self, e: EmbedderIds, vocab: &Vocab, key: u64) -> Result<(Tensor, EmbedInput)> {
        Ok(match e {
            EmbedderIds::Vocab { table } => {
                let row = vocab.row(key);
                (
                    embedding_lookup(self.params.value(table), row)?,
                    EmbedInput::Row(row),
                )
            }
            EmbedderIds::Byte {
                tables,
                proj_w,
                proj_b,
            } => {
                let t = self.params.value(tables);
                let mut rows = [0usize; 8];
                let mut cat = Vec::with_capacity(8 * t.cols());
                for (k, b) in key.to_le_bytes().iter().enumerate() {
                    rows[k] = k * 256 + *b as usize;
                    cat.extend_from_slice(t.row(rows[k]));
                }
                let cat = Tensor::vector(cat);
                let y = linear(
                    &cat,
                    self.params.value(proj_w),
                    Some(self.params.value(proj_b)),
                )?;
                (y, EmbedInput::Bytes { rows, cat })
            }
        })
    }

    fn embed_backward(
        &self,
        e: EmbedderIds,
        input: &EmbedInput,
        dy: &Tensor,
        grads: &mut GradBuffer,
    ) -> Result<()> {
        match (e, input) {
            (EmbedderIds::Vocab { table }, EmbedInput::Row(row)) => {
                embedding_backward(grads.get_mut(table), *row, dy)?;
            }
            (
                EmbedderIds::Byte {
                    tables,
                    proj_w,
                    proj_b,
                },
                EmbedInput::Bytes { rows, cat },
            ) => {
                let (gw, gb) = grads.pair_mut(proj_w, proj_b);
                let dcat = linear_backward(cat, self.params.value(proj_w), dy, gw, Some(gb))?;
                let d = self.config.byte_dim;
                let gt = grads.get_mut(tables);
                for (k, &row) in rows.iter().enumerate() {
                    let part = Tensor::vector(dcat.data()[k * d..(k + 1) * d].to_vec());
                    embedding_backward(gt, row, &part)?;
                }
            }
            _ => unreachable!("embedder input does not match embedder kind"),
        }
        Ok(())
    }

    pub fn line_of(&self, access: &MemoryAccess) -> u64 {
        access.address >> self.offset_bits
    }

    /// `[e(line); e(pc)]` for one access.
    pub fn embed_access(&self, access: &MemoryAccess) -> Result<Tensor> {
        Ok(self.embed_access_inner(access)?.0)
    }

    fn embed_access_inner(
        &self,
        access: &MemoryAccess,
    ) -> Result<(Tensor, EmbedInput, EmbedInput)> {
        let (el, il) = self.embed(self.ids.line, &self.vocab.lines, self.line_of(access))?;
        let (ep, ip) = self.embed(self.ids.pc, &self.vocab.pcs, access.pc)?;
        Ok((concat(&el, &ep)?, il, ip))
    }

    /// Embedding of a resident cache line.
    pub fn embed_line(&self, line: u64) -> Result<Tensor> {
        Ok(self.embed(self.ids.line, &self.vocab.lines, line)?.0)
    }

    pub fn new_history(&self) -> HistoryState {
        HistoryState::new(&self.config)
    }

    /// One LSTM step on `access`, pushing the new hidden state.
    pub fn advance_history(&self, history: &mut HistoryState, access: &MemoryAccess) -> Result<()> {
        let x = self.embed_access(access)?;
        let step = lstm_cell(&x, &history.h, &history.c, self.lstm())?;
        history.push(step.h, step.c);
        Ok(())
    }

    /// Scores `lines` against the buffered hidden states.
    pub fn score_lines(&self, history: &HistoryState, lines: &[u64]) -> Result<PolicyOutput> {
        let buffer: Vec<&Tensor> = history.buffer.iter().collect();
        Ok(self.score(&buffer, lines)?.0)
    }

    fn score(&self, buffer: &[&Tensor], lines: &[u64]) -> Result<(PolicyOutput, ScoreTape)> {
        if buffer.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        if lines.is_empty() {
            return Err(ModelError::NoLines);
        }
        let c = &self.config;
        let (n, dh, dp) = (buffer.len(), c.lstm_dim, c.position_dim);
        let dk = dh + dp;
        let mut keys = Tensor::zeros(&[n, dk]);
        let mut values = Tensor::zeros(&[n, dh]);
        let first_pos_row = c.history_len - n;
        for (i, h) in buffer.iter().enumerate() {
            let row = keys.row_mut(i);
            row[..dh].copy_from_slice(h.data());
            row[dh..].copy_from_slice(self.positions.row(first_pos_row + i));
            values.row_mut(i).copy_from_slice(h.data());
        }
        let w = self.params.value(self.ids.attention);
        let pw = self.params.value(self.ids.policy_w);
        let pb = self.params.value(self.ids.policy_b);
        let rw = self.params.value(self.ids.reuse_w);
        let rb = self.params.value(self.ids.reuse_b);
        let mut tapes = Vec::with_capacity(lines.len());
        let mut logits = Vec::with_capacity(lines.len());
        let mut reuse = Vec::with_capacity(lines.len());
        for &line in lines {
            let (embed, input) = self.embed(self.ids.line, &self.vocab.lines, line)?;
            // query = Wᵀ e(line), so score_i = query · key_i.
            let mut query = vec![0.0; dk];
            for (a, &ea) in embed.data().iter().enumerate() {
                for (q, wv) in query.iter_mut().zip(w.row(a)) {
                    *q += ea * wv;
                }
            }
            let scores = (0..n)
                .map(|i| keys.row(i).iter().zip(&query).map(|(k, q)| k * q).sum())
                .collect();
            let attn = softmax(&Tensor::vector(scores))?;
            let context = weighted_sum(&attn, &values)?;
            logits.push(linear(&context, pw, Some(pb))?.data()[0]);
            reuse.push(linear(&context, rw, Some(rb))?.data()[0]);
            tapes.push(LineTape {
                embed,
                input,
                query: Tensor::vector(query),
                attn,
                context,
            });
        }
        let probs = softmax(&Tensor::vector(logits))?;
        let out = PolicyOutput {
            evict_probs: probs.data().to_vec(),
            pred_log_reuse: reuse,
            line_contexts: tapes.iter().map(|t| t.context.clone()).collect(),
        };
        Ok((
            out,
            ScoreTape {
                keys,
                values,
                lines: tapes,
                probs,
            },
        ))
    }

    /// Backward through `score`; returns the gradient for each buffered
    /// hidden state as the rows of an `[n, lstm_dim]` tensor.
    fn score_backward(
        &self,
        tape: &ScoreTape,
        d_probs: &[f64],
        d_reuse: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<Tensor> {
        let dh = self.config.lstm_dim;
        let n = tape.values.rows();
        let mut d_hidden = Tensor::zeros(&[n, dh]);
        let d_logits = softmax_backward(&tape.probs, &Tensor::vector(d_probs.to_vec()))?;
        let w = self.params.value(self.ids.attention);
        for (k, lt) in tape.lines.iter().enumerate() {
            let (gpw, gpb) = grads.pair_mut(self.ids.policy_w, self.ids.policy_b);
            let mut dg = linear_backward(
                &lt.context,
                self.params.value(self.ids.policy_w),
                &Tensor::scalar(d_logits.data()[k]),
                gpw,
                Some(gpb),
            )?;
            let (grw, grb) = grads.pair_mut(self.ids.reuse_w, self.ids.reuse_b);
            let dg_reuse = linear_backward(
                &lt.context,
                self.params.value(self.ids.reuse_w),
                &Tensor::scalar(d_reuse[k]),
                grw,
                Some(grb),
            )?;
            dg.add_assign(&dg_reuse)?;
            let (d_attn, d_values) = weighted_sum_backward(&lt.attn, &tape.values, &dg)?;
            d_hidden.add_assign(&d_values)?;
            let d_scores = softmax_backward(&lt.attn, &d_attn)?;
            let mut d_query = vec![0.0; lt.query.len()];
            for i in 0..n {
                let s = d_scores.data()[i];
                if s == 0.0 {
                    continue;
                }
                for (dq, kv) in d_query.iter_mut().zip(tape.keys.row(i)) {
                    *dq += s * kv;
                }
                for (dhv, qv) in d_hidden.row_mut(i).iter_mut().zip(&lt.query.data()[..dh]) {
                    *dhv += s * qv;
                }
            }
            let gw = grads.get_mut(self.ids.attention);
            let mut d_embed = vec![0.0; lt.embed.len()];
            for (a, &ea) in lt.embed.data().iter().enumerate() {
                let mut acc = 0.0;
                for ((gv, wv), dq) in gw.row_mut(a).iter_mut().zip(w.row(a)).zip(&d_query) {
                    *gv += ea * dq;
                    acc += wv * dq;
                }
                d_embed[a] = acc;
            }
            self.embed_backward(self.ids.line, &lt.input, &Tensor::vector(d_embed), grads)?;
        }
        Ok(d_hidden)
    }

    /// Forward (and, with `grads`, backward) over one training window.
    ///
    /// `warmup` accesses advance a fresh LSTM without gradients. Each
    /// `window` access is then consumed in turn; after step `d.step` the lines
    /// of decision `d` are scored and `loss(k, output)` supplies the loss of
    /// decision `k` with its gradients on the head outputs. Backpropagation
    /// runs through the window steps and stops at the warm-up boundary.
    /// Returns the summed loss.
    pub fn window_loss<F>(
        &self,
        warmup: &[MemoryAccess],
        window: &[MemoryAccess],
        decisions: &[Decision<'_>],
        mut loss: F,
        grads: Option<&mut GradBuffer>,
    ) -> Result<f64>
    where
        F: FnMut(usize, &PolicyOutput) -> StateGrad,
    {
        let cap = self.config.history_len;
        let mut history = self.new_history();
        for a in warmup {
            self.advance_history(&mut history, a)?;
        }
        let warm: Vec<Tensor> = history.buffer.iter().cloned().collect();
        let wu = warm.len();
        let (mut h, mut c) = (history.h, history.c);
        let mut steps: Vec<(LstmStep, EmbedInput, EmbedInput)> = Vec::with_capacity(window.len());
        let mut pending = decisions.iter().enumerate().peekable();
        let mut tapes: Vec<(usize, usize, ScoreTape, StateGrad)> = Vec::new();
        let mut total = 0.0;
        for (j, a) in window.iter().enumerate() {
            let (x, il, ip) = self.embed_access_inner(a)?;
            let step = lstm_cell(&x, &h, &c, self.lstm())?;
            h = step.h.clone();
            c = step.c.clone();
            steps.push((step, il, ip));
            while let Some((k, d)) = pending.next_if(|(_, d)| d.step == j) {
                // Global hidden-state index: warm-up states first, then steps.
                let end = wu + j + 1;
                let start = end.saturating_sub(cap);
                let buffer: Vec<&Tensor> = (start..end)
                    .map(|g| if g < wu { &warm[g] } else { &steps[g - wu].0.h })
                    .collect();
                let (out, tape) = self.score(&buffer, d.lines)?;
                let sg = loss(k, &out);
                total += sg.loss;
                tapes.push((start, k, tape, sg));
            }
        }
        debug_assert!(pending.next().is_none(), "decision beyond the window");
        let Some(grads) = grads else {
            return Ok(total);
        };
        let dh = self.config.lstm_dim;
        let mut d_h: Vec<Tensor> = vec![Tensor::zeros(&[dh]); window.len()];
        for (start, _, tape, sg) in &tapes {
            let d_buf = self.score_backward(tape, &sg.d_probs, &sg.d_reuse, grads)?;
            for i in 0..d_buf.rows() {
                let g = start + i;
                if g >= wu {
                    for (a, b) in d_h[g - wu].data_mut().iter_mut().zip(d_buf.row(i)) {
                        *a += b;
                    }
                }
            }
        }
        let mut dh_next = Tensor::zeros(&[dh]);
        let mut dc_next = Tensor::zeros(&[dh]);
        let dm = self.config.address_dim;
        for j in (0..window.len()).rev() {
            let (step, il, ip) = &steps[j];
            let mut dh_j = d_h[j].clone();
            dh_j.add_assign(&dh_next)?;
            let (gi, gh, gb) = grads.triple_mut(self.ids.w_ih, self.ids.w_hh, self.ids.lstm_b);
            let (dx, dh_prev, dc_prev) = lstm_cell_backward(
                step,
                self.lstm(),
                &dh_j,
                &dc_next,
                LstmGrads {
                    w_ih: gi,
                    w_hh: gh,
                    bias: gb,
                },
            )?;
            let dl = Tensor::vector(dx.data()[..dm].to_vec());
            let dp = Tensor::vector(dx.data()[dm..].to_vec());
            self.embed_backward(self.ids.line, il, &dl, grads)?;
            self.embed_backward(self.ids.pc, ip, &dp, grads)?;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Ok(total)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            offset_bits: self.offset_bits,
            vocab: self.vocab.clone(),
            manifest: self.params.manifest(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected| ModelError::Truncated {
            expected,
            found: bytes.len(),
        };
        if bytes.len() < 8 {
            return Err(truncated(8));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(truncated(20));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.saturating_add(header_len);
        if bytes.len() < header_end {
            return Err(truncated(header_end));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end])?;
        if header.version != version {
            return Err(ModelError::UnsupportedVersion {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if header.config.address_vocab_size != header.vocab.lines.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "address_vocab_size {} but vocabulary holds {} lines",
                header.config.address_vocab_size,
                header.vocab.lines.len()
            )));
        }
        let mut model = Model::new(header.config, header.vocab, header.offset_bits, 0)?;
        let expected = model.params.manifest();
        if expected.len() != header.manifest.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "{} parameters in checkpoint, config implies {}",
                header.manifest.len(),
                expected.len()
            )));
        }
        for (e, f) in expected.iter().zip(&header.manifest) {
            if e != f {
                return Err(ModelError::ShapeMismatch {
                    name: f.name.clone(),
                    expected: e.shape.clone(),
                    found: f.shape.clone(),
                });
            }
        }
        let payload = &bytes[header_end..];
        let need = 8 * model.params.num_scalars();
        if payload.len() < need {
            return Err(truncated(header_end + need));
        }
        if payload.len() > need {
            return Err(ModelError::TrailingBytes(payload.len() - need));
        }
        let mut chunks = payload.chunks_exact(8);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            for x in model.params.value_mut(id).data_mut() {
                *x = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ModelError::NotFound(path.to_path_buf()),
            _ => ModelError::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless the model was built with `kind` embedders.
    pub fn expect_embedder(&self, kind: EmbedderKind) -> Result<()> {
        if self.config.embedder != kind {
            return Err(ModelError::ConfigMismatch(format!(
                "checkpoint uses {} embedders, expected {kind}",
                self.config.embedder
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    offset_bits: u32,
    vocab: ModelVocab,
    manifest: Vec<ManifestEntry>,
}

/// How a learned policy turns scores into an action.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Most probable way under the eviction head.
    #[default]
    Policy,
    /// Way with the highest predicted reuse distance.
    DirectReuse,
}

/// Runs the model online. The LSTM consumes every access, hits included,
/// lazily catching up from the rollout history whenever a decision is due.
pub struct LearnedPolicy {
    model: Arc<Model>,
    mode: ActMode,
    history: HistoryState,
    consumed: usize,
    scores: Vec<f64>,
}

impl LearnedPolicy {
    pub fn new(model: Arc<Model>, mode: ActMode) -> Self {
        let history = model.new_history();
        Self {
            model,
            mode,
            history,
            consumed: 0,
            scores: Vec::new(),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    /// Scores for the current state after catching up on history.
    pub fn observe(&mut self, state: &ReplacementState<'_>) -> Result<PolicyOutput> {
        if state.timestep < self.consumed {
            self.history = self.model.new_history();
            self.consumed = 0;
        }
        let past = state.history();
        for a in &past[self.consumed.min(past.len())..] {
            self.model.advance_history(&mut self.history, a)?;
        }
        self.model
            .advance_history(&mut self.history, &state.access)?;
        self.consumed = state.timestep + 1;
        let lines: Vec<u64> = state.cache_set.lines().collect();
        self.model.score_lines(&self.history, &lines)
    }
}

impl ReplacementPolicy for LearnedPolicy {
    fn name(&self) -> String {
        match self.mode {
            ActMode::Policy => "learned".into(),
            ActMode::DirectReuse => "learned_reuse".into(),
        }
    }

    fn choose_victim(&mut self, state: &ReplacementState<'_>) -> usize {
        let out = self
            .observe(state)
            .expect("model shapes are fixed at construction");
        self.scores = match self.mode {
            ActMode::Policy => out.evict_probs,
            ActMode::DirectReuse => out.pred_log_reuse,
        };
        argmax(&self.scores)
    }

    fn eviction_scores(&self) -> Option<&[f64]> {
        Some(&self.scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceOrigin;

    fn tiny(kind: EmbedderKind) -> Model {
        let trace = AccessTrace::new(
            (0..20u64)
                .map(|i| MemoryAccess::new(0x400 + i % 3, (i % 7) << 6))
                .collect(),
            TraceOrigin::Synthetic,
        );
        let config = ModelConfig {
            embedder: kind,
            byte_dim: 3,
            ..ModelConfig::uniform(6, 5)
        };
        Model::new(config, ModelVocab::build(&trace, 6, 5000), 6, 9).unwrap()
    }

    #[test]
    fn act_picks_argmax_with_low_ties() {
        let out = |p: Vec<f64>| PolicyOutput {
            pred_log_reuse: vec![0.0; p.len()],
            line_contexts: vec![],
            evict_probs: p,
        };
        assert_eq!(act(&out(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(act(&out(vec![0.25; 4])), 0);
    }

    #[test]
    fn vocab_first_appearance_and_unknown() {
        let v = Vocab::build([5, 3, 5, 9]);
        assert_eq!((v.row(5), v.row(3), v.row(9)), (0, 1, 2));
        assert_eq!(v.row(42), 3);
        assert_eq!(v.rows(), 4);
    }

    #[test]
    fn capped_vocab_keeps_most_frequent() {
        let v = Vocab::build_capped([1, 2, 2, 3, 3, 3, 4], 2);
        assert!(!v.contains(1) && !v.contains(4));
        assert_eq!((v.row(2), v.row(3)), (0, 1));
        assert_eq!(v.row(1), v.unknown_row());
    }

    #[test]
    fn unseen_address_uses_last_row() {
        let m = tiny(EmbedderKind::Vocab);
        let EmbedderIds::Vocab { table } = m.ids.line else {
            unreachable!()
        };
        let t = m.params.value(table);
        assert_eq!(m.embed_line(3).unwrap().data(), t.row(m.vocab.lines.row(3)));
        assert_eq!(m.embed_line(1 << 40).unwrap().data(), t.row(t.rows() - 1));
    }

    #[test]
    fn byte_embeddings_differ_only_through_last_byte_table() {
        let m = tiny(EmbedderKind::Byte);
        let a = 0x0102_0304_0506_0708u64;
        let b = a ^ 0x8000_0000_0000_0000;
        let (ea, ia) = m.embed(m.ids.line, &m.vocab.lines, a).unwrap();
        let (eb, ib) = m.embed(m.ids.line, &m.vocab.lines, b).unwrap();
        let (EmbedInput::Bytes { cat: ca, .. }, EmbedInput::Bytes { cat: cb, .. }) = (ia, ib)
        else {
            unreachable!()
        };
        let d = m.config.byte_dim;
        assert_eq!(ca.data()[..7 * d], cb.data()[..7 * d]);
        assert_ne!(ca.data()[7 * d..], cb.data()[7 * d..]);
        assert_ne!(ea, eb);
    }

    #[test]
    fn history_buffer_keeps_last_h() {
        let m = tiny(EmbedderKind::Vocab);
        let mut h = m.new_history();
        let a = MemoryAccess::new(0x400, 64);
        m.advance_history(&mut h, &a).unwrap();
        assert_eq!(h.len(), 1);
        for _ in 0..7 {
            m.advance_history(&mut h, &a).unwrap();
        }
        assert_eq!(h.len(), 5);
        assert_eq!(h.steps(), 8);
        assert_eq!(h.buffered().last().unwrap(), h.hidden());
    }

    #[test]
    fn positional_pairs_lie_on_unit_circle() {
        for pos in -79..=0 {
            let e = positional_embedding(pos, 128);
            for k in (0..128).step_by(2) {
                assert!((e[k].powi(2) + e[k + 1].powi(2) - 1.0).abs() < 1e-12);
            }
        }
        let zero = positional_embedding(0, 4);
        assert_eq!(zero, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_attention_weights_give_uniform_probs() {
        let mut m = tiny(EmbedderKind::Vocab);
        m.params.value_mut(m.ids.attention).fill(0.0);
        let mut h = m.new_history();
        for i in 0..4u64 {
            m.advance_history(&mut h, &MemoryAccess::new(0x401, i << 6))
                .unwrap();
        }
        let out = m.score_lines(&h, &[0, 1, 2, 9]).unwrap();
        let n = h.len() as f64;
        let mut mean = vec![0.0; 6];
        for s in h.buffered() {
            for (a, b) in mean.iter_mut().zip(s.data()) {
                *a += b / n;
            }
        }
        for g in &out.line_contexts {
            for (a, b) in g.data().iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for p in &out.evict_probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_buffer_context_is_that_state() {
        let m = tiny(EmbedderKind::Vocab);
        let mut h = m.new_history();
        m.advance_history(&mut h, &MemoryAccess::new(0x400, 0))
            .unwrap();
        let out = m.score_lines(&h, &[0, 5]).unwrap();
        for g in &out.line_contexts {
            assert_eq!(g, h.hidden());
        }
        let s: f64 = out.evict_probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_history_is_an_error() {
        let m = tiny(EmbedderKind::Vocab);
        assert!(matches!(
            m.score_lines(&m.new_history(), &[1]),
            Err(ModelError::EmptyHistory)
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = tiny(EmbedderKind::Byte);
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.values(), m.params.values());
        assert_eq!(back.config, m.config);

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(Model::from_bytes(&bad), Err(ModelError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(
            Model::from_bytes(&bad),
            Err(ModelError::UnsupportedVersion { found: 7, .. })
        ));
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Truncated { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Model::from_bytes(&long),
            Err(ModelError::TrailingBytes(1))
        ));
        assert!(matches!(
            back.expect_embedder(EmbedderKind::Vocab),
            Err(ModelError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn missing_checkpoint_reports_not_found() {
        let err = Model::load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(err.to_string().starts_with("checkpoint not found"));
    }
}
