//! Shared gradient checks: each returns the worst relative error it saw.
#![allow(dead_code)]

use cachelab::imitation::{
    combined_loss, ll_loss, ranking_loss, reuse_loss, LabelledState, LossConfig, LossKind,
    ReuseHead,
};
use cachelab::kernel::*;
use cachelab::model::{Decision, EmbedderKind, Model, ModelConfig, ModelVocab};
use cachelab::oracle::ReuseDistance;
use cachelab::trace::{AccessTrace, MemoryAccess, TraceOrigin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn project(y: &Tensor, r: &[f64], grad: &mut Vec<f64>) -> f64 {
    grad.clear();
    grad.extend_from_slice(&r[..y.len()]);
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Checks `op` on 100 random cases; `case` builds the inputs as parameters
/// and returns a closure computing `rᵀ y` and its gradient.
fn check_primitive(
    name: &str,
    mut case: impl FnMut(&mut ChaCha8Rng, &mut ParameterStore),
    mut eval: impl FnMut(&ParameterStore, Option<&mut GradBuffer>, &[f64]) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut store = ParameterStore::new();
        case(&mut rng, &mut store);
        let r: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&mut store, |s, g| eval(s, g, &r), STEP, f64::INFINITY)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn id(s: &ParameterStore, n: &str) -> ParamId {
    s.id(n).unwrap()
}

pub fn linear_error() -> f64 {
    check_primitive(
        "linear",
        |rng, s| {
            let (i, o) = (rng.gen_range(1..8), rng.gen_range(1..8));
            s.add("x", random_tensor(rng, &[i], -2.0, 2.0)).unwrap();
            s.add("w", random_tensor(rng, &[o, i], -1.0, 1.0)).unwrap();
            s.add("b", random_tensor(rng, &[o], -1.0, 1.0)).unwrap();
        },
        |s, g, r| {
            let (x, w, b) = (id(s, "x"), id(s, "w"), id(s, "b"));
            let y = linear(s.value(x), s.value(w), Some(s.value(b))).unwrap();
            let mut dy = Vec::new();
            let out = project(&y, r, &mut dy);
            if let Some(g) = g {
                let (gw, gb) = g.pair_mut(w, b);
                let dx = linear_backward(s.value(x), s.value(w), &Tensor::vector(dy), gw, Some(gb))
                    .unwrap();
                g.get_mut(x).add_assign(&dx).unwrap();
            }
            out
        },
    )
}

pub fn embedding_error() -> f64 {
    check_primitive(
        "embedding",
        |rng, s| {
            let (rows, d) = (rng.gen_range(1..10), rng.gen_range(1..8));
            s.add("t", random_tensor(rng, &[rows, d], -1.0, 1.0))
                .unwrap();
            s.add("id", Tensor::scalar(rng.gen_range(0..rows) as f64))
                .unwrap();
        },
        |s, g, r| {
            let (t, i) = (id(s, "t"), id(s, "id"));
            let row = s.value(i).data()[0].round() as usize;
            let y = embedding_lookup(s.value(t), row).unwrap();
            let mut dy = Vec::new();
            let out = project(&y, r, &mut dy);
            if let Some(g) = g {
                embedding_backward(g.get_mut(t), row, &Tensor::vector(dy)).unwrap();
            }
            out
        },
    )
}

pub fn lstm_cell_error() -> f64 {
    check_primitive(
        "lstm_cell",
        |rng, s| {
            let (i, n) = (rng.gen_range(1..6), rng.gen_range(1..6));
            s.add("x", random_tensor(rng, &[i], -1.0, 1.0)).unwrap();
            s.add("h", random_tensor(rng, &[n], -1.0, 1.0)).unwrap();
            s.add("c", random_tensor(rng, &[n], -1.0, 1.0)).unwrap();
            s.add("w_ih", random_tensor(rng, &[4 * n, i], -1.0, 1.0))
                .unwrap();
            s.add("w_hh", random_tensor(rng, &[4 * n, n], -1.0, 1.0))
                .unwrap();
            s.add("b", random_tensor(rng, &[4 * n], -1.0, 1.0)).unwrap();
        },
        |s, g, r| {
            let ids: Vec<ParamId> = ["x", "h", "c", "w_ih", "w_hh", "b"]
                .iter()
                .map(|n| id(s, n))
                .collect();
            let w = LstmWeights {
                w_ih: s.value(ids[3]),
                w_hh: s.value(ids[4]),
                bias: s.value(ids[5]),
            };
            let step = lstm_cell(s.value(ids[0]), s.value(ids[1]), s.value(ids[2]), w).unwrap();
            let n = step.h.len();
            let mut dh = Vec::new();
            let out_h = project(&step.h, r, &mut dh);
            let mut dc = Vec::new();
            let out_c = project(&step.c, &r[n..], &mut dc);
            if let Some(g) = g {
                let (gi, gh, gb) = g.triple_mut(ids[3], ids[4], ids[5]);
                let (dx, dhp, dcp) = lstm_cell_backward(
                    &step,
                    w,
                    &Tensor::vector(dh),
                    &Tensor::vector(dc),
                    LstmGrads {
                        w_ih: gi,
                        w_hh: gh,
                        bias: gb,
                    },
                )
                .unwrap();
                g.get_mut(ids[0]).add_assign(&dx).unwrap();
                g.get_mut(ids[1]).add_assign(&dhp).unwrap();
                g.get_mut(ids[2]).add_assign(&dcp).unwrap();
            }
            out_h + out_c
        },
    )
}

fn unary(
    name: &str,
    lo: f64,
    hi: f64,
    fwd: fn(&Tensor) -> Tensor,
    bwd: fn(&Tensor, &Tensor, &Tensor) -> Tensor,
) -> f64 {
    check_primitive(
        name,
        |rng, s| {
            let n = rng.gen_range(1..10);
            s.add("x", random_tensor(rng, &[n], lo, hi)).unwrap();
        },
        |s, g, r| {
            let x = id(s, "x");
            let y = fwd(s.value(x));
            let mut dy = Vec::new();
            let out = project(&y, r, &mut dy);
            if let Some(g) = g {
                let dx = bwd(s.value(x), &y, &Tensor::vector(dy));
                g.get_mut(x).add_assign(&dx).unwrap();
            }
            out
        },
    )
}

pub fn elementwise_errors() -> Vec<(&'static str, f64)> {
    vec![
        (
            "sigmoid",
            unary("sigmoid", -5.0, 5.0, sigmoid, |_, y, dy| {
                sigmoid_backward(y, dy).unwrap()
            }),
        ),
        (
            "tanh",
            unary("tanh", -3.0, 3.0, tanh, |_, y, dy| {
                tanh_backward(y, dy).unwrap()
            }),
        ),
        (
            "log",
            unary("log", 0.2, 5.0, log, |x, _, dy| {
                log_backward(x, dy).unwrap()
            }),
        ),
        (
            "softmax",
            unary(
                "softmax",
                -4.0,
                4.0,
                |x| softmax(x).unwrap(),
                |_, y, dy| softmax_backward(y, dy).unwrap(),
            ),
        ),
        (
            "log_softmax",
            unary(
                "log_softmax",
                -4.0,
                4.0,
                |x| log_softmax(x).unwrap(),
                |_, y, dy| log_softmax_backward(y, dy).unwrap(),
            ),
        ),
    ]
}

pub fn mse_error() -> f64 {
    check_primitive(
        "mse",
        |rng, s| {
            let n = rng.gen_range(1..10);
            s.add("p", random_tensor(rng, &[n], -3.0, 3.0)).unwrap();
            s.add("t", random_tensor(rng, &[n], -3.0, 3.0)).unwrap();
        },
        |s, g, _| {
            let (p, t) = (id(s, "p"), id(s, "t"));
            let (loss, dp) = mean_squared_error(s.value(p), s.value(t)).unwrap();
            if let Some(g) = g {
                g.get_mut(p).add_assign(&dp).unwrap();
                let dt = Tensor::vector(dp.data().iter().map(|v| -v).collect());
                g.get_mut(t).add_assign(&dt).unwrap();
            }
            loss
        },
    )
}

pub fn weighted_sum_error() -> f64 {
    check_primitive(
        "weighted_sum",
        |rng, s| {
            let (n, d) = (rng.gen_range(1..8), rng.gen_range(1..8));
            s.add("a", random_tensor(rng, &[n], -1.0, 1.0)).unwrap();
            s.add("v", random_tensor(rng, &[n, d], -1.0, 1.0)).unwrap();
        },
        |s, g, r| {
            let (a, v) = (id(s, "a"), id(s, "v"));
            let y = weighted_sum(s.value(a), s.value(v)).unwrap();
            let mut dy = Vec::new();
            let out = project(&y, r, &mut dy);
            if let Some(g) = g {
                let (da, dv) =
                    weighted_sum_backward(s.value(a), s.value(v), &Tensor::vector(dy)).unwrap();
                g.get_mut(a).add_assign(&da).unwrap();
                g.get_mut(v).add_assign(&dv).unwrap();
            }
            out
        },
    )
}

pub fn concat_error() -> f64 {
    check_primitive(
        "concat",
        |rng, s| {
            let (na, nb) = (rng.gen_range(1..6), rng.gen_range(1..6));
            s.add("a", random_tensor(rng, &[na], -1.0, 1.0)).unwrap();
            s.add("b", random_tensor(rng, &[nb], -1.0, 1.0)).unwrap();
        },
        |s, g, r| {
            let (a, b) = (id(s, "a"), id(s, "b"));
            let y = concat(s.value(a), s.value(b)).unwrap();
            let mut dy = Vec::new();
            let out = project(&y, r, &mut dy);
            if let Some(g) = g {
                let (da, db) = concat_backward(&Tensor::vector(dy), s.value(a).len()).unwrap();
                g.get_mut(a).add_assign(&da).unwrap();
                g.get_mut(b).add_assign(&db).unwrap();
            }
            out
        },
    )
}

/// Loss gradients on 1000 random draws. Probabilities are the inputs
/// directly (no normalisation), matching how the losses are differentiated.
fn check_loss(loss: impl Fn(&[f64], &[f64]) -> (f64, Vec<f64>)) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = rng.gen_range(1..17);
        let mut probs: Vec<f64> = (0..w).map(|_| rng.gen_range(0.2..1.0)).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        let dists: Vec<f64> = (0..w).map(|_| rng.gen_range(1..60) as f64).collect();
        let (_, grad) = loss(&probs, &dists);
        for k in 0..w {
            let mut up = probs.clone();
            up[k] += STEP;
            let mut down = probs.clone();
            down[k] -= STEP;
            let numeric = (loss(&up, &dists).0 - loss(&down, &dists).0) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[k], numeric));
        }
    }
    worst
}

pub fn loss_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("ranking", check_loss(|p, d| ranking_loss(p, d, 10.0))),
        ("ll", check_loss(|p, _| ll_loss(p, 0))),
        ("reuse", check_loss(reuse_loss)),
    ]
}

pub fn tiny_model(kind: EmbedderKind, seed: u64) -> (Model, Vec<MemoryAccess>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accesses: Vec<MemoryAccess> = (0..12)
        .map(|_| MemoryAccess::new(0x400 + rng.gen_range(0..3), rng.gen_range(0..5u64) << 6))
        .collect();
    let trace = AccessTrace::new(accesses.clone(), TraceOrigin::Synthetic);
    let config = ModelConfig {
        embedder: kind,
        byte_dim: 3,
        ..ModelConfig::uniform(8, 4)
    };
    let model = Model::new(config, ModelVocab::build(&trace, 6, 5000), 6, seed).unwrap();
    (model, accesses)
}

fn full_model_check(kind: EmbedderKind, loss_kind: LossKind) -> f64 {
    let (mut model, accesses) = tiny_model(kind, 5);
    // Nudge every parameter off its initial value so zero biases are tested
    // away from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    // Warm-up states are gradient-free by design, so the exact derivative
    // is only comparable without a warm-up prefix.
    let warmup: &[MemoryAccess] = &[];
    let window = &accesses[..8];
    let lines_a = [0u64, 3];
    let lines_b = [1u64, 40];
    let decisions = [
        Decision {
            step: 5,
            lines: &lines_a,
        },
        Decision {
            step: 7,
            lines: &lines_b,
        },
    ];
    let labels = [
        LabelledState {
            timestep: 5,
            set: 0,
            lines: lines_a.to_vec(),
            distances: vec![ReuseDistance::Finite(6), ReuseDistance::Finite(2)],
            capped: vec![6.0, 2.0],
            oracle_way: 0,
            chosen_way: 0,
        },
        LabelledState {
            timestep: 7,
            set: 0,
            lines: lines_b.to_vec(),
            distances: vec![ReuseDistance::Finite(3), ReuseDistance::Infinite],
            capped: vec![3.0, 9.0],
            oracle_way: 1,
            chosen_way: 1,
        },
    ];
    let cfg = LossConfig {
        kind: loss_kind,
        reuse_head: ReuseHead::Aux,
        alpha: 10.0,
    };
    let mut params = model.params().clone();
    let mut scratch = model.clone();
    let report = grad_check(
        &mut params,
        |store, grads| {
            *scratch.params_mut() = store.clone();
            scratch
                .window_loss(
                    warmup,
                    window,
                    &decisions,
                    |k, out| combined_loss(out, &labels[k], &cfg),
                    grads,
                )
                .unwrap()
        },
        STEP,
        f64::INFINITY,
    )
    .unwrap_or_else(|e| panic!("{kind:?}/{loss_kind:?}: {e}"));
    report.max_rel_error
}

pub fn full_model_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for kind in [EmbedderKind::Vocab, EmbedderKind::Byte] {
        for loss in [LossKind::RankingReuse, LossKind::LlReuse] {
            out.push((format!("{kind}/{loss:?}"), full_model_check(kind, loss)));
        }
    }
    out
}

pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("linear", linear_error()),
        ("embedding", embedding_error()),
        ("lstm_cell", lstm_cell_error()),
        ("mse", mse_error()),
        ("weighted_sum", weighted_sum_error()),
        ("concat", concat_error()),
    ];
    out.extend(elementwise_errors());
    out
}
