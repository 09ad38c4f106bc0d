//! A small differentiable-computation kernel: dense tensors, forward and
//! backward passes for the handful of primitives the model needs, a named
//! parameter store, Adam, and a finite-difference gradient checker.
//!
//! There is no autodiff graph. Callers schedule backward passes by hand and
//! every `*_backward` function accumulates (`+=`) into parameter gradients.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },
    #[error("{op}: index {index} out of range for {rows} rows")]
    Index {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error(
        "gradient mismatch at {name}[{index}]: analytic {analytic:.6e}, numeric {numeric:.6e} \
         (relative error {rel_error:.3e} > {tolerance:.1e})"
    )]
    GradientMismatch {
        name: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_error: f64,
        tolerance: f64,
    },
}

pub type Result<T> = std::result::Result<T, KernelError>;

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> KernelError {
    let shapes = shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" vs ");
    KernelError::Shape { op, shapes }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("from_vec", &[shape, &[data.len()]]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::vector(vec![x])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_assign", &[&self.shape, &other.shape]));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn checked(self) -> Self {
        debug_assert!(self.is_finite(), "non-finite tensor value");
        self
    }
}

fn require_vector(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape.len() != 1 {
        return Err(shape_err(op, &[&t.shape]));
    }
    Ok(())
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, &[&a.shape, &b.shape]));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = W x + b` with `W` of shape `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    require_vector("linear", x)?;
    if w.shape.len() != 2 || w.shape[1] != x.len() {
        return Err(shape_err("linear", &[&x.shape, &w.shape]));
    }
    if let Some(b) = b {
        if b.shape != [w.shape[0]] {
            return Err(shape_err("linear", &[&w.shape, &b.shape]));
        }
    }
    let out = (0..w.shape[0])
        .map(|r| dot(w.row(r), &x.data) + b.map_or(0.0, |b| b.data[r]))
        .collect();
    Ok(Tensor::vector(out).checked())
}

/// Accumulates `dW += dy xᵀ` and `db += dy`; returns `dx = Wᵀ dy`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
) -> Result<Tensor> {
    if w.shape.len() != 2 || w.shape != [dy.len(), x.len()] || dw.shape != w.shape {
        return Err(shape_err(
            "linear_backward",
            &[&x.shape, &w.shape, &dy.shape],
        ));
    }
    let mut dx = vec![0.0; x.len()];
    for (r, &g) in dy.data.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for ((dwv, &xv), (dxv, &wv)) in dw
            .row_mut(r)
            .iter_mut()
            .zip(&x.data)
            .zip(dx.iter_mut().zip(w.row(r)))
        {
            *dwv += g * xv;
            *dxv += g * wv;
        }
    }
    if let Some(db) = db {
        require_same("linear_backward", db, dy)?;
        for (a, b) in db.data.iter_mut().zip(&dy.data) {
            *a += b;
        }
    }
    Ok(Tensor::vector(dx))
}

pub fn embedding_lookup(table: &Tensor, id: usize) -> Result<Tensor> {
    if table.shape.len() != 2 {
        return Err(shape_err("embedding_lookup", &[&table.shape]));
    }
    if id >= table.shape[0] {
        return Err(KernelError::Index {
            op: "embedding_lookup",
            index: id,
            rows: table.shape[0],
        });
    }
    Ok(Tensor::vector(table.row(id).to_vec()))
}

pub fn embedding_backward(dtable: &mut Tensor, id: usize, dy: &Tensor) -> Result<()> {
    if dtable.shape.len() != 2 || dtable.shape[1] != dy.len() {
        return Err(shape_err("embedding_backward", &[&dtable.shape, &dy.shape]));
    }
    if id >= dtable.shape[0] {
        return Err(KernelError::Index {
            op: "embedding_backward",
            index: id,
            rows: dtable.shape[0],
        });
    }
    for (a, b) in dtable.row_mut(id).iter_mut().zip(&dy.data) {
        *a += b;
    }
    Ok(())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| f(x)).collect(),
    }
}

fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    require_same(op, a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

/// Gradient of `sigmoid` given its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("sigmoid_backward", y, dy, |y, g| g * y * (1.0 - y))
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f64::tanh)
}

/// Gradient of `tanh` given its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("tanh_backward", y, dy, |y, g| g * (1.0 - y * y))
}

pub fn log(x: &Tensor) -> Tensor {
    map(x, f64::ln)
}

pub fn log_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    zip_map("log_backward", x, dy, |x, g| g / x)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    require_vector("softmax", x)?;
    let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(Tensor::vector(out).checked())
}

/// Gradient of `softmax` given its output `y`: `y ⊙ (dy − ⟨y, dy⟩)`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    require_same("softmax_backward", y, dy)?;
    let s = dot(&y.data, &dy.data);
    zip_map("softmax_backward", y, dy, |y, g| y * (g - s))
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    require_vector("log_softmax", x)?;
    let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.data.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(map(x, |v| v - lse).checked())
}

/// Gradient of `log_softmax` given its output `y`.
pub fn log_softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    require_same("log_softmax_backward", y, dy)?;
    let s: f64 = dy.data.iter().sum();
    zip_map("log_softmax_backward", y, dy, |y, g| g - y.exp() * s)
}

/// Mean of squared differences and its gradient with respect to `pred`.
pub fn mean_squared_error(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    require_same("mean_squared_error", pred, target)?;
    let n = pred.len().max(1) as f64;
    let loss = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    let grad = zip_map("mean_squared_error", pred, target, |p, t| 2.0 * (p - t) / n)?;
    Ok((loss, grad))
}

/// `Σ_i weights_i · values_i` over the rows of `values`.
pub fn weighted_sum(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
    require_vector("weighted_sum", weights)?;
    if values.shape.len() != 2 || values.shape[0] != weights.len() {
        return Err(shape_err("weighted_sum", &[&weights.shape, &values.shape]));
    }
    let mut out = vec![0.0; values.cols()];
    for (i, &a) in weights.data.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += a * v;
        }
    }
    Ok(Tensor::vector(out))
}

/// Returns `(d weights, d values)`.
pub fn weighted_sum_backward(
    weights: &Tensor,
    values: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if values.shape.len() != 2 || values.shape != [weights.len(), dy.len()] {
        return Err(shape_err(
            "weighted_sum_backward",
            &[&weights.shape, &values.shape, &dy.shape],
        ));
    }
    let dw = (0..weights.len())
        .map(|i| dot(values.row(i), &dy.data))
        .collect();
    let mut dv = Tensor::zeros(&values.shape);
    for (i, &a) in weights.data.iter().enumerate() {
        for (o, g) in dv.row_mut(i).iter_mut().zip(&dy.data) {
            *o = a * g;
        }
    }
    Ok((Tensor::vector(dw), dv))
}

pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_vector("concat", a)?;
    require_vector("concat", b)?;
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::vector(data))
}

/// Splits the gradient of `concat(a, b)` back into `(da, db)`.
pub fn concat_backward(dy: &Tensor, a_len: usize) -> Result<(Tensor, Tensor)> {
    require_vector("concat_backward", dy)?;
    if a_len > dy.len() {
        return Err(shape_err("concat_backward", &[&dy.shape, &[a_len]]));
    }
    Ok((
        Tensor::vector(dy.data[..a_len].to_vec()),
        Tensor::vector(dy.data[a_len..].to_vec()),
    ))
}

/// LSTM weights with gates stacked in `i, f, g, o` order along the rows.
#[derive(Clone, Copy)]
pub struct LstmWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub bias: &'a Tensor,
}

pub struct LstmGrads<'a> {
    pub w_ih: &'a mut Tensor,
    pub w_hh: &'a mut Tensor,
    pub bias: &'a mut Tensor,
}

/// Everything a single cell step needs for its backward pass.
#[derive(Clone, Debug)]
pub struct LstmStep {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    pub i: Tensor,
    pub f: Tensor,
    pub g: Tensor,
    pub o: Tensor,
    pub c: Tensor,
    pub tanh_c: Tensor,
    pub h: Tensor,
}

impl<'a> LstmWeights<'a> {
    pub fn hidden(&self) -> usize {
        self.w_hh.cols()
    }

    fn check(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<()> {
        let n = self.hidden();
        let ok = self.w_ih.shape == [4 * n, x.len()]
            && self.w_hh.shape == [4 * n, n]
            && self.bias.shape == [4 * n]
            && h.shape == [n]
            && c.shape == [n];
        if ok {
            Ok(())
        } else {
            Err(shape_err(
                "lstm_cell",
                &[
                    &x.shape,
                    &h.shape,
                    &c.shape,
                    &self.w_ih.shape,
                    &self.w_hh.shape,
                    &self.bias.shape,
                ],
            ))
        }
    }
}

pub fn lstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, w: LstmWeights<'_>) -> Result<LstmStep> {
    w.check(x, h, c)?;
    let n = w.hidden();
    let pre: Vec<f64> = (0..4 * n)
        .map(|r| dot(w.w_ih.row(r), &x.data) + dot(w.w_hh.row(r), &h.data) + w.bias.data[r])
        .collect();
    let gate = |k: usize, f: fn(f64) -> f64| {
        Tensor::vector(pre[k * n..(k + 1) * n].iter().map(|&v| f(v)).collect())
    };
    let i = gate(0, sigmoid_scalar);
    let f = gate(1, sigmoid_scalar);
    let g = gate(2, f64::tanh);
    let o = gate(3, sigmoid_scalar);
    let c_new: Vec<f64> = (0..n)
        .map(|k| f.data[k] * c.data[k] + i.data[k] * g.data[k])
        .collect();
    let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
    let h_new: Vec<f64> = (0..n).map(|k| o.data[k] * tanh_c[k]).collect();
    Ok(LstmStep {
        x: x.clone(),
        h_prev: h.clone(),
        c_prev: c.clone(),
        i,
        f,
        g,
        o,
        c: Tensor::vector(c_new).checked(),
        tanh_c: Tensor::vector(tanh_c),
        h: Tensor::vector(h_new).checked(),
    })
}

/// Backward through one cell step given gradients on its outputs `h` and
/// `c`. Accumulates weight gradients; returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    step: &LstmStep,
    w: LstmWeights<'_>,
    dh: &Tensor,
    dc: &Tensor,
    grads: LstmGrads<'_>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = w.hidden();
    if dh.shape != [n] || dc.shape != [n] {
        return Err(shape_err("lstm_cell_backward", &[&dh.shape, &dc.shape]));
    }
    let mut dpre = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        let (i, f, g, o, tc) = (
            step.i.data[k],
            step.f.data[k],
            step.g.data[k],
            step.o.data[k],
            step.tanh_c.data[k],
        );
        let do_ = dh.data[k] * tc;
        let dct = dc.data[k] + dh.data[k] * o * (1.0 - tc * tc);
        dpre[k] = dct * g * i * (1.0 - i);
        dpre[n + k] = dct * step.c_prev.data[k] * f * (1.0 - f);
        dpre[2 * n + k] = dct * i * (1.0 - g * g);
        dpre[3 * n + k] = do_ * o * (1.0 - o);
        dc_prev[k] = dct * f;
    }
    let dpre = Tensor::vector(dpre);
    let dx = linear_backward(&step.x, w.w_ih, &dpre, grads.w_ih, Some(grads.bias))?;
    let dh_prev = linear_backward(&step.h_prev, w.w_hh, &dpre, grads.w_hh, None)?;
    Ok((dx, dh_prev, Tensor::vector(dc_prev)))
}

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Named parameters with one gradient accumulator each.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(KernelError::DuplicateParameter(name.into()));
        }
        let id = self.values.len();
        self.index.insert(name.into(), id);
        self.names.push(name.into());
        self.grads.push(Tensor::zeros(&value.shape));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Glorot (Xavier) uniform: `U(±sqrt(6 / (fan_in + fan_out)))`, where a
    /// `[rows, cols]` matrix has fan-out `rows` and fan-in `cols`.
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: &[usize],
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let (fan_out, fan_in) = match shape {
            [r, c] => (*r, *c),
            [n] => (*n, *n),
            _ => return Err(shape_err("add_glorot", &[shape])),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| KernelError::UnknownParameter(name.into()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds a gradient buffer into the store's accumulators.
    pub fn accumulate(&mut self, buf: &GradBuffer) -> Result<()> {
        if buf.grads.len() != self.grads.len() {
            return Err(shape_err(
                "accumulate",
                &[&[self.grads.len()], &[buf.grads.len()]],
            ));
        }
        for (g, b) in self.grads.iter_mut().zip(&buf.grads) {
            g.add_assign(b)?;
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| ManifestEntry {
                name: n.clone(),
                shape: v.shape.clone(),
            })
            .collect()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Gradient accumulators shaped like a store's parameters, owned by one
/// worker so batch elements can be differentiated independently.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|v| Tensor::zeros(&v.shape))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Mutable access to two distinct gradients at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b, "pair_mut needs distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.grads.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.grads.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    /// Mutable access to three distinct gradients at once.
    pub fn triple_mut(
        &mut self,
        a: ParamId,
        b: ParamId,
        c: ParamId,
    ) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        assert!(
            a != b && b != c && a != c,
            "triple_mut needs distinct parameters"
        );
        let mut refs: Vec<(usize, &mut Tensor)> = self
            .grads
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| *i == a.0 || *i == b.0 || *i == c.0)
            .collect();
        let mut take = |id: ParamId| {
            let pos = refs.iter().position(|(i, _)| *i == id.0).unwrap();
            refs.swap_remove(pos).1
        };
        let ra = take(a);
        let rb = take(b);
        let rc = take(c);
        (ra, rb, rc)
    }

    pub fn add(&mut self, other: &GradBuffer) -> Result<()> {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            g.add_assign(o)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .values
            .iter()
            .map(|v| Tensor::zeros(&v.shape))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the store's gradients, which are
/// zeroed afterwards.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) {
    let c = state.config;
    state.step += 1;
    let scale = match c.clip_norm {
        Some(max) => {
            let norm = store
                .grads
                .iter()
                .flat_map(|g| g.data.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for ((p, g), (m, v)) in store
        .values
        .iter_mut()
        .zip(store.grads.iter_mut())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.data.len() {
            let gk = g.data[k] * scale;
            m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
            v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
            let mh = m.data[k] / bc1;
            let vh = v.data[k] / bc2;
            p.data[k] -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            g.data[k] = 0.0;
        }
    }
}

/// Relative error used by the gradient checker. The floor keeps
/// near-zero gradients from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients against central differences for every scalar
/// in `store`. `f` evaluates the scalar objective; when handed a buffer it
/// must also accumulate the analytic gradient into it.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    mut f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, Option<&mut GradBuffer>) -> f64,
{
    let mut analytic = GradBuffer::zeros_like(store);
    f(store, Some(&mut analytic));
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut failure = None;
    for p in 0..store.values.len() {
        for k in 0..store.values[p].data.len() {
            let orig = store.values[p].data[k];
            store.values[p].data[k] = orig + step;
            let up = f(store, None);
            store.values[p].data[k] = orig - step;
            let down = f(store, None);
            store.values[p].data[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.grads[p].data[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.names[p].clone(), k));
                if err > tolerance {
                    failure = Some(KernelError::GradientMismatch {
                        name: store.names[p].clone(),
                        index: k,
                        analytic: a,
                        numeric,
                        rel_error: err,
                        tolerance,
                    });
                }
            }
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
