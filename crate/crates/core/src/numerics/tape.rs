//! Reverse-mode differentiation over a linear tape of primitive applications.
//!
//! Every forward primitive appends one node. A node remembers its operands
//! (always earlier nodes, so the tape is topologically ordered by
//! construction) and whatever it needs for its backward rule. Nodes whose
//! operands carry no gradient are stored without a backward rule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::rng::unit_hash;
use crate::numerics::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Additive score used for masked attention entries.
const MASKED: f64 = -1e30;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    MeanPool {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    L2Normalize {
        x: Var,
        norm: S,
    },
    Sum(Var),
    Mean(Var),
    SqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        eps: S,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Execution mode. Dropout is the identity in [`Mode::Eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Key of the counter-based dropout stream: masks are a pure function of
/// `(seed, layer, step, stream, element)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub stream: u64,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    dropout: DropoutKey,
}

impl<S: Scalar> Tape<S> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            dropout: DropoutKey::default(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn set_dropout_key(&mut self, key: DropoutKey) {
        self.dropout = key;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter. Created once per tape; frozen
    /// parameters become constants and never receive gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.params.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.value(b).rank() != 2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    /// `x[m×in] · w[in×out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 {
            return Err(Error::shape("linear", format!("input [{m}x{k}], weight [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != n {
                return Err(Error::shape("linear", format!("bias {} vs out {n}", bv.len())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let mut ops = vec![x, w];
        ops.extend(b);
        let rg = self.rg(&ops);
        Ok(self.push(t, rg, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale(a, k))
    }

    /// Adds `row[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let r = self.value(row).data();
        if r.len() != n {
            return Err(Error::shape("add_row", format!("row {} vs width {n}", r.len())));
        }
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, rg, Op::AddRow(a, row)))
    }

    /// Elementwise sum of equally shaped operands.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::shape("add_n", "no operands"))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            self.same_shape("add_n", first, v)?;
            for (x, &y) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *x += y;
            }
        }
        let rg = self.rg(vars);
        Ok(self.push(acc, rg, Op::AddN(vars.to_vec())))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu_fwd);
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Tanh(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Softmax(a))
    }

    /// Normalizes each row to zero mean and unit population variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("width {n}, gain/bias {}", self.value(gain).len()),
            ));
        }
        let eps = S::lit(eps);
        let nn = S::lit(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let inv = (var + eps).sqrt().recip();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout; the identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, layer: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let key = self.dropout;
        let n = self.value(x).len();
        let mask: Vec<S> = (0..n as u64)
            .map(|i| {
                if unit_hash(&[key.seed, layer, key.step, key.stream, i]) < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TargetOutOfVocab { target: bad, vocab: v });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Frames `x[T×C]` into overlapping windows `[T_out × kernel·C]` with
    /// zero padding `kernel/2` on both ends, `T_out = ceil(T / stride)` for
    /// odd kernels. A linear map on the result is a 1-D convolution.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (t, c) = self.dims(x);
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("unfold", "kernel and stride must be positive"));
        }
        let t_out = conv_out_len(t, kernel, stride);
        if t_out == 0 {
            return Err(Error::InputTooShort { len: t, min: kernel });
        }
        let pad = kernel / 2;
        let xv = self.value(x).data();
        let mut data = vec![S::zero(); t_out * kernel * c];
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                let dst = o * kernel * c + j * c;
                data[dst..dst + c].copy_from_slice(&xv[src * c..(src + 1) * c]);
            }
        }
        let out = Tensor::new(vec![t_out, kernel * c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Unfold { x, kernel, stride }))
    }

    /// Multi-head scaled dot-product attention. `q[Tq×d]`, `k,v[Tk×d]`;
    /// `causal` lets query `i` see keys `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, dv) = self.dims(v);
        if d != dk || d != dv || tk != tv || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q [{tq}x{d}], k [{tk}x{dk}], v [{tv}x{dv}], heads {heads}"),
            ));
        }
        if causal && tq != tk {
            return Err(Error::shape(
                "attention",
                format!("causal needs square scores, got {tq}x{tk}"),
            ));
        }
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![S::zero(); heads * tq * tk];
        let mut out = vec![S::zero(); tq * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                for j in 0..tk {
                    if causal && j > i {
                        p[j] = S::lit(MASKED);
                        continue;
                    }
                    let mut s = S::zero();
                    for c in 0..dh {
                        s += qv[i * d + off + c] * kv[j * d + off + c];
                    }
                    p[j] = s * scale;
                }
                softmax_in_place(p);
                for j in 0..tk {
                    let w = p[j];
                    if w == S::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        out[i * d + off + c] += w * vv[j * d + off + c];
                    }
                }
            }
        }
        let t = Tensor::new(vec![tq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(t, rg, Op::Attention { q, k, v, heads, probs }))
    }

    /// Mean of the rows of `x[T×d]` selected by `mask`; result has shape `[d]`.
    pub fn mean_pool_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (t, d) = self.dims(x);
        if mask.len() != t {
            return Err(Error::shape(
                "mean_pool_masked",
                format!("mask {} vs time {t}", mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPooling);
        }
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); d];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &val) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += val;
            }
        }
        let inv = S::lit(1.0 / count as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            rg,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// `v / ‖v‖₂`; norms below `1e-12` are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let norm = vx.norm();
        if !(norm.as_f64() >= super::NORM_TOLERANCE) {
            return Err(Error::DegenerateEmbedding { norm: norm.as_f64() });
        }
        let t = vx.map(|a| a / norm);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::L2Normalize { x, norm }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().copied().sum::<S>() / S::lit(va.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Squared Euclidean distance `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(
                "sq_dist",
                format!("{} vs {}", self.value(a).len(), self.value(b).len()),
            ));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), rg, Op::SqDist(a, b)))
    }

    /// Mean label-smoothed cross-entropy over rows of `logits[T×V]` whose
    /// target is not `ignore`. The smoothed target puts `1 − eps` on the
    /// true class and `eps / (V − 1)` on each other class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>, eps: f64) -> Result<Var> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {t} rows", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::invalid(format!("label smoothing {eps} outside [0,1)")));
        }
        if v < 2 {
            return Err(Error::shape("cross_entropy", "vocabulary below 2"));
        }
        let rows: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .filter(|(_, &y)| Some(y) != ignore)
            .map(|(r, &y)| (r, y))
            .collect();
        if let Some(&(_, bad)) = rows.iter().find(|(_, y)| *y >= v) {
            return Err(Error::TargetOutOfVocab { target: bad, vocab: v });
        }
        if rows.is_empty() {
            return Err(Error::invalid("cross_entropy: every position is ignored"));
        }
        let on = S::lit(1.0 - eps);
        let off = S::lit(eps / (v as f64 - 1.0));
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); rows.len() * v];
        let mut total = S::zero();
        for (i, &(r, y)) in rows.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
            let p = &mut probs[i * v..(i + 1) * v];
            let mut loss = S::zero();
            for c in 0..v {
                let logp = row[c] - lse;
                p[c] = logp.exp();
                let q = if c == y { on } else { off };
                if q != S::zero() {
                    loss -= q * logp;
                }
            }
            total += loss;
        }
        let value = total / S::lit(rows.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::CrossEntropy {
                logits,
                rows,
                eps: S::lit(eps),
                probs,
            },
        ))
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Propagates `d loss / d node` back to every gradient-carrying leaf.
    /// Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        let mut leaf_grads: HashMap<usize, Tensor<S>> = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            leaves: leaf_grads,
            params: self.params,
        })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear { x: a, w: b, .. } => {
                let (m, k) = nodes[a.0].value.dims2();
                let (_, nn) = nodes[b.0].value.dims2();
                acc(*a, &mut |buf| gemm_bt_acc(g, val(*b), buf, m, nn, k));
                acc(*b, &mut |buf| gemm_at_acc(val(*a), g, buf, m, k, nn));
                if let Op::Linear { b: Some(bias), .. } = &nodes[i].op {
                    acc(*bias, &mut |buf| {
                        for row in g.chunks(nn) {
                            for (o, &x) in buf.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(val(*b)) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(val(*a)) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |buf| {
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o += x * *k;
                }
            }),
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_into(buf, g));
                let n = nodes[row.0].value.len();
                acc(*row, &mut |buf| {
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::AddN(vars) => {
                for v in vars {
                    acc(*v, &mut |buf| add_into(buf, g));
                }
            }
            Op::Gelu(a) => acc(*a, &mut |buf| {
                for ((o, &x), &gx) in buf.iter_mut().zip(val(*a)).zip(g) {
                    *o += gx * gelu_grad(x);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for ((o, &y), &gx) in buf.iter_mut().zip(out.data()).zip(g) {
                    *o += gx * (S::one() - y * y);
                }
            }),
            Op::Softmax(a) => {
                let (_, n) = out.dims2();
                acc(*a, &mut |buf| {
                    for ((o, y), gr) in buf.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let dot: S = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..n {
                            o[c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = out.dims2();
                let gv = val(*gain);
                acc(*gain, &mut |buf| {
                    for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * h[c];
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                });
                let nn = S::lit(n as f64);
                acc(*x, &mut |buf| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let h = &xhat[r * n..(r + 1) * n];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            s1 += d;
                            s2 += d * h[c];
                        }
                        let k = inv_std[r] / nn;
                        for c in 0..n {
                            let d = gr[c] * gv[c];
                            buf[r * n + c] += k * (nn * d - s1 - h[c] * s2);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |buf| {
                for ((o, &gx), &mk) in buf.iter_mut().zip(g).zip(mask) {
                    *o += gx * mk;
                }
            }),
            Op::Embedding { table, ids } => {
                let (_, d) = nodes[table.0].value.dims2();
                acc(*table, &mut |buf| {
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                });
            }
            Op::Unfold { x, kernel, stride } => {
                let (t, c) = nodes[x.0].value.dims2();
                let (t_out, _) = out.dims2();
                let pad = kernel / 2;
                acc(*x, &mut |buf| {
                    for o in 0..t_out {
                        for j in 0..*kernel {
                            let src = (o * stride + j) as isize - pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let src = src as usize;
                            let off = o * kernel * c + j * c;
                            add_into(&mut buf[src * c..(src + 1) * c], &g[off..off + c]);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::MeanPool { x, mask, count } => {
                let d = out.len();
                let inv = S::lit(1.0 / *count as f64);
                acc(*x, &mut |buf| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for c in 0..d {
                            buf[r * d + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norm } => {
                let y = out.data();
                let dot: S = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                acc(*x, &mut |buf| {
                    for ((o, &gx), &yx) in buf.iter_mut().zip(g).zip(y) {
                        *o += (gx - yx * dot) / *norm;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let k = g[0] / S::lit(nodes[a.0].value.len() as f64);
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += k));
            }
            Op::SqDist(a, b) => {
                let two = S::lit(2.0) * g[0];
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o += two * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(val(*a)).zip(val(*b)) {
                        *o -= two * (x - y);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                rows,
                eps,
                probs,
            } => {
                let (_, v) = nodes[logits.0].value.dims2();
                let on = S::one() - *eps;
                let off = *eps / S::lit(v as f64 - 1.0);
                let k = g[0] / S::lit(rows.len() as f64);
                acc(*logits, &mut |buf| {
                    for (i, &(r, y)) in rows.iter().enumerate() {
                        for c in 0..v {
                            let q = if c == y { on } else { off };
                            buf[r * v + c] += k * (probs[i * v + c] - q);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let nodes = &self.nodes;
        let (tq, d) = nodes[q.0].value.dims2();
        let (tk, _) = nodes[k.0].value.dims2();
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let qv = nodes[q.0].value.data();
        let kv = nodes[k.0].value.data();
        let vv = nodes[v.0].value.data();
        let mut dq = vec![S::zero(); tq * d];
        let mut dk = vec![S::zero(); tk * d];
        let mut dv = vec![S::zero(); tk * d];
        let mut dp = vec![S::zero(); tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = S::zero();
                for j in 0..tk {
                    let mut s = S::zero();
                    for c in 0..dh {
                        s += gi[c] * vv[j * d + off + c];
                    }
                    dp[j] = s;
                    dot += s * p[j];
                    if p[j] != S::zero() {
                        for c in 0..dh {
                            dv[j * d + off + c] += p[j] * gi[c];
                        }
                    }
                }
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kv[j * d + off + c];
                        dk[j * d + off + c] += ds * qv[i * d + off + c];
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                let buf = grads[var.0].get_or_insert_with(|| vec![S::zero(); src.len()]);
                add_into(buf, &src);
            }
        }
    }
}

/// Gradients of a scalar with respect to the leaves of the tape it came from.
pub struct Gradients<S> {
    leaves: HashMap<usize, Tensor<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf; `None` if the leaf is frozen or unreached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params
            .iter()
            .filter_map(|(&id, v)| self.leaves.get(&v.0).map(|t| (id, t)))
    }

    /// Moves parameter gradients into `dst`, adding to existing entries.
    pub fn accumulate_into(&self, dst: &mut HashMap<ParamId, Tensor<S>>) {
        for (id, g) in self.params() {
            match dst.get_mut(&id) {
                Some(t) => add_into(t.data_mut(), g.data()),
                None => {
                    dst.insert(id, g.clone());
                }
            }
        }
    }
}

/// Output length of a zero-padded (`kernel/2`) strided window sweep.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    let padded = len + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

// tanh approximation of GELU
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + S::lit(0.044715) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    S::lit(0.5) * (S::one() + th) + S::lit(0.5) * x * (S::one() - th * th) * du
}
