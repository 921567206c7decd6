//! Reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended in
//! evaluation order, so the inputs of node `i` always precede it and a single
//! reverse sweep visits each node once. A tape may be differentiated once.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, softmax_into, Tensor};
use crate::error::{FaeError, Result};

/// Floor applied inside the logarithm of [`Tape::cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

const DIST_TOL: f64 = 1e-6;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn idx(self) -> usize {
        self.idx as usize
    }
}

/// Contiguous rows `[start, start + len)` forming one attention segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    ScaleBy {
        s: Var,
        x: Var,
    },
    ScaleRows {
        s: Var,
        x: Var,
    },
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    ScatterAddRows {
        base: Var,
        delta: Var,
        targets: Vec<(usize, usize)>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<Vec<(usize, f64)>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<u32, Tensor>,
    tape: u32,
}

impl Gradients {
    /// Gradient of a parameter, if it took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a parameter, zero-filled when it did not take part.
    pub fn param_or_zeros(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradient of a differentiable leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.idx)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx() >= self.nodes.len() {
            return Err(FaeError::Usage(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx()].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if b_trans {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != kb {
            return Err(FaeError::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            b_trans,
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_trans }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(FaeError::dim("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of `x[m x n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(FaeError::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for r in 0..xv.rows() {
            for (o, b) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Affine(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        self.check(s)?;
        self.check(x)?;
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(FaeError::dim("scale_by", sv.shape(), &[1]));
        }
        let k = sv.item();
        let out = self.value(x).map(|v| k * v);
        let rg = self.rg(&[s, x]);
        Ok(self.push(out, Op::ScaleBy { s, x }, rg))
    }

    /// Multiplies row `r` of `x` by element `r` of `s`.
    pub fn scale_rows(&mut self, s: Var, x: Var) -> Result<Var> {
        self.check(s)?;
        self.check(x)?;
        let (sv, xv) = (self.value(s), self.value(x));
        if sv.len() != xv.rows() {
            return Err(FaeError::dim("scale_rows", sv.shape(), xv.shape()));
        }
        let mut out = xv.clone();
        for (r, k) in sv.data().iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[s, x]);
        Ok(self.push(out, Op::ScaleRows { s, x }, rg))
    }

    /// Selects rows of `x` (an embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = xv.cols();
        if rows.is_empty() {
            return Err(FaeError::Validation("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(FaeError::dim("gather_rows", xv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), n, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), rg))
    }

    /// Picks individual elements `(row, col)` into a `[1 x len]` row.
    pub fn gather_elems(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if at.is_empty() {
            return Err(FaeError::Validation(
                "gather_elems with no positions".into(),
            ));
        }
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= xv.rows() || c >= xv.cols() {
                return Err(FaeError::dim("gather_elems", xv.shape(), &[r, c]));
            }
            data.push(xv.at(r, c));
        }
        let out = Tensor::row_vector(data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherElems(x, at.to_vec()), rg))
    }

    /// `[a ; b]` along columns: `[m x p] , [m x q] -> [m x (p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(FaeError::dim("concat_cols", av.shape(), bv.shape()));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(m, p + q, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(FaeError::Validation("concat_rows with no parts".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(FaeError::dim(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    pv.shape(),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Returns `base` with `delta[i]` added to row `j` for every `(i, j)` in `targets`.
    pub fn scatter_add_rows(
        &mut self,
        base: Var,
        delta: Var,
        targets: &[(usize, usize)],
    ) -> Result<Var> {
        self.check(base)?;
        self.check(delta)?;
        let (bv, dv) = (self.value(base), self.value(delta));
        if bv.cols() != dv.cols() {
            return Err(FaeError::dim("scatter_add_rows", bv.shape(), dv.shape()));
        }
        let mut out = bv.clone();
        for &(i, j) in targets {
            if i >= dv.rows() || j >= bv.rows() {
                return Err(FaeError::dim("scatter_add_rows", bv.shape(), &[i, j]));
            }
            for (o, d) in out.row_mut(j).iter_mut().zip(dv.row(i)) {
                *o += d;
            }
        }
        let rg = self.rg(&[base, delta]);
        Ok(self.push(
            out,
            Op::ScatterAddRows {
                base,
                delta,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(FaeError::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let m = xv.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).map(|v| gelu(v).0);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu(x), rg))
    }

    /// Softmax over each row, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.data().iter().any(|v| !v.is_finite()) {
            return Err(FaeError::Domain {
                op: "softmax",
                msg: "non-finite logits".into(),
            });
        }
        let mut out = Tensor::zeros(xv.shape());
        let n = xv.cols();
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), &mut out.data_mut()[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Mean over rows of `-sum_i target_i * ln(max(p_i, LOG_FLOOR))`.
    ///
    /// Each row of `probs` and each target must be a probability distribution;
    /// targets are sparse `(class, weight)` lists.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[Vec<(usize, f64)>]) -> Result<Var> {
        self.check(probs)?;
        let pv = self.value(probs);
        if targets.len() != pv.rows() {
            return Err(FaeError::dim("cross_entropy", pv.shape(), &[targets.len()]));
        }
        let n = pv.cols();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = pv.row(r);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0 + DIST_TOL).contains(&p))
                || (s - 1.0).abs() > DIST_TOL
            {
                return Err(FaeError::Domain {
                    op: "cross_entropy",
                    msg: format!("row {r} of probs is not a distribution (sum {s})"),
                });
            }
            let ts: f64 = t.iter().map(|(_, w)| w).sum();
            if t.iter().any(|&(c, w)| c >= n || w < 0.0) || (ts - 1.0).abs() > DIST_TOL {
                return Err(FaeError::Domain {
                    op: "cross_entropy",
                    msg: format!("target {r} is not a distribution over {n} classes"),
                });
            }
            for &(c, w) in t {
                total -= w * row[c].max(LOG_FLOOR).ln();
            }
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention, applied independently within
    /// each segment of rows. `q`, `k`, `v` are `[rows x d]`, `d` divisible by `heads`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(FaeError::dim("segment_attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(FaeError::Config(format!(
                "{d} not divisible into {heads} heads"
            )));
        }
        for s in segments {
            if s.start + s.len > rows {
                return Err(FaeError::dim(
                    "segment_attention",
                    qv.shape(),
                    &[s.start, s.len],
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| s.len * s.len * heads).sum();
        let mut probs = Vec::with_capacity(total);
        let mut out = Tensor::zeros(&[rows, d]);
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = Vec::new();
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let off = h * dh;
                scores.clear();
                scores.resize(l * l, 0.0);
                for i in 0..l {
                    let qi = &qd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..l {
                        let kj = &kd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        scores[i * l + j] = dot(qi, kj) * scale;
                    }
                }
                let base = probs.len();
                probs.resize(base + l * l, 0.0);
                for i in 0..l {
                    softmax_into(
                        &scores[i * l..(i + 1) * l],
                        &mut probs[base + i * l..base + (i + 1) * l],
                    );
                }
                let od = out.data_mut();
                for i in 0..l {
                    let orow = (s.start + i) * d + off;
                    for j in 0..l {
                        let p = probs[base + i * l + j];
                        let vj = (s.start + j) * d + off;
                        for c in 0..dh {
                            od[orow + c] += p * vd[vj + c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(FaeError::Validation("sum of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            if pv.shape() != out.shape() {
                return Err(FaeError::dim("sum", out.shape(), pv.shape()));
            }
            out.add_assign(pv);
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Sum(parts.to_vec()), rg))
    }

    /// Sum of all elements as a single-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    /// Reverse sweep from a single-element `loss`. Returns gradients for every
    /// parameter and leaf reachable from it. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.consumed {
            return Err(FaeError::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(FaeError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx()] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut result = Gradients {
            tape: self.id,
            ..Default::default()
        };
        for i in (0..=loss.idx()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        result: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.idx()].requires_grad;
        let shape_of = |v: Var| nodes[v.idx()].value.shape().to_vec();
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.idx()] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Constant => {}
            Op::Leaf => {
                result.leaves.insert(i as u32, g);
            }
            Op::Param(id) => {
                result.params.insert(*id, g);
            }
            Op::MatMul { a, b, b_trans } => {
                let (av, bv) = (&nodes[a.idx()].value, &nodes[b.idx()].value);
                let (m, k, n) = (av.rows(), av.cols(), out.cols());
                if needs(*a) {
                    // dA = dC * op(b)^T
                    let mut da = Tensor::zeros(&shape_of(*a));
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        !b_trans,
                        da.data_mut(),
                        0.0,
                    );
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(&shape_of(*b));
                    if *b_trans {
                        // b is [n x k]: dB = dC^T * A
                        gemm(
                            n,
                            m,
                            k,
                            g.data(),
                            true,
                            av.data(),
                            false,
                            db.data_mut(),
                            0.0,
                        );
                    } else {
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            av.data(),
                            true,
                            g.data(),
                            false,
                            db.data_mut(),
                            0.0,
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g);
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let t = Tensor::new(shape_of(*bias), db).expect("bias shape");
                    acc(*bias, t);
                }
                if needs(*x) {
                    acc(*x, g);
                }
            }
            Op::Affine(x, scale) => {
                if needs(*x) {
                    acc(*x, g.map(|v| v * scale));
                }
            }
            Op::ScaleBy { s, x } => {
                let k = nodes[s.idx()].value.item();
                if needs(*s) {
                    let xv = &nodes[x.idx()].value;
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::new(shape_of(*s), vec![ds]).expect("scalar"));
                }
                if needs(*x) {
                    acc(*x, g.map(|v| v * k));
                }
            }
            Op::ScaleRows { s, x } => {
                let (sv, xv) = (&nodes[s.idx()].value, &nodes[x.idx()].value);
                if needs(*s) {
                    let ds: Vec<f64> = (0..xv.rows())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, Tensor::new(shape_of(*s), ds).expect("row scales"));
                }
                if needs(*x) {
                    let mut dx = g;
                    for (r, k) in sv.data().iter().enumerate() {
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    acc(*x, dx);
                }
            }
            Op::GatherRows(x, rows) => {
                if needs(*x) {
                    let mut dx = Tensor::zeros(&shape_of(*x));
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::GatherElems(x, at) => {
                if needs(*x) {
                    let mut dx = Tensor::zeros(&shape_of(*x));
                    let n = dx.cols();
                    for (i, &(r, c)) in at.iter().enumerate() {
                        dx.data_mut()[r * n + c] += g.data()[i];
                    }
                    acc(*x, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[a.idx()].value.cols();
                let q = nodes[b.idx()].value.cols();
                let m = g.rows();
                if needs(*a) {
                    let mut d = Vec::with_capacity(m * p);
                    for r in 0..m {
                        d.extend_from_slice(&g.row(r)[..p]);
                    }
                    acc(*a, Tensor::new(shape_of(*a), d).expect("concat shape"));
                }
                if needs(*b) {
                    let mut d = Vec::with_capacity(m * q);
                    for r in 0..m {
                        d.extend_from_slice(&g.row(r)[p..]);
                    }
                    acc(*b, Tensor::new(shape_of(*b), d).expect("concat shape"));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.idx()].value.len();
                    if needs(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        acc(p, Tensor::new(shape_of(p), d).expect("concat shape"));
                    }
                    offset += len;
                }
            }
            Op::ScatterAddRows {
                base,
                delta,
                targets,
            } => {
                if needs(*delta) {
                    let mut dd = Tensor::zeros(&shape_of(*delta));
                    for &(i, j) in targets {
                        for (d, v) in dd.row_mut(i).iter_mut().zip(g.row(j)) {
                            *d += v;
                        }
                    }
                    acc(*delta, dd);
                }
                if needs(*base) {
                    acc(*base, g);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gv = &nodes[gain.idx()].value;
                if needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g.data()[r * n + c] * xhat[r * n + c];
                        }
                    }
                    acc(*gain, Tensor::new(shape_of(*gain), dg).expect("gain shape"));
                }
                if needs(*bias) {
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::new(shape_of(*bias), db).expect("bias shape"));
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let dxh = g.data()[r * n + c] * gv.data()[c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[r * n + c];
                        }
                        for c in 0..n {
                            let dxh = g.data()[r * n + c] * gv.data()[c];
                            dx[r * n + c] =
                                inv_std[r] / nf * (nf * dxh - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                    acc(*x, Tensor::new(shape_of(*x), dx).expect("ln shape"));
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xv = &nodes[x.idx()].value;
                    let d = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| gelu(v).1 * gv)
                        .collect();
                    acc(*x, Tensor::new(shape_of(*x), d).expect("gelu shape"));
                }
            }
            Op::SoftmaxRows(x) => {
                if needs(*x) {
                    let n = out.cols();
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let p = out.row(r);
                        let gr = g.row(r);
                        let dotp: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = p[c] * (gr[c] - dotp);
                        }
                    }
                    acc(*x, Tensor::new(shape_of(*x), dx).expect("softmax shape"));
                }
            }
            Op::CrossEntropy { probs, targets } => {
                if needs(*probs) {
                    let pv = &nodes[probs.idx()].value;
                    let scale = g.item() / targets.len() as f64;
                    let mut dp = Tensor::zeros(pv.shape());
                    let n = pv.cols();
                    for (r, t) in targets.iter().enumerate() {
                        for &(c, w) in t {
                            let p = pv.data()[r * n + c];
                            if p > LOG_FLOOR {
                                dp.data_mut()[r * n + c] -= scale * w / p;
                            }
                        }
                    }
                    acc(*probs, dp);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (
                    &nodes[q.idx()].value,
                    &nodes[k.idx()].value,
                    &nodes[v.idx()].value,
                );
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
                let mut base = 0;
                let mut dscore = Vec::new();
                for s in segments {
                    let l = s.len;
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[base..base + l * l];
                        dscore.clear();
                        dscore.resize(l * l, 0.0);
                        for i in 0..l {
                            let gi = (s.start + i) * d + off;
                            let mut rowdot = 0.0;
                            for j in 0..l {
                                let vj = (s.start + j) * d + off;
                                let pij = p[i * l + j];
                                // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                                let mut dp = 0.0;
                                for c in 0..dh {
                                    dv[vj + c] += pij * gd[gi + c];
                                    dp += gd[gi + c] * vd[vj + c];
                                }
                                dscore[i * l + j] = dp;
                                rowdot += dp * pij;
                            }
                            for j in 0..l {
                                dscore[i * l + j] =
                                    p[i * l + j] * (dscore[i * l + j] - rowdot) * scale;
                            }
                        }
                        for i in 0..l {
                            let qi = (s.start + i) * d + off;
                            for j in 0..l {
                                let kj = (s.start + j) * d + off;
                                let ds = dscore[i * l + j];
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[qi + c] += ds * kd[kj + c];
                                    dk[kj + c] += ds * qd[qi + c];
                                }
                            }
                        }
                        base += l * l;
                    }
                }
                if needs(*q) {
                    acc(*q, Tensor::new(shape_of(*q), dq).expect("q shape"));
                }
                if needs(*k) {
                    acc(*k, Tensor::new(shape_of(*k), dk).expect("k shape"));
                }
                if needs(*v) {
                    acc(*v, Tensor::new(shape_of(*v), dv).expect("v shape"));
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if needs(p) {
                        acc(p, g.clone());
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    acc(*x, Tensor::filled(&shape_of(*x), g.item()));
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let y = tape.matmul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(2.0)).unwrap();
        let b = store.insert("b", Tensor::scalar(5.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let y = tape.scale(av, 3.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.param_or_zeros(&store, a).item(), 3.0);
        assert!(g.param(b).is_none());
        assert_eq!(g.param_or_zeros(&store, b).item(), 0.0);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(FaeError::Usage(_))));
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0));
        let _ = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(t2.backward(x), Err(FaeError::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(FaeError::Usage(_))));
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let i = tape.constant(Tensor::identity(2));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let r = tape.constant(Tensor::matrix(1, 2, vec![1., 0.]).unwrap());
        let c = tape.constant(Tensor::matrix(2, 1, vec![0., 5.]).unwrap());
        let z = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(z).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, FaeError::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let p = tape.softmax(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::row_vector(vec![1000.0, 0.0]));
        let p = tape.softmax(x).unwrap();
        let pv = tape.value(p).data();
        assert!((pv[0] - 1.0).abs() < 1e-12 && pv[1].abs() < 1e-12);

        // scalar reference evaluation
        let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let p = tape.softmax(x).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in tape.value(p).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(FaeError::Domain { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let l = tape.cross_entropy(p, &[vec![(0, 1.0)]]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let p = tape.constant(Tensor::row_vector(vec![0.25; 4]));
        let l = tape.cross_entropy(p, &[vec![(3, 1.0)]]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        // k-hot over classes 0 and 2 with probs [.4,.4,.1,.1]
        let p = tape.constant(Tensor::row_vector(vec![0.4, 0.4, 0.1, 0.1]));
        let l = tape.cross_entropy(p, &[vec![(0, 0.5), (2, 0.5)]]).unwrap();
        let expect = -(0.5 * 0.4f64.ln() + 0.5 * 0.1f64.ln());
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        // log floor keeps zero-probability targets finite
        let p = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let l = tape.cross_entropy(p, &[vec![(1, 1.0)]]).unwrap();
        assert!((tape.value(l).item() - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_non_distributions() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::row_vector(vec![0.7, 0.7]));
        assert!(tape.cross_entropy(p, &[vec![(0, 1.0)]]).is_err());
        let p = tape.constant(Tensor::row_vector(vec![0.5, 0.5]));
        assert!(tape.cross_entropy(p, &[vec![(0, 0.5)]]).is_err());
        assert!(tape.cross_entropy(p, &[vec![(2, 1.0)]]).is_err());
    }
}
