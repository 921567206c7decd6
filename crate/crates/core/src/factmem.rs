//! Fact memory over head pairs and its integration with the contextual query.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::Serialize;

use crate::encoder::span_query;
use crate::error::{FaeError, Result};
use crate::kb::GroupedKb;
use crate::model::{ENTITY_TABLE, FACT_KEY, NULL_RELATION, NULL_SUBJECT, RELATION_TABLE};
use crate::numcore::{matmul, ParamStore, Tape, Tensor, Var};

/// Parameters the cached keys depend on.
pub const KEY_PARAMS: [&str; 5] = [
    ENTITY_TABLE,
    RELATION_TABLE,
    FACT_KEY,
    NULL_SUBJECT,
    NULL_RELATION,
];

fn key_inputs(kb: &GroupedKb) -> (Vec<usize>, Vec<usize>) {
    kb.heads()[1..]
        .iter()
        .map(|h| (h.subject.0 as usize, h.relation.0 as usize))
        .unzip()
}

/// `a_j = W_a^T [s_j; r_j]` for every head pair, the null row first.
pub fn build_keys(
    kb: &GroupedKb,
    e: &Tensor,
    r: &Tensor,
    w_a: &Tensor,
    null_subject: &Tensor,
    null_relation: &Tensor,
) -> Result<Tensor> {
    let (de, dr) = (e.cols(), r.cols());
    if w_a.rows() != de + dr || null_subject.len() != de || null_relation.len() != dr {
        return Err(FaeError::Config(format!(
            "key projection {:?} does not match entity width {de} and relation width {dr}",
            w_a.shape()
        )));
    }
    let b = kb.bounds();
    if e.rows() < b.n_entities || r.rows() < b.n_relations {
        return Err(FaeError::Config(format!(
            "embedding tables ({}, {}) smaller than the knowledge base bounds",
            e.rows(),
            r.rows()
        )));
    }
    let (subj, rel) = key_inputs(kb);
    let mut data = Vec::with_capacity(kb.len() * (de + dr));
    data.extend_from_slice(null_subject.data());
    data.extend_from_slice(null_relation.data());
    for (s, rr) in subj.iter().zip(&rel) {
        data.extend_from_slice(e.row(*s));
        data.extend_from_slice(r.row(*rr));
    }
    let cat = Tensor::matrix(kb.len(), de + dr, data)?;
    matmul(&cat, w_a)
}

/// The same keys recorded on a tape.
pub fn head_keys(
    tape: &mut Tape,
    kb: &GroupedKb,
    e: Var,
    r: Var,
    w_a: Var,
    ns: Var,
    nr: Var,
) -> Result<Var> {
    let (subj, rel) = key_inputs(kb);
    let (s, rr) = if subj.is_empty() {
        (ns, nr)
    } else {
        let gs = tape.gather_rows(e, &subj)?;
        let gr = tape.gather_rows(r, &rel)?;
        (tape.concat_rows(&[ns, gs])?, tape.concat_rows(&[nr, gr])?)
    };
    let cat = tape.concat_cols(s, rr)?;
    tape.matmul(cat, w_a)
}

/// Exact top-`k` indices by score, highest first, lower index on ties.
/// `k` larger than the number of scores is clamped.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp =
        |a: &usize, b: &usize| -> Ordering { scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

/// Cached head-pair keys for one knowledge-base snapshot and parameter state.
#[derive(Debug)]
pub struct FactMemoryIndex {
    kb: GroupedKb,
    keys: Tensor,
    param_digest: String,
    kb_version: String,
    clamped: AtomicUsize,
}

impl FactMemoryIndex {
    pub fn build(kb: &GroupedKb, store: &ParamStore) -> Result<Self> {
        let keys = build_keys(
            kb,
            store.by_name(ENTITY_TABLE)?,
            store.by_name(RELATION_TABLE)?,
            store.by_name(FACT_KEY)?,
            store.by_name(NULL_SUBJECT)?,
            store.by_name(NULL_RELATION)?,
        )?;
        Ok(FactMemoryIndex {
            kb: kb.clone(),
            keys,
            param_digest: store.digest_of(&KEY_PARAMS)?,
            kb_version: kb.version_id(),
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn kb(&self) -> &GroupedKb {
        &self.kb
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }

    pub fn kb_version(&self) -> &str {
        &self.kb_version
    }

    pub fn is_stale(&self, store: &ParamStore, kb: &GroupedKb) -> Result<bool> {
        Ok(
            kb.version_id() != self.kb_version
                || store.digest_of(&KEY_PARAMS)? != self.param_digest,
        )
    }

    /// Rebuilds when the knowledge base or a key parameter changed; returns
    /// whether a rebuild happened.
    pub fn refresh(&mut self, store: &ParamStore, kb: &GroupedKb) -> Result<bool> {
        if !self.is_stale(store, kb)? {
            return Ok(false);
        }
        *self = FactMemoryIndex::build(kb, store)?;
        Ok(true)
    }

    /// Exact top-`k` head indices for query `v`.
    pub fn retrieve(&self, v: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Err(FaeError::Validation("k must be at least 1".into()));
        }
        if v.len() != self.keys.cols() {
            return Err(FaeError::dim("retrieve", &[v.len()], self.keys.shape()));
        }
        if k > self.len() {
            self.clamped.fetch_add(1, AtomicOrdering::Relaxed);
            log::warn!("top-k of {k} clamped to {} memory rows", self.len());
        }
        let scores: Vec<f64> = (0..self.len())
            .map(|j| self.keys.row(j).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        Ok(top_k(&scores, k))
    }

    /// How many retrievals asked for more rows than exist.
    pub fn clamp_warnings(&self) -> usize {
        self.clamped.load(AtomicOrdering::Relaxed)
    }
}

/// `W^T [h_start; h_end]` of the final hidden states at each answer span.
pub fn fact_query(tape: &mut Tape, hidden: Var, spans: &[(usize, usize)], w: Var) -> Result<Var> {
    span_query(tape, hidden, spans, w)
}

/// Cross-entropy of the full head-pair softmax against distant labels.
pub fn fact_loss(tape: &mut Tape, fact_probs: Var, labels: &[usize]) -> Result<Var> {
    let targets: Vec<Vec<(usize, f64)>> = labels.iter().map(|&l| vec![(l, 1.0)]).collect();
    tape.cross_entropy(fact_probs, &targets)
}

pub fn answer_loss(
    tape: &mut Tape,
    answer_probs: Var,
    targets: &[Vec<(usize, f64)>],
) -> Result<Var> {
    tape.cross_entropy(answer_probs, targets)
}

/// Tape handles for the integration of one batch.
pub struct Integration {
    pub retrieved: Vec<Vec<usize>>,
    /// Per example, softmax over its retrieved scores `[1 x k]`.
    pub beta: Vec<Var>,
    /// Per example and retrieved head, softmax over the tail set; `None` for
    /// the null row or an empty tail set.
    pub alpha: Vec<Vec<Option<Var>>>,
    /// Knowledge embeddings `[batch x d_e]`.
    pub f: Var,
    /// Null-row probabilities `[1 x batch]`.
    pub lambda: Var,
    pub q: Var,
    pub answer_probs: Var,
}

/// Values of one example's integration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactPrediction {
    pub retrieved: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub f: Vec<f64>,
    pub lambda: f64,
    pub q: Vec<f64>,
    pub answer_probs: Vec<f64>,
}

impl Integration {
    pub fn predictions(&self, tape: &Tape) -> Vec<FactPrediction> {
        (0..self.retrieved.len())
            .map(|b| FactPrediction {
                retrieved: self.retrieved[b].clone(),
                beta: tape.value(self.beta[b]).data().to_vec(),
                alpha: self.alpha[b]
                    .iter()
                    .map(|a| a.map(|a| tape.value(a).data().to_vec()).unwrap_or_default())
                    .collect(),
                f: tape.value(self.f).row(b).to_vec(),
                lambda: tape.value(self.lambda).data()[b],
                q: tape.value(self.q).row(b).to_vec(),
                answer_probs: tape.value(self.answer_probs).row(b).to_vec(),
            })
            .collect()
    }
}

/// Tail-set aggregation, retrieval weighting and the null gate.
///
/// `c` and `z` are `[batch x d_e]`; `fact_logits` and `fact_probs` are
/// `[batch x |A|]`. The discrete choice of `retrieved` rows is not
/// differentiated; their scores are.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    tape: &mut Tape,
    kb: &GroupedKb,
    e: Var,
    c: Var,
    z: Var,
    fact_logits: Var,
    fact_probs: Var,
    retrieved: &[Vec<usize>],
) -> Result<Integration> {
    let n = retrieved.len();
    let d_e = tape.value(e).cols();
    if tape.value(c).rows() != n || tape.value(z).rows() != n || tape.value(fact_logits).rows() != n
    {
        return Err(FaeError::dim("integrate", tape.value(c).shape(), &[n]));
    }
    let mut beta = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut f_rows = Vec::with_capacity(n);
    for (b, heads) in retrieved.iter().enumerate() {
        if heads.is_empty() {
            return Err(FaeError::Validation(format!(
                "example {b} retrieved nothing"
            )));
        }
        let at: Vec<(usize, usize)> = heads.iter().map(|&j| (b, j)).collect();
        let scores = tape.gather_elems(fact_logits, &at)?;
        let be = tape.softmax(scores)?;
        let mut rows = Vec::with_capacity(heads.len());
        let mut al = Vec::with_capacity(heads.len());
        for &j in heads {
            let tail = kb.tail(j);
            if j == 0 || tail.is_empty() {
                rows.push(tape.constant(Tensor::zeros(&[1, d_e])));
                al.push(None);
                continue;
            }
            let ids: Vec<usize> = tail.objects().iter().map(|o| o.0 as usize).collect();
            let objs = tape.gather_rows(e, &ids)?;
            let zb = tape.gather_rows(z, &[b])?;
            let s = tape.matmul_nt(zb, objs)?;
            let a = tape.softmax(s)?;
            rows.push(tape.matmul(a, objs)?);
            al.push(Some(a));
        }
        let stacked = tape.concat_rows(&rows)?;
        f_rows.push(tape.matmul(be, stacked)?);
        beta.push(be);
        alpha.push(al);
    }
    let f = tape.concat_rows(&f_rows)?;
    let null_at: Vec<(usize, usize)> = (0..n).map(|b| (b, 0)).collect();
    let lambda = tape.gather_elems(fact_probs, &null_at)?;
    let keep = tape.affine(lambda, -1.0, 1.0)?;
    let qc = tape.scale_rows(lambda, c)?;
    let qf = tape.scale_rows(keep, f)?;
    let q = tape.add(qc, qf)?;
    let logits = tape.matmul_nt(q, e)?;
    let answer_probs = tape.softmax(logits)?;
    Ok(Integration {
        retrieved: retrieved.to_vec(),
        beta,
        alpha,
        f,
        lambda,
        q,
        answer_probs,
    })
}
