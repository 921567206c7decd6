//! Transformer encoder with one entity-memory access layer.
//!
//! Layers are pre-norm. After `memory_layer` layers every mention queries the
//! entity table from its boundary states, and the attended entity vector is
//! projected back and added to each token of the mention.

use crate::error::{FaeError, Result};
use crate::kb::EntityId;
use crate::model::{argmax, ModelConfig, ENTITY_OUT, ENTITY_QUERY, ENTITY_TABLE};
use crate::numcore::{ParamStore, Segment, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Row-stacked input: several sequences, each one attention segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Inclusive `(start, end)` rows of each mention, start order within a segment.
    pub spans: Vec<(usize, usize)>,
}

impl EncoderInput {
    pub fn single(tokens: &[u32], spans: &[(usize, usize)]) -> Self {
        EncoderInput {
            tokens: tokens.iter().map(|&t| t as usize).collect(),
            positions: (0..tokens.len()).collect(),
            segments: vec![Segment {
                start: 0,
                len: tokens.len(),
            }],
            spans: spans.to_vec(),
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 || self.positions.len() != n {
            return Err(FaeError::Validation(
                "empty or misaligned encoder input".into(),
            ));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(FaeError::Validation(format!(
                "token id {t} outside vocabulary"
            )));
        }
        if let Some(p) = self.positions.iter().find(|&&p| p >= cfg.max_len) {
            return Err(FaeError::Validation(format!(
                "position {p} beyond max_len {}",
                cfg.max_len
            )));
        }
        for &(s, t) in &self.spans {
            let inside = self
                .segments
                .iter()
                .any(|g| s >= g.start && t < g.start + g.len && s <= t);
            if !inside {
                return Err(FaeError::Validation(format!(
                    "mention span ({s}, {t}) out of bounds"
                )));
            }
        }
        Ok(())
    }
}

pub struct EncoderOutput {
    /// Final normalized hidden states `[rows x d_t]`.
    pub hidden: Var,
    /// Intermediate entity queries `[mentions x d_e]`.
    pub memory_queries: Option<Var>,
    /// Entity attention of each mention at the memory layer `[mentions x |E|]`.
    pub memory_probs: Option<Var>,
    /// Entity-aware contextual queries `[mentions x d_e]`.
    pub contextual: Option<Var>,
}

fn layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    segs: &[Segment],
) -> Result<Var> {
    let p = |n: &str| format!("layer{l}.{n}");
    let w = |tape: &mut Tape, n: &str| tape.param_by_name(store, &p(n));
    let (g1, b1) = (w(tape, "ln1.gain")?, w(tape, "ln1.bias")?);
    let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
    let proj = |tape: &mut Tape, wn: &str, bn: &str| -> Result<Var> {
        let wv = tape.param_by_name(store, &p(wn))?;
        let bv = tape.param_by_name(store, &p(bn))?;
        let y = tape.matmul(h, wv)?;
        tape.add_bias(y, bv)
    };
    let q = proj(tape, "attn.wq", "attn.bq")?;
    let k = proj(tape, "attn.wk", "attn.bk")?;
    let v = proj(tape, "attn.wv", "attn.bv")?;
    let a = tape.segment_attention(q, k, v, segs, cfg.heads)?;
    let (wo, bo) = (w(tape, "attn.wo")?, w(tape, "attn.bo")?);
    let a = tape.matmul(a, wo)?;
    let a = tape.add_bias(a, bo)?;
    let x = tape.add(x, a)?;

    let (g2, b2) = (w(tape, "ln2.gain")?, w(tape, "ln2.bias")?);
    let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
    let (w1, bb1) = (w(tape, "ffn.w1")?, w(tape, "ffn.b1")?);
    let (w2, bb2) = (w(tape, "ffn.w2")?, w(tape, "ffn.b2")?);
    let f = tape.matmul(h, w1)?;
    let f = tape.add_bias(f, bb1)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, w2)?;
    let f = tape.add_bias(f, bb2)?;
    tape.add(x, f)
}

/// `W^T [h_start; h_end]` for each span.
pub fn span_query(tape: &mut Tape, h: Var, spans: &[(usize, usize)], w: Var) -> Result<Var> {
    let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let hs = tape.gather_rows(h, &starts)?;
    let ht = tape.gather_rows(h, &ends)?;
    let cat = tape.concat_cols(hs, ht)?;
    tape.matmul(cat, w)
}

pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<EncoderOutput> {
    input.validate(cfg)?;
    let tok = tape.param_by_name(store, "tok_emb")?;
    let pos = tape.param_by_name(store, "pos_emb")?;
    let te = tape.gather_rows(tok, &input.tokens)?;
    let pe = tape.gather_rows(pos, &input.positions)?;
    let mut x = tape.add(te, pe)?;
    let has_mentions = !input.spans.is_empty();
    let e = tape.param_by_name(store, ENTITY_TABLE)?;
    let w_e = tape.param_by_name(store, ENTITY_QUERY)?;
    let mut memory_queries = None;
    let mut memory_probs = None;
    for l in 0..cfg.layers {
        if l == cfg.memory_layer && has_mentions {
            let w_2 = tape.param_by_name(store, ENTITY_OUT)?;
            let hm = span_query(tape, x, &input.spans, w_e)?;
            let scores = tape.matmul_nt(hm, e)?;
            let probs = tape.softmax(scores)?;
            let u = tape.matmul(probs, e)?;
            let delta = tape.matmul(u, w_2)?;
            let targets: Vec<(usize, usize)> = input
                .spans
                .iter()
                .enumerate()
                .flat_map(|(i, &(s, t))| (s..=t).map(move |j| (i, j)))
                .collect();
            x = tape.scatter_add_rows(x, delta, &targets)?;
            memory_queries = Some(hm);
            memory_probs = Some(probs);
        }
        x = layer(tape, store, cfg, l, x, &input.segments)?;
    }
    let gf = tape.param_by_name(store, "ln_f.gain")?;
    let bf = tape.param_by_name(store, "ln_f.bias")?;
    let hidden = tape.layer_norm(x, gf, bf, LN_EPS)?;
    let contextual = if has_mentions {
        Some(span_query(tape, hidden, &input.spans, w_e)?)
    } else {
        None
    };
    Ok(EncoderOutput {
        hidden,
        memory_queries,
        memory_probs,
        contextual,
    })
}

fn one_hot(gold: &[EntityId]) -> Vec<Vec<(usize, f64)>> {
    gold.iter().map(|g| vec![(g.0 as usize, 1.0)]).collect()
}

/// Mean cross-entropy of the memory-layer entity attention against gold
/// entities, over the mentions listed in `rows`. Zero when `rows` is empty.
pub fn entity_access_loss(
    tape: &mut Tape,
    out: &EncoderOutput,
    rows: &[usize],
    gold: &[EntityId],
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let probs = out
        .memory_probs
        .ok_or_else(|| FaeError::Validation("no mentions were encoded".into()))?;
    let p = tape.gather_rows(probs, rows)?;
    tape.cross_entropy(p, &one_hot(gold))
}

/// As [`entity_access_loss`] but scoring the final contextual queries.
pub fn context_entity_loss(
    tape: &mut Tape,
    out: &EncoderOutput,
    e: Var,
    rows: &[usize],
    gold: &[EntityId],
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let c = out
        .contextual
        .ok_or_else(|| FaeError::Validation("no mentions were encoded".into()))?;
    let c = tape.gather_rows(c, rows)?;
    let scores = tape.matmul_nt(c, e)?;
    let p = tape.softmax(scores)?;
    tape.cross_entropy(p, &one_hot(gold))
}

/// Highest inner product with the entity table per query row; lowest id on ties.
pub fn predict_context_entities(c: &Tensor, e: &Tensor) -> Vec<EntityId> {
    (0..c.rows())
        .map(|i| {
            let q = c.row(i);
            let scores: Vec<f64> = (0..e.rows())
                .map(|j| q.iter().zip(e.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            EntityId(argmax(&scores) as u32)
        })
        .collect()
}
