//! Model configuration, parameter layout, batching and the joint forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ClozeExample;
use crate::encoder::{self, EncoderInput, EncoderOutput};
use crate::error::{FaeError, Result};
use crate::factmem::{self, Integration};
use crate::kb::{EntityId, GroupedKb};
use crate::numcore::{ParamStore, Segment, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub d_t: usize,
    pub d_e: usize,
    pub d_r: usize,
    pub d_a: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Number of transformer layers before the entity memory access.
    pub memory_layer: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub embed_std: f64,
}

impl ModelConfig {
    /// Default dimensions for the given table sizes.
    pub fn new(vocab_size: usize, n_entities: usize, n_relations: usize) -> Self {
        ModelConfig {
            vocab_size,
            n_entities,
            n_relations,
            d_t: 64,
            d_e: 64,
            d_r: 64,
            d_a: 64,
            layers: 4,
            heads: 4,
            d_ff: 256,
            memory_layer: 2,
            max_len: 32,
            init_std: 0.02,
            embed_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FaeError::Config(m.to_string()));
        if self.vocab_size == 0 || self.n_entities == 0 || self.n_relations == 0 {
            return bad("vocabulary, entity and relation counts must be positive");
        }
        if [
            self.d_t,
            self.d_e,
            self.d_r,
            self.d_a,
            self.d_ff,
            self.max_len,
        ]
        .contains(&0)
        {
            return bad("dimensions must be positive");
        }
        if self.layers < 2 || self.memory_layer == 0 || self.memory_layer >= self.layers {
            return bad("need layers >= 2 and 0 < memory_layer < layers");
        }
        if self.heads == 0 || !self.d_t.is_multiple_of(self.heads) {
            return bad("d_t must be divisible by heads");
        }
        Ok(())
    }
}

pub const ENTITY_TABLE: &str = "entity.table";
pub const ENTITY_QUERY: &str = "entity.query_proj";
pub const ENTITY_OUT: &str = "entity.out_proj";
pub const RELATION_TABLE: &str = "relation.table";
pub const FACT_KEY: &str = "fact.key_proj";
pub const FACT_QUERY: &str = "fact.query_proj";
pub const TAIL_QUERY: &str = "fact.tail_query_proj";
pub const NULL_SUBJECT: &str = "fact.null_subject";
pub const NULL_RELATION: &str = "fact.null_relation";

/// Parameters kept fixed during finetuning.
pub const FINETUNE_FROZEN: [&str; 2] = [ENTITY_TABLE, RELATION_TABLE];

/// Sinusoidal position table scaled by `amp`; the trainable starting point of `pos_emb`.
fn sinusoidal(len: usize, d: usize, amp: f64) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for p in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * rate;
            t.row_mut(p)[i] = amp * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Seeded parameter initialization.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let (d, std, est) = (cfg.d_t, cfg.init_std, cfg.embed_std);
    s.insert(
        "tok_emb",
        Tensor::randn(&[cfg.vocab_size, d], est, &mut rng),
    )?;
    s.insert(
        "pos_emb",
        sinusoidal(cfg.max_len, d, est * std::f64::consts::SQRT_2),
    )?;
    for l in 0..cfg.layers {
        let p = format!("layer{l}");
        for ln in ["ln1", "ln2"] {
            s.insert(format!("{p}.{ln}.gain"), Tensor::filled(&[1, d], 1.0))?;
            s.insert(format!("{p}.{ln}.bias"), Tensor::zeros(&[1, d]))?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            s.insert(
                format!("{p}.attn.{w}"),
                Tensor::randn(&[d, d], std, &mut rng),
            )?;
            s.insert(format!("{p}.attn.b{}", &w[1..]), Tensor::zeros(&[1, d]))?;
        }
        s.insert(
            format!("{p}.ffn.w1"),
            Tensor::randn(&[d, cfg.d_ff], std, &mut rng),
        )?;
        s.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[1, cfg.d_ff]))?;
        s.insert(
            format!("{p}.ffn.w2"),
            Tensor::randn(&[cfg.d_ff, d], std, &mut rng),
        )?;
        s.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[1, d]))?;
    }
    s.insert("ln_f.gain", Tensor::filled(&[1, d], 1.0))?;
    s.insert("ln_f.bias", Tensor::zeros(&[1, d]))?;
    s.insert(
        ENTITY_TABLE,
        Tensor::randn(&[cfg.n_entities, cfg.d_e], est, &mut rng),
    )?;
    s.insert(
        ENTITY_QUERY,
        Tensor::randn(&[2 * d, cfg.d_e], std, &mut rng),
    )?;
    s.insert(ENTITY_OUT, Tensor::randn(&[cfg.d_e, d], std, &mut rng))?;
    s.insert(
        RELATION_TABLE,
        Tensor::randn(&[cfg.n_relations, cfg.d_r], est, &mut rng),
    )?;
    s.insert(
        FACT_KEY,
        Tensor::randn(&[cfg.d_e + cfg.d_r, cfg.d_a], std, &mut rng),
    )?;
    s.insert(FACT_QUERY, Tensor::randn(&[2 * d, cfg.d_a], std, &mut rng))?;
    s.insert(TAIL_QUERY, Tensor::randn(&[2 * d, cfg.d_e], std, &mut rng))?;
    s.insert(NULL_SUBJECT, Tensor::randn(&[1, cfg.d_e], est, &mut rng))?;
    s.insert(NULL_RELATION, Tensor::randn(&[1, cfg.d_r], est, &mut rng))?;
    Ok(s)
}

/// Several examples flattened into one row-stacked sequence.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: EncoderInput,
    /// Mention indices (into `input.spans`) with a gold entity for the
    /// entity-linking losses.
    pub context: Vec<usize>,
    pub context_gold: Vec<EntityId>,
    /// Mention index of each example's target.
    pub answer_mention: Vec<usize>,
    pub answer_targets: Vec<Vec<(usize, f64)>>,
    pub ds_labels: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&ClozeExample], max_len: usize) -> Result<Batch> {
        let mut input = EncoderInput::default();
        let mut batch = Batch {
            input: EncoderInput::default(),
            context: Vec::new(),
            context_gold: Vec::new(),
            answer_mention: Vec::new(),
            answer_targets: Vec::new(),
            ds_labels: Vec::new(),
        };
        for ex in examples {
            let n = ex.tokens.len();
            if n == 0 || n > max_len {
                return Err(FaeError::Validation(format!(
                    "example of {n} tokens does not fit max_len {max_len}"
                )));
            }
            let off = input.tokens.len();
            input.segments.push(Segment { start: off, len: n });
            input.tokens.extend(ex.tokens.iter().map(|&t| t as usize));
            input.positions.extend(0..n);
            // mentions in start order, target included
            let mut spans: Vec<(usize, usize, Option<EntityId>)> = ex
                .context_mentions
                .iter()
                .map(|m| (m.start, m.end, Some(m.entity)))
                .collect();
            spans.push((ex.answer_span.0, ex.answer_span.1, None));
            spans.sort_by_key(|s| s.0);
            for (s, t, gold) in spans {
                if s > t || t >= n {
                    return Err(FaeError::Validation(format!(
                        "mention span ({s}, {t}) outside example of {n} tokens"
                    )));
                }
                let idx = input.spans.len();
                input.spans.push((off + s, off + t));
                match gold {
                    Some(e) => {
                        batch.context.push(idx);
                        batch.context_gold.push(e);
                    }
                    None => batch.answer_mention.push(idx),
                }
            }
            batch.answer_targets.push(ex.answer_target());
            batch.ds_labels.push(ex.ds_label);
        }
        batch.input = input;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.answer_mention.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answer_mention.is_empty()
    }
}

/// Everything produced by one forward pass over a batch.
pub struct ForwardOutput {
    pub encoder: EncoderOutput,
    pub loss_ent: Var,
    pub loss_ctx: Var,
    pub loss_fact: Var,
    pub loss_ans: Var,
    /// Full softmax over head pairs, `[batch x |A|]`.
    pub fact_probs: Var,
    pub integration: Integration,
}

/// Head-pair keys recomputed on the tape so gradients reach E, R and W_a.
pub fn head_keys(tape: &mut Tape, store: &ParamStore, kb: &GroupedKb) -> Result<Var> {
    let e = tape.param_by_name(store, ENTITY_TABLE)?;
    let r = tape.param_by_name(store, RELATION_TABLE)?;
    let w_a = tape.param_by_name(store, FACT_KEY)?;
    let ns = tape.param_by_name(store, NULL_SUBJECT)?;
    let nr = tape.param_by_name(store, NULL_RELATION)?;
    factmem::head_keys(tape, kb, e, r, w_a, ns, nr)
}

/// Joint forward pass: encoder, entity losses, fact retrieval and integration.
///
/// `keys` holds one row per head pair of `kb`, either from [`head_keys`] or a
/// constant copy of a prebuilt index.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    kb: &GroupedKb,
    keys: Var,
    k: usize,
) -> Result<ForwardOutput> {
    if tape.value(keys).rows() != kb.len() {
        return Err(FaeError::dim(
            "forward",
            tape.value(keys).shape(),
            &[kb.len()],
        ));
    }
    let enc = encoder::encode(tape, store, cfg, &batch.input)?;
    let e = tape.param_by_name(store, ENTITY_TABLE)?;
    let loss_ent = encoder::entity_access_loss(tape, &enc, &batch.context, &batch.context_gold)?;
    let loss_ctx =
        encoder::context_entity_loss(tape, &enc, e, &batch.context, &batch.context_gold)?;

    let spans: Vec<(usize, usize)> = batch
        .answer_mention
        .iter()
        .map(|&i| batch.input.spans[i])
        .collect();
    let w_f = tape.param_by_name(store, FACT_QUERY)?;
    let w_b = tape.param_by_name(store, TAIL_QUERY)?;
    let v = factmem::fact_query(tape, enc.hidden, &spans, w_f)?;
    let z = factmem::fact_query(tape, enc.hidden, &spans, w_b)?;
    let c_all = enc
        .contextual
        .ok_or_else(|| FaeError::Internal("no mentions encoded".into()))?;
    let c = tape.gather_rows(c_all, &batch.answer_mention)?;

    let fact_logits = tape.matmul_nt(v, keys)?;
    let fact_probs = tape.softmax(fact_logits)?;
    let loss_fact = factmem::fact_loss(tape, fact_probs, &batch.ds_labels)?;
    let retrieved: Vec<Vec<usize>> = (0..batch.len())
        .map(|b| {
            factmem::top_k(tape.value(fact_logits).row(b), k)
                .into_iter()
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let integration = factmem::integrate(tape, kb, e, c, z, fact_logits, fact_probs, &retrieved)?;
    let loss_ans = factmem::answer_loss(tape, integration.answer_probs, &batch.answer_targets)?;
    Ok(ForwardOutput {
        encoder: enc,
        loss_ent,
        loss_ctx,
        loss_fact,
        loss_ans,
        fact_probs,
        integration,
    })
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
