#![allow(dead_code)]

use fae_core::datagen::{ClozeExample, Mention};
use fae_core::kb::{EntityId, GroupedKb, KbBounds, Triple};
use fae_core::model::{forward, head_keys, init_params, Batch, ModelConfig};
use fae_core::numcore::{ParamStore, Tape, Tensor};

/// d = 8, three entities, two relations, two layers.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        n_entities: 3,
        n_relations: 2,
        d_t: 8,
        d_e: 8,
        d_r: 8,
        d_a: 8,
        layers: 2,
        heads: 2,
        d_ff: 16,
        memory_layer: 1,
        max_len: 16,
        init_std: 0.3,
        embed_std: 0.5,
    }
}

pub fn micro_store(seed: u64) -> ParamStore {
    init_params(&micro_config(), seed).unwrap()
}

/// Four facts; head (0, 0) has two tails.
pub fn micro_kb() -> GroupedKb {
    let facts = [
        Triple::new(0, 0, 1),
        Triple::new(0, 0, 2),
        Triple::new(1, 1, 2),
        Triple::new(2, 1, 0),
    ];
    GroupedKb::group_facts(
        &facts,
        KbBounds {
            n_entities: 3,
            n_relations: 2,
        },
        32,
        0,
    )
    .unwrap()
}

fn example(
    tokens: &[u32],
    ctx: &[(u32, usize, usize, bool)],
    answers: &[u32],
    span: (usize, usize),
    ds: usize,
) -> ClozeExample {
    ClozeExample {
        tokens: tokens.to_vec(),
        context_mentions: ctx
            .iter()
            .map(|&(e, s, t, _)| Mention::new(EntityId(e), s, t))
            .collect(),
        context_masked: ctx.iter().map(|c| c.3).collect(),
        answer: EntityId(answers[0]),
        answers: answers.iter().map(|&a| EntityId(a)).collect(),
        answer_span: span,
        ds_label: ds,
    }
}

/// Three cloze examples touching a multi-tail head, a single-tail head and the null row.
pub fn micro_examples() -> Vec<ClozeExample> {
    vec![
        example(&[5, 6, 4, 1, 1, 2], &[(0, 0, 1, false)], &[1, 2], (3, 4), 1),
        example(
            &[7, 9, 1, 3, 8, 10, 2],
            &[(1, 0, 0, false), (0, 4, 4, true)],
            &[2],
            (2, 2),
            2,
        ),
        example(&[1, 11, 4, 7], &[(1, 3, 3, false)], &[0], (0, 0), 0),
    ]
}

/// Pretraining loss `ent + ctx + fact + ans`, or `fact + ans` when `finetune`.
pub fn micro_loss(store: &ParamStore, examples: &[ClozeExample], k: usize, finetune: bool) -> f64 {
    let cfg = micro_config();
    let kb = micro_kb();
    let refs: Vec<&ClozeExample> = examples.iter().collect();
    let batch = Batch::new(&refs, cfg.max_len).unwrap();
    let mut tape = Tape::new();
    let keys = head_keys(&mut tape, store, &kb).unwrap();
    let out = forward(&mut tape, store, &cfg, &batch, &kb, keys, k).unwrap();
    let parts = if finetune {
        vec![out.loss_fact, out.loss_ans]
    } else {
        vec![out.loss_ent, out.loss_ctx, out.loss_fact, out.loss_ans]
    };
    parts.iter().map(|&p| tape.value(p).item()).sum()
}

/// Central finite differences of `f` with respect to every element of parameter `name`.
pub fn fd_grad(store: &ParamStore, name: &str, h: f64, f: impl Fn(&ParamStore) -> f64) -> Tensor {
    let id = store.id(name).unwrap();
    let mut work = store.clone();
    let n = store.get(id).len();
    let mut g = Tensor::zeros(store.get(id).shape());
    for i in 0..n {
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + h;
        let up = f(&work);
        work.get_mut(id).data_mut()[i] = orig - h;
        let down = f(&work);
        work.get_mut(id).data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|, 1e-5)` in the Euclidean norm. The floor keeps
/// gradients that vanish analytically (e.g. attention key biases) from
/// turning finite-difference round-off into a large relative error.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).norm() / a.norm().max(b.norm()).max(1e-5)
}
