mod common;

use std::collections::BTreeSet;

use common::{micro_config, micro_examples, micro_kb, micro_store};
use fae_core::datagen::{Question, Split};
use fae_core::factmem::FactMemoryIndex;
use fae_core::kb::EntityId;
use fae_core::model::{init_params, ENTITY_TABLE, RELATION_TABLE};
use fae_core::numcore::{AdamConfig, OptimizerState};
use fae_core::trainer::{
    evaluate, filter_overlap, filter_pretrain_knowledge, finetune, freeze_set, prepare, pretrain,
    pretrain_step, ExperimentConfig,
};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("seed", "11"),
        ("world.n_entities", "40"),
        ("world.n_relations", "3"),
        ("world.n_facts", "50"),
        ("world.text_only_facts", "5"),
        ("world.vocab_size", "32"),
        ("model.d_t", "32"),
        ("model.d_e", "32"),
        ("model.d_a", "32"),
        ("model.layers", "2"),
        ("model.heads", "2"),
        ("model.d_ff", "64"),
        ("train.batch_size", "16"),
        ("train.warmup_steps", "20"),
        ("train.finetune_steps", "40"),
        ("train.eval_every", "10"),
    ] {
        cfg.set(k, v, "test").unwrap();
    }
    cfg
}

#[test]
fn step_total_is_the_sum_of_components() {
    let mut store = micro_store(0);
    let mut opt = OptimizerState::new(&store, AdamConfig::default());
    let exs = micro_examples();
    let refs: Vec<_> = exs.iter().collect();
    let l = pretrain_step(&mut store, &mut opt, &micro_config(), &refs, &micro_kb(), 1).unwrap();
    assert!((l.total - (l.ent + l.ctx + l.fact + l.ans)).abs() < 1e-12);
    assert!(l.ent > 0.0 && l.ctx > 0.0 && l.fact > 0.0 && l.ans > 0.0);
}

#[test]
fn pretraining_reduces_loss_on_a_small_world() {
    let mut cfg = small_config();
    cfg.set("train.pretrain_steps", "200", "test").unwrap();
    let data = prepare(&cfg).unwrap();
    let model = cfg.model_config(&data.world);
    let mut store = init_params(&model, cfg.train.seed).unwrap();
    let losses = pretrain(&mut store, &model, &cfg.train, &data.corpus, &data.kb, None).unwrap();
    assert_eq!(losses.len(), 200);
    let mean = |xs: &[fae_core::trainer::StepLosses]| {
        xs.iter().map(|l| l.total).sum::<f64>() / xs.len() as f64
    };
    let (first, last) = (mean(&losses[..20]), mean(&losses[180..]));
    assert!(last < 0.7 * first, "loss went from {first:.3} to {last:.3}");
}

#[test]
fn finetuning_leaves_frozen_tables_bit_identical() {
    let mut cfg = small_config();
    cfg.set("train.pretrain_steps", "10", "test").unwrap();
    let data = prepare(&cfg).unwrap();
    let model = cfg.model_config(&data.world);
    let mut store = init_params(&model, 3).unwrap();
    pretrain(&mut store, &model, &cfg.train, &data.corpus, &data.kb, None).unwrap();
    let e_before = store.by_name(ENTITY_TABLE).unwrap().clone();
    let r_before = store.by_name(RELATION_TABLE).unwrap().clone();
    let others_before = store.digest();
    let log = finetune(
        &mut store,
        &model,
        &cfg.train,
        &data.world,
        &data.kb,
        &data.split(Split::Train),
        &data.split(Split::Dev),
        None,
    )
    .unwrap();
    assert!(!log.losses.is_empty());
    assert_eq!(store.by_name(ENTITY_TABLE).unwrap().data(), e_before.data());
    assert_eq!(
        store.by_name(RELATION_TABLE).unwrap().data(),
        r_before.data()
    );
    if log.best_step > 0 {
        assert_ne!(store.digest(), others_before);
    }
    assert!(freeze_set(&store, &["no.such.param".to_string()]).is_err());
}

#[test]
fn untrained_model_answers_near_chance() {
    let mut cfg = ExperimentConfig::default();
    cfg.set("seed", "5", "test").unwrap();
    let data = prepare(&cfg).unwrap();
    let model = cfg.model_config(&data.world);
    let store = init_params(&model, 5).unwrap();
    let index = FactMemoryIndex::build(&data.kb, &store).unwrap();
    let report = evaluate(
        &store,
        &model,
        &data.world,
        &index,
        &data.questions,
        1,
        "untrained",
        "",
    )
    .unwrap();
    let chance = 1.0 / data.world.entities.len() as f64;
    assert!(
        report.overall() < 5.0 * chance,
        "accuracy {}",
        report.overall()
    );
}

fn question(id: usize, subject: u32, answers: &[u32]) -> Question {
    Question {
        id,
        split: Split::Train,
        subject: EntityId(subject),
        relation: fae_core::kb::RelationId(0),
        template: 0,
        answers: answers.iter().map(|&a| EntityId(a)).collect(),
        kb_supported: true,
        tokens: Vec::new(),
        mentions: Vec::new(),
    }
}

#[test]
fn overlap_filter_removes_planted_share_and_is_idempotent() {
    let eval: Vec<Question> = (0..5)
        .map(|i| question(100 + i, 50 + i as u32, &[i as u32]))
        .collect();
    let train: Vec<Question> = (0..100)
        .map(|i| {
            let answer = if i % 10 < 3 {
                (i % 5) as u32
            } else {
                10 + i as u32
            };
            question(i, 200 + i as u32, &[answer])
        })
        .collect();
    let f = filter_overlap(&train, &eval);
    assert_eq!(f.removed, 30);
    assert!((f.removal_rate - 0.3).abs() < 1e-12);
    let again = filter_overlap(&f.kept, &eval);
    assert_eq!(again.removed, 0);
    assert_eq!(again.kept, f.kept);
}

#[test]
fn knowledge_filter_drops_pair_paragraphs_and_facts() {
    let cfg = small_config();
    let data = prepare(&cfg).unwrap();
    let t = data.kb.triples()[0];
    let pair = (t.subject, t.object);
    let f = filter_pretrain_knowledge(&data.corpus, &data.kb, &[pair]);
    assert!(!f
        .kb
        .triples()
        .iter()
        .any(|x| { (x.subject, x.object) == pair || (x.object, x.subject) == pair }));
    for p in &f.corpus {
        let ents: BTreeSet<EntityId> = p.mentions.iter().map(|m| m.entity).collect();
        assert!(!(ents.contains(&pair.0) && ents.contains(&pair.1)));
    }
    let r = f.per_pair[&pair];
    assert!(r.facts >= 1 && r.paragraphs >= 1);
    assert_eq!(f.corpus.len() + r.paragraphs, data.corpus.len());
    let again = filter_pretrain_knowledge(&f.corpus, &f.kb, &[pair]);
    assert_eq!(again.corpus.len(), f.corpus.len());
    assert_eq!(again.kb, f.kb);
}
