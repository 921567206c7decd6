use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::{evaluate, summary_table, ExperimentReport};
use super::filter::{filter_overlap, filter_pretrain_knowledge, PairRemovals};
use super::train::{finetune, pretrain, CheckpointPolicy, FinetuneLog, StepLosses};
use crate::datagen::{
    generate_questions, generate_world, render_corpus, Paragraph, Question, Split, World,
};
use crate::error::{FaeError, Result};
use crate::factmem::FactMemoryIndex;
use crate::kb::{EntityId, GroupedKb, HeadPair, Triple};
use crate::model::{init_params, ModelConfig};
use crate::numcore::ParamStore;

/// World, corpus, questions and knowledge base of one manifest.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub world: World,
    pub corpus: Vec<Paragraph>,
    pub questions: Vec<Question>,
    pub kb: GroupedKb,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> Vec<Question> {
        self.questions
            .iter()
            .filter(|q| q.split == split)
            .cloned()
            .collect()
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let corpus = render_corpus(&world);
    let questions = generate_questions(&world)?;
    let kb = GroupedKb::group_facts(
        &world.kb_facts,
        world.config.bounds(),
        cfg.train.tail_cap,
        cfg.world.seed,
    )?;
    Ok(PreparedData {
        world,
        corpus,
        questions,
        kb,
    })
}

pub struct TrainedModel {
    pub store: ParamStore,
    pub model: ModelConfig,
    pub pretrain: Vec<StepLosses>,
    pub finetune: FinetuneLog,
    /// Share of training questions dropped by answer-overlap filtering.
    pub overlap_removal_rate: f64,
    /// Digest of the finetune freeze set before and after finetuning.
    pub frozen_digests: (String, String),
    /// Wall-clock time spent pretraining and finetuning.
    pub elapsed: Duration,
}

/// Pretrains on `corpus` and finetunes on the train split of `questions`.
pub fn train_model(
    cfg: &ExperimentConfig,
    world: &World,
    corpus: &[Paragraph],
    kb: &GroupedKb,
    questions: &[Question],
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<TrainedModel> {
    let started = Instant::now();
    let model = cfg.model_config(world);
    let mut store = init_params(&model, cfg.train.seed)?;
    let pre = pretrain(&mut store, &model, &cfg.train, corpus, kb, checkpoints)?;
    let mut train: Vec<Question> = questions
        .iter()
        .filter(|q| q.split == Split::Train)
        .cloned()
        .collect();
    let dev: Vec<Question> = questions
        .iter()
        .filter(|q| q.split == Split::Dev)
        .cloned()
        .collect();
    let mut overlap_removal_rate = 0.0;
    if cfg.protocol.filter_overlap {
        let eval: Vec<Question> = questions
            .iter()
            .filter(|q| q.split != Split::Train)
            .cloned()
            .collect();
        let f = filter_overlap(&train, &eval);
        log::info!(
            "answer-overlap filter removed {} of {} training questions",
            f.removed,
            train.len()
        );
        overlap_removal_rate = f.removal_rate;
        train = f.kept;
    }
    let frozen: Vec<&str> = cfg.train.freeze.iter().map(String::as_str).collect();
    let before = store.digest_of(&frozen)?;
    let ft = finetune(
        &mut store,
        &model,
        &cfg.train,
        world,
        kb,
        &train,
        &dev,
        checkpoints,
    )?;
    let after = store.digest_of(&frozen)?;
    Ok(TrainedModel {
        store,
        model,
        pretrain: pre,
        finetune: ft,
        overlap_removal_rate,
        frozen_digests: (before, after),
        elapsed: started.elapsed(),
    })
}

fn entity_fact_counts(facts: &[Triple]) -> BTreeMap<EntityId, usize> {
    let mut counts = BTreeMap::new();
    for t in facts {
        *counts.entry(t.subject).or_insert(0) += 1;
        *counts.entry(t.object).or_insert(0) += 1;
    }
    counts
}

fn links(t: &Triple, a: EntityId, b: EntityId) -> bool {
    (t.subject == a && t.object == b) || (t.subject == b && t.object == a)
}

/// Test questions whose single supporting fact can be withheld while both of
/// its entities keep appearing in other stored facts.
pub fn select_withheld(data: &PreparedData, n: usize, seed: u64) -> Result<Vec<Question>> {
    let mut candidates: Vec<&Question> = data
        .questions
        .iter()
        .filter(|q| {
            q.split == Split::Test
                && q.answers.len() == 1
                && data
                    .kb
                    .lookup(&HeadPair::new(q.subject.0, q.relation.0))
                    .is_some_and(|t| t.len() == 1)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(20);
    candidates.shuffle(&mut rng);
    let mut facts = data.kb.triples();
    let mut chosen = Vec::with_capacity(n);
    for q in candidates {
        if chosen.len() == n {
            break;
        }
        let (s, o) = (q.subject, q.answers[0]);
        let rest: Vec<Triple> = facts.iter().filter(|t| !links(t, s, o)).copied().collect();
        let counts = entity_fact_counts(&rest);
        let alive = |e: EntityId| counts.get(&e).copied().unwrap_or(0) > 0;
        let subject_has_heads = rest.iter().any(|t| t.subject == s);
        if alive(s) && alive(o) && subject_has_heads {
            facts = rest;
            chosen.push(q.clone());
        }
    }
    if chosen.len() < n {
        return Err(FaeError::Config(format!(
            "only {} of {n} requested facts can be withheld",
            chosen.len()
        )));
    }
    chosen.sort_by_key(|q| q.id);
    Ok(chosen)
}

#[derive(Clone, Debug, Serialize)]
pub struct InjectionOutcome {
    pub full: ExperimentReport,
    pub filter: ExperimentReport,
    pub inject: ExperimentReport,
    pub withheld: Vec<Triple>,
    pub digest_before: String,
    pub digest_after: String,
    pub removals: Vec<((EntityId, EntityId), PairRemovals)>,
}

/// Full / Filter / Inject conditions over the withheld questions.
///
/// Returns the outcome and the model trained on the filtered data.
pub fn run_injection_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    full: &TrainedModel,
) -> Result<(InjectionOutcome, TrainedModel)> {
    let hash = cfg.hash();
    let k = cfg.train.k;
    let withheld_qs = select_withheld(data, cfg.protocol.n_withheld, cfg.train.seed)?;
    let withheld: Vec<Triple> = withheld_qs
        .iter()
        .map(|q| Triple::new(q.subject.0, q.relation.0, q.answers[0].0))
        .collect();

    let full_index = FactMemoryIndex::build(&data.kb, &full.store)?;
    let full_report = evaluate(
        &full.store,
        &full.model,
        &data.world,
        &full_index,
        &withheld_qs,
        k,
        "full",
        &hash,
    )?;

    let pairs: Vec<(EntityId, EntityId)> = withheld_qs.iter().flat_map(|q| q.pairs()).collect();
    let filtered = filter_pretrain_knowledge(&data.corpus, &data.kb, &pairs);
    let pair_set: BTreeSet<(EntityId, EntityId)> = pairs.iter().copied().collect();
    let train_qs: Vec<Question> = data
        .questions
        .iter()
        .filter(|q| {
            !q.pairs()
                .any(|p| pair_set.contains(&p) || pair_set.contains(&(p.1, p.0)))
        })
        .cloned()
        .collect();
    let filter_model = train_model(
        cfg,
        &data.world,
        &filtered.corpus,
        &filtered.kb,
        &train_qs,
        None,
    )?;
    let filter_index = FactMemoryIndex::build(&filtered.kb, &filter_model.store)?;
    let filter_report = evaluate(
        &filter_model.store,
        &filter_model.model,
        &data.world,
        &filter_index,
        &withheld_qs,
        k,
        "filter",
        &hash,
    )?;

    let digest_before = filter_model.store.digest();
    let mut kb = filtered.kb.clone();
    for t in &withheld {
        kb = kb.inject_fact(*t)?.0;
    }
    let mut index = filter_index;
    index.refresh(&filter_model.store, &kb)?;
    let inject_report = evaluate(
        &filter_model.store,
        &filter_model.model,
        &data.world,
        &index,
        &withheld_qs,
        k,
        "inject",
        &hash,
    )?;
    let digest_after = filter_model.store.digest();
    if digest_before != digest_after || inject_report.param_digest != filter_report.param_digest {
        return Err(FaeError::Protocol(
            "parameters changed between the Filter and Inject conditions".into(),
        ));
    }
    Ok((
        InjectionOutcome {
            full: full_report,
            filter: filter_report,
            inject: inject_report,
            withheld,
            digest_before,
            digest_after,
            removals: filtered.per_pair.into_iter().collect(),
        },
        filter_model,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct UpdateOutcome {
    /// Unmodified questions with the original knowledge base.
    pub baseline: ExperimentReport,
    /// Unmodified questions after the overwrites.
    pub unmodified: ExperimentReport,
    /// Modified questions scored against their new answers.
    pub modified: ExperimentReport,
    /// `(head, old answer, new answer)` per overwrite.
    pub overwrites: Vec<(HeadPair, EntityId, EntityId)>,
    pub digest_before: String,
    pub digest_after: String,
}

impl UpdateOutcome {
    /// Share of modified questions whose top-ranked head is the overwritten one.
    pub fn retrieval_hit_rate(&self) -> f64 {
        let n = self.modified.traces.len().max(1);
        self.modified
            .traces
            .iter()
            .filter(|t| t.gold_head_retrieved)
            .count() as f64
            / n as f64
    }
}

/// Overwrites tail sets of test questions with alternatives of the right
/// type and evaluates against the new answers without parameter updates.
pub fn run_update_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    model: &TrainedModel,
) -> Result<UpdateOutcome> {
    let hash = cfg.hash();
    let k = cfg.train.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(21);
    let test = data.split(Split::Test);
    let mut candidates: Vec<&Question> = test
        .iter()
        .filter(|q| {
            q.answers.len() == 1
                && data
                    .kb
                    .lookup(&HeadPair::new(q.subject.0, q.relation.0))
                    .is_some_and(|t| t.len() == 1)
        })
        .collect();
    candidates.shuffle(&mut rng);
    let n = cfg.protocol.n_updates;
    if candidates.len() < n {
        return Err(FaeError::Config(format!(
            "only {} test questions can be updated, {n} requested",
            candidates.len()
        )));
    }
    let chosen: Vec<&Question> = candidates.into_iter().take(n).collect();
    let chosen_ids: BTreeSet<usize> = chosen.iter().map(|q| q.id).collect();

    let mut kb = data.kb.clone();
    let mut modified = Vec::with_capacity(n);
    let mut overwrites = Vec::with_capacity(n);
    for q in &chosen {
        let old = q.answers[0];
        let ty = data.world.relation(q.relation).object_type;
        let pool: Vec<EntityId> = (0..data.world.entities.len() as u32)
            .map(EntityId)
            .filter(|&e| data.world.entity(e).entity_type == ty && e != old && e != q.subject)
            .collect();
        let new = *pool
            .choose(&mut rng)
            .ok_or_else(|| FaeError::Config("no alternative answer of the same type".into()))?;
        let head = HeadPair::new(q.subject.0, q.relation.0);
        kb = kb.overwrite_tail(head, &[new])?;
        overwrites.push((head, old, new));
        let mut mq = (*q).clone();
        mq.answers = vec![new];
        modified.push(mq);
    }
    let unmodified: Vec<Question> = test
        .iter()
        .filter(|q| !chosen_ids.contains(&q.id))
        .cloned()
        .collect();

    let digest_before = model.store.digest();
    let mut index = FactMemoryIndex::build(&data.kb, &model.store)?;
    let baseline = evaluate(
        &model.store,
        &model.model,
        &data.world,
        &index,
        &unmodified,
        k,
        "baseline",
        &hash,
    )?;
    index.refresh(&model.store, &kb)?;
    let modified_report = evaluate(
        &model.store,
        &model.model,
        &data.world,
        &index,
        &modified,
        k,
        "update",
        &hash,
    )?;
    let unmodified_report = evaluate(
        &model.store,
        &model.model,
        &data.world,
        &index,
        &unmodified,
        k,
        "unmodified",
        &hash,
    )?;
    let digest_after = model.store.digest();
    if digest_before != digest_after {
        return Err(FaeError::Protocol(
            "parameters changed during the update experiment".into(),
        ));
    }
    Ok(UpdateOutcome {
        baseline,
        unmodified: unmodified_report,
        modified: modified_report,
        overwrites,
        digest_before,
        digest_after,
    })
}

/// Every experiment of a manifest.
pub struct PipelineResult {
    pub data: PreparedData,
    pub full: TrainedModel,
    /// Test questions answered by the full model with the full knowledge base.
    pub heldout: ExperimentReport,
    pub injection: InjectionOutcome,
    pub filter: TrainedModel,
    pub update: UpdateOutcome,
}

impl PipelineResult {
    pub fn reports(&self) -> Vec<&ExperimentReport> {
        vec![
            &self.heldout,
            &self.injection.full,
            &self.injection.filter,
            &self.injection.inject,
            &self.update.baseline,
            &self.update.modified,
            &self.update.unmodified,
        ]
    }

    pub fn summary(&self) -> String {
        summary_table(&self.reports())
    }

    /// Writes one JSONL file per report plus `summary.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FaeError::io(dir, e))?;
        for r in self.reports() {
            r.write(dir)?;
        }
        let p = dir.join("summary.txt");
        fs::write(&p, self.summary()).map_err(|e| FaeError::io(&p, e))
    }
}

/// Trains the Full and Filter models and runs every condition.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    let data = prepare(cfg)?;
    let full = train_model(
        cfg,
        &data.world,
        &data.corpus,
        &data.kb,
        &data.questions,
        None,
    )?;
    let index = FactMemoryIndex::build(&data.kb, &full.store)?;
    let heldout = evaluate(
        &full.store,
        &full.model,
        &data.world,
        &index,
        &data.split(Split::Test),
        cfg.train.k,
        "heldout",
        &cfg.hash(),
    )?;
    let (injection, filter) = run_injection_experiment(cfg, &data, &full)?;
    let update = run_update_experiment(cfg, &data, &full)?;
    Ok(PipelineResult {
        data,
        full,
        heldout,
        injection,
        filter,
        update,
    })
}
