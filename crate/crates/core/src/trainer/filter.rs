use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::datagen::{Paragraph, Question};
use crate::kb::{EntityId, GroupedKb};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapFilter {
    pub kept: Vec<Question>,
    pub removed: usize,
    pub removal_rate: f64,
}

/// Drops training questions whose answers include any evaluation answer.
pub fn filter_overlap(train: &[Question], eval: &[Question]) -> OverlapFilter {
    let answers: BTreeSet<EntityId> = eval
        .iter()
        .flat_map(|q| q.answers.iter().copied())
        .collect();
    let kept: Vec<Question> = train
        .iter()
        .filter(|q| !q.answers.iter().any(|a| answers.contains(a)))
        .cloned()
        .collect();
    let removed = train.len() - kept.len();
    OverlapFilter {
        kept,
        removed,
        removal_rate: if train.is_empty() {
            0.0
        } else {
            removed as f64 / train.len() as f64
        },
    }
}

/// Removal counts for one (question entity, answer entity) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PairRemovals {
    pub paragraphs: usize,
    pub facts: usize,
}

#[derive(Clone, Debug)]
pub struct KnowledgeFilter {
    pub corpus: Vec<Paragraph>,
    pub kb: GroupedKb,
    pub per_pair: BTreeMap<(EntityId, EntityId), PairRemovals>,
}

/// Removes every paragraph in which an evaluation pair co-occurs (in either
/// order) and every fact linking such a pair.
pub fn filter_pretrain_knowledge(
    corpus: &[Paragraph],
    kb: &GroupedKb,
    pairs: &[(EntityId, EntityId)],
) -> KnowledgeFilter {
    let mut per_pair: BTreeMap<(EntityId, EntityId), PairRemovals> = pairs
        .iter()
        .map(|&p| (p, PairRemovals::default()))
        .collect();
    let linked = |a: EntityId, b: EntityId| -> Vec<(EntityId, EntityId)> {
        [(a, b), (b, a)]
            .into_iter()
            .filter(|p| per_pair.contains_key(p))
            .collect()
    };
    let mut kept = Vec::with_capacity(corpus.len());
    let mut hits: Vec<(EntityId, EntityId)> = Vec::new();
    for p in corpus {
        let ents: BTreeSet<EntityId> = p.mentions.iter().map(|m| m.entity).collect();
        let mut found: BTreeSet<(EntityId, EntityId)> = BTreeSet::new();
        for &a in &ents {
            for &b in &ents {
                if a < b {
                    found.extend(linked(a, b));
                }
            }
        }
        if found.is_empty() {
            kept.push(p.clone());
        } else {
            hits.extend(found);
        }
    }
    let mut fact_hits: Vec<(EntityId, EntityId)> = Vec::new();
    let kb = kb.retain_facts(|t| {
        let l = linked(t.subject, t.object);
        let keep = l.is_empty();
        fact_hits.extend(l);
        keep
    });
    for h in hits {
        per_pair.get_mut(&h).expect("known pair").paragraphs += 1;
    }
    for h in fact_hits {
        per_pair.get_mut(&h).expect("known pair").facts += 1;
    }
    for (pair, r) in &per_pair {
        if r.paragraphs + r.facts > 0 {
            log::debug!(
                "filtered pair ({}, {}): {} paragraphs, {} facts",
                pair.0,
                pair.1,
                r.paragraphs,
                r.facts
            );
        }
    }
    KnowledgeFilter {
        corpus: kept,
        kb,
        per_pair,
    }
}
