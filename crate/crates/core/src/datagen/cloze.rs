use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Mention, Paragraph};
use super::world::{Slot, World, MASK};
use crate::error::{FaeError, Result};
use crate::kb::{EntityId, GroupedKb, RelationId};

/// A masked-entity prediction example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozeExample {
    pub tokens: Vec<u32>,
    /// Mentions other than the target, ordered by start.
    pub context_mentions: Vec<Mention>,
    /// Parallel to `context_mentions`: whether that mention was masked.
    pub context_masked: Vec<bool>,
    pub answer: EntityId,
    /// All gold answers; a single entry for pretraining examples.
    pub answers: Vec<EntityId>,
    /// Inclusive span of the target mention.
    pub answer_span: (usize, usize),
    /// Distant-supervision head index; 0 is the null head.
    pub ds_label: usize,
}

impl ClozeExample {
    /// Entities whose mentions are visible in the tokens.
    pub fn visible_entities(&self) -> Vec<EntityId> {
        self.context_mentions
            .iter()
            .zip(&self.context_masked)
            .filter(|(_, masked)| !**masked)
            .map(|(m, _)| m.entity)
            .collect()
    }

    /// Uniform target distribution over the gold answers.
    pub fn answer_target(&self) -> Vec<(usize, f64)> {
        let w = 1.0 / self.answers.len() as f64;
        self.answers.iter().map(|a| (a.0 as usize, w)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClozeStats {
    pub examples: usize,
    pub skipped_paragraphs: usize,
    pub context_mentions: usize,
    pub masked_context: usize,
}

/// Random stream for one paragraph; independent of every other paragraph.
pub fn paragraph_rng(seed: u64, paragraph: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(paragraph as u64 + (1 << 32));
    rng
}

/// One example per mention of the paragraph, each masking that mention.
/// A masked mention becomes a single MASK token.
///
/// Every other mention of the target entity is masked as well and removed from
/// the context. Remaining context mentions are masked independently with
/// probability `mask_prob`; the distant label only sees unmasked mentions.
/// Returns `None` for paragraphs with fewer than two mentions.
pub fn make_cloze_examples(
    p: &Paragraph,
    kb: &GroupedKb,
    mask_prob: f64,
    seed: u64,
) -> Result<Option<Vec<ClozeExample>>> {
    if p.mentions.len() < 2 {
        return Ok(None);
    }
    let mut rng = paragraph_rng(seed, p.id);
    let mut out = Vec::with_capacity(p.mentions.len());
    for target in &p.mentions {
        let mut tokens = Vec::with_capacity(p.tokens.len());
        let mut context = Vec::new();
        let mut masked = Vec::new();
        let mut answer_span = (0, 0);
        let mut next = 0;
        for m in &p.mentions {
            tokens.extend_from_slice(&p.tokens[next..m.start]);
            next = m.end + 1;
            let start = tokens.len();
            if m.entity == target.entity {
                tokens.push(MASK);
                if m == target {
                    answer_span = (start, start);
                }
            } else {
                let hide = rng.gen_bool(mask_prob);
                if hide {
                    tokens.push(MASK);
                } else {
                    tokens.extend_from_slice(&p.tokens[m.start..=m.end]);
                }
                context.push(Mention::new(m.entity, start, tokens.len() - 1));
                masked.push(hide);
            }
        }
        tokens.extend_from_slice(&p.tokens[next..]);
        let mut ex = ClozeExample {
            tokens,
            context_mentions: context,
            context_masked: masked,
            answer: target.entity,
            answers: vec![target.entity],
            answer_span,
            ds_label: 0,
        };
        ex.ds_label = kb.distant_label(&ex.visible_entities(), target.entity)?;
        out.push(ex);
    }
    Ok(Some(out))
}

pub fn build_pretraining_set(
    corpus: &[Paragraph],
    kb: &GroupedKb,
    mask_prob: f64,
    seed: u64,
) -> Result<(Vec<ClozeExample>, ClozeStats)> {
    let mut stats = ClozeStats::default();
    let mut out = Vec::new();
    for p in corpus {
        match make_cloze_examples(p, kb, mask_prob, seed)? {
            None => stats.skipped_paragraphs += 1,
            Some(exs) => {
                for ex in &exs {
                    stats.context_mentions += ex.context_mentions.len();
                    stats.masked_context += ex.context_masked.iter().filter(|m| **m).count();
                }
                stats.examples += exs.len();
                out.extend(exs);
            }
        }
    }
    Ok((out, stats))
}

/// Renders question template `template` about `subject`. The object slot
/// becomes a single MASK, appended at the end if the template has none.
pub fn make_question(
    world: &World,
    kb: &GroupedKb,
    subject: EntityId,
    relation: RelationId,
    answers: &[EntityId],
    template: usize,
) -> Result<ClozeExample> {
    if answers.is_empty() {
        return Err(FaeError::Validation(
            "question needs at least one answer".into(),
        ));
    }
    let bounds = kb.bounds();
    if subject.0 as usize >= bounds.n_entities || relation.0 as usize >= bounds.n_relations {
        return Err(FaeError::Validation(format!(
            "question ids ({subject}, {relation}) out of range"
        )));
    }
    if let Some(a) = answers.iter().find(|a| a.0 as usize >= bounds.n_entities) {
        return Err(FaeError::Validation(format!("answer id {a} out of range")));
    }
    let rel = world.relation(relation);
    let t = &rel.questions[template % rel.questions.len()];
    let mut tokens = Vec::new();
    let mut context = Vec::new();
    let mut at = None;
    for slot in &t.0 {
        match *slot {
            Slot::Subject => {
                let start = tokens.len();
                tokens.extend_from_slice(&world.entity(subject).tokens);
                context.push(Mention::new(subject, start, tokens.len() - 1));
            }
            Slot::Object => {
                at = Some(tokens.len());
                tokens.push(MASK);
            }
            Slot::Token(x) => tokens.push(x),
        }
    }
    let at = at.unwrap_or_else(|| {
        tokens.push(MASK);
        tokens.len() - 1
    });
    let answers: Vec<EntityId> = answers
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ds_label = kb.distant_label_any(&[subject], &answers)?;
    Ok(ClozeExample {
        tokens,
        context_masked: vec![false; context.len()],
        context_mentions: context,
        answer: answers[0],
        answers,
        answer_span: (at, at),
        ds_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// A question record as written to the question file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub split: Split,
    pub subject: EntityId,
    pub relation: RelationId,
    pub template: usize,
    pub answers: Vec<EntityId>,
    /// Whether the generating head pair is stored in the knowledge base.
    pub kb_supported: bool,
    pub tokens: Vec<u32>,
    pub mentions: Vec<Mention>,
}

impl Question {
    /// Builds the cloze example, labeling it against `kb`.
    pub fn to_example(&self, world: &World, kb: &GroupedKb) -> Result<ClozeExample> {
        make_question(
            world,
            kb,
            self.subject,
            self.relation,
            &self.answers,
            self.template,
        )
    }

    pub fn pairs(&self) -> impl Iterator<Item = (EntityId, EntityId)> + '_ {
        self.answers.iter().map(move |a| (self.subject, *a))
    }
}

/// One question per head pair of the world, split with disjoint
/// (subject, answer) pairs across train, dev and test.
pub fn generate_questions(world: &World) -> Result<Vec<Question>> {
    let bounds = world.config.bounds();
    let kb = GroupedKb::group_facts(&world.kb_facts, bounds, usize::MAX, world.config.seed)?;
    let mut heads: BTreeMap<(u32, u32), (bool, BTreeSet<EntityId>)> = BTreeMap::new();
    for t in world.all_facts() {
        let entry = heads
            .entry((t.subject.0, t.relation.0))
            .or_insert_with(|| (kb.lookup(&t.head()).is_some(), BTreeSet::new()));
        entry.1.insert(t.object);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed);
    rng.set_stream(2);

    // Heads sharing a (subject, answer) pair land in the same split.
    let keys: Vec<(u32, u32)> = heads.keys().copied().collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut owner: BTreeMap<(u32, EntityId), usize> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        for o in &heads[k].1 {
            if let Some(&j) = owner.get(&(k.0, *o)) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            } else {
                owner.insert((k.0, *o), i);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut rng);

    let total = keys.len() as f64;
    let n_train = (world.config.train_fraction * total).round() as usize;
    let n_dev = (world.config.dev_fraction * total).round() as usize;
    let mut split_of = vec![Split::Test; keys.len()];
    let mut assigned = 0usize;
    for g in groups {
        let split = if assigned < n_train {
            Split::Train
        } else if assigned < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        for &i in &g {
            split_of[i] = split;
        }
        assigned += g.len();
    }

    let mut out = Vec::with_capacity(keys.len());
    for (i, k) in keys.iter().enumerate() {
        let (kb_supported, answers) = &heads[k];
        let relation = RelationId(k.1);
        let template = rng.gen_range(0..world.relation(relation).questions.len());
        let answers: Vec<EntityId> = answers.iter().copied().collect();
        let ex = make_question(world, &kb, EntityId(k.0), relation, &answers, template)?;
        out.push(Question {
            id: i,
            split: split_of[i],
            subject: EntityId(k.0),
            relation,
            template,
            answers,
            kb_supported: *kb_supported,
            tokens: ex.tokens,
            mentions: ex.context_mentions,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::corpus::render_corpus;
    use crate::datagen::world::{generate_world, WorldConfig};
    use crate::kb::{KbBounds, Triple};
    use std::collections::HashSet;

    fn world() -> World {
        generate_world(&WorldConfig {
            n_entities: 40,
            n_relations: 3,
            n_facts: 60,
            text_only_facts: 10,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn kb_of(w: &World) -> GroupedKb {
        GroupedKb::group_facts(&w.kb_facts, w.config.bounds(), 32, 0).unwrap()
    }

    #[test]
    fn one_example_per_mention() {
        let w = world();
        let kb = kb_of(&w);
        let corpus = render_corpus(&w);
        let p = corpus.iter().find(|p| p.mentions.len() >= 3).unwrap();
        let exs = make_cloze_examples(p, &kb, 0.15, 0).unwrap().unwrap();
        assert_eq!(exs.len(), p.mentions.len());
        for ex in &exs {
            let (s, t) = ex.answer_span;
            assert_eq!(s, t);
            assert_eq!(ex.tokens[s], MASK);
            let answer_tokens: HashSet<u32> = w.entity(ex.answer).tokens.iter().copied().collect();
            assert!(ex.tokens.iter().all(|x| !answer_tokens.contains(x)));
            if ex.ds_label != 0 {
                assert!(kb.tail(ex.ds_label).contains(ex.answer));
            }
            for (m, hidden) in ex.context_mentions.iter().zip(&ex.context_masked) {
                assert_ne!(m.entity, ex.answer);
                let span = &ex.tokens[m.start..=m.end];
                if *hidden {
                    assert_eq!(span, &[MASK]);
                } else {
                    assert_eq!(span, &w.entity(m.entity).tokens[..]);
                }
            }
        }
    }

    #[test]
    fn short_paragraph_is_skipped() {
        let w = world();
        let kb = kb_of(&w);
        let p = Paragraph {
            id: 0,
            tokens: w.entity(EntityId(0)).tokens.clone(),
            mentions: vec![Mention::new(
                EntityId(0),
                0,
                w.entity(EntityId(0)).tokens.len() - 1,
            )],
            facts: vec![],
        };
        assert!(make_cloze_examples(&p, &kb, 0.15, 0).unwrap().is_none());
        let (_, stats) = build_pretraining_set(&[p], &kb, 0.15, 0).unwrap();
        assert_eq!(stats.skipped_paragraphs, 1);
    }

    #[test]
    fn context_mask_rate() {
        let w = generate_world(&WorldConfig {
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap();
        let kb = kb_of(&w);
        let corpus = render_corpus(&w);
        let mut total = 0usize;
        let mut masked = 0usize;
        let mut examples = 0usize;
        let mut seed = 0;
        while examples < 10_000 {
            let (exs, stats) = build_pretraining_set(&corpus, &kb, 0.15, seed).unwrap();
            examples += exs.len();
            total += stats.context_mentions;
            masked += stats.masked_context;
            seed += 1;
        }
        let rate = masked as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn question_shape() {
        let w = world();
        let kb = kb_of(&w);
        let f = w.kb_facts[0];
        let q = make_question(&w, &kb, f.subject, f.relation, &[f.object], 0).unwrap();
        assert_eq!(q.answer_span.0, q.answer_span.1);
        assert_eq!(q.tokens[q.answer_span.0], MASK);
        assert_eq!(q.tokens.iter().filter(|&&x| x == MASK).count(), 1);
        assert_eq!(q.context_mentions.len(), 1);
        assert_eq!(q.context_mentions[0].entity, f.subject);
        assert_ne!(q.ds_label, 0);
        assert!(make_question(&w, &kb, f.subject, f.relation, &[], 0).is_err());
    }

    #[test]
    fn two_answers_give_half_weights() {
        let bounds = KbBounds {
            n_entities: 40,
            n_relations: 3,
        };
        let w = world();
        let kb =
            GroupedKb::group_facts(&[Triple::new(1, 0, 4), Triple::new(1, 0, 8)], bounds, 32, 0)
                .unwrap();
        let q = make_question(
            &w,
            &kb,
            EntityId(1),
            RelationId(0),
            &[EntityId(8), EntityId(4)],
            1,
        )
        .unwrap();
        assert_eq!(q.answer_target(), vec![(4, 0.5), (8, 0.5)]);
        assert_eq!(q.ds_label, 1);
    }

    #[test]
    fn splits_have_disjoint_pairs() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let qs = generate_questions(&w).unwrap();
        let heads = w.all_facts().map(|t| t.head()).collect::<HashSet<_>>();
        assert_eq!(qs.len(), heads.len());
        let mut seen: BTreeMap<(EntityId, EntityId), Split> = BTreeMap::new();
        for q in &qs {
            for p in q.pairs() {
                if let Some(s) = seen.insert(p, q.split) {
                    assert_eq!(s, q.split);
                }
            }
        }
        let test = qs.iter().filter(|q| q.split == Split::Test).count() as f64;
        assert!((test / qs.len() as f64 - 0.3).abs() < 0.05);
        assert!(qs.iter().any(|q| !q.kb_supported && q.split == Split::Test));
        assert_eq!(generate_questions(&w).unwrap(), qs);
    }
}
