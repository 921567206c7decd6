use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{Slot, World};
use crate::kb::{EntityId, Triple};

/// A gold entity mention; `end` is inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "(u32, usize, usize)", from = "(u32, usize, usize)")]
pub struct Mention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn new(entity: EntityId, start: usize, end: usize) -> Self {
        Mention { entity, start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<Mention> for (u32, usize, usize) {
    fn from(m: Mention) -> Self {
        (m.entity.0, m.start, m.end)
    }
}

impl From<(u32, usize, usize)> for Mention {
    fn from((e, s, t): (u32, usize, usize)) -> Self {
        Mention::new(EntityId(e), s, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: usize,
    pub tokens: Vec<u32>,
    /// Ordered by start position.
    pub mentions: Vec<Mention>,
    /// Facts realized by the sentences of this paragraph.
    #[serde(skip)]
    pub facts: Vec<Triple>,
}

/// A single rendered sentence before packing.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub fact: Triple,
    pub tokens: Vec<u32>,
    pub mentions: Vec<Mention>,
}

/// Renders `fact` through template `k` of its relation.
pub fn render_sentence(world: &World, fact: Triple, k: usize) -> Sentence {
    let rel = world.relation(fact.relation);
    let template = &rel.templates[k % rel.templates.len()];
    let mut tokens = Vec::new();
    let mut mentions = Vec::with_capacity(2);
    for slot in &template.0 {
        match *slot {
            Slot::Subject | Slot::Object => {
                let e = if *slot == Slot::Subject {
                    fact.subject
                } else {
                    fact.object
                };
                let start = tokens.len();
                tokens.extend_from_slice(&world.entity(e).tokens);
                mentions.push(Mention::new(e, start, tokens.len() - 1));
            }
            Slot::Token(t) => tokens.push(t),
        }
    }
    Sentence {
        fact,
        tokens,
        mentions,
    }
}

/// Every fact of the world, each rendered `corpus_multiplicity` times and
/// cycling through its relation's templates. Sentences are grouped by
/// subject, subjects in a seeded order; the renderings of one fact stay adjacent.
pub fn render_sentences(world: &World) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.config.seed);
    rng.set_stream(1);
    let mut blocks = Vec::new();
    for &fact in world.all_facts() {
        let n_templates = world.relation(fact.relation).templates.len();
        let offset = rng.gen_range(0..n_templates);
        let block: Vec<Sentence> = (0..world.config.corpus_multiplicity)
            .map(|m| render_sentence(world, fact, offset + m))
            .collect();
        blocks.push(block);
    }
    blocks.shuffle(&mut rng);
    let mut rank: Vec<usize> = (0..world.entities.len()).collect();
    rank.shuffle(&mut rng);
    blocks.sort_by_key(|b| rank[b[0].fact.subject.0 as usize]);
    blocks.into_iter().flatten().collect()
}

/// Packs sentences greedily into paragraphs of at most `window` tokens. A
/// paragraph holds sentences about a single subject.
pub fn render_corpus(world: &World) -> Vec<Paragraph> {
    let window = world.config.window;
    let mut paragraphs = Vec::new();
    let mut current = Paragraph {
        id: 0,
        tokens: Vec::new(),
        mentions: Vec::new(),
        facts: Vec::new(),
    };
    for s in render_sentences(world) {
        let topic_change = current
            .facts
            .last()
            .is_some_and(|f| f.subject != s.fact.subject);
        if !current.tokens.is_empty()
            && (topic_change || current.tokens.len() + s.tokens.len() > window)
        {
            let id = current.id + 1;
            paragraphs.push(std::mem::replace(
                &mut current,
                Paragraph {
                    id,
                    tokens: Vec::new(),
                    mentions: Vec::new(),
                    facts: Vec::new(),
                },
            ));
        }
        let offset = current.tokens.len();
        current.tokens.extend_from_slice(&s.tokens);
        current.mentions.extend(
            s.mentions
                .iter()
                .map(|m| Mention::new(m.entity, m.start + offset, m.end + offset)),
        );
        current.facts.push(s.fact);
    }
    if !current.tokens.is_empty() {
        paragraphs.push(current);
    }
    paragraphs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::world::{generate_world, WorldConfig};
    use std::collections::HashMap;

    fn small() -> World {
        generate_world(&WorldConfig {
            n_entities: 30,
            n_relations: 3,
            n_facts: 40,
            text_only_facts: 5,
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sentence_mentions_are_exact() {
        let w = small();
        let f = w.kb_facts[0];
        for k in 0..2 {
            let s = render_sentence(&w, f, k);
            let ents: Vec<_> = s.mentions.iter().map(|m| m.entity).collect();
            assert!(ents.contains(&f.subject) && ents.contains(&f.object));
            for m in &s.mentions {
                assert_eq!(&s.tokens[m.start..=m.end], &w.entity(m.entity).tokens[..]);
            }
        }
    }

    #[test]
    fn corpus_shape() {
        let w = small();
        let corpus = render_corpus(&w);
        let mut per_fact: HashMap<Triple, usize> = HashMap::new();
        let mut sentences = 0;
        let mut mentions = 0;
        for p in &corpus {
            assert!(p.tokens.len() <= w.config.window);
            for m in &p.mentions {
                assert!(m.start <= m.end && m.end < p.tokens.len());
                assert_eq!(&p.tokens[m.start..=m.end], &w.entity(m.entity).tokens[..]);
            }
            assert!(p.mentions.windows(2).all(|x| x[0].start < x[1].start));
            for f in &p.facts {
                *per_fact.entry(*f).or_default() += 1;
            }
            sentences += p.facts.len();
            mentions += p.mentions.len();
        }
        assert_eq!(mentions, 2 * sentences);
        for f in w.all_facts() {
            assert!(per_fact[f] >= w.config.corpus_multiplicity);
        }
        assert_eq!(render_corpus(&w), corpus);
    }

    #[test]
    fn paragraphs_are_single_topic() {
        let w = small();
        let corpus = render_corpus(&w);
        for p in &corpus {
            assert!(p.facts.iter().all(|f| f.subject == p.facts[0].subject));
        }
        let subjects: std::collections::BTreeSet<_> = w.all_facts().map(|f| f.subject).collect();
        let starts = corpus
            .windows(2)
            .filter(|x| x[0].facts[0].subject != x[1].facts[0].subject)
            .count();
        assert_eq!(starts + 1, subjects.len());
    }
}
