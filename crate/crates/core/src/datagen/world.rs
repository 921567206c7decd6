use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FaeError, Result};
use crate::kb::{EntityId, HeadPair, KbBounds, RelationId, Triple};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const PERIOD: u32 = 2;
pub const QMARK: u32 = 3;
/// First id of the ordinary word range.
pub const FIRST_WORD: u32 = 4;

const RELATION_NAMES: [&str; 8] = [
    "born_in",
    "citizen_of",
    "works_for",
    "member_of",
    "located_in",
    "founded_by",
    "studied_at",
    "plays_for",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Facts stored in the knowledge base.
    pub n_facts: usize,
    /// Additional facts stated in text but absent from the knowledge base.
    pub text_only_facts: usize,
    /// Entity types; each relation draws its objects from one type.
    pub n_types: usize,
    pub templates_per_relation: usize,
    /// Sentences rendered per fact.
    pub corpus_multiplicity: usize,
    /// Non-entity word tokens.
    pub vocab_size: usize,
    /// Paragraph window in tokens.
    pub window: usize,
    /// Chance that a sampled fact may join an existing head pair.
    pub multi_tail_prob: f64,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_entities: 200,
            n_relations: 5,
            n_facts: 600,
            text_only_facts: 100,
            n_types: 4,
            templates_per_relation: 2,
            corpus_multiplicity: 4,
            vocab_size: 64,
            window: 32,
            multi_tail_prob: 0.1,
            train_fraction: 0.6,
            dev_fraction: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(FaeError::Config(m));
        if self.n_entities < 2 || self.n_relations == 0 || self.n_facts == 0 {
            return cfg("n_entities >= 2, n_relations >= 1 and n_facts >= 1 required".into());
        }
        if self.n_types == 0 || self.n_types > self.n_entities {
            return cfg(format!("n_types must be in [1, {}]", self.n_entities));
        }
        if self.templates_per_relation < 2 {
            return cfg("each relation needs at least 2 templates".into());
        }
        if self.corpus_multiplicity == 0 || self.vocab_size < 4 {
            return cfg("corpus_multiplicity >= 1 and vocab_size >= 4 required".into());
        }
        if self.window < 12 {
            return cfg("window must hold at least one sentence (>= 12 tokens)".into());
        }
        if !(0.0..=1.0).contains(&self.multi_tail_prob) {
            return cfg("multi_tail_prob must lie in [0, 1]".into());
        }
        if self.train_fraction <= 0.0
            || self.dev_fraction < 0.0
            || self.train_fraction + self.dev_fraction >= 1.0
        {
            return cfg("split fractions must leave room for a test split".into());
        }
        if self.n_facts < self.n_entities.div_ceil(2) {
            return cfg(format!(
                "{} facts cannot mention all {} entities",
                self.n_facts, self.n_entities
            ));
        }
        let capacity = self.triple_capacity();
        if self.n_facts + self.text_only_facts > capacity {
            return cfg(format!(
                "{} facts requested but only {capacity} distinct (s, r, o) combinations exist",
                self.n_facts + self.text_only_facts
            ));
        }
        Ok(())
    }

    pub fn bounds(&self) -> KbBounds {
        KbBounds {
            n_entities: self.n_entities,
            n_relations: self.n_relations,
        }
    }

    fn type_size(&self, t: usize) -> usize {
        (0..self.n_entities)
            .filter(|e| e % self.n_types == t)
            .count()
    }

    fn triple_capacity(&self) -> usize {
        (0..self.n_relations)
            .map(|r| {
                let p = self.type_size(r % self.n_types);
                // any subject, typed object, subject != object
                self.n_entities * p - p
            })
            .sum()
    }
}

/// One slot of a sentence or question template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Subject,
    Object,
    Token(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template(pub Vec<Slot>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub name: String,
    pub tokens: Vec<u32>,
    pub entity_type: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub name: String,
    pub object_type: usize,
    pub templates: Vec<Template>,
    /// Question templates; the object slot is the asked-for answer.
    pub questions: Vec<Template>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    /// Token strings indexed by token id.
    pub vocab: Vec<String>,
    pub entities: Vec<EntityInfo>,
    pub relations: Vec<RelationInfo>,
    pub kb_facts: Vec<Triple>,
    pub text_only_facts: Vec<Triple>,
}

impl World {
    pub fn entity(&self, e: EntityId) -> &EntityInfo {
        &self.entities[e.0 as usize]
    }

    pub fn relation(&self, r: RelationId) -> &RelationInfo {
        &self.relations[r.0 as usize]
    }

    pub fn entity_by_name(&self, name: &str) -> Option<EntityId> {
        self.entities
            .iter()
            .position(|e| e.name.eq_ignore_ascii_case(name))
            .map(|i| EntityId(i as u32))
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .map(|i| RelationId(i as u32))
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// All facts that hold in the world, knowledge base first.
    pub fn all_facts(&self) -> impl Iterator<Item = &Triple> {
        self.kb_facts.iter().chain(&self.text_only_facts)
    }

    /// Entities used as an object of `r` anywhere in the world.
    pub fn objects_of_relation(&self, r: RelationId) -> BTreeSet<EntityId> {
        self.all_facts()
            .filter(|t| t.relation == r)
            .map(|t| t.object)
            .collect()
    }

    pub fn render_tokens(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&t| self.vocab[t as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds a seeded synthetic world: vocabulary, entities, relation templates and facts.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut vocab: Vec<String> = ["[PAD]", "[MASK]", ".", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut taken: HashSet<String> = vocab.iter().cloned().collect();
    for _ in 0..cfg.vocab_size {
        let w = fresh_word(&mut rng, &mut taken, false);
        vocab.push(w);
    }

    let mut entities = Vec::with_capacity(cfg.n_entities);
    for e in 0..cfg.n_entities {
        let parts = if rng.gen_bool(0.5) { 1 } else { 2 };
        let mut tokens = Vec::with_capacity(parts);
        let mut words = Vec::with_capacity(parts);
        for _ in 0..parts {
            let w = fresh_word(&mut rng, &mut taken, true);
            tokens.push(vocab.len() as u32);
            vocab.push(w.clone());
            words.push(w);
        }
        entities.push(EntityInfo {
            name: words.join("_"),
            tokens,
            entity_type: e % cfg.n_types,
        });
    }

    let mut word_pool: Vec<u32> = (FIRST_WORD..FIRST_WORD + cfg.vocab_size as u32).collect();
    word_pool.shuffle(&mut rng);
    let mut next_word = {
        let mut i = 0usize;
        move || {
            let w = word_pool[i % word_pool.len()];
            i += 1;
            w
        }
    };

    let mut relations = Vec::with_capacity(cfg.n_relations);
    for r in 0..cfg.n_relations {
        let base = RELATION_NAMES[r % RELATION_NAMES.len()];
        let name = if r < RELATION_NAMES.len() {
            base.to_string()
        } else {
            format!("{base}_{}", r / RELATION_NAMES.len())
        };
        let mut templates = Vec::with_capacity(cfg.templates_per_relation);
        for k in 0..cfg.templates_per_relation {
            let mut slots = Vec::new();
            if k % 2 == 0 {
                slots.push(Slot::Subject);
                for _ in 0..2 + (k / 2) % 2 {
                    slots.push(Slot::Token(next_word()));
                }
                slots.push(Slot::Object);
            } else {
                slots.push(Slot::Object);
                for _ in 0..3 - (k / 2) % 2 {
                    slots.push(Slot::Token(next_word()));
                }
                slots.push(Slot::Subject);
            }
            slots.push(Slot::Token(PERIOD));
            templates.push(Template(slots));
        }
        // Questions are the first two sentence templates with the object asked for.
        let questions = templates[..2].to_vec();
        relations.push(RelationInfo {
            name,
            object_type: r % cfg.n_types,
            templates,
            questions,
        });
    }

    let longest = relations
        .iter()
        .flat_map(|r| &r.templates)
        .map(|t| t.0.len() + 2)
        .max()
        .unwrap_or(0);
    if longest > cfg.window {
        return Err(FaeError::Config(format!(
            "a {longest}-token sentence does not fit the {}-token window",
            cfg.window
        )));
    }

    let (kb_facts, text_only_facts) = sample_facts(cfg, &mut rng)?;
    Ok(World {
        config: cfg.clone(),
        vocab,
        entities,
        relations,
        kb_facts,
        text_only_facts,
    })
}

fn fresh_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>, capital: bool) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(C[rng.gen_range(0..C.len())] as char);
            w.push(V[rng.gen_range(0..V.len())] as char);
        }
        if capital {
            w[..1].make_ascii_uppercase();
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn sample_facts(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Triple>, Vec<Triple>)> {
    let pools: Vec<Vec<u32>> = (0..cfg.n_types)
        .map(|t| {
            (0..cfg.n_entities as u32)
                .filter(|e| *e as usize % cfg.n_types == t)
                .collect()
        })
        .collect();
    let pool_of = |r: usize| &pools[r % cfg.n_types];

    let mut acc = FactSet {
        covered: vec![false; cfg.n_entities],
        ..FactSet::default()
    };

    // Coverage: every entity takes part in at least one stored fact.
    let mut order: Vec<u32> = (0..cfg.n_entities as u32).collect();
    order.shuffle(rng);
    for &e in &order {
        if acc.covered[e as usize] {
            continue;
        }
        let mut placed = false;
        for _ in 0..1000 {
            let r = rng.gen_range(0..cfg.n_relations);
            let pool = pool_of(r);
            let as_object = pool.contains(&e) && rng.gen_bool(0.5);
            let t = if as_object {
                let s = rng.gen_range(0..cfg.n_entities as u32);
                Triple::new(s, r as u32, e)
            } else {
                let o = pool[rng.gen_range(0..pool.len())];
                Triple::new(e, r as u32, o)
            };
            if t.subject == t.object || acc.set.contains(&t) || acc.heads.contains(&t.head()) {
                continue;
            }
            acc.add(t);
            placed = true;
            break;
        }
        if !placed {
            return Err(FaeError::Config(format!(
                "could not place entity {e} in any fact"
            )));
        }
    }
    if acc.facts.len() > cfg.n_facts {
        return Err(FaeError::Config(format!(
            "covering all entities took {} facts, more than n_facts = {}",
            acc.facts.len(),
            cfg.n_facts
        )));
    }

    // Fill, preferring fresh head pairs so most tail sets stay small.
    let mut attempts = 0usize;
    let limit = 200 * cfg.n_facts;
    while acc.facts.len() < cfg.n_facts && attempts < limit {
        attempts += 1;
        let r = rng.gen_range(0..cfg.n_relations);
        let pool = pool_of(r);
        let s = rng.gen_range(0..cfg.n_entities as u32);
        let o = pool[rng.gen_range(0..pool.len())];
        let t = Triple::new(s, r as u32, o);
        if s == o || acc.set.contains(&t) {
            continue;
        }
        if acc.heads.contains(&t.head()) && !rng.gen_bool(cfg.multi_tail_prob) {
            continue;
        }
        acc.add(t);
    }
    if acc.facts.len() < cfg.n_facts {
        let mut rest = all_combinations(cfg, &pools)
            .into_iter()
            .filter(|t| !acc.set.contains(t))
            .collect::<Vec<_>>();
        rest.shuffle(rng);
        for t in rest.into_iter().take(cfg.n_facts - acc.facts.len()) {
            acc.add(t);
        }
    }

    // Text-only facts use head pairs the knowledge base does not have.
    let FactSet {
        facts, mut heads, ..
    } = acc;
    let mut text_only = Vec::with_capacity(cfg.text_only_facts);
    let mut attempts = 0usize;
    while text_only.len() < cfg.text_only_facts && attempts < 200 * cfg.text_only_facts.max(1) {
        attempts += 1;
        let r = rng.gen_range(0..cfg.n_relations);
        let pool = pool_of(r);
        let s = rng.gen_range(0..cfg.n_entities as u32);
        let o = pool[rng.gen_range(0..pool.len())];
        let t = Triple::new(s, r as u32, o);
        if s == o || heads.contains(&t.head()) {
            continue;
        }
        heads.insert(t.head());
        text_only.push(t);
    }
    if text_only.len() < cfg.text_only_facts {
        let mut rest: Vec<Triple> = all_combinations(cfg, &pools)
            .into_iter()
            .filter(|t| !heads.contains(&t.head()))
            .collect();
        rest.shuffle(rng);
        for t in rest {
            if text_only.len() == cfg.text_only_facts {
                break;
            }
            if heads.insert(t.head()) {
                text_only.push(t);
            }
        }
    }
    if text_only.len() < cfg.text_only_facts {
        return Err(FaeError::Config(format!(
            "only {} free head pairs remain for {} text-only facts",
            text_only.len(),
            cfg.text_only_facts
        )));
    }
    Ok((facts, text_only))
}

#[derive(Default)]
struct FactSet {
    facts: Vec<Triple>,
    set: HashSet<Triple>,
    heads: HashSet<HeadPair>,
    covered: Vec<bool>,
}

impl FactSet {
    fn add(&mut self, t: Triple) {
        self.set.insert(t);
        self.heads.insert(t.head());
        self.covered[t.subject.0 as usize] = true;
        self.covered[t.object.0 as usize] = true;
        self.facts.push(t);
    }
}

fn all_combinations(cfg: &WorldConfig, pools: &[Vec<u32>]) -> Vec<Triple> {
    let mut out = Vec::new();
    for r in 0..cfg.n_relations {
        for s in 0..cfg.n_entities as u32 {
            for &o in &pools[r % cfg.n_types] {
                if s != o {
                    out.push(Triple::new(s, r as u32, o));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let cfg = WorldConfig {
            seed: 7,
            ..WorldConfig::default()
        };
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.kb_facts, c.kb_facts);
    }

    #[test]
    fn tiny_world() {
        let cfg = WorldConfig {
            n_entities: 4,
            n_relations: 2,
            n_facts: 6,
            text_only_facts: 0,
            n_types: 1,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let set: HashSet<_> = w.kb_facts.iter().collect();
        assert_eq!(w.kb_facts.len(), 6);
        assert_eq!(set.len(), 6);
        for t in &w.kb_facts {
            cfg.bounds().check(t).unwrap();
        }
    }

    #[test]
    fn default_world_properties() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(w.kb_facts.len(), 600);
        assert_eq!(w.text_only_facts.len(), 100);
        let mut seen = [false; 200];
        for t in &w.kb_facts {
            seen[t.subject.0 as usize] = true;
            seen[t.object.0 as usize] = true;
            assert_eq!(
                w.entity(t.object).entity_type,
                w.relation(t.relation).object_type
            );
        }
        assert!(seen.iter().all(|&s| s), "every entity appears in a fact");
        let kb_heads: HashSet<_> = w.kb_facts.iter().map(|t| t.head()).collect();
        for t in &w.text_only_facts {
            assert!(!kb_heads.contains(&t.head()));
        }
        for r in &w.relations {
            assert!(r.templates.len() >= 2);
            assert_ne!(r.templates[0], r.templates[1]);
        }
        // entity surface tokens are exclusive to their entity
        let mut owners = HashSet::new();
        for e in &w.entities {
            for &t in &e.tokens {
                assert!(owners.insert(t));
            }
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = WorldConfig {
            n_entities: 4,
            n_relations: 1,
            n_facts: 20,
            text_only_facts: 0,
            n_types: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(FaeError::Config(_))));
    }
}
