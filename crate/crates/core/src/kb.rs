//! Symbolic knowledge base grouped into a key-value fact memory.
//!
//! Triples sharing a `(subject, relation)` head pair are grouped into one
//! element whose value is the tail set of objects. Position 0 is always the
//! null fact, a head pair with an empty tail set that retrieval falls back to
//! when no stored fact applies.
//!
//! [`GroupedKb`] is an immutable snapshot: every mutation returns a new one.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FaeError, Result};

pub const DEFAULT_TAIL_CAP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: u32, relation: u32, object: u32) -> Self {
        Triple {
            subject: EntityId(subject),
            relation: RelationId(relation),
            object: EntityId(object),
        }
    }

    pub fn head(&self) -> HeadPair {
        HeadPair {
            subject: self.subject,
            relation: self.relation,
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadPair {
    pub subject: EntityId,
    pub relation: RelationId,
}

impl HeadPair {
    /// The distinguished `(s_null, r_null)` key.
    pub const NULL: HeadPair = HeadPair {
        subject: EntityId(u32::MAX),
        relation: RelationId(u32::MAX),
    };

    pub fn new(subject: u32, relation: u32) -> Self {
        HeadPair {
            subject: EntityId(subject),
            relation: RelationId(relation),
        }
    }

    pub fn is_null(&self) -> bool {
        *self == HeadPair::NULL
    }
}

impl fmt::Display for HeadPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "(null)")
        } else {
            write!(f, "({}, {})", self.subject, self.relation)
        }
    }
}

/// Ordered set of object entities stored under one head pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TailSet(Vec<EntityId>);

impl TailSet {
    pub fn objects(&self) -> &[EntityId] {
        &self.0
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.0.contains(&e)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Vocabulary sizes used to validate ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbBounds {
    pub n_entities: usize,
    pub n_relations: usize,
}

impl KbBounds {
    pub fn check(&self, t: &Triple) -> Result<()> {
        let bad = |msg: String| FaeError::InvalidTriple { triple: *t, msg };
        if t.subject.0 as usize >= self.n_entities {
            return Err(bad(format!(
                "subject out of range [0, {})",
                self.n_entities
            )));
        }
        if t.object.0 as usize >= self.n_entities {
            return Err(bad(format!("object out of range [0, {})", self.n_entities)));
        }
        if t.relation.0 as usize >= self.n_relations {
            return Err(bad(format!(
                "relation out of range [0, {})",
                self.n_relations
            )));
        }
        Ok(())
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.0 as usize >= self.n_entities {
            return Err(FaeError::Validation(format!(
                "entity {e} out of range [0, {})",
                self.n_entities
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectOutcome {
    /// A new head pair was appended at this index.
    NewHead(usize),
    /// The object joined the existing tail set at this index.
    Extended(usize),
    /// The triple was already stored; the snapshot is unchanged.
    AlreadyPresent(usize),
}

impl InjectOutcome {
    pub fn head_index(&self) -> usize {
        match *self {
            InjectOutcome::NewHead(i)
            | InjectOutcome::Extended(i)
            | InjectOutcome::AlreadyPresent(i) => i,
        }
    }
}

/// Grouped knowledge base `(A, B)` with the null fact at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedKb {
    bounds: KbBounds,
    tail_cap: usize,
    heads: Vec<HeadPair>,
    tails: Vec<TailSet>,
    index: HashMap<HeadPair, usize>,
}

impl GroupedKb {
    /// A knowledge base holding only the null fact.
    pub fn empty(bounds: KbBounds, tail_cap: usize) -> Result<Self> {
        if tail_cap == 0 {
            return Err(FaeError::Validation("tail_cap must be at least 1".into()));
        }
        Ok(GroupedKb {
            bounds,
            tail_cap,
            heads: vec![HeadPair::NULL],
            tails: vec![TailSet::default()],
            index: HashMap::new(),
        })
    }

    /// Groups triples by head pair in first-appearance order. Tail sets larger
    /// than `tail_cap` are uniformly down-sampled (seeded), keeping input order.
    pub fn group_facts(
        triples: &[Triple],
        bounds: KbBounds,
        tail_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut kb = GroupedKb::empty(bounds, tail_cap)?;
        let mut full: Vec<Vec<EntityId>> = vec![Vec::new()];
        for t in triples {
            bounds.check(t)?;
            let i = match kb.index.get(&t.head()) {
                Some(&i) => i,
                None => {
                    kb.heads.push(t.head());
                    full.push(Vec::new());
                    kb.index.insert(t.head(), kb.heads.len() - 1);
                    kb.heads.len() - 1
                }
            };
            if !full[i].contains(&t.object) {
                full[i].push(t.object);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        kb.tails = full
            .into_iter()
            .map(|objs| {
                if objs.len() <= tail_cap {
                    TailSet(objs)
                } else {
                    let mut keep = sample(&mut rng, objs.len(), tail_cap).into_vec();
                    keep.sort_unstable();
                    TailSet(keep.into_iter().map(|k| objs[k]).collect())
                }
            })
            .collect();
        Ok(kb)
    }

    pub fn bounds(&self) -> KbBounds {
        self.bounds
    }

    pub fn tail_cap(&self) -> usize {
        self.tail_cap
    }

    /// Number of head pairs, including the null fact.
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    /// True when only the null fact is stored.
    pub fn is_empty(&self) -> bool {
        self.heads.len() == 1
    }

    pub fn heads(&self) -> &[HeadPair] {
        &self.heads
    }

    pub fn tails(&self) -> &[TailSet] {
        &self.tails
    }

    pub fn head(&self, i: usize) -> HeadPair {
        self.heads[i]
    }

    pub fn tail(&self, i: usize) -> &TailSet {
        &self.tails[i]
    }

    pub fn position(&self, head: &HeadPair) -> Option<usize> {
        self.index.get(head).copied()
    }

    /// Objects stored under `head`, if present.
    pub fn lookup(&self, head: &HeadPair) -> Option<&TailSet> {
        self.position(head).map(|i| &self.tails[i])
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.lookup(&t.head())
            .is_some_and(|ts| ts.contains(t.object))
    }

    /// Flattened triples in head order, tail order within a head.
    pub fn triples(&self) -> Vec<Triple> {
        let mut out = Vec::new();
        for (h, ts) in self.heads.iter().zip(&self.tails).skip(1) {
            for &o in ts.objects() {
                out.push(Triple {
                    subject: h.subject,
                    relation: h.relation,
                    object: o,
                });
            }
        }
        out
    }

    pub fn num_triples(&self) -> usize {
        self.tails.iter().map(|t| t.len()).sum()
    }

    /// Adds one fact. An existing head gains the object; a new head is appended.
    pub fn inject_fact(&self, t: Triple) -> Result<(GroupedKb, InjectOutcome)> {
        self.bounds.check(&t)?;
        let mut kb = self.clone();
        let outcome = match kb.index.get(&t.head()) {
            Some(&i) => {
                if kb.tails[i].contains(t.object) {
                    return Ok((kb, InjectOutcome::AlreadyPresent(i)));
                }
                if kb.tails[i].len() >= kb.tail_cap {
                    return Err(FaeError::Capacity {
                        subject: t.subject.0,
                        relation: t.relation.0,
                        cap: kb.tail_cap,
                    });
                }
                kb.tails[i].0.push(t.object);
                InjectOutcome::Extended(i)
            }
            None => {
                kb.heads.push(t.head());
                kb.tails.push(TailSet(vec![t.object]));
                let i = kb.heads.len() - 1;
                kb.index.insert(t.head(), i);
                InjectOutcome::NewHead(i)
            }
        };
        Ok((kb, outcome))
    }

    /// Replaces the whole tail set of an existing head pair.
    pub fn overwrite_tail(&self, head: HeadPair, new_objects: &[EntityId]) -> Result<GroupedKb> {
        if head.is_null() {
            return Err(FaeError::Validation(
                "the null fact cannot be overwritten".into(),
            ));
        }
        let i = self
            .position(&head)
            .ok_or_else(|| FaeError::NotFound(format!("head pair {head}")))?;
        let mut objs: Vec<EntityId> = Vec::with_capacity(new_objects.len());
        for &o in new_objects {
            self.bounds.check_entity(o)?;
            if !objs.contains(&o) {
                objs.push(o);
            }
        }
        if objs.is_empty() || objs.len() > self.tail_cap {
            return Err(FaeError::Validation(format!(
                "overwrite needs between 1 and {} objects, got {}",
                self.tail_cap,
                objs.len()
            )));
        }
        let mut kb = self.clone();
        kb.tails[i] = TailSet(objs);
        Ok(kb)
    }

    /// Removes one fact; a head whose tail set empties is removed as well,
    /// shifting later head indices down by one.
    pub fn delete_fact(&self, t: &Triple) -> Result<GroupedKb> {
        let i = self
            .position(&t.head())
            .filter(|&i| self.tails[i].contains(t.object))
            .ok_or_else(|| FaeError::NotFound(format!("fact {t}")))?;
        let mut kb = self.clone();
        kb.tails[i].0.retain(|&o| o != t.object);
        if kb.tails[i].is_empty() {
            kb.heads.remove(i);
            kb.tails.remove(i);
            kb.rebuild_index();
        }
        Ok(kb)
    }

    /// Keeps only the facts for which `keep` returns true.
    pub fn retain_facts(&self, mut keep: impl FnMut(&Triple) -> bool) -> GroupedKb {
        let mut kb = self.clone();
        let mut heads = vec![HeadPair::NULL];
        let mut tails = vec![TailSet::default()];
        for (h, ts) in self.heads.iter().zip(&self.tails).skip(1) {
            let objs: Vec<EntityId> = ts
                .objects()
                .iter()
                .copied()
                .filter(|&o| {
                    keep(&Triple {
                        subject: h.subject,
                        relation: h.relation,
                        object: o,
                    })
                })
                .collect();
            if !objs.is_empty() {
                heads.push(*h);
                tails.push(TailSet(objs));
            }
        }
        kb.heads = heads;
        kb.tails = tails;
        kb.rebuild_index();
        kb
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .heads
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, h)| (*h, i))
            .collect();
    }

    /// Lowest head index whose subject appears in `context` and whose tail set
    /// contains `answer`; 0 (the null fact) when no such head exists.
    pub fn distant_label(&self, context: &[EntityId], answer: EntityId) -> Result<usize> {
        self.distant_label_any(context, &[answer])
    }

    /// As [`GroupedKb::distant_label`], accepting any of several answers.
    pub fn distant_label_any(&self, context: &[EntityId], answers: &[EntityId]) -> Result<usize> {
        for &e in context.iter().chain(answers) {
            self.bounds.check_entity(e)?;
        }
        let ctx: HashSet<EntityId> = context.iter().copied().collect();
        for i in 1..self.heads.len() {
            if ctx.contains(&self.heads[i].subject)
                && answers.iter().any(|&a| self.tails[i].contains(a))
            {
                return Ok(i);
            }
        }
        Ok(0)
    }

    /// Content digest identifying this snapshot (first 16 hex chars of SHA-256).
    pub fn version_id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.tail_cap as u64).to_le_bytes());
        for (head, ts) in self.heads.iter().zip(&self.tails) {
            h.update(head.subject.0.to_le_bytes());
            h.update(head.relation.0.to_le_bytes());
            h.update((ts.len() as u32).to_le_bytes());
            for o in ts.objects() {
                h.update(o.0.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Verifies the structural invariants; used by tests and after loads.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(FaeError::Internal(m));
        if self.heads.len() != self.tails.len() {
            return fail("heads and tails differ in length".into());
        }
        if !self.heads[0].is_null() || !self.tails[0].is_empty() {
            return fail("index 0 is not the null fact".into());
        }
        if self.index.len() != self.heads.len() - 1 {
            return fail("index size mismatch".into());
        }
        for (i, h) in self.heads.iter().enumerate().skip(1) {
            if self.index.get(h) != Some(&i) {
                return fail(format!("index does not round-trip at {i}"));
            }
            let ts = &self.tails[i];
            let uniq: HashSet<_> = ts.objects().iter().collect();
            if uniq.len() != ts.len() || ts.len() > self.tail_cap || ts.is_empty() {
                return fail(format!("bad tail set at {i}"));
            }
        }
        Ok(())
    }

    pub fn write_triples(&self, path: &Path) -> Result<()> {
        write_triples(path, &self.triples())
    }
}

/// Parses the tab-separated triple format; `#` starts a comment line.
pub fn parse_triples(text: &str, origin: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |msg: String| FaeError::Parse {
            location: format!("{origin}:{}", ln + 1),
            msg,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated ids, got {}",
                fields.len()
            )));
        }
        let mut ids = [0u32; 3];
        for (slot, f) in ids.iter_mut().zip(&fields) {
            *slot = f
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("not an id: {f:?}")))?;
        }
        out.push(Triple::new(ids[0], ids[1], ids[2]));
    }
    Ok(out)
}

pub fn read_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| FaeError::io(path, e))?;
    parse_triples(&text, &path.display().to_string())
}

pub fn format_triples(triples: &[Triple]) -> String {
    let mut s = String::from("# subject\trelation\tobject\n");
    for t in triples {
        s.push_str(&format!("{}\t{}\t{}\n", t.subject, t.relation, t.object));
    }
    s
}

pub fn write_triples(path: &Path, triples: &[Triple]) -> Result<()> {
    fs::write(path, format_triples(triples)).map_err(|e| FaeError::io(path, e))
}

/// One entry of the append-only mutation log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Mutation {
    Inject(Triple),
    Overwrite {
        head: HeadPair,
        objects: Vec<EntityId>,
    },
}

impl Mutation {
    pub fn apply(&self, kb: &GroupedKb) -> Result<GroupedKb> {
        match self {
            Mutation::Inject(t) => kb.inject_fact(*t).map(|(kb, _)| kb),
            Mutation::Overwrite { head, objects } => kb.overwrite_tail(*head, objects),
        }
    }

    pub fn parse(line: &str) -> Result<Mutation> {
        let err = |msg: &str| FaeError::Parse {
            location: format!("mutation {line:?}"),
            msg: msg.to_string(),
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let id = |s: &str| s.parse::<u32>().map_err(|_| err("bad id"));
        match parts.as_slice() {
            ["INJECT", s, r, o] => Ok(Mutation::Inject(Triple::new(id(s)?, id(r)?, id(o)?))),
            ["OVERWRITE", s, r, objs] => {
                let objects = objs
                    .split(',')
                    .map(|o| id(o).map(EntityId))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Mutation::Overwrite {
                    head: HeadPair::new(id(s)?, id(r)?),
                    objects,
                })
            }
            _ => Err(err("expected `INJECT s r o` or `OVERWRITE s r o1,o2,...`")),
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::Inject(t) => write!(f, "INJECT {} {} {}", t.subject, t.relation, t.object),
            Mutation::Overwrite { head, objects } => {
                let objs: Vec<String> = objects.iter().map(|o| o.to_string()).collect();
                write!(
                    f,
                    "OVERWRITE {} {} {}",
                    head.subject,
                    head.relation,
                    objs.join(",")
                )
            }
        }
    }
}

/// Applies every mutation line of a log in order; blank and `#` lines are skipped.
pub fn replay(kb: &GroupedKb, log: &str) -> Result<GroupedKb> {
    let mut kb = kb.clone();
    for line in log.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        kb = Mutation::parse(line)?.apply(&kb)?;
    }
    Ok(kb)
}
