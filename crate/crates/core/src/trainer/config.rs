use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{World, WorldConfig};
use crate::error::{FaeError, Result};
use crate::model::{ModelConfig, FINETUNE_FROZEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    /// Linear warmup steps at the start of pretraining.
    pub warmup_steps: usize,
    pub seed: u64,
    pub k: usize,
    /// Finetuning steps between dev evaluations.
    pub eval_every: usize,
    /// Dev evaluations without improvement before finetuning stops.
    pub patience: usize,
    pub freeze: Vec<String>,
    pub context_mask_prob: f64,
    pub tail_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            pretrain_steps: 6000,
            finetune_steps: 500,
            lr: 3e-3,
            finetune_lr: 1e-3,
            warmup_steps: 100,
            seed: 0,
            k: 1,
            eval_every: 50,
            patience: 5,
            freeze: FINETUNE_FROZEN.iter().map(|s| s.to_string()).collect(),
            context_mask_prob: 0.15,
            tail_cap: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FaeError::Config(m.to_string()));
        if self.batch_size == 0 || self.k == 0 || self.eval_every == 0 || self.tail_cap == 0 {
            return bad("batch_size, k, eval_every and tail_cap must be positive");
        }
        if !(self.lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.context_mask_prob) {
            return bad("context_mask_prob must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Model dimensions a manifest may override; table sizes come from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_t: usize,
    pub d_e: usize,
    pub d_a: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Defaults to `layers / 2`.
    pub memory_layer: Option<usize>,
    pub init_std: f64,
    pub embed_std: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_t: 64,
            d_e: 64,
            d_a: 64,
            layers: 4,
            heads: 4,
            d_ff: 256,
            memory_layer: None,
            init_std: 0.1,
            embed_std: 0.1,
        }
    }
}

/// Settings of the editing experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Facts withheld from corpus and knowledge base, then injected.
    pub n_withheld: usize,
    /// Tail sets overwritten in the update experiment.
    pub n_updates: usize,
    /// Drop training questions whose answer is also an evaluation answer.
    pub filter_overlap: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_withheld: 50,
            n_updates: 50,
            filter_overlap: false,
        }
    }
}

/// A complete run description, parsed from a `key = value` manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
}

/// Manifest keys, one per line of `manifest_help`.
pub const MANIFEST_KEYS: &[(&str, &str)] = &[
    (
        "seed",
        "seeds world generation, initialization and batching",
    ),
    ("world.n_entities", "entities in the synthetic world"),
    ("world.n_relations", "relations"),
    ("world.n_facts", "facts stored in the knowledge base"),
    ("world.text_only_facts", "facts stated only in text"),
    ("world.n_types", "entity types"),
    (
        "world.templates_per_relation",
        "sentence templates per relation",
    ),
    ("world.corpus_multiplicity", "sentences per fact"),
    ("world.vocab_size", "ordinary word tokens"),
    ("world.window", "paragraph length in tokens"),
    (
        "world.multi_tail_prob",
        "chance a fact joins an existing head pair",
    ),
    ("world.train_fraction", "share of questions in train"),
    ("world.dev_fraction", "share of questions in dev"),
    ("model.d_t", "transformer width"),
    ("model.d_e", "entity embedding width"),
    ("model.d_a", "fact key width"),
    ("model.layers", "transformer layers"),
    ("model.heads", "attention heads"),
    ("model.d_ff", "feed-forward width"),
    ("model.memory_layer", "layers before the entity memory"),
    ("model.init_std", "init scale of projections"),
    ("model.embed_std", "init scale of embedding tables"),
    ("train.batch_size", "examples per step"),
    ("train.pretrain_steps", "pretraining steps"),
    ("train.finetune_steps", "maximum finetuning steps"),
    ("train.lr", "pretraining learning rate"),
    ("train.finetune_lr", "finetuning learning rate"),
    ("train.warmup_steps", "linear warmup steps"),
    ("train.k", "retrieved head pairs"),
    (
        "train.eval_every",
        "finetuning steps between dev evaluations",
    ),
    (
        "train.patience",
        "dev evaluations without improvement before stopping",
    ),
    (
        "train.freeze",
        "comma-separated parameters frozen during finetuning",
    ),
    ("train.context_mask_prob", "context mention masking rate"),
    ("train.tail_cap", "maximum tail set size"),
    ("protocol.n_withheld", "facts withheld and later injected"),
    ("protocol.n_updates", "tail sets overwritten"),
    (
        "protocol.filter_overlap",
        "drop train questions sharing an evaluation answer",
    ),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, location: &str) -> Result<T> {
    value.parse().map_err(|_| FaeError::Parse {
        location: location.to_string(),
        msg: format!("bad value {value:?} for {key}"),
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| FaeError::Parse {
                location: location.clone(),
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim(), &location)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FaeError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<()> {
        macro_rules! p {
            () => {
                parse_value(key, value, location)?
            };
        }
        let (w, m, t, pr) = (
            &mut self.world,
            &mut self.model,
            &mut self.train,
            &mut self.protocol,
        );
        match key {
            "seed" => {
                let s: u64 = p!();
                w.seed = s;
                t.seed = s;
            }
            "world.n_entities" => w.n_entities = p!(),
            "world.n_relations" => w.n_relations = p!(),
            "world.n_facts" => w.n_facts = p!(),
            "world.text_only_facts" => w.text_only_facts = p!(),
            "world.n_types" => w.n_types = p!(),
            "world.templates_per_relation" => w.templates_per_relation = p!(),
            "world.corpus_multiplicity" => w.corpus_multiplicity = p!(),
            "world.vocab_size" => w.vocab_size = p!(),
            "world.window" => w.window = p!(),
            "world.multi_tail_prob" => w.multi_tail_prob = p!(),
            "world.train_fraction" => w.train_fraction = p!(),
            "world.dev_fraction" => w.dev_fraction = p!(),
            "model.d_t" => m.d_t = p!(),
            "model.d_e" => m.d_e = p!(),
            "model.d_a" => m.d_a = p!(),
            "model.layers" => m.layers = p!(),
            "model.heads" => m.heads = p!(),
            "model.d_ff" => m.d_ff = p!(),
            "model.memory_layer" => m.memory_layer = Some(p!()),
            "model.init_std" => m.init_std = p!(),
            "model.embed_std" => m.embed_std = p!(),
            "train.batch_size" => t.batch_size = p!(),
            "train.pretrain_steps" => t.pretrain_steps = p!(),
            "train.finetune_steps" => t.finetune_steps = p!(),
            "train.lr" => t.lr = p!(),
            "train.finetune_lr" => t.finetune_lr = p!(),
            "train.warmup_steps" => t.warmup_steps = p!(),
            "train.k" => t.k = p!(),
            "train.eval_every" => t.eval_every = p!(),
            "train.patience" => t.patience = p!(),
            "train.freeze" => {
                t.freeze = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "train.context_mask_prob" => t.context_mask_prob = p!(),
            "train.tail_cap" => t.tail_cap = p!(),
            "protocol.n_withheld" => pr.n_withheld = p!(),
            "protocol.n_updates" => pr.n_updates = p!(),
            "protocol.filter_overlap" => pr.filter_overlap = p!(),
            _ => {
                return Err(FaeError::Parse {
                    location: location.to_string(),
                    msg: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it gives back `self`.
    pub fn to_manifest(&self) -> String {
        let (w, m, t, p) = (&self.world, &self.model, &self.train, &self.protocol);
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("seed", w.seed.to_string());
        put("world.n_entities", w.n_entities.to_string());
        put("world.n_relations", w.n_relations.to_string());
        put("world.n_facts", w.n_facts.to_string());
        put("world.text_only_facts", w.text_only_facts.to_string());
        put("world.n_types", w.n_types.to_string());
        put(
            "world.templates_per_relation",
            w.templates_per_relation.to_string(),
        );
        put(
            "world.corpus_multiplicity",
            w.corpus_multiplicity.to_string(),
        );
        put("world.vocab_size", w.vocab_size.to_string());
        put("world.window", w.window.to_string());
        put("world.multi_tail_prob", w.multi_tail_prob.to_string());
        put("world.train_fraction", w.train_fraction.to_string());
        put("world.dev_fraction", w.dev_fraction.to_string());
        put("model.d_t", m.d_t.to_string());
        put("model.d_e", m.d_e.to_string());
        put("model.d_a", m.d_a.to_string());
        put("model.layers", m.layers.to_string());
        put("model.heads", m.heads.to_string());
        put("model.d_ff", m.d_ff.to_string());
        if let Some(l) = m.memory_layer {
            put("model.memory_layer", l.to_string());
        }
        put("model.init_std", m.init_std.to_string());
        put("model.embed_std", m.embed_std.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.pretrain_steps", t.pretrain_steps.to_string());
        put("train.finetune_steps", t.finetune_steps.to_string());
        put("train.lr", t.lr.to_string());
        put("train.finetune_lr", t.finetune_lr.to_string());
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.k", t.k.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.patience", t.patience.to_string());
        put("train.freeze", t.freeze.join(","));
        put("train.context_mask_prob", t.context_mask_prob.to_string());
        put("train.tail_cap", t.tail_cap.to_string());
        put("protocol.n_withheld", p.n_withheld.to_string());
        put("protocol.n_updates", p.n_updates.to_string());
        put("protocol.filter_overlap", p.filter_overlap.to_string());
        s
    }

    /// Model shape for `world`: table sizes from the world, widths from the manifest.
    pub fn model_config(&self, world: &World) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: world.vocab_len(),
            n_entities: world.entities.len(),
            n_relations: world.relations.len(),
            d_t: m.d_t,
            d_e: m.d_e,
            d_r: m.d_e,
            d_a: m.d_a,
            layers: m.layers,
            heads: m.heads,
            d_ff: m.d_ff,
            memory_layer: m.memory_layer.unwrap_or(m.layers / 2),
            max_len: world.config.window,
            init_std: m.init_std,
            embed_std: m.embed_std,
        }
    }

    /// SHA-256 of the canonical manifest, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_manifest().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let text = "seed = 9\nworld.n_entities = 50 # small\ntrain.freeze = entity.table\nprotocol.filter_overlap = true\n";
        let cfg = ExperimentConfig::parse(text, "m").unwrap();
        assert_eq!(cfg.world.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.world.n_entities, 50);
        assert_eq!(cfg.train.freeze, vec!["entity.table".to_string()]);
        assert!(cfg.protocol.filter_overlap);
        let again = ExperimentConfig::parse(&cfg.to_manifest(), "m2").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn every_documented_key_parses() {
        let cfg = ExperimentConfig::default();
        let rendered = cfg.to_manifest();
        for (k, _) in MANIFEST_KEYS {
            if *k != "model.memory_layer" {
                assert!(rendered.contains(&format!("{k} = ")), "{k}");
            }
        }
    }

    #[test]
    fn bad_lines_name_their_location() {
        let err = ExperimentConfig::parse("seed = 1\nnonsense\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().contains("cfg.txt:2"), "{err}");
        let err = ExperimentConfig::parse("train.lr = fast\n", "cfg.txt").unwrap_err();
        assert!(matches!(err, FaeError::Parse { .. }));
        let err = ExperimentConfig::parse("bogus.key = 1\n", "cfg.txt").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        let err = ExperimentConfig::parse("world.n_facts = 100000\n", "cfg.txt").unwrap_err();
        assert!(matches!(err, FaeError::Config(_)));
    }
}
