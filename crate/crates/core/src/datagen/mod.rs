//! Seeded synthetic world, corpus rendering, cloze examples and questions.
//!
//! Token ids 0..4 are reserved for padding, MASK, period and question mark.
//! Entity surface tokens are exclusive to their entity, so masking every
//! mention of an entity hides it completely.
//!
//! Corpus file: one JSON object per line with `id`, `tokens` and `mentions`,
//! each mention an `[entity, start, end]` triple with inclusive `end`.
//! Question file: the same shape plus `answers`, `subject`, `relation`,
//! `split`, `template` and `kb_supported`.

pub mod cloze;
pub mod corpus;
pub mod io;
pub mod world;

pub use cloze::{
    build_pretraining_set, generate_questions, make_cloze_examples, make_question, paragraph_rng,
    ClozeExample, ClozeStats, Question, Split,
};
pub use corpus::{render_corpus, render_sentence, render_sentences, Mention, Paragraph, Sentence};
pub use io::{read_jsonl, read_world, write_jsonl, write_vocab_files, write_world};
pub use world::{
    generate_world, EntityInfo, RelationInfo, Slot, Template, World, WorldConfig, MASK, PAD,
    PERIOD, QMARK,
};
