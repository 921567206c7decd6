//! Facts-as-experts language modeling at desk scale.
//!
//! A small transformer links entity mentions through a learned entity memory
//! and answers cloze questions by retrieving from a key-value fact memory built
//! over a symbolic knowledge base. The fact memory can be edited at inference
//! time (facts injected or overwritten) without touching any parameter.
//!
//! Modules, bottom up:
//!
//! - [`numcore`]: tensors, reverse-mode tape, Adam, checkpoints
//! - [`kb`]: triples grouped into head pairs and tail sets, plus mutations
//! - [`datagen`]: seeded synthetic world, corpus, cloze examples, questions
//! - [`encoder`]: transformer with one entity-memory access layer
//! - [`factmem`]: head-pair keys, exact top-k retrieval, gated integration
//! - [`model`]: parameters and the batched forward pass tying the above together
//! - [`trainer`]: pretraining, finetuning, evaluation, and the editing experiments

pub mod datagen;
pub mod encoder;
pub mod error;
pub mod factmem;
pub mod kb;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{FaeError, Result};
