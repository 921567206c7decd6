//! Pretraining, finetuning, evaluation and the memory-editing experiments.

pub mod config;
pub mod eval;
pub mod experiments;
pub mod filter;
pub mod train;

pub use config::{ExperimentConfig, ModelDims, ProtocolConfig, TrainConfig, MANIFEST_KEYS};
pub use eval::{
    accuracy_of, evaluate, predict, summary_table, ExperimentReport, Prediction, QuestionTrace,
    SplitAccuracy,
};
pub use experiments::{
    prepare, run_injection_experiment, run_pipeline, run_update_experiment, select_withheld,
    train_model, InjectionOutcome, PipelineResult, PreparedData, TrainedModel, UpdateOutcome,
};
pub use filter::{
    filter_overlap, filter_pretrain_knowledge, KnowledgeFilter, OverlapFilter, PairRemovals,
};
pub use train::{
    finetune, finetune_step, freeze_set, pretrain, pretrain_step, CheckpointPolicy, FinetuneLog,
    StepLosses,
};
