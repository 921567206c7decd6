use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::eval::dev_accuracy;
use crate::datagen::{build_pretraining_set, ClozeExample, Paragraph, Question, World};
use crate::error::{FaeError, Result};
use crate::kb::GroupedKb;
use crate::model::{forward, head_keys, Batch, ModelConfig};
use crate::numcore::{AdamConfig, OptimizerState, ParamId, ParamStore, Tape, Tensor};

/// Component losses of one step; `total` is what was differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub ent: f64,
    pub ctx: f64,
    pub fact: f64,
    pub ans: f64,
    pub total: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Objective {
    Pretrain,
    Finetune,
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    examples: &[&ClozeExample],
    kb: &GroupedKb,
    k: usize,
    frozen: &BTreeSet<ParamId>,
    objective: Objective,
) -> Result<StepLosses> {
    let batch = Batch::new(examples, cfg.max_len)?;
    let mut tape = Tape::new();
    let keys = head_keys(&mut tape, store, kb)?;
    let out = forward(&mut tape, store, cfg, &batch, kb, keys, k)?;
    let parts = match objective {
        Objective::Pretrain => vec![out.loss_ent, out.loss_ctx, out.loss_fact, out.loss_ans],
        Objective::Finetune => vec![out.loss_fact, out.loss_ans],
    };
    let total = tape.sum(&parts)?;
    let v = |x| tape.value(x).item();
    let mut losses = StepLosses {
        fact: v(out.loss_fact),
        ans: v(out.loss_ans),
        total: v(total),
        ..StepLosses::default()
    };
    if objective == Objective::Pretrain {
        losses.ent = v(out.loss_ent);
        losses.ctx = v(out.loss_ctx);
    }
    if !losses.total.is_finite() {
        return Err(FaeError::Training {
            step: opt.step_count() as usize,
            msg: format!("non-finite loss {:?}", losses),
            last_good: None,
        });
    }
    let grads = tape.backward(total)?;
    opt.step(store, &grads, frozen)?;
    Ok(losses)
}

/// One optimizer step on `ent + ctx + fact + ans`.
pub fn pretrain_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    examples: &[&ClozeExample],
    kb: &GroupedKb,
    k: usize,
) -> Result<StepLosses> {
    run_step(
        store,
        opt,
        cfg,
        examples,
        kb,
        k,
        &BTreeSet::new(),
        Objective::Pretrain,
    )
}

/// One optimizer step on `fact + ans` with `frozen` parameters held fixed.
///
/// Fails with an internal error if a frozen tensor changed.
pub fn finetune_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    examples: &[&ClozeExample],
    kb: &GroupedKb,
    k: usize,
    frozen: &BTreeSet<ParamId>,
) -> Result<StepLosses> {
    let before: Vec<Tensor> = frozen.iter().map(|&id| store.get(id).clone()).collect();
    let losses = run_step(
        store,
        opt,
        cfg,
        examples,
        kb,
        k,
        frozen,
        Objective::Finetune,
    )?;
    for (&id, old) in frozen.iter().zip(&before) {
        if store.get(id).data() != old.data() {
            return Err(FaeError::Internal(format!(
                "frozen parameter {} changed during finetuning",
                store.name(id)
            )));
        }
    }
    Ok(losses)
}

/// Resolves a freeze list against the parameter store.
pub fn freeze_set(store: &ParamStore, names: &[String]) -> Result<BTreeSet<ParamId>> {
    names
        .iter()
        .map(|n| {
            store
                .id(n)
                .map_err(|_| FaeError::Config(format!("cannot freeze unknown parameter {n:?}")))
        })
        .collect()
}

fn warmup_lr(base: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Where and how often training writes checkpoints.
#[derive(Clone, Debug)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub every: usize,
    pub config_hash: String,
}

impl CheckpointPolicy {
    fn path(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }
}

fn attach_last_good(err: FaeError, last_good: &Option<PathBuf>) -> FaeError {
    match err {
        FaeError::Training { step, msg, .. } => FaeError::Training {
            step,
            msg,
            last_good: last_good.clone(),
        },
        other => other,
    }
}

/// Pretraining run; returns the loss of every step.
///
/// Cloze examples are re-masked every epoch and shuffled with a seeded stream.
pub fn pretrain(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    train: &TrainConfig,
    corpus: &[Paragraph],
    kb: &GroupedKb,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<Vec<StepLosses>> {
    let mut opt = OptimizerState::new(
        store,
        AdamConfig {
            lr: train.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(10);
    let mut history = Vec::with_capacity(train.pretrain_steps);
    let mut last_good: Option<PathBuf> = None;
    let mut epoch = 0u64;
    let mut pool: Vec<ClozeExample> = Vec::new();
    let mut cursor = 0usize;
    while history.len() < train.pretrain_steps {
        if cursor + train.batch_size > pool.len() {
            let seed = train.seed.wrapping_mul(1_000_003).wrapping_add(epoch);
            let (exs, stats) = build_pretraining_set(corpus, kb, train.context_mask_prob, seed)?;
            if exs.is_empty() {
                return Err(FaeError::Validation(
                    "corpus yields no cloze examples".into(),
                ));
            }
            log::debug!("epoch {epoch}: {stats:?}");
            pool = exs;
            pool.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + train.batch_size).min(pool.len());
        let batch: Vec<&ClozeExample> = pool[cursor..end].iter().collect();
        cursor = end;
        let step = history.len();
        opt.config.lr = warmup_lr(train.lr, train.warmup_steps, step);
        let losses = pretrain_step(store, &mut opt, cfg, &batch, kb, train.k)
            .map_err(|e| attach_last_good(e, &last_good))?;
        if step % 100 == 0 {
            log::info!(
                "pretrain step {step}: total {:.4} (ent {:.4} ctx {:.4} fact {:.4} ans {:.4})",
                losses.total,
                losses.ent,
                losses.ctx,
                losses.fact,
                losses.ans
            );
        }
        history.push(losses);
        if let Some(p) = checkpoints {
            if (step + 1) % p.every == 0 || step + 1 == train.pretrain_steps {
                let path = p.path("pretrain");
                store.save(&path, &p.config_hash, step + 1)?;
                last_good = Some(path);
            }
        }
    }
    Ok(history)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinetuneLog {
    pub losses: Vec<StepLosses>,
    /// `(step, dev accuracy)` at every evaluation.
    pub dev_curve: Vec<(usize, f64)>,
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Question finetuning with early stopping on dev accuracy. The parameters
/// of the best dev evaluation are restored at the end.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    train: &TrainConfig,
    world: &World,
    kb: &GroupedKb,
    train_questions: &[Question],
    dev_questions: &[Question],
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<FinetuneLog> {
    let frozen = freeze_set(store, &train.freeze)?;
    let mut opt = OptimizerState::new(
        store,
        AdamConfig {
            lr: train.finetune_lr,
            ..AdamConfig::default()
        },
    );
    let examples: Vec<ClozeExample> = train_questions
        .iter()
        .map(|q| q.to_example(world, kb))
        .collect::<Result<_>>()?;
    let mut log = FinetuneLog::default();
    if examples.is_empty() || train.finetune_steps == 0 {
        return Ok(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(11);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut best = (f64::NEG_INFINITY, store.clone(), 0usize);
    let mut since_best = 0usize;
    let mut last_good: Option<PathBuf> = None;
    if !dev_questions.is_empty() {
        let acc = dev_accuracy(store, cfg, world, kb, dev_questions, train.k)?;
        log.dev_curve.push((0, acc));
        best = (acc, store.clone(), 0);
    }
    for step in 0..train.finetune_steps {
        if cursor >= order.len() {
            order = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + train.batch_size).min(order.len());
        let batch: Vec<&ClozeExample> = order[cursor..end].iter().map(|&i| &examples[i]).collect();
        cursor = end;
        let losses = finetune_step(store, &mut opt, cfg, &batch, kb, train.k, &frozen)
            .map_err(|e| attach_last_good(e, &last_good))?;
        log.losses.push(losses);
        let done = step + 1;
        if done % train.eval_every == 0 && !dev_questions.is_empty() {
            let acc = dev_accuracy(store, cfg, world, kb, dev_questions, train.k)?;
            log::info!(
                "finetune step {done}: loss {:.4}, dev accuracy {acc:.3}",
                losses.total
            );
            log.dev_curve.push((done, acc));
            if acc > best.0 {
                best = (acc, store.clone(), done);
                since_best = 0;
                if let Some(p) = checkpoints {
                    let path = p.path("finetune");
                    store.save(&path, &p.config_hash, done)?;
                    last_good = Some(path);
                }
            } else {
                since_best += 1;
                if since_best >= train.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if dev_questions.is_empty() {
        log.best_step = log.losses.len();
    } else {
        log.best_step = best.2;
        *store = best.1;
    }
    Ok(log)
}
