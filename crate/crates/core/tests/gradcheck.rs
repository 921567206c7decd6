mod common;

use std::time::Instant;

use common::*;
use fae_core::model::{forward, head_keys, Batch};
use fae_core::numcore::Tape;

fn check(k: usize, finetune: bool, seed: u64) {
    let store = micro_store(seed);
    let examples = micro_examples();
    let cfg = micro_config();
    let kb = micro_kb();
    let refs: Vec<_> = examples.iter().collect();
    let batch = Batch::new(&refs, cfg.max_len).unwrap();
    let mut tape = Tape::new();
    let keys = head_keys(&mut tape, &store, &kb).unwrap();
    let out = forward(&mut tape, &store, &cfg, &batch, &kb, keys, k).unwrap();
    let parts = if finetune {
        vec![out.loss_fact, out.loss_ans]
    } else {
        vec![out.loss_ent, out.loss_ctx, out.loss_fact, out.loss_ans]
    };
    let total = tape.sum(&parts).unwrap();
    let grads = tape.backward(total).unwrap();
    for (id, name, _) in store.iter() {
        let analytic = grads.param_or_zeros(&store, id);
        let numeric = fd_grad(&store, name, 1e-5, |s| {
            micro_loss(s, &examples, k, finetune)
        });
        let err = rel_err(&analytic, &numeric);
        assert!(
            err < 1e-4,
            "seed {seed} k {k} finetune {finetune}: {name} relative error {err:e} (|g| = {:e})",
            analytic.norm()
        );
    }
}

#[test]
fn pretraining_loss_gradients_match_finite_differences() {
    let t = Instant::now();
    for seed in 0..3 {
        check(1, false, seed);
    }
    check(2, false, 7);
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn finetuning_loss_gradients_match_finite_differences() {
    check(1, true, 11);
    check(3, true, 12);
}
