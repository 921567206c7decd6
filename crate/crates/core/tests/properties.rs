use std::collections::{BTreeMap, BTreeSet};

use fae_core::factmem::{build_keys, top_k};
use fae_core::kb::{
    format_triples, parse_triples, replay, EntityId, GroupedKb, HeadPair, InjectOutcome, KbBounds,
    Mutation, RelationId, Triple,
};
use fae_core::numcore::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BOUNDS: KbBounds = KbBounds {
    n_entities: 12,
    n_relations: 3,
};

fn triple() -> impl Strategy<Value = Triple> {
    (0..12u32, 0..3u32, 0..12u32).prop_map(|(s, r, o)| Triple::new(s, r, o))
}

fn kb_of(ts: &[Triple]) -> GroupedKb {
    GroupedKb::group_facts(ts, BOUNDS, usize::MAX, 0).unwrap()
}

fn as_map(kb: &GroupedKb) -> BTreeMap<HeadPair, BTreeSet<EntityId>> {
    kb.heads()
        .iter()
        .zip(kb.tails())
        .skip(1)
        .map(|(h, t)| (*h, t.objects().iter().copied().collect()))
        .collect()
}

fn tables(seed: u64) -> [Tensor; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [
        Tensor::randn(&[12, 4], 1.0, &mut rng),
        Tensor::randn(&[3, 4], 1.0, &mut rng),
        Tensor::randn(&[8, 5], 1.0, &mut rng),
        Tensor::randn(&[1, 4], 1.0, &mut rng),
        Tensor::randn(&[1, 4], 1.0, &mut rng),
    ]
}

fn keys(kb: &GroupedKb, t: &[Tensor; 5]) -> Tensor {
    build_keys(kb, &t[0], &t[1], &t[2], &t[3], &t[4]).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::from_rows(&rows).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let pa = tape.softmax(a).unwrap();
        let pb = tape.softmax(b).unwrap();
        for r in 0..x.rows() {
            let row = tape.value(pa).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)) < 1e-12);
    }

    #[test]
    fn grouping_ignores_input_order(ts in proptest::collection::vec(triple(), 0..40), seed in any::<u64>()) {
        let mut shuffled = ts.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let a = kb_of(&ts);
        let b = kb_of(&shuffled);
        a.check_invariants().unwrap();
        prop_assert_eq!(as_map(&a), as_map(&b));
        let distinct: BTreeSet<Triple> = ts.iter().copied().collect();
        prop_assert_eq!(a.num_triples(), distinct.len());
        prop_assert!(distinct.iter().all(|t| a.contains(t)));
    }

    #[test]
    fn injection_preserves_existing_heads(ts in proptest::collection::vec(triple(), 0..30), t in triple()) {
        let kb = kb_of(&ts);
        let (next, outcome) = kb.inject_fact(t).unwrap();
        next.check_invariants().unwrap();
        prop_assert!(next.contains(&t));
        prop_assert_eq!(&next.heads()[..kb.len()], kb.heads());
        match outcome {
            InjectOutcome::NewHead(i) => {
                prop_assert_eq!(i, kb.len());
                prop_assert_eq!(next.len(), kb.len() + 1);
                prop_assert_eq!(next.num_triples(), kb.num_triples() + 1);
            }
            InjectOutcome::Extended(_) => prop_assert_eq!(next.num_triples(), kb.num_triples() + 1),
            InjectOutcome::AlreadyPresent(_) => prop_assert_eq!(&next, &kb),
        }
        let tables = tables(7);
        let (before, after) = (keys(&kb, &tables), keys(&next, &tables));
        prop_assert_eq!(after.rows(), next.len());
        for i in 0..kb.len() {
            prop_assert_eq!(before.row(i), after.row(i));
        }
    }

    #[test]
    fn overwrite_replaces_only_the_tail(
        ts in proptest::collection::vec(triple(), 1..30),
        pick in any::<prop::sample::Index>(),
        objs in proptest::collection::vec(0..12u32, 1..5),
    ) {
        let kb = kb_of(&ts);
        let head = kb.head(1 + pick.index(kb.len() - 1));
        let objects: Vec<EntityId> = objs.iter().map(|&o| EntityId(o)).collect();
        let next = kb.overwrite_tail(head, &objects).unwrap();
        next.check_invariants().unwrap();
        prop_assert_eq!(next.heads(), kb.heads());
        let want: BTreeSet<EntityId> = objects.iter().copied().collect();
        let got: BTreeSet<EntityId> = next.lookup(&head).unwrap().objects().iter().copied().collect();
        prop_assert_eq!(got, want);
        let tables = tables(3);
        prop_assert_eq!(keys(&kb, &tables), keys(&next, &tables));
    }

    #[test]
    fn replaying_a_log_matches_direct_application(
        ts in proptest::collection::vec(triple(), 1..20),
        injects in proptest::collection::vec(triple(), 0..8),
        objs in proptest::collection::vec(0..12u32, 1..4),
    ) {
        let kb = kb_of(&ts);
        let mut log: Vec<Mutation> = injects.into_iter().map(Mutation::Inject).collect();
        log.push(Mutation::Overwrite { head: kb.head(1), objects: objs.into_iter().map(EntityId).collect() });
        let mut direct = kb.clone();
        for m in &log {
            prop_assert_eq!(&Mutation::parse(&m.to_string()).unwrap(), m);
            direct = m.apply(&direct).unwrap();
        }
        let text: String = log.iter().map(|m| format!("{m}\n")).collect();
        prop_assert_eq!(replay(&kb, &text).unwrap(), direct);
    }

    #[test]
    fn triple_files_round_trip(ts in proptest::collection::vec(triple(), 0..30)) {
        prop_assert_eq!(parse_triples(&format_triples(&ts), "mem").unwrap(), ts);
    }

    #[test]
    fn distant_label_is_lowest_matching_head(
        ts in proptest::collection::vec(triple(), 0..40),
        ctx in proptest::collection::vec(0..12u32, 0..5),
        answer in 0..12u32,
    ) {
        let kb = kb_of(&ts);
        let ctx: Vec<EntityId> = ctx.into_iter().map(EntityId).collect();
        let answer = EntityId(answer);
        let mut brute = 0;
        for (i, (h, tail)) in kb.heads().iter().zip(kb.tails()).enumerate().skip(1) {
            if ctx.contains(&h.subject) && tail.contains(answer) {
                brute = i;
                break;
            }
        }
        prop_assert_eq!(kb.distant_label(&ctx, answer).unwrap(), brute);
    }

    #[test]
    fn top_k_agrees_with_a_full_sort(scores in proptest::collection::vec(-4i32..4, 1..60), k in 1usize..70) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 * 0.5).collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let got: Vec<usize> = top_k(&scores, k).into_iter().map(|(i, _)| i).collect();
        prop_assert_eq!(got, order[..k.min(scores.len())].to_vec());
    }
}

#[test]
fn invalid_ids_are_rejected_without_changing_the_base() {
    let kb = kb_of(&[Triple::new(0, 0, 1)]);
    assert!(kb.inject_fact(Triple::new(12, 0, 1)).is_err());
    assert!(kb.inject_fact(Triple::new(0, 3, 1)).is_err());
    let head = HeadPair {
        subject: EntityId(0),
        relation: RelationId(0),
    };
    assert!(kb.overwrite_tail(head, &[EntityId(99)]).is_err());
    assert!(kb.overwrite_tail(HeadPair::NULL, &[EntityId(1)]).is_err());
    assert_eq!(kb.num_triples(), 1);
}
