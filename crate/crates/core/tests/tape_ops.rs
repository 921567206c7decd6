//! Every tape op against central finite differences, through a random linear
//! probe `L · op(x) · C` so that all output elements contribute.

use fae_core::numcore::{Segment, Tape, Tensor, Var};
use fae_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).norm();
    diff / a.norm().max(b.norm()).max(1e-5)
}

fn probed(
    inputs: &[Tensor],
    op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    probe: &mut Option<(Tensor, Tensor)>,
    rng: &mut ChaCha8Rng,
) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars).expect("op");
    let (r, c) = (tape.value(out).rows(), tape.value(out).cols());
    let (l, cc) = probe.get_or_insert_with(|| {
        (
            Tensor::randn(&[1, r], 1.0, rng),
            Tensor::randn(&[c, 1], 1.0, rng),
        )
    });
    let lv = tape.constant(l.clone());
    let cv = tape.constant(cc.clone());
    let left = tape.matmul(lv, out).unwrap();
    let y = tape.matmul(left, cv).unwrap();
    (tape, vars, y)
}

fn check(
    name: &str,
    inputs: Vec<Tensor>,
    op: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let mut probe = None;
    let (mut tape, vars, y) = probed(&inputs, op, &mut probe, &mut rng);
    let grads = tape.backward(y).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut eval = |delta: f64| {
                let mut xs = inputs.clone();
                xs[i].data_mut()[j] += delta;
                let (tape, _, y) = probed(&xs, op, &mut probe, &mut rng);
                tape.value(y).item()
            };
            numeric.data_mut()[j] = (eval(H) - eval(-H)) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{name} input {i} seed {seed}: rel err {e:e}");
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

fn each_seed(f: impl Fn(u64, &mut ChaCha8Rng)) {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

#[test]
fn matmul_variants() {
    each_seed(|s, rng| {
        let (m, k, n) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        check(
            "matmul",
            vec![randn(rng, m, k), randn(rng, k, n)],
            &|t, v| t.matmul(v[0], v[1]),
            s,
        );
        check(
            "matmul_nt",
            vec![randn(rng, m, k), randn(rng, n, k)],
            &|t, v| t.matmul_nt(v[0], v[1]),
            s,
        );
    });
}

#[test]
fn elementwise_and_broadcast() {
    each_seed(|s, rng| {
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
        check(
            "add",
            vec![randn(rng, m, n), randn(rng, m, n)],
            &|t, v| t.add(v[0], v[1]),
            s,
        );
        check(
            "add_bias",
            vec![randn(rng, m, n), randn(rng, 1, n)],
            &|t, v| t.add_bias(v[0], v[1]),
            s,
        );
        check(
            "affine",
            vec![randn(rng, m, n)],
            &|t, v| t.affine(v[0], -1.7, 0.3),
            s,
        );
        check(
            "scale_by",
            vec![randn(rng, 1, 1), randn(rng, m, n)],
            &|t, v| t.scale_by(v[0], v[1]),
            s,
        );
        check(
            "scale_rows",
            vec![randn(rng, 1, m), randn(rng, m, n)],
            &|t, v| t.scale_rows(v[0], v[1]),
            s,
        );
        check("gelu", vec![randn(rng, m, n)], &|t, v| t.gelu(v[0]), s);
        check(
            "sum",
            vec![randn(rng, m, n), randn(rng, m, n), randn(rng, m, n)],
            &|t, v| t.sum(v),
            s,
        );
        check(
            "sum_all",
            vec![randn(rng, m, n)],
            &|t, v| t.sum_all(v[0]),
            s,
        );
    });
}

#[test]
fn indexing_and_concatenation() {
    each_seed(|s, rng| {
        let (m, n) = (rng.gen_range(2..5), rng.gen_range(1..5));
        let rows: Vec<usize> = (0..4).map(|_| rng.gen_range(0..m)).collect();
        let elems: Vec<(usize, usize)> = (0..5)
            .map(|_| (rng.gen_range(0..m), rng.gen_range(0..n)))
            .collect();
        let targets: Vec<(usize, usize)> = (0..3).map(|i| (i, rng.gen_range(0..m))).collect();
        let q = rng.gen_range(1..4);
        check(
            "gather_rows",
            vec![randn(rng, m, n)],
            &|t, v| t.gather_rows(v[0], &rows),
            s,
        );
        check(
            "gather_elems",
            vec![randn(rng, m, n)],
            &|t, v| t.gather_elems(v[0], &elems),
            s,
        );
        check(
            "concat_cols",
            vec![randn(rng, m, n), randn(rng, m, q)],
            &|t, v| t.concat_cols(v[0], v[1]),
            s,
        );
        check(
            "concat_rows",
            vec![randn(rng, m, n), randn(rng, q, n)],
            &|t, v| t.concat_rows(v),
            s,
        );
        check(
            "scatter_add_rows",
            vec![randn(rng, m, n), randn(rng, 3, n)],
            &|t, v| t.scatter_add_rows(v[0], v[1], &targets),
            s,
        );
    });
}

#[test]
fn normalization_and_losses() {
    each_seed(|s, rng| {
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(2..6));
        check(
            "layer_norm",
            vec![randn(rng, m, n), randn(rng, 1, n), randn(rng, 1, n)],
            &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
            s,
        );
        check(
            "softmax",
            vec![randn(rng, m, n)],
            &|t, v| t.softmax(v[0]),
            s,
        );
        let targets: Vec<Vec<(usize, f64)>> = (0..m)
            .map(|_| {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                vec![(a, 0.5), (b, 0.5)]
            })
            .collect();
        check(
            "cross_entropy",
            vec![randn(rng, m, n)],
            &|t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &targets)
            },
            s,
        );
    });
}

#[test]
fn segment_attention_matches_finite_differences() {
    each_seed(|s, rng| {
        let heads = rng.gen_range(1..3);
        let d = heads * rng.gen_range(1..3);
        let lens = [rng.gen_range(1..4), rng.gen_range(1..4)];
        let segments = vec![
            Segment {
                start: 0,
                len: lens[0],
            },
            Segment {
                start: lens[0],
                len: lens[1],
            },
        ];
        let rows = lens[0] + lens[1];
        check(
            "segment_attention",
            vec![
                randn(rng, rows, d),
                randn(rng, rows, d),
                randn(rng, rows, d),
            ],
            &|t, v| t.segment_attention(v[0], v[1], v[2], &segments, heads),
            s,
        );
    });
}
