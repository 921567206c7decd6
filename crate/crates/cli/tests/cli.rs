use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const TINY: &str = "\
seed = 3
world.n_entities = 40
world.n_relations = 3
world.n_facts = 80
world.text_only_facts = 10
world.vocab_size = 32
model.d_t = 16
model.d_e = 16
model.d_a = 16
model.layers = 2
model.heads = 2
model.d_ff = 32
train.batch_size = 8
train.pretrain_steps = 20
train.finetune_steps = 20
train.eval_every = 5
protocol.n_withheld = 3
protocol.n_updates = 3
";

fn fae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn fae")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn genworld_writes_every_artifact_and_counts() {
    let dir = setup();
    let o = fae(
        dir.path(),
        &["--config", "tiny.cfg", "genworld", "--out", "w"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "world.json",
        "corpus.jsonl",
        "questions.jsonl",
        "kb.tsv",
        "entities.tsv",
        "relations.tsv",
        "manifest.txt",
    ] {
        assert!(dir.path().join("w").join(f).is_file(), "missing {f}");
    }
    let text = stdout(&o);
    assert!(text.contains("entities: 40"));
    assert!(text.contains("kb facts: 80"));

    let again = fae(
        dir.path(),
        &["--config", "tiny.cfg", "genworld", "--out", "w"],
    );
    assert!(again.status.success());
    let runs: Vec<_> = fs::read_dir(dir.path().join("w"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("run-"))
        .collect();
    assert_eq!(runs.len(), 1);
    let a = fs::read(dir.path().join("w/kb.tsv")).unwrap();
    let b = fs::read(runs[0].path().join("kb.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_and_validation_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(fae(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(
        fae(dir.path(), &["--config", "nope.cfg", "genworld"])
            .status
            .code(),
        Some(1)
    );
    fs::write(dir.path().join("bad.cfg"), "model.colour = 3\n").unwrap();
    let o = fae(dir.path(), &["--config", "bad.cfg", "genworld"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.cfg:1"));
    let o = fae(dir.path(), &["--config", "tiny.cfg", "eval"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn kb_edits_are_logged_and_replay_reproduces_them() {
    let dir = setup();
    let p = dir.path();
    assert!(fae(p, &["--config", "tiny.cfg", "genworld", "--out", "w"])
        .status
        .success());
    fs::copy(p.join("w/kb.tsv"), p.join("kb.tsv")).unwrap();

    let o = fae(
        p,
        &[
            "--config", "tiny.cfg", "kb", "inject", "1", "0", "0", "--kb", "kb.tsv",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("head (1, 0)"));
    let o = fae(
        p,
        &[
            "--config",
            "tiny.cfg",
            "kb",
            "overwrite",
            "25",
            "0",
            "1,2",
            "--kb",
            "kb.tsv",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("tail [1, 2]"));
    let log = fs::read_to_string(p.join("kb.tsv.mutations")).unwrap();
    assert_eq!(log, "INJECT 1 0 0\nOVERWRITE 25 0 1,2\n");

    let o = fae(
        p,
        &[
            "--config",
            "tiny.cfg",
            "kb",
            "replay",
            "--log",
            "kb.tsv.mutations",
            "--kb",
            "w/kb.tsv",
            "--out",
            "kb2.tsv",
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read(p.join("kb.tsv")).unwrap(),
        fs::read(p.join("kb2.tsv")).unwrap()
    );

    let o = fae(
        p,
        &[
            "--config", "tiny.cfg", "kb", "inject", "Nobody", "0", "1", "--kb", "kb.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_finetune_eval_and_repl_round_trip() {
    let dir = setup();
    let p = dir.path();
    let o = fae(p, &["--config", "tiny.cfg", "pretrain", "--out", "pre"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("pre/pretrain.ckpt").is_file());

    let o = fae(
        p,
        &[
            "--config",
            "tiny.cfg",
            "finetune",
            "--checkpoint",
            "pre/pretrain.ckpt",
            "--out",
            "ft",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("entity/relation digest unchanged"));

    let o = fae(
        p,
        &[
            "--config",
            "tiny.cfg",
            "eval",
            "--checkpoint",
            "ft/finetune.ckpt",
            "--out",
            "ev",
        ],
    );
    assert!(o.status.success());
    let report = fs::read_to_string(p.join("ev/eval.jsonl")).unwrap();
    assert!(report
        .lines()
        .next()
        .unwrap()
        .contains("\"record\":\"summary\""));
    assert_eq!(report.lines().count(), 1 + 87);

    let mut child = Command::new(env!("CARGO_BIN_EXE_fae"))
        .current_dir(p)
        .args([
            "--config",
            "tiny.cfg",
            "repl",
            "--checkpoint",
            "ft/finetune.ckpt",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"ask 0 1\nask 9 1\nfrobnicate\ntrace on\ninject 1 0 2\nask 0 1\ndigest\nquit\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("answer: ").count(), 2);
    assert!(text.contains("error: not found"));
    assert!(text.contains("usage error"));
    assert!(text.contains("lambda: "));
    assert!(text.contains("ok: INJECT 1 0 2"));
    assert!(text.contains("parameter digest: "));
}

#[test]
fn experiment_writes_all_condition_reports() {
    let dir = setup();
    let o = fae(
        dir.path(),
        &["--config", "tiny.cfg", "experiment", "--out", "x"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for c in [
        "heldout",
        "full",
        "filter",
        "inject",
        "baseline",
        "update",
        "unmodified",
    ] {
        assert!(
            dir.path().join("x").join(format!("{c}.jsonl")).is_file(),
            "missing {c}"
        );
    }
    assert!(dir.path().join("x/summary.txt").is_file());
    assert!(stdout(&o).contains("filter/inject parameter digests equal: true"));
}
