//! Command-line front end: world generation, training, evaluation, knowledge
//! base edits and an interactive query loop.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use fae_core::datagen::{
    make_question, read_jsonl, write_jsonl, write_vocab_files, write_world, Paragraph, Split, World,
};
use fae_core::factmem::FactMemoryIndex;
use fae_core::kb::{
    format_triples, read_triples, replay, EntityId, GroupedKb, HeadPair, Mutation, RelationId,
    Triple,
};
use fae_core::model::{ENTITY_TABLE, RELATION_TABLE};
use fae_core::numcore::ParamStore;
use fae_core::trainer::{
    evaluate, finetune, predict, prepare, pretrain, run_pipeline, summary_table, CheckpointPolicy,
    ExperimentConfig, PreparedData,
};
use fae_core::{FaeError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "fae",
    version,
    about = "Facts-as-experts language model toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment manifest (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; a fresh run directory is created inside it if it exists.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Triple file replacing the generated knowledge base.
    #[arg(long, global = true, value_name = "PATH")]
    pub kb: Option<PathBuf>,
    /// Corpus file replacing the generated corpus.
    #[arg(long, global = true, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    /// Retrieved head pairs per query.
    #[arg(long, global = true, value_name = "N")]
    pub k: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic world, corpus, questions and knowledge base.
    Genworld,
    /// Pretrain on the cloze corpus.
    Pretrain,
    /// Finetune a checkpoint on training questions.
    Finetune,
    /// Evaluate a checkpoint on every question split.
    Eval,
    /// Edit a knowledge base file.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Interactive session over a checkpoint and knowledge base.
    Repl,
    /// Run the Full, Filter, Inject and Update experiments.
    Experiment,
}

#[derive(Subcommand, Debug)]
pub enum KbAction {
    /// Add a fact.
    Inject {
        subject: String,
        relation: String,
        object: String,
        /// Mutation log to append to (default: `<kb>.mutations`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Replace the tail set of a head pair.
    Overwrite {
        subject: String,
        relation: String,
        /// Comma-separated objects.
        objects: String,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Apply a mutation log to `--kb` and write the result to `--out`.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Genworld => cmd_genworld(c, out),
        Command::Pretrain => cmd_pretrain(c, out),
        Command::Finetune => cmd_finetune(c, out),
        Command::Eval => cmd_eval(c, out),
        Command::Kb { action } => cmd_kb(c, action, out),
        Command::Repl => cmd_repl(c, stdin, out),
        Command::Experiment => cmd_experiment(c, out),
    }
}

fn w(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| FaeError::io("<stdout>", e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| FaeError::io(path, e))
}

pub fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            require(p)?;
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string(), "--seed")?;
    }
    if let Some(k) = c.k {
        cfg.set("train.k", &k.to_string(), "--k")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(FaeError::NotFound(format!(
            "input {} does not exist",
            p.display()
        )))
    }
}

/// A staging directory renamed into place once a command succeeds.
struct RunDir {
    staging: PathBuf,
    target: PathBuf,
}

impl RunDir {
    fn create(out: Option<&Path>, default: &str) -> Result<RunDir> {
        let out = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(default));
        let target = if out.exists() {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0);
            out.join(format!("run-{stamp}"))
        } else {
            out
        };
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "run".into());
        let staging = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        fs::create_dir_all(&staging).map_err(|e| FaeError::io(&staging, e))?;
        Ok(RunDir { staging, target })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    fn commit(self) -> Result<PathBuf> {
        fs::rename(&self.staging, &self.target).map_err(|e| FaeError::io(&self.target, e))?;
        Ok(self.target)
    }
}

/// Generated data with `--corpus` and `--kb` overrides applied.
fn load_data(c: &Common, cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut data = prepare(cfg)?;
    if let Some(p) = &c.corpus {
        require(p)?;
        data.corpus = read_jsonl::<Paragraph>(p)?;
    }
    if let Some(p) = &c.kb {
        data.kb = load_kb(p, &data.world, cfg)?;
    }
    Ok(data)
}

fn load_kb(path: &Path, world: &World, cfg: &ExperimentConfig) -> Result<GroupedKb> {
    require(path)?;
    let triples = read_triples(path)?;
    GroupedKb::group_facts(
        &triples,
        world.config.bounds(),
        cfg.train.tail_cap,
        cfg.world.seed,
    )
}

fn load_checkpoint(c: &Common, cfg: &ExperimentConfig) -> Result<ParamStore> {
    let p = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| FaeError::Validation("--checkpoint is required".into()))?;
    require(p)?;
    let (store, header) = ParamStore::load(p)?;
    if header.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint was written under a different manifest ({})",
            header.config_hash
        );
    }
    Ok(store)
}

fn cmd_genworld(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let data = prepare(&cfg)?;
    let dir = RunDir::create(c.out.as_deref(), "world")?;
    write_world(&dir.path("world.json"), &data.world)?;
    write_jsonl(&dir.path("corpus.jsonl"), &data.corpus)?;
    write_jsonl(&dir.path("questions.jsonl"), &data.questions)?;
    write_file(&dir.path("kb.tsv"), format_triples(&data.kb.triples()))?;
    write_vocab_files(&dir.staging, &data.world)?;
    write_file(&dir.path("manifest.txt"), cfg.to_manifest())?;
    let target = dir.commit()?;
    let count = |s: Split| data.questions.iter().filter(|q| q.split == s).count();
    w(out, format!("entities: {}", data.world.entities.len()))?;
    w(out, format!("relations: {}", data.world.relations.len()))?;
    w(out, format!("kb facts: {}", data.kb.num_triples()))?;
    w(
        out,
        format!("text-only facts: {}", data.world.text_only_facts.len()),
    )?;
    w(out, format!("paragraphs: {}", data.corpus.len()))?;
    w(
        out,
        format!(
            "questions: {} (train {}, dev {}, test {})",
            data.questions.len(),
            count(Split::Train),
            count(Split::Dev),
            count(Split::Test)
        ),
    )?;
    w(out, format!("written to {}", target.display()))
}

fn cmd_pretrain(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(c, &cfg)?;
    let model = cfg.model_config(&data.world);
    let mut store = fae_core::model::init_params(&model, cfg.train.seed)?;
    let dir = RunDir::create(c.out.as_deref(), "pretrain")?;
    let policy = CheckpointPolicy {
        dir: dir.staging.clone(),
        every: 500,
        config_hash: cfg.hash(),
    };
    let losses = pretrain(
        &mut store,
        &model,
        &cfg.train,
        &data.corpus,
        &data.kb,
        Some(&policy),
    )?;
    store.save(&dir.path("pretrain.ckpt"), &cfg.hash(), losses.len())?;
    write_jsonl(&dir.path("losses.jsonl"), &losses)?;
    write_file(&dir.path("manifest.txt"), cfg.to_manifest())?;
    let target = dir.commit()?;
    if let Some(l) = losses.last() {
        w(
            out,
            format!(
                "final loss {:.4} (ent {:.4}, ctx {:.4}, fact {:.4}, ans {:.4})",
                l.total, l.ent, l.ctx, l.fact, l.ans
            ),
        )?;
    }
    w(out, format!("parameter digest: {}", store.digest()))?;
    w(
        out,
        format!("checkpoint: {}", target.join("pretrain.ckpt").display()),
    )
}

fn cmd_finetune(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(c, &cfg)?;
    let model = cfg.model_config(&data.world);
    let mut store = load_checkpoint(c, &cfg)?;
    let frozen_before = store.digest_of(&[ENTITY_TABLE, RELATION_TABLE])?;
    let dir = RunDir::create(c.out.as_deref(), "finetune")?;
    let policy = CheckpointPolicy {
        dir: dir.staging.clone(),
        every: cfg.train.eval_every,
        config_hash: cfg.hash(),
    };
    let log = finetune(
        &mut store,
        &model,
        &cfg.train,
        &data.world,
        &data.kb,
        &data.split(Split::Train),
        &data.split(Split::Dev),
        Some(&policy),
    )?;
    let frozen_after = store.digest_of(&[ENTITY_TABLE, RELATION_TABLE])?;
    store.save(&dir.path("finetune.ckpt"), &cfg.hash(), log.best_step)?;
    write_file(
        &dir.path("finetune.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    write_file(&dir.path("manifest.txt"), cfg.to_manifest())?;
    let target = dir.commit()?;
    w(
        out,
        format!(
            "steps run: {}, best step: {}",
            log.losses.len(),
            log.best_step
        ),
    )?;
    if let Some((_, acc)) = log.dev_curve.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        w(out, format!("best dev accuracy: {acc:.3}"))?;
    }
    let same = if frozen_before == frozen_after {
        "unchanged"
    } else {
        "CHANGED"
    };
    w(
        out,
        format!("entity/relation digest {same}: {frozen_after}"),
    )?;
    w(
        out,
        format!("checkpoint: {}", target.join("finetune.ckpt").display()),
    )
}

fn cmd_eval(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(c, &cfg)?;
    let model = cfg.model_config(&data.world);
    let store = load_checkpoint(c, &cfg)?;
    let index = FactMemoryIndex::build(&data.kb, &store)?;
    let report = evaluate(
        &store,
        &model,
        &data.world,
        &index,
        &data.questions,
        cfg.train.k,
        "eval",
        &cfg.hash(),
    )?;
    let dir = RunDir::create(c.out.as_deref(), "eval")?;
    report.write(&dir.staging)?;
    let table = summary_table(&[&report]);
    write_file(&dir.path("summary.txt"), &table)?;
    let target = dir.commit()?;
    w(out, table.trim_end())?;
    w(
        out,
        format!("report: {}", target.join("eval.jsonl").display()),
    )
}

fn resolve_entity(world: &World, s: &str) -> Result<EntityId> {
    if let Ok(id) = s.parse::<u32>() {
        if (id as usize) < world.entities.len() {
            return Ok(EntityId(id));
        }
        return Err(FaeError::NotFound(format!("entity id {id} out of range")));
    }
    world
        .entity_by_name(s)
        .ok_or_else(|| FaeError::NotFound(format!("unknown entity {s:?}")))
}

fn resolve_relation(world: &World, s: &str) -> Result<RelationId> {
    if let Ok(id) = s.parse::<u32>() {
        if (id as usize) < world.relations.len() {
            return Ok(RelationId(id));
        }
        return Err(FaeError::NotFound(format!("relation id {id} out of range")));
    }
    world
        .relation_by_name(s)
        .ok_or_else(|| FaeError::NotFound(format!("unknown relation {s:?}")))
}

fn resolve_mutation(world: &World, words: &[&str]) -> Result<Mutation> {
    match words {
        ["inject", s, r, o] => Ok(Mutation::Inject(Triple {
            subject: resolve_entity(world, s)?,
            relation: resolve_relation(world, r)?,
            object: resolve_entity(world, o)?,
        })),
        ["overwrite", s, r, objs] => {
            let objects = objs
                .split(',')
                .filter(|x| !x.is_empty())
                .map(|o| resolve_entity(world, o))
                .collect::<Result<Vec<_>>>()?;
            let head = HeadPair {
                subject: resolve_entity(world, s)?,
                relation: resolve_relation(world, r)?,
            };
            Ok(Mutation::Overwrite { head, objects })
        }
        _ => Err(FaeError::Usage(format!(
            "cannot parse mutation {:?}",
            words.join(" ")
        ))),
    }
}

fn describe_head(kb: &GroupedKb, head: HeadPair) -> String {
    match kb.position(&head) {
        Some(i) => {
            let tail: Vec<String> = kb.tail(i).objects().iter().map(|o| o.to_string()).collect();
            format!("head {head} at index {i}: tail [{}]", tail.join(", "))
        }
        None => format!("head {head} absent"),
    }
}

fn append_log(path: &Path, m: &Mutation) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FaeError::io(path, e))?;
    writeln!(f, "{m}").map_err(|e| FaeError::io(path, e))
}

fn cmd_kb(c: &Common, action: &KbAction, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let world = fae_core::datagen::generate_world(&cfg.world)?;
    let base =
        c.kb.as_ref()
            .ok_or_else(|| FaeError::Validation("--kb is required".into()))?;
    let kb = load_kb(base, &world, &cfg)?;
    let target = c.out.clone().unwrap_or_else(|| base.clone());
    let default_log = PathBuf::from(format!("{}.mutations", target.display()));
    let (new_kb, head, log) = match action {
        KbAction::Inject {
            subject,
            relation,
            object,
            log,
        } => {
            let m = resolve_mutation(&world, &["inject", subject, relation, object])?;
            let head = match &m {
                Mutation::Inject(t) => t.head(),
                Mutation::Overwrite { head, .. } => *head,
            };
            let new = m.apply(&kb)?;
            (new, head, Some((log.clone().unwrap_or(default_log), m)))
        }
        KbAction::Overwrite {
            subject,
            relation,
            objects,
            log,
        } => {
            let m = resolve_mutation(&world, &["overwrite", subject, relation, objects])?;
            let head = match &m {
                Mutation::Overwrite { head, .. } => *head,
                Mutation::Inject(t) => t.head(),
            };
            let new = m.apply(&kb)?;
            (new, head, Some((log.clone().unwrap_or(default_log), m)))
        }
        KbAction::Replay { log } => {
            require(log)?;
            let text = fs::read_to_string(log).map_err(|e| FaeError::io(log, e))?;
            let new = replay(&kb, &text)?;
            let n = text
                .lines()
                .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
                .count();
            w(out, format!("replayed {n} mutations"))?;
            (new, HeadPair::NULL, None)
        }
    };
    write_file(&target, format_triples(&new_kb.triples()))?;
    if let Some((log_path, m)) = log {
        append_log(&log_path, &m)?;
        w(out, describe_head(&new_kb, head))?;
    }
    w(
        out,
        format!(
            "kb version {} written to {}",
            new_kb.version_id(),
            target.display()
        ),
    )
}

fn cmd_repl(c: &Common, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let data = load_data(c, &cfg)?;
    let model = cfg.model_config(&data.world);
    let store = load_checkpoint(c, &cfg)?;
    let world = &data.world;
    let mut kb = data.kb.clone();
    let mut index = FactMemoryIndex::build(&kb, &store)?;
    let mut trace = false;
    let k = cfg.train.k;
    w(out, "commands: ask <relation> <entity> | inject s r o | overwrite s r o1,o2 | trace on|off | digest | quit")?;
    let mut line = String::new();
    loop {
        write!(out, "> ")
            .and_then(|_| out.flush())
            .map_err(|e| FaeError::io("<stdout>", e))?;
        line.clear();
        let n = stdin
            .read_line(&mut line)
            .map_err(|e| FaeError::io("<stdin>", e))?;
        if n == 0 {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        let result: Result<()> = (|| match words.as_slice() {
            [] => Ok(()),
            ["quit"] | ["exit"] => Err(FaeError::Usage("quit".into())),
            ["trace", "on"] => {
                trace = true;
                w(out, "trace on")
            }
            ["trace", "off"] => {
                trace = false;
                w(out, "trace off")
            }
            ["digest"] => w(out, format!("parameter digest: {}", store.digest())),
            ["ask", rel, ent] => {
                let r = resolve_relation(world, rel)?;
                let e = resolve_entity(world, ent)?;
                let answers: Vec<EntityId> = kb
                    .lookup(&HeadPair {
                        subject: e,
                        relation: r,
                    })
                    .map(|t| t.objects().to_vec())
                    .filter(|v| !v.is_empty())
                    .unwrap_or_else(|| vec![EntityId(0)]);
                let ex = make_question(world, &kb, e, r, &answers, 0)?;
                let p = predict(&store, &model, &index, &[ex], k)?.remove(0);
                w(out, format!("answer: {}", world.entity(p.entity).name))?;
                if trace {
                    let top = p.detail.retrieved[0];
                    let head = kb.head(top);
                    let head_text = if head.is_null() {
                        "null".to_string()
                    } else {
                        format!(
                            "({} {})",
                            world.entity(head.subject).name,
                            world.relation(head.relation).name
                        )
                    };
                    w(out, format!("lambda: {:.4}", p.detail.lambda))?;
                    w(out, format!("retrieved: {head_text} [index {top}]"))?;
                }
                Ok(())
            }
            [cmd @ ("inject" | "overwrite"), ..] => {
                let _ = cmd;
                let m = resolve_mutation(world, &words)?;
                kb = m.apply(&kb)?;
                index.refresh(&store, &kb)?;
                w(out, format!("ok: {m}; kb version {}", kb.version_id()))
            }
            _ => Err(FaeError::Usage(format!(
                "unrecognized command {:?}",
                line.trim()
            ))),
        })();
        match result {
            Ok(()) => {}
            Err(FaeError::Usage(m)) if m == "quit" => break,
            Err(FaeError::Usage(m)) => w(out, format!("usage error: {m}"))?,
            Err(e) => w(out, format!("error: {e}"))?,
        }
    }
    Ok(())
}

fn cmd_experiment(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let result = run_pipeline(&cfg)?;
    let dir = RunDir::create(c.out.as_deref(), "experiment")?;
    result.write(&dir.staging)?;
    write_file(&dir.path("manifest.txt"), cfg.to_manifest())?;
    let target = dir.commit()?;
    w(out, result.summary().trim_end())?;
    w(
        out,
        format!(
            "filter/inject parameter digests equal: {}",
            result.injection.digest_before == result.injection.digest_after
        ),
    )?;
    w(out, format!("reports: {}", target.display()))
}
