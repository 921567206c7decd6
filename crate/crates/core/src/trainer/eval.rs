use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::datagen::{ClozeExample, Question, Split, World};
use crate::error::{FaeError, Result};
use crate::factmem::{FactMemoryIndex, FactPrediction};
use crate::kb::{EntityId, GroupedKb, HeadPair};
use crate::model::{argmax, forward, Batch, ModelConfig};
use crate::numcore::{ParamStore, Tape};

const EVAL_BATCH: usize = 64;

/// A prediction together with the integration internals that produced it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub entity: EntityId,
    pub detail: FactPrediction,
}

/// Forward passes over `examples` against a prebuilt index; no gradients.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    index: &FactMemoryIndex,
    examples: &[ClozeExample],
    k: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&ClozeExample> = chunk.iter().collect();
        let batch = Batch::new(&refs, cfg.max_len)?;
        let mut tape = Tape::new();
        let keys = tape.constant(index.keys().clone());
        let fwd = forward(&mut tape, store, cfg, &batch, index.kb(), keys, k)?;
        for detail in fwd.integration.predictions(&tape) {
            out.push(Prediction {
                entity: EntityId(argmax(&detail.answer_probs) as u32),
                detail,
            });
        }
    }
    Ok(out)
}

/// Per-question record of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuestionTrace {
    pub id: usize,
    pub split: Split,
    pub subject: EntityId,
    pub relation: u32,
    pub gold: Vec<EntityId>,
    pub predicted: EntityId,
    pub correct: bool,
    pub lambda: f64,
    /// Top-ranked head index and its head pair (`None` for the null row).
    pub retrieved: usize,
    pub retrieved_head: Option<(u32, u32)>,
    /// The top-ranked head is the question's own head pair.
    pub gold_head_retrieved: bool,
    pub kb_supported: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SplitAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub condition: String,
    pub config_hash: String,
    pub kb_version: String,
    pub param_digest: String,
    pub accuracy: BTreeMap<String, SplitAccuracy>,
    pub traces: Vec<QuestionTrace>,
}

impl ExperimentReport {
    /// Accuracy over all traced questions.
    pub fn overall(&self) -> f64 {
        accuracy_of(self.traces.iter())
    }

    pub fn mean_lambda<'a>(traces: impl Iterator<Item = &'a QuestionTrace>) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for t in traces {
            s += t.lambda;
            n += 1;
        }
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }

    /// Summary record followed by one record per question.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            condition: &'a str,
            config_hash: &'a str,
            kb_version: &'a str,
            param_digest: &'a str,
            accuracy: &'a BTreeMap<String, SplitAccuracy>,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            record: &'static str,
            #[serde(flatten)]
            trace: &'a QuestionTrace,
        }
        let mut out = serde_json::to_string(&Summary {
            record: "summary",
            condition: &self.condition,
            config_hash: &self.config_hash,
            kb_version: &self.kb_version,
            param_digest: &self.param_digest,
            accuracy: &self.accuracy,
        })?;
        out.push('\n');
        for t in &self.traces {
            out.push_str(&serde_json::to_string(&Line {
                record: "trace",
                trace: t,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.jsonl", self.condition));
        fs::write(&path, self.to_jsonl()?).map_err(|e| FaeError::io(&path, e))
    }
}

pub fn accuracy_of<'a>(traces: impl Iterator<Item = &'a QuestionTrace>) -> f64 {
    let (mut c, mut n) = (0usize, 0usize);
    for t in traces {
        c += t.correct as usize;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

/// Fixed-width table of per-split accuracy for a set of reports.
pub fn summary_table(reports: &[&ExperimentReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<8} {:>8} {:>8} {:>9}",
        "condition", "split", "correct", "total", "accuracy"
    );
    for r in reports {
        for (split, a) in &r.accuracy {
            let _ = writeln!(
                s,
                "{:<12} {:<8} {:>8} {:>8} {:>9.3}",
                r.condition, split, a.correct, a.total, a.accuracy
            );
        }
    }
    s
}

/// Top-1 accuracy and traces for `questions`; a question is correct when the
/// predicted entity is any of its gold answers.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    world: &World,
    index: &FactMemoryIndex,
    questions: &[Question],
    k: usize,
    condition: &str,
    config_hash: &str,
) -> Result<ExperimentReport> {
    let kb = index.kb();
    let examples: Vec<ClozeExample> = questions
        .iter()
        .map(|q| q.to_example(world, kb))
        .collect::<Result<_>>()?;
    let preds = predict(store, cfg, index, &examples, k)?;
    let mut traces = Vec::with_capacity(questions.len());
    let mut accuracy: BTreeMap<String, SplitAccuracy> = BTreeMap::new();
    for (q, p) in questions.iter().zip(&preds) {
        let top = p.detail.retrieved[0];
        let head = kb.head(top);
        let correct = q.answers.contains(&p.entity);
        let own = HeadPair::new(q.subject.0, q.relation.0);
        traces.push(QuestionTrace {
            id: q.id,
            split: q.split,
            subject: q.subject,
            relation: q.relation.0,
            gold: q.answers.clone(),
            predicted: p.entity,
            correct,
            lambda: p.detail.lambda,
            retrieved: top,
            retrieved_head: (!head.is_null()).then_some((head.subject.0, head.relation.0)),
            gold_head_retrieved: top != 0 && head == own,
            kb_supported: kb.lookup(&own).is_some(),
        });
        let a = accuracy.entry(q.split.to_string()).or_default();
        a.total += 1;
        a.correct += correct as usize;
    }
    for a in accuracy.values_mut() {
        a.accuracy = a.correct as f64 / a.total as f64;
    }
    Ok(ExperimentReport {
        condition: condition.to_string(),
        config_hash: config_hash.to_string(),
        kb_version: kb.version_id(),
        param_digest: store.digest(),
        accuracy,
        traces,
    })
}

/// Accuracy on `questions` with a freshly built index; used for early stopping.
pub fn dev_accuracy(
    store: &ParamStore,
    cfg: &ModelConfig,
    world: &World,
    kb: &GroupedKb,
    questions: &[Question],
    k: usize,
) -> Result<f64> {
    let index = FactMemoryIndex::build(kb, store)?;
    let report = evaluate(store, cfg, world, &index, questions, k, "dev", "")?;
    Ok(report.overall())
}
