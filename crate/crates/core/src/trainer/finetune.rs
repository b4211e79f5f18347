//! The fine-tuning loop, evaluation and best-dev model selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentKind;
use crate::data::{BatchIterator, LabeledExample};
use crate::error::{Error, Result};
use crate::losses::{total_loss_on, HyperParams, LossBatch, LossBreakdown, Segments, TaskPair};
use crate::model::Model;
use crate::numeric::{adam_step, AdamState, Tape};
use crate::prompting::{build_prompt, predict_label, PromptTask};
use crate::rng::Streams;
use crate::tokenizer::{encode, TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "acc")]
    Accuracy,
    #[serde(rename = "f1")]
    F1,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "acc",
            Metric::F1 => "f1",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "acc" | "accuracy" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            _ => Err(Error::invalid(format!("unknown metric {s:?} (use acc or f1)"))),
        }
    }
}

pub fn encode_segments(text: &[String], vocab: &Vocab) -> Segments {
    text.iter().map(|t| encode(t, vocab)).collect()
}

/// Accuracy, or binary F1 of `positive` (`2PR/(P+R)`, 0 when `P+R = 0`).
pub fn score(predicted: &[usize], gold: &[usize], metric: Metric, num_labels: usize, positive: usize) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::invalid("prediction and gold counts differ"));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("cannot score an empty example list"));
    }
    match metric {
        Metric::Accuracy => {
            let ok = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
            Ok(ok as f64 / gold.len() as f64)
        }
        Metric::F1 => {
            if num_labels > 2 {
                return Err(Error::invalid(format!(
                    "F1 is defined for binary tasks; this task has {num_labels} labels"
                )));
            }
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fne = 0.0;
            for (&p, &g) in predicted.iter().zip(gold) {
                match (p == positive, g == positive) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fne += 1.0,
                    _ => {}
                }
            }
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
            if precision + recall == 0.0 {
                Ok(0.0)
            } else {
                Ok(2.0 * precision * recall / (precision + recall))
            }
        }
    }
}

/// Eval-mode predictions.
pub fn predict_all(model: &Model, vocab: &Vocab, examples: &[LabeledExample], task: &PromptTask) -> Result<Vec<usize>> {
    let eval_streams = Streams::new(0);
    examples
        .iter()
        .map(|ex| {
            let segs = encode_segments(&ex.text, vocab);
            let refs: Vec<&TokenSequence> = segs.iter().collect();
            let prompted = build_prompt(&refs, task, model.config().max_seq_len)?;
            Ok(predict_label(model, &prompted, &task.verbalizer, false, &eval_streams)?.0)
        })
        .collect()
}

pub fn evaluate(model: &Model, vocab: &Vocab, examples: &[LabeledExample], task: &PromptTask, metric: Metric) -> Result<f64> {
    if metric == Metric::F1 && task.num_labels() > 2 {
        return Err(Error::invalid(format!(
            "F1 is defined for binary tasks; this task has {} labels",
            task.num_labels()
        )));
    }
    let predicted = predict_all(model, vocab, examples, task)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    score(&predicted, &gold, metric, task.num_labels(), task.positive_label())
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Step of the returned model (the last step when there is no dev set).
    pub best_step: usize,
    pub best_dev_acc: Option<f64>,
    pub dev_history: Vec<(usize, f64)>,
    pub last: LossBreakdown,
}

/// Inputs for one fine-tuning run. The unlabeled side is text only.
pub struct FineTuneData<'a> {
    pub train: &'a [LabeledExample],
    pub dev: &'a [LabeledExample],
    pub unlabeled: &'a [&'a [String]],
}

/// `hp.steps` Adam steps on `L_s + λ1·L_st + λ2·L_ssl`. Dev accuracy is
/// measured every `eval_interval` steps and after the last step; the model
/// with the highest dev accuracy is returned, the earliest on ties.
#[allow(clippy::too_many_arguments)]
pub fn train_sflm(
    init: &Model,
    vocab: &Vocab,
    data: FineTuneData<'_>,
    tasks: TaskPair<'_>,
    hp: &HyperParams,
    kind: AugmentKind,
    streams: &Streams,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    hp.validate()?;
    kind.validate()?;
    let mut model = init.clone();
    model.set_dropout_rate(hp.dropout_rate)?;
    if hp.mu > 0 && data.unlabeled.is_empty() {
        return Err(Error::invalid("mu > 0 but no unlabeled examples were supplied"));
    }
    let labeled: Vec<(Segments, usize)> = data
        .train
        .iter()
        .map(|e| (encode_segments(&e.text, vocab), e.label))
        .collect();
    let unlabeled: Vec<Segments> = data.unlabeled.iter().map(|t| encode_segments(t, vocab)).collect();
    let mut batches = BatchIterator::new(labeled.len(), unlabeled.len(), hp.batch_size, hp.mu, &streams.child("batches"))?;
    let mut adam = AdamState::new(model.params());

    let mut best: Option<(f64, usize, Model)> = None;
    let mut dev_history = Vec::new();
    let mut last = LossBreakdown::default();
    for step in 1..=hp.steps {
        let batch = batches.next().expect("batch iterator is infinite");
        let loss_batch = LossBatch {
            labeled: batch.labeled.iter().map(|&i| (&labeled[i].0, labeled[i].1)).collect(),
            unlabeled: batch.unlabeled.iter().map(|&i| &unlabeled[i]).collect(),
        };
        let mut tape = Tape::new();
        let (total, breakdown) = total_loss_on(
            &mut tape,
            &model,
            &loss_batch,
            hp,
            kind,
            tasks,
            &streams.child("step").child(step),
        )?;
        if !breakdown.total.is_finite() {
            let texts: Vec<&[String]> = batch
                .labeled
                .iter()
                .map(|&i| data.train[i].text.as_slice())
                .chain(batch.unlabeled.iter().map(|&i| data.unlabeled[i]))
                .collect();
            return Err(Error::Divergence {
                step,
                dump: serde_json::json!({"loss": &breakdown, "batch": texts}).to_string(),
            });
        }
        let grads = tape.backward(total, model.params())?;
        drop(tape);
        adam_step(model.params_mut(), &grads, &mut adam, hp.lr)?;

        let mut dev_acc = None;
        if !data.dev.is_empty() && (step % hp.eval_interval == 0 || step == hp.steps) {
            let acc = evaluate(&model, vocab, data.dev, tasks.labeled, Metric::Accuracy)?;
            dev_history.push((step, acc));
            dev_acc = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, step, model.clone()));
            }
        }
        log(&StepLog {
            step,
            loss: breakdown.clone(),
            dev_acc,
        });
        last = breakdown;
    }
    Ok(match best {
        Some((acc, step, m)) => TrainOutcome {
            model: m,
            best_step: step,
            best_dev_acc: Some(acc),
            dev_history,
            last,
        },
        None => TrainOutcome {
            model,
            best_step: hp.steps,
            best_dev_acc: None,
            dev_history,
            last,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_and_f1_examples() {
        assert_eq!(score(&[0, 1, 1], &[0, 1, 1], Metric::Accuracy, 2, 1).unwrap(), 1.0);
        // TP = 1, FP = 1, FN = 0.
        let f1 = score(&[1, 1, 0], &[1, 0, 0], Metric::F1, 2, 1).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(score(&[0, 0], &[0, 0], Metric::F1, 2, 1).unwrap(), 0.0);
        assert!(score(&[0], &[0], Metric::F1, 3, 1).is_err());
        assert!(score(&[], &[], Metric::Accuracy, 2, 1).is_err());
    }

    #[test]
    fn metric_names() {
        assert_eq!("acc".parse::<Metric>().unwrap(), Metric::Accuracy);
        assert_eq!(Metric::F1.to_string(), "f1");
        assert_eq!(serde_json::to_string(&Metric::Accuracy).unwrap(), "\"acc\"");
        assert!("auc".parse::<Metric>().is_err());
    }
}
