//! Supervised prompt loss, confidence-gated self-training loss, MLM loss on
//! the strong view, and their weighted total.
//!
//! ```text
//! L     = L_s + λ1·L_st + λ2·L_ssl
//! L_s   = (1/B)  Σᵢ H(yᵢ, p(· | prompt(xᵢ)))
//! L_st  = (1/μB) Σᵢ 1(max qᵢ ≥ τ) · H(q̂ᵢ, p(· | prompt(A(uᵢ))))
//! L_ssl = (1/μB) Σᵢ mean over masked j of H(u_ij, p_vocab(· | prompt(A(uᵢ)), j))
//! ```
//!
//! `qᵢ` comes from a dropout-only pass over the unchanged sentence on a
//! separate tape, so nothing flows back through the pseudo-label.

use serde::{Deserialize, Serialize};

use crate::augment::{strong_view, AugmentKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{Tape, Var};
use crate::prompting::{argmax, build_prompt, class_probs_on, PromptTask, PromptedText};
use crate::rng::Streams;
use crate::tokenizer::TokenSequence;

/// Input segments of one example (one for single-sentence tasks, two for pairs).
pub type Segments = Vec<TokenSequence>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub lr: f64,
    pub batch_size: usize,
    pub mu: usize,
    pub n_per_class: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    /// Ratio used by the Mask strong view; replaces the ratio carried by
    /// `AugmentKind::Mask` during training.
    pub mask_ratio: f64,
    pub dropout_rate: f64,
    pub steps: usize,
    pub eval_interval: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 3e-4,
            batch_size: 4,
            mu: 4,
            n_per_class: 16,
            lambda1: 1.0,
            lambda2: 0.5,
            tau: 0.95,
            mask_ratio: 0.15,
            dropout_rate: 0.1,
            steps: 600,
            eval_interval: 50,
        }
    }
}

impl HyperParams {
    pub fn strong_kind(&self, kind: AugmentKind) -> AugmentKind {
        match kind {
            AugmentKind::Mask { .. } => AugmentKind::Mask { ratio: self.mask_ratio },
            k => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.n_per_class == 0 {
            problems.push("n_per_class must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            problems.push(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            problems.push("lambda1 and lambda2 must be non-negative".to_string());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            problems.push(format!("mask_ratio must be in (0, 1], got {}", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_string());
        }
        if self.eval_interval == 0 {
            problems.push("eval_interval must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_st: f64,
    pub l_ssl: f64,
    pub total: f64,
    pub retained: usize,
    pub mu_b: usize,
}

fn mean_on(tape: &mut Tape, terms: &[Var], count: usize) -> Result<Var> {
    let s = tape.add_n(terms)?;
    Ok(tape.scale(s, 1.0 / count as f64))
}

/// `(1/B) Σ H(yᵢ, class distribution at the mask slot)`.
pub fn supervised_loss_on(
    tape: &mut Tape,
    model: &Model,
    batch: &[(&PromptedText, usize)],
    task: &PromptTask,
    training: bool,
    streams: &Streams,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("supervised loss needs a non-empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (i, (prompted, label)) in batch.iter().enumerate() {
        let probs = class_probs_on(tape, model, prompted, &task.verbalizer, training, &streams.child(i))?;
        terms.push(tape.cross_entropy(probs, *label)?);
    }
    mean_on(tape, &terms, batch.len())
}

pub fn supervised_loss(
    model: &Model,
    batch: &[(&PromptedText, usize)],
    task: &PromptTask,
    training: bool,
    streams: &Streams,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let l = supervised_loss_on(&mut tape, model, batch, task, training, streams)?;
    Ok(tape.scalar(l))
}

/// Mean MLM cross-entropy at `positions` of a prompt whose hidden states are
/// already on the tape. Zero positions give a constant 0.
pub fn mlm_loss_on(
    tape: &mut Tape,
    model: &Model,
    hidden: Var,
    positions: &[usize],
    original_ids: &[usize],
) -> Result<Var> {
    if positions.len() != original_ids.len() {
        return Err(Error::invalid(format!(
            "{} masked positions but {} original ids",
            positions.len(),
            original_ids.len()
        )));
    }
    if positions.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let logits = model.logits_on(tape, hidden, positions)?;
    let probs = tape.softmax_rows(logits)?;
    let v = model.config().vocab_size;
    let mut terms = Vec::with_capacity(positions.len());
    for (row, &target) in original_ids.iter().enumerate() {
        // Cross-entropy indexes the flattened [rows, V] buffer.
        terms.push(tape.cross_entropy(probs, row * v + target)?);
    }
    mean_on(tape, &terms, positions.len())
}

/// MLM loss of one prompted sequence (value only).
pub fn mlm_loss(
    model: &Model,
    prompted: &PromptedText,
    positions: &[usize],
    original_ids: &[usize],
    training: bool,
    streams: &Streams,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let hidden = model.hidden_on(&mut tape, &prompted.seq.ids, training, streams)?;
    let l = mlm_loss_on(&mut tape, model, hidden, positions, original_ids)?;
    Ok(tape.scalar(l))
}

/// Class distribution `q` of the weak view (dropout pass, no gradient).
pub fn weak_distribution(
    model: &Model,
    segments: &Segments,
    task: &PromptTask,
    streams: &Streams,
) -> Result<Vec<f64>> {
    let refs: Vec<&TokenSequence> = segments.iter().collect();
    let prompted = build_prompt(&refs, task, model.config().max_seq_len)?;
    let mut tape = Tape::no_grad();
    let probs = class_probs_on(&mut tape, model, &prompted, &task.verbalizer, true, streams)?;
    Ok(tape.value(probs).to_vec())
}

/// Strong view of every segment, framed, with masked raw positions mapped to
/// prompt positions (targets lost to truncation are dropped).
pub struct StrongPrompt {
    pub prompted: PromptedText,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<usize>,
}

pub fn strong_prompt(
    segments: &Segments,
    task: &PromptTask,
    kind: AugmentKind,
    max_len: usize,
    streams: &Streams,
) -> Result<StrongPrompt> {
    let mut views = Vec::with_capacity(segments.len());
    for (s, seg) in segments.iter().enumerate() {
        views.push(strong_view(seg, kind, &mut streams.child(s).rng())?);
    }
    let refs: Vec<&TokenSequence> = views.iter().map(|v| &v.seq).collect();
    let prompted = build_prompt(&refs, task, max_len)?;
    let mut mlm_positions = Vec::new();
    let mut mlm_targets = Vec::new();
    for (s, view) in views.iter().enumerate() {
        let kept = &prompted.input_positions[s];
        for (&p, &orig) in view.mask_positions.iter().zip(&view.original_ids) {
            if let Some(&q) = kept.get(p) {
                mlm_positions.push(q);
                mlm_targets.push(orig);
            }
        }
    }
    Ok(StrongPrompt {
        prompted,
        mlm_positions,
        mlm_targets,
    })
}

pub struct UnlabeledTerms {
    pub l_st: Var,
    pub l_ssl: Var,
    pub retained: usize,
    pub mu_b: usize,
}

/// Both unlabeled terms from one strong forward per example.
///
/// Streams used per example `i`: `weak/i` (dropout of the pseudo-label
/// pass), `aug/i/s` (augmentation of segment `s`), `strong/i` (dropout of the
/// strong pass).
#[allow(clippy::too_many_arguments)]
pub fn unlabeled_terms_on(
    tape: &mut Tape,
    model: &Model,
    unlabeled: &[&Segments],
    task: &PromptTask,
    kind: AugmentKind,
    tau: f64,
    streams: &Streams,
) -> Result<UnlabeledTerms> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must be in [0, 1], got {tau}")));
    }
    let mu_b = unlabeled.len();
    if mu_b == 0 {
        let zero = tape.constant(0.0);
        return Ok(UnlabeledTerms {
            l_st: zero,
            l_ssl: zero,
            retained: 0,
            mu_b,
        });
    }
    let max_len = model.config().max_seq_len;
    let mut st_terms = Vec::new();
    let mut ssl_terms = Vec::new();
    let mut retained = 0;
    for (i, segments) in unlabeled.iter().enumerate() {
        let q = weak_distribution(model, segments, task, &streams.child("weak").child(i))?;
        let q_hat = argmax(&q);
        let keep = q[q_hat] >= tau;

        let strong = strong_prompt(segments, task, kind, max_len, &streams.child("aug").child(i))?;
        let hidden = model.hidden_on(tape, &strong.prompted.seq.ids, true, &streams.child("strong").child(i))?;
        if keep {
            retained += 1;
            let logits = model.logits_on(tape, hidden, &[strong.prompted.mask_position])?;
            let picked = tape.select_cols(logits, task.verbalizer.word_ids())?;
            let p = tape.softmax_rows(picked)?;
            st_terms.push(tape.cross_entropy(p, q_hat)?);
        }
        if !strong.mlm_positions.is_empty() {
            ssl_terms.push(mlm_loss_on(tape, model, hidden, &strong.mlm_positions, &strong.mlm_targets)?);
        }
    }
    Ok(UnlabeledTerms {
        l_st: mean_on(tape, &st_terms, mu_b)?,
        l_ssl: mean_on(tape, &ssl_terms, mu_b)?,
        retained,
        mu_b,
    })
}

/// `(L_st, retained)` without building a gradient.
pub fn self_training_loss(
    model: &Model,
    unlabeled: &[&Segments],
    task: &PromptTask,
    kind: AugmentKind,
    tau: f64,
    streams: &Streams,
) -> Result<(f64, usize)> {
    if unlabeled.is_empty() {
        return Err(Error::invalid("self-training loss needs a non-empty unlabeled batch"));
    }
    let mut tape = Tape::no_grad();
    let t = unlabeled_terms_on(&mut tape, model, unlabeled, task, kind, tau, streams)?;
    Ok((tape.scalar(t.l_st), t.retained))
}

/// One optimisation batch, already tokenized.
pub struct LossBatch<'a> {
    pub labeled: Vec<(&'a Segments, usize)>,
    pub unlabeled: Vec<&'a Segments>,
}

/// Tasks for the two halves of the objective. Ordinary runs use the same
/// task for both; cross-task transfer uses the source for the labeled term
/// and the target for the unlabeled terms.
#[derive(Clone, Copy)]
pub struct TaskPair<'a> {
    pub labeled: &'a PromptTask,
    pub unlabeled: &'a PromptTask,
}

impl<'a> TaskPair<'a> {
    pub fn same(task: &'a PromptTask) -> Self {
        TaskPair {
            labeled: task,
            unlabeled: task,
        }
    }
}

/// Records `L_s + λ1·L_st + λ2·L_ssl` on `tape` (training mode) and returns
/// the output node with its breakdown.
pub fn total_loss_on(
    tape: &mut Tape,
    model: &Model,
    batch: &LossBatch<'_>,
    hp: &HyperParams,
    kind: AugmentKind,
    tasks: TaskPair<'_>,
    streams: &Streams,
) -> Result<(Var, LossBreakdown)> {
    if hp.mu > 0 && batch.unlabeled.is_empty() {
        return Err(Error::invalid("mu > 0 but the batch has no unlabeled examples"));
    }
    let max_len = model.config().max_seq_len;
    let prompts = batch
        .labeled
        .iter()
        .map(|(segs, _)| {
            let refs: Vec<&TokenSequence> = segs.iter().collect();
            build_prompt(&refs, tasks.labeled, max_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let labeled: Vec<(&PromptedText, usize)> = prompts.iter().zip(&batch.labeled).map(|(p, (_, y))| (p, *y)).collect();
    let l_s = supervised_loss_on(tape, model, &labeled, tasks.labeled, true, &streams.child("labeled"))?;
    let u = unlabeled_terms_on(
        tape,
        model,
        &batch.unlabeled,
        tasks.unlabeled,
        hp.strong_kind(kind),
        hp.tau,
        &streams.child("unlabeled"),
    )?;
    let total = tape.weighted_sum(&[(l_s, 1.0), (u.l_st, hp.lambda1), (u.l_ssl, hp.lambda2)])?;
    let breakdown = LossBreakdown {
        l_s: tape.scalar(l_s),
        l_st: tape.scalar(u.l_st),
        l_ssl: tape.scalar(u.l_ssl),
        total: tape.scalar(total),
        retained: u.retained,
        mu_b: u.mu_b,
    };
    Ok((total, breakdown))
}
