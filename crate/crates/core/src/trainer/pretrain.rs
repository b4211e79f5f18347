//! Masked-language-model pretraining on a raw corpus.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::mask_count;
use crate::error::{Error, Result};
use crate::losses::mlm_loss_on;
use crate::model::Model;
use crate::numeric::{adam_step, AdamState, Tape};
use crate::rng::Streams;
use crate::tokenizer::{TokenSequence, CLS_ID, MASK_ID, SEP_ID, SPECIALS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            mask_ratio: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    /// Loss of the first step, before any update.
    pub initial_loss: f64,
    /// Mean loss over the last `min(50, steps)` steps.
    pub final_loss: f64,
}

/// Frame `[CLS] x [SEP]`, cutting content to fit.
pub fn frame(content: &TokenSequence, max_len: usize) -> TokenSequence {
    let keep = content.len().min(max_len.saturating_sub(2));
    let mut seq = TokenSequence::new();
    seq.push(CLS_ID, true);
    for i in 0..keep {
        seq.push(content.ids[i], content.is_special[i]);
    }
    seq.push(SEP_ID, true);
    seq
}

/// Standard MLM corruption: `max(1, round(ratio·L))` content positions are
/// targets; each becomes `[MASK]` with probability 0.8, a random content
/// token with probability 0.1, and stays unchanged otherwise.
pub fn mlm_corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    ratio: f64,
    vocab_size: usize,
    rng: &mut R,
) -> (TokenSequence, Vec<usize>, Vec<usize>) {
    let content = seq.content_positions();
    if content.is_empty() {
        return (seq.clone(), Vec::new(), Vec::new());
    }
    let k = mask_count(ratio, content.len()).min(content.len());
    let mut picks = index::sample(rng, content.len(), k).into_vec();
    picks.sort_unstable();
    let mut out = seq.clone();
    let mut positions = Vec::with_capacity(k);
    let mut targets = Vec::with_capacity(k);
    for p in picks {
        let pos = content[p];
        positions.push(pos);
        targets.push(seq.ids[pos]);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[pos] = MASK_ID;
        } else if r < 0.9 {
            out.ids[pos] = rng.random_range(SPECIALS.len()..vocab_size);
        }
    }
    (out, positions, targets)
}

/// Train `model` in place. `log` sees `(step, loss)` for every step.
pub fn pretrain_mlm(
    model: &mut Model,
    corpus: &[TokenSequence],
    cfg: &PretrainConfig,
    streams: &Streams,
    log: &mut dyn FnMut(usize, f64),
) -> Result<PretrainReport> {
    if cfg.steps == 0 {
        return Err(Error::invalid("pretraining needs at least one step"));
    }
    let framed: Vec<TokenSequence> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| frame(s, model.config().max_seq_len))
        .collect();
    if framed.is_empty() {
        return Err(Error::invalid("pretraining corpus has no non-empty sentences"));
    }
    if cfg.batch_size == 0 || !(cfg.mask_ratio > 0.0 && cfg.mask_ratio <= 1.0) {
        return Err(Error::invalid("batch_size must be positive and mask_ratio in (0, 1]"));
    }
    let vocab_size = model.config().vocab_size;
    let mut adam = AdamState::new(model.params());
    let mut pick = streams.child("batches").rng();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let s = streams.child("step").child(step);
        let mut corrupt_rng = s.child("mask").rng();
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let seq = &framed[pick.random_range(0..framed.len())];
            let (input, positions, targets) = mlm_corrupt(seq, cfg.mask_ratio, vocab_size, &mut corrupt_rng);
            let hidden = model.hidden_on(&mut tape, &input.ids, true, &s.child(b))?;
            terms.push(mlm_loss_on(&mut tape, model, hidden, &positions, &targets)?);
        }
        let sum = tape.add_n(&terms)?;
        let loss = tape.scale(sum, 1.0 / cfg.batch_size as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                dump: format!("pretraining loss {value}"),
            });
        }
        let grads = tape.backward(loss, model.params())?;
        adam_step(model.params_mut(), &grads, &mut adam, cfg.lr)?;
        log(step, value);
        losses.push(value);
    }
    let tail = losses.len().min(50);
    let final_loss = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok(PretrainReport {
        initial_loss: losses[0],
        final_loss,
        losses,
    })
}
