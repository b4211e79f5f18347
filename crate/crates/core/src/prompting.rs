//! Templates, verbalizers and class distributions read off the `[MASK]` slot.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{softmax, Tape, Var};
use crate::rng::Streams;
use crate::tokenizer::{TokenSequence, Vocab, CLS_ID, MASK, MASK_ID, SEP_ID};

/// Task file contents as written on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub labels: Vec<String>,
    pub label_words: BTreeMap<String, String>,
    pub template: String,
    #[serde(default = "one")]
    pub arity: usize,
    /// Label treated as positive for F1. Defaults to the second label.
    #[serde(default)]
    pub positive_label: Option<String>,
}

fn one() -> usize {
    1
}

impl TaskSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Task(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Input(usize),
    Mask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
    arity: usize,
}

impl PromptTemplate {
    /// Whitespace-separated pieces; `{x}` (arity 1) or `{x1}`, `{x2}`
    /// (arity 2) are inputs, `[MASK]` is the answer slot, anything else is a
    /// literal word.
    pub fn parse(text: &str, arity: usize) -> Result<Self> {
        if !(1..=2).contains(&arity) {
            return Err(Error::Task(format!("arity must be 1 or 2, got {arity}")));
        }
        let names: &[&str] = if arity == 1 { &["{x}"] } else { &["{x1}", "{x2}"] };
        let mut segments = Vec::new();
        for piece in text.split_whitespace() {
            if piece == MASK {
                segments.push(Segment::Mask);
            } else if let Some(i) = names.iter().position(|n| *n == piece) {
                segments.push(Segment::Input(i));
            } else if piece.starts_with('{') && piece.ends_with('}') {
                return Err(Error::Task(format!(
                    "placeholder {piece} not valid for arity {arity}"
                )));
            } else {
                segments.push(Segment::Literal(piece.to_lowercase()));
            }
        }
        let masks = segments.iter().filter(|s| **s == Segment::Mask).count();
        if masks != 1 {
            return Err(Error::Task(format!(
                "template must contain exactly one [MASK], found {masks}"
            )));
        }
        for (i, name) in names.iter().enumerate() {
            let n = segments.iter().filter(|s| **s == Segment::Input(i)).count();
            if n != 1 {
                return Err(Error::Task(format!(
                    "template must contain {name} exactly once, found {n}"
                )));
            }
        }
        Ok(PromptTemplate { segments, arity })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn literals(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Literal(w) => Some(w.as_str()),
            _ => None,
        })
    }
}

/// Bijection between task labels and single vocabulary words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verbalizer {
    labels: Vec<String>,
    words: Vec<String>,
    word_ids: Vec<usize>,
}

impl Verbalizer {
    pub fn new(labels: Vec<String>, words: Vec<String>, vocab: &Vocab) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Task("a task needs at least two labels".into()));
        }
        if labels.len() != words.len() {
            return Err(Error::Task("every label needs exactly one label word".into()));
        }
        let mut word_ids = Vec::with_capacity(words.len());
        for (label, word) in labels.iter().zip(&words) {
            let id = vocab
                .id(&word.to_lowercase())
                .filter(|&id| !Vocab::is_special_id(id))
                .ok_or_else(|| {
                    Error::Task(format!("label word {word:?} for {label:?} is not in the vocabulary"))
                })?;
            if word_ids.contains(&id) {
                return Err(Error::Task(format!("label word {word:?} used for two labels")));
            }
            word_ids.push(id);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Task(format!("duplicate label {l:?}")));
            }
        }
        Ok(Verbalizer {
            labels,
            words,
            word_ids,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn word_ids(&self) -> &[usize] {
        &self.word_ids
    }

    /// M′: label index → word.
    pub fn word(&self, label: usize) -> &str {
        &self.words[label]
    }

    /// M: word → label index.
    pub fn label_of_word(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w.eq_ignore_ascii_case(word))
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

/// A task bound to a vocabulary: template literals and label words resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTask {
    pub name: String,
    pub template: PromptTemplate,
    pub verbalizer: Verbalizer,
    literal_ids: Vec<usize>,
    positive: usize,
}

impl PromptTask {
    pub fn new(spec: &TaskSpec, vocab: &Vocab) -> Result<Self> {
        let template = PromptTemplate::parse(&spec.template, spec.arity)?;
        let mut words = Vec::with_capacity(spec.labels.len());
        for label in &spec.labels {
            let w = spec
                .label_words
                .get(label)
                .ok_or_else(|| Error::Task(format!("no label word for label {label:?}")))?;
            if w.split_whitespace().count() != 1 {
                return Err(Error::Task(format!("label word {w:?} must be a single token")));
            }
            words.push(w.to_string());
        }
        if spec.label_words.len() != spec.labels.len() {
            return Err(Error::Task("label_words has entries for unknown labels".into()));
        }
        let verbalizer = Verbalizer::new(spec.labels.clone(), words, vocab)?;
        let literal_ids = template
            .literals()
            .map(|w| {
                vocab
                    .id(w)
                    .ok_or_else(|| Error::Task(format!("template word {w:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        let positive = match &spec.positive_label {
            Some(p) => verbalizer
                .label_index(p)
                .ok_or_else(|| Error::Task(format!("positive_label {p:?} is not a label")))?,
            None => 1,
        };
        Ok(PromptTask {
            name: spec.name.clone().unwrap_or_else(|| "task".into()),
            template,
            verbalizer,
            literal_ids,
            positive,
        })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        Self::new(&TaskSpec::load(path)?, vocab)
    }

    pub fn arity(&self) -> usize {
        self.template.arity
    }

    pub fn num_labels(&self) -> usize {
        self.verbalizer.num_labels()
    }

    pub fn positive_label(&self) -> usize {
        self.positive
    }

    /// Number of framing, literal and mask tokens in every prompt.
    pub fn overhead(&self) -> usize {
        2 + self.literal_ids.len() + 1
    }
}

/// A framed prompt with the answer slot and input-token positions recorded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptedText {
    pub seq: TokenSequence,
    pub mask_position: usize,
    /// For each input segment, the prompt position of each kept content token.
    pub input_positions: Vec<Vec<usize>>,
}

/// Assemble `[CLS] … [SEP]` following the template. When too long for
/// `max_len`, input tokens are dropped from the right (for pairs, from the
/// currently longer segment, the later one on ties).
pub fn build_prompt(inputs: &[&TokenSequence], task: &PromptTask, max_len: usize) -> Result<PromptedText> {
    if inputs.len() != task.arity() {
        return Err(Error::invalid(format!(
            "template expects {} input(s), got {}",
            task.arity(),
            inputs.len()
        )));
    }
    let overhead = task.overhead();
    if overhead > max_len {
        return Err(Error::invalid(format!(
            "template needs {overhead} tokens but max_seq_len is {max_len}"
        )));
    }
    let mut keep: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
    while overhead + keep.iter().sum::<usize>() > max_len {
        let longest = (0..keep.len()).rev().max_by_key(|&i| keep[i]).expect("arity >= 1");
        keep[longest] -= 1;
    }

    let mut seq = TokenSequence::new();
    let mut input_positions = vec![Vec::new(); inputs.len()];
    let mut mask_position = 0;
    let mut literals = task.literal_ids.iter();
    seq.push(CLS_ID, true);
    for seg in &task.template.segments {
        match seg {
            Segment::Literal(_) => seq.push(*literals.next().expect("literal ids match"), true),
            Segment::Mask => {
                mask_position = seq.len();
                seq.push(MASK_ID, true);
            }
            Segment::Input(i) => {
                for &id in &inputs[*i].ids[..keep[*i]] {
                    input_positions[*i].push(seq.len());
                    seq.push(id, false);
                }
            }
        }
    }
    seq.push(SEP_ID, true);
    Ok(PromptedText {
        seq,
        mask_position,
        input_positions,
    })
}

/// Softmax over the label-word logits, in canonical label order.
pub fn class_distribution(logits_at_mask: &[f64], verbalizer: &Verbalizer) -> Result<Vec<f64>> {
    let picked: Vec<f64> = verbalizer
        .word_ids
        .iter()
        .map(|&id| {
            logits_at_mask.get(id).copied().ok_or_else(|| {
                Error::Shape(format!("label word id {id} outside logit vector of {}", logits_at_mask.len()))
            })
        })
        .collect::<Result<_>>()?;
    softmax(&picked)
}

/// Class distribution `[1, C]` at the mask slot, recorded on `tape`.
pub fn class_probs_on(
    tape: &mut Tape,
    model: &Model,
    prompted: &PromptedText,
    verbalizer: &Verbalizer,
    training: bool,
    streams: &Streams,
) -> Result<Var> {
    let hidden = model.hidden_on(tape, &prompted.seq.ids, training, streams)?;
    let logits = model.logits_on(tape, hidden, &[prompted.mask_position])?;
    let picked = tape.select_cols(logits, verbalizer.word_ids())?;
    tape.softmax_rows(picked)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict_label(
    model: &Model,
    prompted: &PromptedText,
    verbalizer: &Verbalizer,
    training: bool,
    streams: &Streams,
) -> Result<(usize, Vec<f64>)> {
    let mut tape = Tape::no_grad();
    let probs = class_probs_on(&mut tape, model, prompted, verbalizer, training, streams)?;
    let dist = tape.value(probs).to_vec();
    Ok((argmax(&dist), dist))
}
