//! Labeled/unlabeled examples, TSV ingestion, class-balanced few-shot splits
//! and the batch iterator.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Streams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    /// One entry per input segment.
    pub text: Vec<String>,
    pub label: usize,
}

/// An unlabeled example. The gold label, when the example was drawn from a
/// labeled pool, is kept only for balanced sampling and audits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledExample {
    text: Vec<String>,
    hidden_gold: Option<usize>,
}

impl UnlabeledExample {
    pub fn new(text: Vec<String>) -> Self {
        UnlabeledExample { text, hidden_gold: None }
    }

    pub fn text(&self) -> &[String] {
        &self.text
    }

    /// Diagnostics only; nothing in training reads this.
    pub fn audit_gold(&self) -> Option<usize> {
        self.hidden_gold
    }
}

fn read_lines(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// `label<TAB>text` or `label<TAB>text_a<TAB>text_b`. The label field is a
/// label name from `labels` or a numeric index; a first line whose label
/// field is neither is treated as a header.
pub fn load_tsv(path: impl AsRef<Path>, arity: usize, labels: &[String]) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != arity + 1 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected {} tab-separated columns, found {}", arity + 1, fields.len()),
            ));
        }
        let raw = fields[0].trim();
        let label = match labels.iter().position(|l| l == raw) {
            Some(y) => y,
            None => match raw.parse::<usize>() {
                Ok(y) if y < labels.len() => y,
                Ok(y) => {
                    return Err(parse_error(path, lineno, format!("label index {y} out of range")));
                }
                Err(_) if out.is_empty() && lineno == 1 => continue,
                Err(_) => return Err(parse_error(path, lineno, format!("unknown label {raw:?}"))),
            },
        };
        out.push(LabeledExample {
            text: fields[1..].iter().map(|s| s.to_string()).collect(),
            label,
        });
    }
    Ok(out)
}

/// Text-only TSV (`text` or `text_a<TAB>text_b`). A line with an extra
/// column is rejected: unlabeled files must not carry labels.
pub fn load_unlabeled_tsv(path: impl AsRef<Path>, arity: usize) -> Result<Vec<UnlabeledExample>> {
    let path = path.as_ref();
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() == arity + 1 {
            return Err(parse_error(
                path,
                i + 1,
                "unlabeled data has a label column; labeled target data is not allowed here",
            ));
        }
        if fields.len() != arity {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected {arity} column(s), found {}", fields.len()),
            ));
        }
        out.push(UnlabeledExample::new(fields.iter().map(|s| s.to_string()).collect()));
    }
    Ok(out)
}

pub fn write_tsv(path: impl AsRef<Path>, examples: &[LabeledExample], labels: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for ex in examples {
        s.push_str(&labels[ex.label]);
        for t in &ex.text {
            s.push('\t');
            s.push_str(t);
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_unlabeled_tsv(path: impl AsRef<Path>, examples: &[UnlabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for ex in examples {
        s.push_str(&ex.text.join("\t"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Pool indices of every example in a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotSplit {
    pub seed: u64,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub manifest: SplitManifest,
}

impl FewShotSplit {
    /// Check exact per-class counts and pairwise disjointness.
    pub fn verify(&self, num_classes: usize, n: usize, mu: usize) -> Result<()> {
        let count = |labels: &mut dyn Iterator<Item = Option<usize>>| {
            let mut c = vec![0usize; num_classes];
            for y in labels.flatten() {
                c[y] += 1;
            }
            c
        };
        let train = count(&mut self.train.iter().map(|e| Some(e.label)));
        let dev = count(&mut self.dev.iter().map(|e| Some(e.label)));
        let unl = count(&mut self.unlabeled.iter().map(|e| e.hidden_gold));
        for c in 0..num_classes {
            if train[c] != n || dev[c] != n || unl[c] != mu * n {
                return Err(Error::invalid(format!(
                    "split {} class {c}: train {}, dev {}, unlabeled {} (want {n}, {n}, {})",
                    self.seed,
                    train[c],
                    dev[c],
                    unl[c],
                    mu * n
                )));
            }
        }
        let m = &self.manifest;
        let mut seen = HashSet::new();
        for &i in m.train.iter().chain(&m.dev).chain(&m.unlabeled) {
            if !seen.insert(i) {
                return Err(Error::invalid(format!("split {}: pool index {i} used twice", self.seed)));
            }
        }
        Ok(())
    }

    /// Unlabeled texts as seen by training: no gold labels.
    pub fn unlabeled_texts(&self) -> Vec<&[String]> {
        self.unlabeled.iter().map(|u| u.text()).collect()
    }
}

/// `num_splits` class-balanced splits, split `s` drawn from seed `seed + s`.
pub fn sample_few_shot_splits(
    pool: &[LabeledExample],
    num_classes: usize,
    n: usize,
    mu: usize,
    num_splits: usize,
    seed: u64,
) -> Result<Vec<FewShotSplit>> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in pool.iter().enumerate() {
        if ex.label >= num_classes {
            return Err(Error::invalid(format!("pool example {i} has label {} >= {num_classes}", ex.label)));
        }
        by_class[ex.label].push(i);
    }
    let need = 2 * n + mu * n;
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() < need {
            return Err(Error::InsufficientPool {
                class: c,
                need,
                have: idx.len(),
            });
        }
    }
    (0..num_splits as u64)
        .map(|s| {
            let split_seed = seed + s;
            let mut rng = Streams::new(split_seed).child("split").rng();
            let mut manifest = SplitManifest {
                seed: split_seed,
                train: Vec::new(),
                dev: Vec::new(),
                unlabeled: Vec::new(),
            };
            for idx in &by_class {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                manifest.train.extend_from_slice(&idx[..n]);
                manifest.dev.extend_from_slice(&idx[n..2 * n]);
                manifest.unlabeled.extend_from_slice(&idx[2 * n..need]);
            }
            manifest.train.shuffle(&mut rng);
            manifest.dev.shuffle(&mut rng);
            manifest.unlabeled.shuffle(&mut rng);
            let split = FewShotSplit {
                seed: split_seed,
                train: manifest.train.iter().map(|&i| pool[i].clone()).collect(),
                dev: manifest.dev.iter().map(|&i| pool[i].clone()).collect(),
                unlabeled: manifest
                    .unlabeled
                    .iter()
                    .map(|&i| UnlabeledExample {
                        text: pool[i].text.clone(),
                        hidden_gold: Some(pool[i].label),
                    })
                    .collect(),
                manifest,
            };
            split.verify(num_classes, n, mu)?;
            Ok(split)
        })
        .collect()
}

/// `n` pool indices per class, without replacement, class blocks shuffled
/// together.
pub fn sample_per_class(pool: &[LabeledExample], num_classes: usize, n: usize, streams: &Streams) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in pool.iter().enumerate() {
        if ex.label < num_classes {
            by_class[ex.label].push(i);
        }
    }
    let mut rng = streams.rng();
    let mut out = Vec::with_capacity(n * num_classes);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < n {
            return Err(Error::InsufficientPool {
                class: c,
                need: n,
                have: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        out.extend_from_slice(&idx[..n]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Indices into the labeled and unlabeled pools for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, streams: &Streams) -> Self {
        let mut rng = streams.rng();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Cycler { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Infinite stream of batches: `B` labeled and `μB` unlabeled indices. Each
/// pool is reshuffled at the start of every pass over it.
pub struct BatchIterator {
    labeled: Cycler,
    unlabeled: Option<Cycler>,
    b: usize,
    mu_b: usize,
}

impl BatchIterator {
    pub fn new(num_labeled: usize, num_unlabeled: usize, b: usize, mu: usize, streams: &Streams) -> Result<Self> {
        if b == 0 || b > num_labeled {
            return Err(Error::invalid(format!(
                "batch size {b} must be between 1 and the {num_labeled} training examples"
            )));
        }
        let mu_b = mu * b;
        if mu_b > num_unlabeled {
            return Err(Error::invalid(format!(
                "unlabeled batch {mu_b} exceeds the {num_unlabeled} unlabeled examples"
            )));
        }
        Ok(BatchIterator {
            labeled: Cycler::new(num_labeled, &streams.child("labeled")),
            unlabeled: (mu_b > 0).then(|| Cycler::new(num_unlabeled, &streams.child("unlabeled"))),
            b,
            mu_b,
        })
    }

    pub fn for_split(split: &FewShotSplit, b: usize, mu: usize, streams: &Streams) -> Result<Self> {
        Self::new(split.train.len(), split.unlabeled.len(), b, mu, streams)
    }
}

impl Iterator for BatchIterator {
    type Item = TrainBatch;

    fn next(&mut self) -> Option<TrainBatch> {
        let labeled = self.labeled.take(self.b);
        let unlabeled = match &mut self.unlabeled {
            Some(c) => c.take(self.mu_b),
            None => Vec::new(),
        };
        Some(TrainBatch { labeled, unlabeled })
    }
}
