//! Synthetic classification tasks for desk-scale runs.
//!
//! Each class owns a disjoint set of content tokens. A sentence picks a class,
//! a length, and then draws every token from the class set with probability
//! `1 − noise` or from the shared background set otherwise. The pretraining
//! corpus comes from the same process; a fraction of corpus sentences is
//! followed by the task's template with a label word that agrees with the
//! sentence's class with probability `prompt_affinity`, which plays the role
//! of the prior a pretrained language model brings to a prompt.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_tsv, write_unlabeled_tsv, LabeledExample, UnlabeledExample};
use crate::error::{Error, Result};
use crate::prompting::{PromptTemplate, Segment, TaskSpec};
use crate::rng::Streams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Content tokens in the vocabulary (specials excluded).
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Tokens per class when `class_token_sets` is not given.
    pub class_set_size: usize,
    pub class_token_sets: Option<Vec<Vec<String>>>,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Labeled pool size.
    pub count: usize,
    pub test_count: usize,
    pub corpus_size: usize,
    pub prompt_fraction: f64,
    pub prompt_affinity: f64,
    /// With probability `domain_skew` a class token comes from the half of
    /// the class set owned by `domain`; otherwise uniformly from the set.
    pub domain: usize,
    pub domain_skew: f64,
    pub labels: Vec<String>,
    pub label_words: Vec<String>,
    pub template: String,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 100,
            num_classes: 2,
            class_set_size: 45,
            class_token_sets: None,
            min_len: 2,
            max_len: 5,
            noise: 0.3,
            count: 2000,
            test_count: 1000,
            corpus_size: 4000,
            prompt_fraction: 0.3,
            prompt_affinity: 0.6,
            domain: 0,
            domain_skew: 0.0,
            labels: vec!["negative".into(), "positive".into()],
            label_words: vec!["terrible".into(), "great".into()],
            template: "{x} it was [MASK] .".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTask {
    pub task: TaskSpec,
    pub class_sets: Vec<Vec<String>>,
    pub background: Vec<String>,
    pub pool: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub corpus: Vec<String>,
}

impl SynthSpec {
    fn template_words(&self) -> Result<Vec<String>> {
        let t = PromptTemplate::parse(&self.template, 1)?;
        Ok(t.segments()
            .iter()
            .filter_map(|s| match s {
                Segment::Literal(w) => Some(w.clone()),
                _ => None,
            })
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::invalid(format!("noise must be in [0, 1), got {}", self.noise)));
        }
        if self.num_classes < 2 || self.labels.len() != self.num_classes || self.label_words.len() != self.num_classes {
            return Err(Error::invalid("need at least two classes with one label and label word each"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 <= min_len <= max_len"));
        }
        for (name, v) in [
            ("prompt_fraction", self.prompt_fraction),
            ("prompt_affinity", self.prompt_affinity),
            ("domain_skew", self.domain_skew),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.domain > 1 {
            return Err(Error::invalid("domain must be 0 or 1"));
        }
        Ok(())
    }
}

/// Class-set tokens `c{k}_{j}`, background tokens `w{j}`, template literals
/// and label words fill exactly `vocab_size` content tokens.
fn partition(spec: &SynthSpec) -> Result<(Vec<Vec<String>>, Vec<String>)> {
    let reserved: Vec<String> = spec
        .template_words()?
        .into_iter()
        .chain(spec.label_words.iter().map(|w| w.to_lowercase()))
        .collect();
    let class_sets = match &spec.class_token_sets {
        Some(sets) => {
            if sets.len() != spec.num_classes {
                return Err(Error::invalid("one class token set per class required"));
            }
            sets.iter()
                .map(|s| s.iter().map(|w| w.to_lowercase()).collect())
                .collect()
        }
        None => (0..spec.num_classes)
            .map(|k| (0..spec.class_set_size).map(|j| format!("c{k}_{j:02}")).collect())
            .collect::<Vec<Vec<String>>>(),
    };
    let mut seen: HashSet<&str> = reserved.iter().map(String::as_str).collect();
    if seen.len() != reserved.len() {
        return Err(Error::invalid("template words and label words must be distinct"));
    }
    for (k, set) in class_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::invalid(format!("class {k} has an empty token set")));
        }
        for w in set {
            if !seen.insert(w) {
                return Err(Error::invalid(format!("token {w:?} of class {k} overlaps another set")));
            }
        }
    }
    let used = seen.len();
    if used >= spec.vocab_size {
        return Err(Error::invalid(format!(
            "vocab_size {} leaves no background tokens after {used} reserved",
            spec.vocab_size
        )));
    }
    let background = (0..spec.vocab_size - used).map(|j| format!("w{j:02}")).collect();
    Ok((class_sets, background))
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    class_sets: &'a [Vec<String>],
    background: &'a [String],
}

impl Sampler<'_> {
    fn sentence(&self, class: usize, skew: f64, rng: &mut ChaCha8Rng) -> String {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let set = &self.class_sets[class];
        let half = set.len().div_ceil(2);
        let owned = if self.spec.domain == 0 { &set[..half] } else { &set[half..] };
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < self.spec.noise {
                    self.background.choose(rng).expect("non-empty background")
                } else if !owned.is_empty() && rng.random::<f64>() < skew {
                    owned.choose(rng).expect("non-empty")
                } else {
                    set.choose(rng).expect("non-empty class set")
                }
                .as_str()
            })
            .collect();
        words.join(" ")
    }

    fn labeled(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledExample> {
        (0..count)
            .map(|_| {
                let label = rng.random_range(0..self.spec.num_classes);
                LabeledExample {
                    text: vec![self.sentence(label, self.spec.domain_skew, rng)],
                    label,
                }
            })
            .collect()
    }
}

pub fn generate_synthetic_task(spec: &SynthSpec) -> Result<SynthTask> {
    spec.validate()?;
    let (class_sets, background) = partition(spec)?;
    let sampler = Sampler {
        spec,
        class_sets: &class_sets,
        background: &background,
    };
    let root = Streams::new(spec.seed);
    let pool = sampler.labeled(spec.count, &mut root.child("pool").rng());
    let test = sampler.labeled(spec.test_count, &mut root.child("test").rng());

    let mut rng = root.child("corpus").rng();
    let corpus = (0..spec.corpus_size)
        .map(|_| {
            let class = rng.random_range(0..spec.num_classes);
            let s = sampler.sentence(class, 0.0, &mut rng);
            if rng.random::<f64>() < spec.prompt_fraction {
                let word = if rng.random::<f64>() < spec.prompt_affinity {
                    class
                } else {
                    rng.random_range(0..spec.num_classes)
                };
                spec.template
                    .replace("{x}", &s)
                    .replace("[MASK]", &spec.label_words[word].to_lowercase())
            } else {
                s
            }
        })
        .collect();

    let task = TaskSpec {
        name: Some("synthetic".into()),
        labels: spec.labels.clone(),
        label_words: spec.labels.iter().cloned().zip(spec.label_words.iter().cloned()).collect(),
        template: spec.template.clone(),
        arity: 1,
        positive_label: None,
    };
    Ok(SynthTask {
        task,
        class_sets,
        background,
        pool,
        test,
        corpus,
    })
}

impl SynthTask {
    /// Writes `task.json`, `train.tsv` (labeled pool), `unlabeled.tsv` (the
    /// pool without labels), `test.tsv`, `corpus.txt` and `class_sets.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.task.save(dir.join("task.json"))?;
        write_tsv(dir.join("train.tsv"), &self.pool, &self.task.labels)?;
        let unlabeled: Vec<UnlabeledExample> = self.pool.iter().map(|e| UnlabeledExample::new(e.text.clone())).collect();
        write_unlabeled_tsv(dir.join("unlabeled.tsv"), &unlabeled)?;
        write_tsv(dir.join("test.tsv"), &self.test, &self.task.labels)?;
        let corpus = dir.join("corpus.txt");
        std::fs::write(&corpus, self.corpus.join("\n") + "\n").map_err(|e| Error::io(&corpus, e))?;
        let sets = dir.join("class_sets.json");
        std::fs::write(&sets, serde_json::to_string_pretty(&self.class_sets)? + "\n").map_err(|e| Error::io(&sets, e))
    }
}
