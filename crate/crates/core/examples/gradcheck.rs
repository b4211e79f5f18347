//! Verify the full training objective's gradients against central
//! differences on a small encoder.

use sflm::augment::AugmentKind;
use sflm::losses::{total_loss_on, HyperParams, LossBatch, TaskPair};
use sflm::model::{init_model, Model, ModelConfig};
use sflm::numeric::{finite_difference_check, ParamSet, Tape};
use sflm::prompting::{PromptTask, TaskSpec};
use sflm::rng::Streams;
use sflm::tokenizer::{build_vocab, encode};

fn main() -> anyhow::Result<()> {
    let corpus = ["a b c d e f it was great terrible ."];
    let vocab = build_vocab(&corpus, 1)?;
    let spec = TaskSpec {
        name: None,
        labels: vec!["neg".into(), "pos".into()],
        label_words: [("neg".into(), "terrible".into()), ("pos".into(), "great".into())].into(),
        template: "{x} it was [MASK] .".into(),
        arity: 1,
        positive_label: None,
    };
    let task = PromptTask::new(&spec, &vocab)?;
    let config = ModelConfig {
        num_layers: 2,
        d_model: 32,
        num_heads: 4,
        d_ff: 64,
        max_seq_len: 32,
        vocab_size: vocab.len(),
        dropout_rate: 0.1,
        tie_mlm_head: true,
    };
    let model = init_model(&config, &Streams::new(7))?;
    let seg = |s: &str| vec![encode(s, &vocab)];
    let labeled = [(seg("a b c"), 1), (seg("d e f"), 0)];
    let unlabeled = [seg("a c e f"), seg("b d"), seg("c c a"), seg("f e d b")];
    let batch = LossBatch {
        labeled: labeled.iter().map(|(s, y)| (s, *y)).collect(),
        unlabeled: unlabeled.iter().collect(),
    };
    // τ = 0 keeps every pseudo-label so all three terms carry gradient.
    let hp = HyperParams {
        batch_size: 2,
        mu: 2,
        tau: 0.0,
        ..HyperParams::default()
    };
    let streams = Streams::new(1);
    let mut objective = |params: &ParamSet| {
        let m = Model::from_params(config.clone(), params.clone())?;
        let mut tape = Tape::new();
        let (loss, _) = total_loss_on(&mut tape, &m, &batch, &hp, AugmentKind::MASK, TaskPair::same(&task), &streams)?;
        let grads = tape.backward(loss, m.params())?;
        Ok((tape.scalar(loss), grads))
    };
    let report = finite_difference_check(&mut objective, model.params(), 1e-5, 20, &Streams::new(3))?;
    for p in &report.probes {
        println!("{:<24} [{:>4}] analytic {:+.6e} numeric {:+.6e} rel {:.1e}", p.param, p.index, p.analytic, p.numeric, p.rel_error);
    }
    println!("max relative error {:.2e}", report.max_rel_error);
    Ok(())
}
