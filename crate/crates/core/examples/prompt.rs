//! Wrap inputs in a cloze template and read class probabilities off the
//! masked-LM head through the verbalizer.

use sflm::model::{init_model, ModelConfig};
use sflm::prompting::{build_prompt, predict_label, PromptTask, TaskSpec};
use sflm::rng::Streams;
use sflm::tokenizer::{build_vocab, decode, encode};

fn main() -> anyhow::Result<()> {
    let spec: TaskSpec = serde_json::from_str(
        r#"{"name": "pairs", "labels": ["entailment", "contradiction"],
            "label_words": {"entailment": "yes", "contradiction": "no"},
            "template": "{x1} ? [MASK] , {x2}", "arity": 2}"#,
    )?;
    let vocab = build_vocab(&["a man is sleeping", "nobody is awake", "yes no ?", ","], 1)?;
    let task = PromptTask::new(&spec, &vocab)?;
    let (a, b) = (encode("a man is sleeping", &vocab), encode("nobody is awake", &vocab));
    let prompted = build_prompt(&[&a, &b], &task, 16)?;
    println!("prompt: {}", decode(&prompted.seq, &vocab)?);
    println!("mask at {}, inputs at {:?}", prompted.mask_position, prompted.input_positions);
    let short = build_prompt(&[&a, &b], &task, 10)?;
    println!("truncated to 10: {}", decode(&short.seq, &vocab)?);

    let model = init_model(&ModelConfig::desk(vocab.len()), &Streams::new(0))?;
    let (label, probs) = predict_label(&model, &prompted, &task.verbalizer, false, &Streams::new(0))?;
    println!("untrained model: {} with p = {probs:.3?}", task.verbalizer.labels()[label]);
    Ok(())
}
