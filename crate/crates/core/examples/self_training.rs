//! End to end on the synthetic task: pretrain a small encoder, then compare
//! prompt fine-tuning alone (μ = 0) with self-training on μ = 1 and μ = 4
//! times as much unlabeled data, over five splits.
//!
//! `cargo run --release --example self_training -- [pretrain_steps] [steps] [splits]`

use sflm::model::{init_model, ModelConfig};
use sflm::prompting::PromptTask;
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};
use sflm::tokenizer::{build_vocab, encode};
use sflm::trainer::{evaluate, pretrain_mlm, run_experiment_with, Metric, Plan, PretrainConfig, TaskData};

fn main() -> anyhow::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (pretrain_steps, steps, splits) = (arg(1, 2000), arg(2, 600), arg(3, 5));

    let synth = generate_synthetic_task(&SynthSpec::default())?;
    let vocab = build_vocab(&synth.corpus, 1)?;
    let corpus: Vec<_> = synth.corpus.iter().map(|s| encode(s, &vocab)).collect();
    let mut model = init_model(&ModelConfig::desk(vocab.len()), &Streams::new(0))?;
    let cfg = PretrainConfig {
        steps: pretrain_steps,
        ..PretrainConfig::default()
    };
    let pre = pretrain_mlm(&mut model, &corpus, &cfg, &Streams::new(0).child("pretrain"), &mut |_, _| {})?;
    println!("pretraining loss {:.3} -> {:.3}", pre.initial_loss, pre.final_loss);

    let task = TaskData {
        name: "synthetic".into(),
        task: PromptTask::new(&synth.task, &vocab)?,
        pool: synth.pool,
        test: synth.test,
    };
    let zero_shot = evaluate(&model, &vocab, &task.test, &task.task, Metric::Accuracy)?;
    println!("zero-shot test accuracy {zero_shot:.3}");

    let mut plan: Plan = serde_json::from_value(serde_json::json!({"n": [16], "mu": [0, 1, 4]}))?;
    plan.num_splits = splits;
    plan.hp.steps = steps;
    let report = run_experiment_with(&model, &vocab, &[task], &plan, None, &mut |m| eprintln!("{m}"))?;
    for r in &report.runs {
        println!("mu={} split {}: test {:.3}, dev {:.3} at step {}", r.mu, r.split_seed, r.accuracy, r.dev_acc.unwrap_or(0.0), r.best_step);
    }
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}
