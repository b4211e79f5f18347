//! Augmentation ablation: one row per strong-view kind, mean (std) over
//! splits. Pass a step count to trade fidelity for time.

use sflm::augment::AugmentKind;
use sflm::model::{init_model, ModelConfig};
use sflm::prompting::PromptTask;
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};
use sflm::tokenizer::{build_vocab, encode};
use sflm::trainer::{pretrain_mlm, run_experiment_with, Plan, PretrainConfig, TaskData};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(100), |s| s.parse())?;
    let synth = generate_synthetic_task(&SynthSpec::default())?;
    let vocab = build_vocab(&synth.corpus, 1)?;
    let corpus: Vec<_> = synth.corpus.iter().map(|s| encode(s, &vocab)).collect();
    let mut model = init_model(&ModelConfig::desk(vocab.len()), &Streams::new(0))?;
    let cfg = PretrainConfig {
        steps: 4 * steps,
        ..PretrainConfig::default()
    };
    pretrain_mlm(&mut model, &corpus, &cfg, &Streams::new(0).child("pretrain"), &mut |_, _| {})?;

    let task = TaskData {
        name: "synthetic".into(),
        task: PromptTask::new(&synth.task, &vocab)?,
        pool: synth.pool,
        test: synth.test,
    };
    let mut plan: Plan = serde_json::from_value(serde_json::json!({"n": [16], "mu": [4], "num_splits": 5}))?;
    plan.aug = AugmentKind::all_defaults().to_vec();
    plan.hp.steps = steps;
    let report = run_experiment_with(&model, &vocab, &[task], &plan, None, &mut |m| eprintln!("{m}"))?;
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}
