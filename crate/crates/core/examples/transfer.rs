//! Zero-shot transfer between two synthetic domains that share class tokens
//! but weight them differently: labeled source data, unlabeled target data.

use sflm::data::UnlabeledExample;
use sflm::model::{init_model, ModelConfig};
use sflm::prompting::PromptTask;
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};
use sflm::tokenizer::{build_vocab, encode};
use sflm::trainer::{pretrain_mlm, run_transfer, PretrainConfig, TaskData, TransferData, TransferPlan};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(100), |s| s.parse())?;
    let splits: usize = std::env::args().nth(2).map_or(Ok(3), |s| s.parse())?;
    let source_spec = SynthSpec {
        domain_skew: 0.8,
        ..SynthSpec::default()
    };
    let target_spec = SynthSpec {
        domain: 1,
        seed: 1,
        ..source_spec.clone()
    };
    let source = generate_synthetic_task(&source_spec)?;
    let target = generate_synthetic_task(&target_spec)?;
    let vocab = build_vocab(&source.corpus, 1)?;
    let corpus: Vec<_> = source.corpus.iter().map(|s| encode(s, &vocab)).collect();
    let mut model = init_model(&ModelConfig::desk(vocab.len()), &Streams::new(0))?;
    let cfg = PretrainConfig {
        steps: 4 * steps,
        ..PretrainConfig::default()
    };
    pretrain_mlm(&mut model, &corpus, &cfg, &Streams::new(0).child("pretrain"), &mut |_, _| {})?;

    let source_data = TaskData {
        name: "domain-0".into(),
        task: PromptTask::new(&source.task, &vocab)?,
        pool: source.pool,
        test: Vec::new(),
    };
    let target_task = PromptTask::new(&target.task, &vocab)?;
    // The target pool is used without its labels.
    let unlabeled: Vec<UnlabeledExample> = target.pool.iter().map(|e| UnlabeledExample::new(e.text.clone())).collect();
    let data = TransferData {
        source: &source_data,
        target_task: &target_task,
        target_name: "domain-1",
        target_unlabeled: &unlabeled,
        target_test: &target.test,
    };
    let mut plan: TransferPlan = serde_json::from_value(serde_json::json!({"num_splits": splits}))?;
    plan.hp.steps = steps;
    let report = run_transfer(&model, &vocab, &data, &plan, None, &mut |m| eprintln!("{m}"))?;
    print!("{}", sflm::report::to_markdown(&report.table));
    Ok(())
}
