//! Pretrain a small encoder with masked LM on a synthetic corpus, save it,
//! and load it back.

use sflm::model::{init_model, ModelConfig};
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};
use sflm::tokenizer::{build_vocab, encode};
use sflm::trainer::{load_checkpoint, pretrain_mlm, save_checkpoint, CheckpointMeta, PretrainConfig};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(300), |s| s.parse())?;
    let synth = generate_synthetic_task(&SynthSpec::default())?;
    let vocab = build_vocab(&synth.corpus, 1)?;
    let corpus: Vec<_> = synth.corpus.iter().map(|s| encode(s, &vocab)).collect();
    let config = ModelConfig::desk(vocab.len());
    println!("{} parameters, vocabulary {}", config.parameter_count(), vocab.len());
    let streams = Streams::new(0);
    let mut model = init_model(&config, &streams)?;
    let cfg = PretrainConfig {
        steps,
        ..PretrainConfig::default()
    };
    let report = pretrain_mlm(&mut model, &corpus, &cfg, &streams.child("pretrain"), &mut |step, loss| {
        if step % 50 == 0 {
            println!("step {step:>5}  loss {loss:.3}");
        }
    })?;
    println!("loss {:.3} -> {:.3} (ln V = {:.3})", report.initial_loss, report.final_loss, (vocab.len() as f64).ln());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &vocab, &CheckpointMeta::default(), &path)?;
    let loaded = load_checkpoint(&path, &vocab)?;
    println!("reloaded {} bytes, identical: {}", std::fs::metadata(&path)?.len(), loaded.model == model);
    Ok(())
}
