//! Sample five few-shot splits (train, dev, unlabeled) from a labeled pool.

use sflm::data::{sample_few_shot_splits, BatchIterator};
use sflm::rng::Streams;
use sflm::synth::{generate_synthetic_task, SynthSpec};

fn main() -> anyhow::Result<()> {
    let synth = generate_synthetic_task(&SynthSpec::default())?;
    let splits = sample_few_shot_splits(&synth.pool, 2, 16, 4, 5, 42)?;
    for s in &splits {
        s.verify(2, 16, 4)?;
        println!(
            "seed {}: {} train, {} dev, {} unlabeled; first train ids {:?}",
            s.seed,
            s.train.len(),
            s.dev.len(),
            s.unlabeled.len(),
            &s.manifest.train[..4]
        );
    }
    let batches = BatchIterator::for_split(&splits[0], 4, 4, &Streams::new(0))?;
    for (i, b) in batches.take(3).enumerate() {
        println!("batch {i}: labeled {:?} unlabeled {:?}", b.labeled, b.unlabeled);
    }
    Ok(())
}
