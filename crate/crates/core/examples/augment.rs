//! Weak and strong views of one sentence under every augmentation kind.

use sflm::augment::{augment_pair, AugmentKind};
use sflm::rng::Streams;
use sflm::tokenizer::{build_vocab, decode, encode};

fn main() -> anyhow::Result<()> {
    let text = "a quiet film that slowly earns every minute of its running time";
    let vocab = build_vocab(&[text], 1)?;
    let seq = encode(text, &vocab);
    for kind in AugmentKind::all_defaults() {
        let mut rng = Streams::new(0).child(kind.name()).rng();
        let pair = augment_pair(&seq, kind, &mut rng)?;
        println!("{:<9} weak:   {}", kind.name(), decode(&pair.weak, &vocab)?);
        println!("{:<9} strong: {}", "", decode(&pair.strong, &vocab)?);
    }
    Ok(())
}
