//! Build a vocabulary, encode and decode, and show the file format.

use sflm::tokenizer::{build_vocab, decode, encode};

fn main() -> anyhow::Result<()> {
    let corpus = ["the movie was great", "the plot was thin", "great cast , thin plot"];
    let vocab = build_vocab(&corpus, 1)?;
    println!("{} tokens, hash {}", vocab.len(), vocab.hash());
    for text in ["The plot was GREAT", "an unseen word"] {
        let seq = encode(text, &vocab);
        println!("{text:?} -> {:?} -> {:?}", seq.ids, decode(&seq, &vocab)?);
    }
    print!("{}", vocab.to_file_string());
    Ok(())
}
