//! Named random sub-streams.
//!
//! Every consumer of randomness asks for a stream by path (for example
//! `run/step17/strong/3/dropout`). The stream is a ChaCha8 generator keyed by
//! the root seed, with the ChaCha stream id derived from the path, so adding a
//! new consumer never shifts the draws seen by an existing one.

use std::fmt::Display;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    seed: u64,
    path: String,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            seed,
            path: String::new(),
        }
    }

    /// Derive a named sub-stream.
    pub fn child(&self, name: impl Display) -> Self {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.path, name)
        };
        Streams {
            seed: self.seed,
            path,
        }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(self.path.as_bytes()));
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(s: &Streams) -> Vec<u64> {
        let mut rng = s.rng();
        (0..8).map(|_| rng.random()).collect()
    }

    #[test]
    fn same_path_same_draws() {
        let a = Streams::new(7).child("dropout").child("layer0");
        let b = Streams::new(7).child("dropout/layer0");
        assert_eq!(draws(&a), draws(&b));
    }

    #[test]
    fn sibling_streams_differ() {
        let root = Streams::new(7);
        assert_ne!(draws(&root.child("aug")), draws(&root.child("dropout")));
        assert_ne!(draws(&root.child("x")), draws(&Streams::new(8).child("x")));
    }

    #[test]
    fn adding_a_stream_does_not_perturb_another() {
        let root = Streams::new(3);
        let before = draws(&root.child("aug/mask"));
        let _unrelated = draws(&root.child("new/consumer"));
        assert_eq!(before, draws(&root.child("aug/mask")));
    }
}
