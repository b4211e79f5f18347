pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod prompting;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
