//! Binary checkpoints.
//!
//! Layout: the 8 bytes `SFLMCKPT`, a little-endian `u64` header length, a
//! JSON header, then every parameter array as little-endian `f64` in header
//! order.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitManifest;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::{ParamSet, Tensor};
use crate::rng::Streams;
use crate::tokenizer::Vocab;

const MAGIC: &[u8; 8] = b"SFLMCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub streams: Option<Streams>,
    pub split: Option<SplitManifest>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

/// Extra state stored alongside the weights.
#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub step: u64,
    pub streams: Option<Streams>,
    pub split: Option<SplitManifest>,
}

/// Write atomically: a sibling temp file is renamed into place.
pub fn save_checkpoint(model: &Model, vocab: &Vocab, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut arrays = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for (_, name, t) in model.params().iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        vocab_hash: vocab.hash(),
        step: meta.step,
        streams: meta.streams.clone(),
        split: meta.split.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = temp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parse a checkpoint without a vocabulary check.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(format!("{} is not a checkpoint file", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("header truncated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| corrupt(format!("header unreadable: {e}")))?;
    let data = &bytes[16 + hlen..];
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if data.len() != 8 * total {
        return Err(corrupt(format!(
            "expected {} bytes of parameters, found {}",
            8 * total,
            data.len()
        )));
    }
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for a in &header.arrays {
        if a.offset != expected_offset || a.shape.iter().product::<usize>() != a.len {
            return Err(corrupt(format!("array `{}` has an inconsistent manifest entry", a.name)));
        }
        expected_offset += a.len;
        let values = data[8 * a.offset..8 * (a.offset + a.len)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(a.name.clone(), Tensor::new(a.shape.clone(), values)?);
    }
    let model = Model::from_params(header.config.clone(), params)?;
    Ok(Checkpoint { header, model })
}

/// Load and refuse when `vocab` is not the vocabulary the model was saved with.
pub fn load_checkpoint(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    let found = vocab.hash();
    if ckpt.header.vocab_hash != found {
        return Err(Error::VocabMismatch {
            expected: ckpt.header.vocab_hash,
            found,
        });
    }
    Ok(ckpt)
}

/// `vocab.txt` in the same directory as the checkpoint.
pub fn vocab_path_for(checkpoint: impl AsRef<Path>) -> PathBuf {
    checkpoint.as_ref().with_file_name("vocab.txt")
}

/// Load a checkpoint and its sibling `vocab.txt`.
pub fn load_with_vocab(path: impl AsRef<Path>) -> Result<(Model, Vocab)> {
    let ckpt = read_checkpoint(&path)?;
    let vocab = Vocab::load(vocab_path_for(&path))?;
    let found = vocab.hash();
    if ckpt.header.vocab_hash != found {
        return Err(Error::VocabMismatch {
            expected: ckpt.header.vocab_hash,
            found,
        });
    }
    Ok((ckpt.model, vocab))
}
