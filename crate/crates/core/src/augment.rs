//! Weak and strong views of raw (pre-prompt) sentences.
//!
//! Every edit is restricted to content positions; special tokens stay where
//! they are.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, MASK_ID};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentKind {
    Dropout,
    Mask { ratio: f64 },
    Crop { keep: f64 },
    Swap { repeats: usize },
    Deletion { ratio: f64 },
}

impl AugmentKind {
    pub const MASK: AugmentKind = AugmentKind::Mask { ratio: 0.15 };
    pub const CROP: AugmentKind = AugmentKind::Crop { keep: 0.85 };
    pub const SWAP: AugmentKind = AugmentKind::Swap { repeats: 3 };
    pub const DELETION: AugmentKind = AugmentKind::Deletion { ratio: 0.15 };

    /// The five kinds with their default parameters, in ablation-table order.
    pub fn all_defaults() -> [AugmentKind; 5] {
        [
            AugmentKind::Dropout,
            AugmentKind::CROP,
            AugmentKind::SWAP,
            AugmentKind::DELETION,
            AugmentKind::MASK,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentKind::Dropout => "Dropout",
            AugmentKind::Mask { .. } => "Mask",
            AugmentKind::Crop { .. } => "Crop",
            AugmentKind::Swap { .. } => "Swap",
            AugmentKind::Deletion { .. } => "Deletion",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |what: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be in (0, 1], got {v}")))
            }
        };
        match *self {
            AugmentKind::Dropout => Ok(()),
            AugmentKind::Mask { ratio } | AugmentKind::Deletion { ratio } => frac("ratio", ratio),
            AugmentKind::Crop { keep } => frac("keep", keep),
            AugmentKind::Swap { repeats } if repeats == 0 => {
                Err(Error::invalid("swap repeats must be at least 1"))
            }
            AugmentKind::Swap { .. } => Ok(()),
        }
    }
}

impl fmt::Display for AugmentKind {
    /// `mask`, `crop`, ... for default parameters, `mask=0.1` otherwise.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = self.name().to_lowercase();
        match *self {
            AugmentKind::Dropout => write!(f, "{base}"),
            k if k == AugmentKind::MASK
                || k == AugmentKind::CROP
                || k == AugmentKind::SWAP
                || k == AugmentKind::DELETION =>
            {
                write!(f, "{base}")
            }
            AugmentKind::Mask { ratio } | AugmentKind::Deletion { ratio } => write!(f, "{base}={ratio}"),
            AugmentKind::Crop { keep } => write!(f, "{base}={keep}"),
            AugmentKind::Swap { repeats } => write!(f, "{base}={repeats}"),
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let real = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad augmentation parameter in {s:?}")))
            })
        };
        let kind = match name.trim().to_lowercase().as_str() {
            "dropout" if arg.is_none() => AugmentKind::Dropout,
            "mask" => AugmentKind::Mask { ratio: real(0.15)? },
            "crop" => AugmentKind::Crop { keep: real(0.85)? },
            "deletion" => AugmentKind::Deletion { ratio: real(0.15)? },
            "swap" => AugmentKind::Swap {
                repeats: arg.map_or(Ok(3), |a| {
                    a.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad augmentation parameter in {s:?}")))
                })?,
            },
            _ => return Err(Error::invalid(format!("unknown augmentation kind {s:?}"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl Serialize for AugmentKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AugmentKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrongView {
    pub seq: TokenSequence,
    pub mask_positions: Vec<usize>,
    pub original_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedPair {
    pub weak: TokenSequence,
    pub strong: TokenSequence,
    pub strong_mask_positions: Vec<usize>,
    pub strong_original_ids: Vec<usize>,
}

/// The surface form is unchanged; the stochastic part is the forward dropout.
pub fn weak_view(u: &TokenSequence) -> TokenSequence {
    u.clone()
}

/// `max(1, round(ratio · len))`
pub fn mask_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).round() as usize).max(1)
}

fn keep_positions(u: &TokenSequence, keep: impl Fn(usize) -> bool) -> TokenSequence {
    let mut out = TokenSequence::new();
    let mut content = 0;
    for i in 0..u.len() {
        if u.is_special[i] {
            out.push(u.ids[i], true);
        } else {
            if keep(content) {
                out.push(u.ids[i], false);
            }
            content += 1;
        }
    }
    out
}

pub fn strong_view<R: Rng + ?Sized>(u: &TokenSequence, kind: AugmentKind, rng: &mut R) -> Result<StrongView> {
    kind.validate()?;
    let content = u.content_positions();
    let len = content.len();
    let unchanged = || StrongView {
        seq: u.clone(),
        mask_positions: Vec::new(),
        original_ids: Vec::new(),
    };
    if len == 0 {
        return Ok(unchanged());
    }
    Ok(match kind {
        AugmentKind::Dropout => unchanged(),
        AugmentKind::Mask { ratio } => {
            let k = mask_count(ratio, len).min(len);
            let mut picks = index::sample(rng, len, k).into_vec();
            picks.sort_unstable();
            let mut seq = u.clone();
            let mut mask_positions = Vec::with_capacity(k);
            let mut original_ids = Vec::with_capacity(k);
            for p in picks {
                let pos = content[p];
                mask_positions.push(pos);
                original_ids.push(seq.ids[pos]);
                seq.ids[pos] = MASK_ID;
            }
            StrongView {
                seq,
                mask_positions,
                original_ids,
            }
        }
        AugmentKind::Crop { keep } => {
            let span = mask_count(keep, len).min(len);
            let start = rng.random_range(0..=len - span);
            StrongView {
                seq: keep_positions(u, |c| c >= start && c < start + span),
                mask_positions: Vec::new(),
                original_ids: Vec::new(),
            }
        }
        AugmentKind::Swap { repeats } => {
            let mut seq = u.clone();
            if len >= 2 {
                for _ in 0..repeats {
                    let pair = index::sample(rng, len, 2);
                    seq.ids.swap(content[pair.index(0)], content[pair.index(1)]);
                }
            }
            StrongView {
                seq,
                mask_positions: Vec::new(),
                original_ids: Vec::new(),
            }
        }
        AugmentKind::Deletion { ratio } => {
            let mut kept: Vec<bool> = (0..len).map(|_| rng.random::<f64>() >= ratio).collect();
            if !kept.iter().any(|&k| k) {
                kept[rng.random_range(0..len)] = true;
            }
            StrongView {
                seq: keep_positions(u, |c| kept[c]),
                mask_positions: Vec::new(),
                original_ids: Vec::new(),
            }
        }
    })
}

pub fn augment_pair<R: Rng + ?Sized>(u: &TokenSequence, kind: AugmentKind, rng: &mut R) -> Result<AugmentedPair> {
    let strong = strong_view(u, kind, rng)?;
    Ok(AugmentedPair {
        weak: weak_view(u),
        strong: strong.seq,
        strong_mask_positions: strong.mask_positions,
        strong_original_ids: strong.original_ids,
    })
}
