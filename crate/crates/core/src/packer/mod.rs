//! Packed-sequence construction and per-epoch batch planning.
//!
//! Packing happens per document group: a group's documents are shuffled and cut
//! into tuples whose sizes follow the [`PackingStrategy`], each tuple is laid out
//! as `doc₁ SEP doc₂ SEP … doc_k PAD…`, and all groups' sequences are pooled and
//! drawn into batches without replacement. Every random decision comes from a
//! ChaCha stream seeded by a SHA-256 digest of `(purpose, seed, epoch, group)`,
//! so adding a group never changes how another group is packed.

mod io;
mod sft;

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, DocumentGroup, VocabConfig};

pub use io::{
    read_canonical, read_compact, write_canonical, write_compact, CompactIndex, CompactRecord,
    PlanManifest,
};
pub use sft::{
    build_sft_example, ground_truth_generation, ByteEncoder, SftExample, TextEncoder,
    PROMPT_PREAMBLE,
};

/// Segment ID carried by PAD positions.
pub const PAD_SEGMENT: i32 = -1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("group {0:?} has no documents to pack")]
    EmptyGroup(String),
    #[error("nothing to pack: empty document list")]
    EmptyTuple,
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("invalid packing strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid epoch mode {0:?}")]
    InvalidMode(String),
    #[error("batch_size must be at least 1")]
    InvalidBatchSize,
    #[error("group {0:?} has no relevant documents")]
    NoRelevantDocuments(String),
    #[error("relevant document {0:?} has no raw text")]
    MissingRawText(String),
    #[error("group {0:?} has no question text")]
    MissingQuestion(String),
    #[error("record {record}: {message}")]
    Format { record: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How many documents go into one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PackingStrategy {
    /// One document per sequence.
    NoPacking,
    /// Exactly `x` documents per sequence (the last one of a group may be smaller).
    Fixed(usize),
    /// Each sequence size drawn uniformly from the set.
    Multi(BTreeSet<usize>),
}

impl PackingStrategy {
    pub fn fixed(x: usize) -> Result<Self, PackError> {
        let s = Self::Fixed(x);
        s.validate()?;
        Ok(s)
    }

    /// A one-element set collapses to [`PackingStrategy::Fixed`], which packs identically.
    pub fn multi(choices: impl IntoIterator<Item = usize>) -> Result<Self, PackError> {
        let set: BTreeSet<usize> = choices.into_iter().collect();
        let s = if set.len() == 1 {
            Self::Fixed(*set.first().unwrap())
        } else {
            Self::Multi(set)
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PackError> {
        match self {
            Self::NoPacking => Ok(()),
            Self::Fixed(0) => Err(PackError::InvalidStrategy(
                "fixed packing needs at least one document per sequence".into(),
            )),
            Self::Fixed(_) => Ok(()),
            Self::Multi(set) if set.is_empty() => Err(PackError::InvalidStrategy(
                "multi packing needs at least one choice".into(),
            )),
            Self::Multi(set) if set.contains(&0) => Err(PackError::InvalidStrategy(
                "multi packing choices must be positive".into(),
            )),
            Self::Multi(_) => Ok(()),
        }
    }

    /// Documents per sequence when that number is fixed.
    pub fn docs_per_sequence(&self) -> Option<usize> {
        match self {
            Self::NoPacking => Some(1),
            Self::Fixed(x) => Some(*x),
            Self::Multi(_) => None,
        }
    }
}

impl fmt::Display for PackingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoPacking => f.write_str("no-packing"),
            Self::Fixed(x) => write!(f, "pack-{x}"),
            Self::Multi(set) => {
                f.write_str("pack")?;
                for x in set {
                    write!(f, "-{x}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PackingStrategy {
    type Err = PackError;

    /// Accepts `no-packing`, `pack-X` and `pack-X-Y-…`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_ascii_lowercase();
        if matches!(lowered.as_str(), "no-packing" | "nopacking" | "none") {
            return Ok(Self::NoPacking);
        }
        let rest = lowered
            .strip_prefix("pack-")
            .ok_or_else(|| PackError::InvalidStrategy(s.to_string()))?;
        let sizes = rest
            .split('-')
            .map(|p| p.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PackError::InvalidStrategy(s.to_string()))?;
        Self::multi(sizes)
    }
}

impl Serialize for PackingStrategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PackingStrategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether tuples are re-drawn at each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochMode {
    RepackEveryEpoch,
    /// Epoch-0 tuples reused verbatim.
    NoRepack,
    /// Epoch-0 tuples reused with document order re-permuted inside each tuple.
    NoRepackReshuffleOrder,
}

impl fmt::Display for EpochMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RepackEveryEpoch => "repack-every-epoch",
            Self::NoRepack => "no-repack",
            Self::NoRepackReshuffleOrder => "no-repack-reshuffle-order",
        })
    }
}

impl FromStr for EpochMode {
    type Err = PackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "repack-every-epoch" | "repack" => Ok(Self::RepackEveryEpoch),
            "no-repack" => Ok(Self::NoRepack),
            "no-repack-reshuffle-order" | "reshuffle" => Ok(Self::NoRepackReshuffleOrder),
            _ => Err(PackError::InvalidMode(s.to_string())),
        }
    }
}

/// One training sequence.
///
/// Field order matches the canonical line-delimited record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    /// Document index within the sequence; SEP takes the preceding document's
    /// index and PAD is [`PAD_SEGMENT`].
    pub segment_ids: Vec<i32>,
    pub doc_ids: Vec<String>,
    pub truncated: bool,
    pub sep_positions: Vec<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_pad(&self) -> usize {
        self.segment_ids
            .iter()
            .filter(|&&s| s == PAD_SEGMENT)
            .count()
    }

    /// Checks the layout invariants, returning a description of the first violation.
    pub fn check_invariants(&self, vocab: &VocabConfig) -> Result<(), String> {
        let n = self.tokens.len();
        if n != self.segment_ids.len() {
            return Err(format!(
                "{} tokens but {} segment ids",
                n,
                self.segment_ids.len()
            ));
        }
        if n > vocab.context_window {
            return Err(format!(
                "length {n} exceeds window {}",
                vocab.context_window
            ));
        }
        if self.doc_ids.is_empty() {
            return Err("no documents".into());
        }
        let content_len = self
            .segment_ids
            .iter()
            .position(|&s| s == PAD_SEGMENT)
            .unwrap_or(n);
        if self.segment_ids[content_len..]
            .iter()
            .any(|&s| s != PAD_SEGMENT)
            || self.tokens[content_len..]
                .iter()
                .any(|&t| t != vocab.pad_id)
        {
            return Err("non-PAD content after the first PAD position".into());
        }
        let mut expected_seps = Vec::new();
        let mut prev = 0;
        for (i, (&tok, &seg)) in self.tokens[..content_len]
            .iter()
            .zip(&self.segment_ids[..content_len])
            .enumerate()
        {
            if seg < prev || seg > prev + 1 {
                return Err(format!("segment id jumps from {prev} to {seg} at {i}"));
            }
            if seg == prev + 1 && !expected_seps.last().is_some_and(|&p| p + 1 == i) {
                return Err(format!("segment {seg} at {i} not preceded by SEP"));
            }
            prev = seg;
            if tok == vocab.sep_id {
                expected_seps.push(i);
            } else if tok == vocab.pad_id {
                return Err(format!("PAD token inside content at {i}"));
            }
        }
        if expected_seps != self.sep_positions {
            return Err(format!(
                "sep_positions {:?} disagree with SEP tokens at {:?}",
                self.sep_positions, expected_seps
            ));
        }
        if expected_seps.last().is_some_and(|&p| p + 1 == content_len) || content_len == 0 {
            return Err("sequence ends with SEP or is empty".into());
        }
        if expected_seps.len() + 1 != self.doc_ids.len() || prev as usize + 1 != self.doc_ids.len()
        {
            return Err(format!(
                "{} documents but {} separators",
                self.doc_ids.len(),
                expected_seps.len()
            ));
        }
        Ok(())
    }
}

/// Emitted when a document cannot fit the window even on its own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackWarning {
    pub doc_id: String,
    pub doc_len: usize,
    pub context_window: usize,
}

impl fmt::Display for PackWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "document {:?} has {} tokens and was hard-truncated to the {}-token window",
            self.doc_id, self.doc_len, self.context_window
        )
    }
}

/// Result of laying out one tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Materialized {
    pub sequence: PackedSequence,
    /// Documents that would have started at or past the window. The caller
    /// packs them as a new tuple.
    pub overflow: Vec<String>,
    pub warning: Option<PackWarning>,
}

/// Stable per-purpose random stream.
pub fn derive_rng(purpose: &str, seed: u64, epoch: u64, group: Option<&str>) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(purpose.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update(epoch.to_le_bytes());
    if let Some(group) = group {
        hasher.update([1u8]);
        hasher.update(group.as_bytes());
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Partitions `doc_ids` into randomly ordered tuples sized by `strategy`.
pub fn pack_group<R: Rng + ?Sized>(
    doc_ids: &[String],
    strategy: &PackingStrategy,
    rng: &mut R,
) -> Result<Vec<Vec<String>>, PackError> {
    strategy.validate()?;
    if doc_ids.is_empty() {
        return Err(PackError::EmptyTuple);
    }
    let mut shuffled = doc_ids.to_vec();
    shuffled.shuffle(rng);

    let choices: Vec<usize> = match strategy {
        PackingStrategy::NoPacking => vec![1],
        PackingStrategy::Fixed(x) => vec![*x],
        PackingStrategy::Multi(set) => set.iter().copied().collect(),
    };
    let mut tuples = Vec::new();
    let mut rest = shuffled.as_slice();
    while !rest.is_empty() {
        let size = if choices.len() == 1 {
            choices[0]
        } else {
            choices[rng.gen_range(0..choices.len())]
        };
        let (head, tail) = rest.split_at(size.min(rest.len()));
        tuples.push(head.to_vec());
        rest = tail;
    }
    Ok(tuples)
}

/// Lays out `doc₁ SEP doc₂ SEP … doc_k` and pads to the window.
///
/// The last document that fits is truncated if needed. Documents that would
/// start at or after the window (or right after a SEP in the last slot) are
/// returned in [`Materialized::overflow`].
pub fn materialize(
    ids: &[String],
    corpus: &Corpus,
    vocab: &VocabConfig,
) -> Result<Materialized, PackError> {
    if ids.is_empty() {
        return Err(PackError::EmptyTuple);
    }
    let window = vocab.context_window;
    let mut tokens = Vec::with_capacity(window);
    let mut segment_ids = Vec::with_capacity(window);
    let mut sep_positions = Vec::new();
    let mut doc_ids = Vec::new();
    let mut truncated = false;
    let mut overflow = Vec::new();
    let mut warning = None;

    for (k, id) in ids.iter().enumerate() {
        let doc = corpus
            .document(id)
            .ok_or_else(|| PackError::UnknownDocument(id.clone()))?;
        if k > 0 {
            // SEP plus at least one document token must fit.
            if tokens.len() + 1 >= window {
                overflow = ids[k..].to_vec();
                break;
            }
            sep_positions.push(tokens.len());
            tokens.push(vocab.sep_id);
            segment_ids.push(k as i32 - 1);
        }
        let room = window - tokens.len();
        let take = room.min(doc.tokens.len());
        tokens.extend_from_slice(&doc.tokens[..take]);
        segment_ids.extend(std::iter::repeat_n(k as i32, take));
        doc_ids.push(id.clone());
        if take < doc.tokens.len() {
            truncated = true;
            if k == 0 {
                let w = PackWarning {
                    doc_id: id.clone(),
                    doc_len: doc.tokens.len(),
                    context_window: window,
                };
                log::warn!("{w}");
                warning = Some(w);
            }
            overflow = ids[k + 1..].to_vec();
            break;
        }
    }

    tokens.resize(window, vocab.pad_id);
    segment_ids.resize(window, PAD_SEGMENT);
    Ok(Materialized {
        sequence: PackedSequence {
            tokens,
            segment_ids,
            doc_ids,
            truncated,
            sep_positions,
        },
        overflow,
        warning,
    })
}

/// Everything that determines an epoch plan besides the corpus and epoch index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub strategy: PackingStrategy,
    pub mode: EpochMode,
    pub seed: u64,
    pub batch_size: usize,
}

/// All sequences and batches for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch_index: u64,
    pub strategy: PackingStrategy,
    pub mode: EpochMode,
    pub seed: u64,
    pub batch_size: usize,
    pub sequences: Vec<PackedSequence>,
    pub batches: Vec<Vec<usize>>,
    pub warnings: Vec<PackWarning>,
}

impl EpochPlan {
    pub fn total_documents(&self) -> usize {
        self.sequences.iter().map(|s| s.doc_ids.len()).sum()
    }
}

/// Tuples for one group at one epoch, following the epoch mode.
pub fn group_tuples(
    group: &DocumentGroup,
    config: &PlanConfig,
    epoch_index: u64,
) -> Result<Vec<Vec<String>>, PackError> {
    if group.doc_ids.is_empty() {
        return Err(PackError::EmptyGroup(group.question_id.clone()));
    }
    let qid = Some(group.question_id.as_str());
    let pack_epoch = match config.mode {
        EpochMode::RepackEveryEpoch => epoch_index,
        EpochMode::NoRepack | EpochMode::NoRepackReshuffleOrder => 0,
    };
    let mut rng = derive_rng("pack", config.seed, pack_epoch, qid);
    let mut tuples = pack_group(&group.doc_ids, &config.strategy, &mut rng)?;
    if config.mode == EpochMode::NoRepackReshuffleOrder && epoch_index > 0 {
        let mut order_rng = derive_rng("order", config.seed, epoch_index, qid);
        for tuple in &mut tuples {
            tuple.shuffle(&mut order_rng);
        }
    }
    Ok(tuples)
}

/// Packed sequences for one group, with overflowing documents re-queued as
/// follow-up tuples.
pub fn group_sequences(
    group: &DocumentGroup,
    corpus: &Corpus,
    config: &PlanConfig,
    epoch_index: u64,
    vocab: &VocabConfig,
) -> Result<(Vec<PackedSequence>, Vec<PackWarning>), PackError> {
    let mut queue: VecDeque<Vec<String>> = group_tuples(group, config, epoch_index)?.into();
    let mut sequences = Vec::with_capacity(queue.len());
    let mut warnings = Vec::new();
    while let Some(tuple) = queue.pop_front() {
        let m = materialize(&tuple, corpus, vocab)?;
        sequences.push(m.sequence);
        warnings.extend(m.warning);
        if !m.overflow.is_empty() {
            queue.push_front(m.overflow);
        }
    }
    Ok((sequences, warnings))
}

/// Builds the sequences and batches for one epoch.
///
/// Groups are packed in parallel; the result does not depend on scheduling.
pub fn plan_epoch(
    corpus: &Corpus,
    config: &PlanConfig,
    epoch_index: u64,
    vocab: &VocabConfig,
) -> Result<EpochPlan, PackError> {
    config.strategy.validate()?;
    if config.batch_size == 0 {
        return Err(PackError::InvalidBatchSize);
    }
    let per_group = corpus
        .groups()
        .par_iter()
        .map(|g| group_sequences(g, corpus, config, epoch_index, vocab))
        .collect::<Result<Vec<_>, _>>()?;

    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for (seqs, warns) in per_group {
        sequences.extend(seqs);
        warnings.extend(warns);
    }

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut derive_rng("batch", config.seed, epoch_index, None));
    let batches = order
        .chunks(config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();

    Ok(EpochPlan {
        epoch_index,
        strategy: config.strategy.clone(),
        mode: config.mode,
        seed: config.seed,
        batch_size: config.batch_size,
        sequences,
        batches,
        warnings,
    })
}
