//! Attention permissions and loss masks derived from segment IDs.
//!
//! A [`MaskSpec`] is the interchange form: segment IDs plus the cross-document
//! flag. Query `i` may attend key `j` iff `j <= i`, neither is PAD, and either
//! cross-document attention is on or both carry the same segment ID.
//!
//! Dense masks are for tests and small exports only. Their byte form is a
//! row-major bitset: bit `i * len + j` lives in byte `(i * len + j) / 8` at bit
//! position `(i * len + j) % 8` (least significant bit first).

use thiserror::Error;

use crate::packer::{PackedSequence, PAD_SEGMENT};

/// Largest sequence length [`dense_mask`] accepts by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("position ({query}, {key}) out of range for length {len}")]
    OutOfRange {
        query: usize,
        key: usize,
        len: usize,
    },
    #[error("length {len} exceeds dense export cap {cap}")]
    TooLong { len: usize, cap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub segment_ids: Vec<i32>,
    pub cross_doc: bool,
}

impl MaskSpec {
    pub fn new(segment_ids: Vec<i32>, cross_doc: bool) -> Self {
        Self {
            segment_ids,
            cross_doc,
        }
    }

    pub fn from_sequence(seq: &PackedSequence, cross_doc: bool) -> Self {
        Self::new(seq.segment_ids.clone(), cross_doc)
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    fn allowed_unchecked(&self, i: usize, j: usize) -> bool {
        let (si, sj) = (self.segment_ids[i], self.segment_ids[j]);
        j <= i && si != PAD_SEGMENT && sj != PAD_SEGMENT && (self.cross_doc || si == sj)
    }
}

pub fn may_attend(spec: &MaskSpec, query: usize, key: usize) -> Result<bool, MaskError> {
    let len = spec.len();
    if query >= len || key >= len {
        return Err(MaskError::OutOfRange { query, key, len });
    }
    Ok(spec.allowed_unchecked(query, key))
}

/// Row-major boolean matrix stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask {
    len: usize,
    bits: Vec<u8>,
}

impl DenseMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        let idx = query * self.len + key;
        self.bits[idx / 8] >> (idx % 8) & 1 == 1
    }

    fn set(&mut self, query: usize, key: usize) {
        let idx = query * self.len + key;
        self.bits[idx / 8] |= 1 << (idx % 8);
    }

    pub fn count_allowed(&self) -> u64 {
        self.bits.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.len)
            .map(|i| (0..self.len).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// The documented little-endian bitset export.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(len: usize, bytes: Vec<u8>) -> Option<Self> {
        (bytes.len() == (len * len).div_ceil(8)).then_some(Self { len, bits: bytes })
    }
}

pub fn dense_mask(spec: &MaskSpec) -> Result<DenseMask, MaskError> {
    dense_mask_capped(spec, DEFAULT_DENSE_CAP)
}

pub fn dense_mask_capped(spec: &MaskSpec, cap: usize) -> Result<DenseMask, MaskError> {
    let len = spec.len();
    if len > cap {
        return Err(MaskError::TooLong { len, cap });
    }
    let mut mask = DenseMask {
        len,
        bits: vec![0; (len * len).div_ceil(8)],
    };
    for i in 0..len {
        for j in 0..=i {
            if spec.allowed_unchecked(i, j) {
                mask.set(i, j);
            }
        }
    }
    Ok(mask)
}

/// True on every non-PAD position, SEP included.
pub fn loss_mask(packed: &PackedSequence) -> Vec<bool> {
    packed
        .segment_ids
        .iter()
        .map(|&s| s != PAD_SEGMENT)
        .collect()
}

/// Number of permitted (query, key) pairs, in closed form.
///
/// With cross-document attention this is `N(N+1)/2` for `N` non-PAD
/// positions; without it, the sum of `L(L+1)/2` over segments.
pub fn allowed_pairs(spec: &MaskSpec) -> u64 {
    let tri = |n: u64| n * (n + 1) / 2;
    if spec.cross_doc {
        tri(spec
            .segment_ids
            .iter()
            .filter(|&&s| s != PAD_SEGMENT)
            .count() as u64)
    } else {
        let mut counts = std::collections::BTreeMap::<i32, u64>::new();
        for &s in spec.segment_ids.iter().filter(|&&s| s != PAD_SEGMENT) {
            *counts.entry(s).or_default() += 1;
        }
        counts.values().map(|&c| tri(c)).sum()
    }
}

/// Contiguous runs of equal segment ID as `(segment, start, end_exclusive)`.
pub fn segment_blocks(segment_ids: &[i32]) -> Vec<(i32, usize, usize)> {
    let mut blocks: Vec<(i32, usize, usize)> = Vec::new();
    for (i, &s) in segment_ids.iter().enumerate() {
        match blocks.last_mut() {
            Some(last) if last.0 == s => last.2 = i + 1,
            _ => blocks.push((s, i, i + 1)),
        }
    }
    blocks
}
