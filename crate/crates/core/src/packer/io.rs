//! On-disk forms of an epoch plan.
//!
//! Canonical: one JSON record per sequence plus a JSON manifest.
//!
//! Compact: two flat little-endian arrays and a JSON index.
//! - tokens file: every sequence's tokens as `u32` LE, back to back.
//! - segments file: every sequence's segment IDs as `i32` LE, same layout.
//! - index file: [`CompactIndex`]; record `i` occupies elements
//!   `offset .. offset + length` of both arrays.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{EpochMode, EpochPlan, PackError, PackedSequence, PackingStrategy};

/// Manifest accompanying a packed records file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub strategy: PackingStrategy,
    pub mode: EpochMode,
    pub seed: u64,
    pub epoch: u64,
    pub batch_size: usize,
    pub batches: Vec<Vec<usize>>,
}

impl PlanManifest {
    pub fn of(plan: &EpochPlan) -> Self {
        Self {
            strategy: plan.strategy.clone(),
            mode: plan.mode,
            seed: plan.seed,
            epoch: plan.epoch_index,
            batch_size: plan.batch_size,
            batches: plan.batches.clone(),
        }
    }

    fn into_plan(self, sequences: Vec<PackedSequence>) -> Result<EpochPlan, PackError> {
        let n = sequences.len();
        let mut seen = vec![false; n];
        for (b, batch) in self.batches.iter().enumerate() {
            for &idx in batch {
                if idx >= n || std::mem::replace(&mut seen[idx], true) {
                    return Err(PackError::Format {
                        record: idx,
                        message: format!(
                            "batch {b} references sequence {idx} out of range or twice"
                        ),
                    });
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(PackError::Format {
                record: missing,
                message: "sequence not assigned to any batch".into(),
            });
        }
        Ok(EpochPlan {
            epoch_index: self.epoch,
            strategy: self.strategy,
            mode: self.mode,
            seed: self.seed,
            batch_size: self.batch_size,
            sequences,
            batches: self.batches,
            warnings: Vec::new(),
        })
    }
}

fn check_record(record: usize, seq: &PackedSequence) -> Result<(), PackError> {
    if seq.tokens.len() != seq.segment_ids.len() {
        return Err(PackError::Format {
            record,
            message: format!(
                "{} tokens but {} segment ids",
                seq.tokens.len(),
                seq.segment_ids.len()
            ),
        });
    }
    Ok(())
}

/// Writes the canonical records (one per line) and manifest.
pub fn write_canonical<R: Write, M: Write>(
    plan: &EpochPlan,
    mut records: R,
    mut manifest: M,
) -> Result<(), PackError> {
    for seq in &plan.sequences {
        serde_json::to_writer(&mut records, seq).map_err(std::io::Error::from)?;
        records.write_all(b"\n")?;
    }
    records.flush()?;
    serde_json::to_writer(&mut manifest, &PlanManifest::of(plan)).map_err(std::io::Error::from)?;
    manifest.write_all(b"\n")?;
    manifest.flush()?;
    Ok(())
}

/// Reads a plan written by [`write_canonical`]. Record indices in errors are 0-based.
pub fn read_canonical<R: BufRead, M: Read>(
    records: R,
    manifest: M,
) -> Result<EpochPlan, PackError> {
    let mut sequences = Vec::new();
    for line in records.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = sequences.len();
        let seq: PackedSequence = serde_json::from_str(&line).map_err(|e| PackError::Format {
            record,
            message: e.to_string(),
        })?;
        check_record(record, &seq)?;
        sequences.push(seq);
    }
    let manifest: PlanManifest =
        serde_json::from_reader(manifest).map_err(|e| PackError::Format {
            record: sequences.len(),
            message: format!("manifest: {e}"),
        })?;
    manifest.into_plan(sequences)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactRecord {
    pub offset: u64,
    pub length: u64,
    pub doc_ids: Vec<String>,
    pub truncated: bool,
    pub sep_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactIndex {
    pub manifest: PlanManifest,
    pub records: Vec<CompactRecord>,
}

pub fn write_compact<T: Write, S: Write, I: Write>(
    plan: &EpochPlan,
    mut tokens: T,
    mut segments: S,
    index: I,
) -> Result<(), PackError> {
    let mut records = Vec::with_capacity(plan.sequences.len());
    let mut offset = 0u64;
    for seq in &plan.sequences {
        for t in &seq.tokens {
            tokens.write_all(&t.to_le_bytes())?;
        }
        for s in &seq.segment_ids {
            segments.write_all(&s.to_le_bytes())?;
        }
        records.push(CompactRecord {
            offset,
            length: seq.tokens.len() as u64,
            doc_ids: seq.doc_ids.clone(),
            truncated: seq.truncated,
            sep_positions: seq.sep_positions.clone(),
        });
        offset += seq.tokens.len() as u64;
    }
    tokens.flush()?;
    segments.flush()?;
    let index_doc = CompactIndex {
        manifest: PlanManifest::of(plan),
        records,
    };
    serde_json::to_writer(index, &index_doc).map_err(std::io::Error::from)?;
    Ok(())
}

fn read_words<R: Read>(mut r: R) -> Result<Vec<[u8; 4]>, PackError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(PackError::Format {
            record: 0,
            message: format!("array length {} is not a multiple of 4 bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub fn read_compact<T: Read, S: Read, I: Read>(
    tokens: T,
    segments: S,
    index: I,
) -> Result<EpochPlan, PackError> {
    let tokens: Vec<u32> = read_words(tokens)?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect();
    let segments: Vec<i32> = read_words(segments)?
        .into_iter()
        .map(i32::from_le_bytes)
        .collect();
    let index: CompactIndex = serde_json::from_reader(index).map_err(|e| PackError::Format {
        record: 0,
        message: format!("index: {e}"),
    })?;
    let mut sequences = Vec::with_capacity(index.records.len());
    for (i, rec) in index.records.into_iter().enumerate() {
        let start = rec.offset as usize;
        let end = start + rec.length as usize;
        if end > tokens.len() || end > segments.len() {
            return Err(PackError::Format {
                record: i,
                message: format!("range {start}..{end} exceeds array length"),
            });
        }
        sequences.push(PackedSequence {
            tokens: tokens[start..end].to_vec(),
            segment_ids: segments[start..end].to_vec(),
            doc_ids: rec.doc_ids,
            truncated: rec.truncated,
            sep_positions: rec.sep_positions,
        });
    }
    index.manifest.into_plan(sequences)
}
