//! Padding, documents-per-batch and attention-cost accounting.
//!
//! Attention cost is reported as permitted query/key pairs, a
//! hardware-independent proxy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgen::{allowed_pairs, MaskSpec};
use crate::packer::{EpochPlan, PackingStrategy};

/// Default relative tolerance for comparing derived document counts against
/// rounded reference values.
pub const DEFAULT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("plan has no sequences")]
    EmptyPlan,
    #[error("documents per sequence of {0} vary; compute them from a plan instead")]
    VariableDocsPerSequence(PackingStrategy),
    #[error("table shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub num_sequences: usize,
    pub num_batches: usize,
    pub num_documents: usize,
    pub docs_per_batch_mean: f64,
    pub padding_ratio: f64,
    pub allowed_pairs_cross_on: u64,
    pub allowed_pairs_cross_off: u64,
}

/// Steps a run needed to converge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub strategy: PackingStrategy,
    pub batch_size: u64,
    pub steps_to_convergence: u64,
}

/// `steps × batch_size × documents per sequence`.
pub fn total_documents(rec: &ConvergenceRecord) -> Result<u64, StatsError> {
    let per_seq = rec
        .strategy
        .docs_per_sequence()
        .ok_or_else(|| StatsError::VariableDocsPerSequence(rec.strategy.clone()))?;
    Ok(rec.steps_to_convergence * rec.batch_size * per_seq as u64)
}

pub fn docs_per_batch(plan: &EpochPlan) -> Result<f64, StatsError> {
    if plan.sequences.is_empty() || plan.batches.is_empty() {
        return Err(StatsError::EmptyPlan);
    }
    let docs: usize = plan
        .batches
        .iter()
        .flatten()
        .map(|&i| plan.sequences[i].doc_ids.len())
        .sum();
    Ok(docs as f64 / plan.batches.len() as f64)
}

pub fn plan_stats(plan: &EpochPlan) -> Result<PlanStats, StatsError> {
    let docs_per_batch_mean = docs_per_batch(plan)?;
    let mut positions = 0usize;
    let mut pads = 0usize;
    let mut on = 0u64;
    let mut off = 0u64;
    for seq in &plan.sequences {
        positions += seq.len();
        pads += seq.num_pad();
        let mut spec = MaskSpec::from_sequence(seq, true);
        on += allowed_pairs(&spec);
        spec.cross_doc = false;
        off += allowed_pairs(&spec);
    }
    Ok(PlanStats {
        num_sequences: plan.sequences.len(),
        num_batches: plan.batches.len(),
        num_documents: plan.total_documents(),
        docs_per_batch_mean,
        padding_ratio: if positions == 0 {
            0.0
        } else {
            pads as f64 / positions as f64
        },
        allowed_pairs_cross_on: on,
        allowed_pairs_cross_off: off,
    })
}

/// One row of a strategy × batch-size table. `None` marks an unreported cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: PackingStrategy,
    pub values: Vec<Option<f64>>,
}

/// A strategy × batch-size table, e.g. steps to convergence or documents seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyTable {
    pub batch_sizes: Vec<u64>,
    pub rows: Vec<TableRow>,
}

impl StrategyTable {
    fn check_shape(&self) -> Result<(), StatsError> {
        for row in &self.rows {
            if row.values.len() != self.batch_sizes.len() {
                return Err(StatsError::ShapeMismatch(format!(
                    "row {} has {} cells for {} batch sizes",
                    row.strategy,
                    row.values.len(),
                    self.batch_sizes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, strategy: &PackingStrategy, batch_size: u64) -> Option<f64> {
        let col = self.batch_sizes.iter().position(|&b| b == batch_size)?;
        self.rows
            .iter()
            .find(|r| &r.strategy == strategy)
            .and_then(|r| r.values[col])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub strategy: PackingStrategy,
    pub bs: u64,
    pub docs: f64,
    #[serde(rename = "ref")]
    pub reference: Option<f64>,
    pub rel_err: Option<f64>,
    pub within_tolerance: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tolerance: f64,
    pub cells: Vec<CellReport>,
}

impl ConvergenceReport {
    /// Document-count table derived from the step table.
    pub fn documents_table(&self) -> Vec<(PackingStrategy, u64, f64)> {
        self.cells
            .iter()
            .map(|c| (c.strategy.clone(), c.bs, c.docs))
            .collect()
    }

    pub fn flagged(&self) -> impl Iterator<Item = &CellReport> {
        self.cells
            .iter()
            .filter(|c| c.within_tolerance == Some(false))
    }

    pub fn all_within_tolerance(&self) -> bool {
        self.flagged().next().is_none()
    }
}

fn relative_error(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (value - reference).abs() / reference.abs()
    }
}

/// Converts a step table into documents seen and, when a reference document
/// table is given, flags cells whose relative error exceeds `tolerance`.
///
/// Step counts may be fractional (e.g. `7.4k` is stored as `7400`); the
/// document count is `steps × batch size × documents per sequence`.
pub fn convergence_table_check(
    steps: &StrategyTable,
    reference: Option<&StrategyTable>,
    tolerance: f64,
) -> Result<ConvergenceReport, StatsError> {
    steps.check_shape()?;
    if let Some(r) = reference {
        r.check_shape()?;
        if r.batch_sizes != steps.batch_sizes {
            return Err(StatsError::ShapeMismatch(format!(
                "batch sizes {:?} vs reference {:?}",
                steps.batch_sizes, r.batch_sizes
            )));
        }
        let ours: Vec<_> = steps.rows.iter().map(|r| &r.strategy).collect();
        let theirs: Vec<_> = r.rows.iter().map(|r| &r.strategy).collect();
        if ours != theirs {
            return Err(StatsError::ShapeMismatch(
                "reference rows do not match step rows".into(),
            ));
        }
    }

    let mut cells = Vec::new();
    for (row_idx, row) in steps.rows.iter().enumerate() {
        let per_seq = row
            .strategy
            .docs_per_sequence()
            .ok_or_else(|| StatsError::VariableDocsPerSequence(row.strategy.clone()))?;
        for (col, (&bs, value)) in steps.batch_sizes.iter().zip(&row.values).enumerate() {
            let ref_cell = reference.map(|r| r.rows[row_idx].values[col]);
            let Some(step_count) = value else {
                if let Some(Some(_)) = ref_cell {
                    return Err(StatsError::ShapeMismatch(format!(
                        "{} / BS {bs}: reference has a value but the step table does not",
                        row.strategy
                    )));
                }
                continue;
            };
            let docs = step_count * bs as f64 * per_seq as f64;
            let (reference, rel_err, within) = match ref_cell {
                Some(Some(r)) => {
                    let e = relative_error(docs, r);
                    (Some(r), Some(e), Some(e <= tolerance))
                }
                Some(None) => {
                    return Err(StatsError::ShapeMismatch(format!(
                        "{} / BS {bs}: step table has a value but the reference does not",
                        row.strategy
                    )))
                }
                None => (None, None, None),
            };
            cells.push(CellReport {
                strategy: row.strategy.clone(),
                bs,
                docs,
                reference,
                rel_err,
                within_tolerance: within,
            });
        }
    }
    Ok(ConvergenceReport { tolerance, cells })
}
