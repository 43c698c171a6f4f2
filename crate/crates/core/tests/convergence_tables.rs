//! Document-count accounting over the shipped convergence tables.

use std::path::PathBuf;

use docpack::stats::{convergence_table_check, StrategyTable, DEFAULT_TOLERANCE};
use docpack::PackingStrategy;

fn table(name: &str) -> StrategyTable {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn main_table_within_tolerance() {
    let report = convergence_table_check(
        &table("convergence_steps.json"),
        Some(&table("convergence_docs.json")),
        DEFAULT_TOLERANCE,
    )
    .unwrap();
    assert_eq!(report.cells.len(), 15);
    assert!(
        report.all_within_tolerance(),
        "{:?}",
        report.flagged().collect::<Vec<_>>()
    );
    let first = &report.cells[0];
    assert_eq!(first.docs, 48_800.0 * 32.0);
    let worst = report
        .cells
        .iter()
        .max_by(|a, b| a.rel_err.unwrap().total_cmp(&b.rel_err.unwrap()))
        .unwrap();
    // 13.7k × 128 = 1.7536M against 1.8M.
    assert_eq!(
        (&worst.strategy, worst.bs),
        (&PackingStrategy::NoPacking, 128)
    );
    assert!((worst.rel_err.unwrap() - 0.0464 / 1.8).abs() < 1e-12);
}

#[test]
fn pack8_bs256_is_absent() {
    let steps = table("convergence_steps.json");
    assert_eq!(steps.get(&PackingStrategy::Fixed(8), 256), None);
    assert_eq!(steps.get(&PackingStrategy::Fixed(8), 128), Some(6600.0));
}

#[test]
fn cross_doc_disabled_table_within_tolerance() {
    let report = convergence_table_check(
        &table("convergence_steps_no_cross_doc.json"),
        Some(&table("convergence_docs_no_cross_doc.json")),
        DEFAULT_TOLERANCE,
    )
    .unwrap();
    let docs: Vec<f64> = report.cells.iter().map(|c| c.docs).collect();
    assert_eq!(docs, [1_561_600.0, 1_561_600.0, 1_696_000.0, 1_702_400.0]);
    assert!(report.all_within_tolerance());
}

#[test]
fn tight_tolerance_flags_rounded_cells() {
    let report = convergence_table_check(
        &table("convergence_steps.json"),
        Some(&table("convergence_docs.json")),
        0.01,
    )
    .unwrap();
    assert!(!report.all_within_tolerance());
    assert!(report
        .flagged()
        .any(|c| c.strategy == PackingStrategy::NoPacking && c.bs == 32));
}
