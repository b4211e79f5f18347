//! Aggregate per-split results into a mean (std) table and emit it in
//! every format.

use sflm::report::{aggregate, render, Format, Key, RunResult};
use sflm::trainer::Metric;

fn main() -> anyhow::Result<()> {
    let rows = ["Dropout", "Crop", "Swap", "Deletion", "Mask"];
    let cols = ["sst-2", "mrpc"];
    let mut results = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, col) in cols.iter().enumerate() {
            for split in 0..5 {
                let value = 0.70 + 0.02 * r as f64 + 0.05 * c as f64 + 0.004 * split as f64;
                results.push(RunResult {
                    row: Key::new(r, *row),
                    col: Key::new(c, *col),
                    metric: Metric::Accuracy,
                    value,
                });
            }
        }
    }
    let table = aggregate(&results, "Augmentation")?;
    table.check_runs(5)?;
    for format in [Format::Markdown, Format::Csv] {
        println!("{}", render(&table, format)?);
    }
    Ok(())
}
