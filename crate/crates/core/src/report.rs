//! Mean/std tables over splits, written as CSV, markdown or JSON.
//!
//! Standard deviations use the population formula `sqrt(Σ(x − mean)² / n)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Metric;

pub const STD_CONVENTION: &str = "population";

/// A row or column label with its position in the experiment's own order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key {
    pub rank: usize,
    pub label: String,
}

impl Key {
    pub fn new(rank: usize, label: impl Into<String>) -> Self {
        Key {
            rank,
            label: label.into(),
        }
    }
}

/// One metric value from one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub row: Key,
    pub col: Key,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub col: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub metric: Metric,
    pub std_convention: String,
    pub row_header: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
}

impl ResultTable {
    pub fn cell(&self, row: &str, col: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// Every cell has exactly `runs` runs.
    pub fn check_runs(&self, runs: usize) -> Result<()> {
        match self.cells.iter().find(|c| c.n != runs) {
            Some(c) => Err(Error::invalid(format!(
                "cell ({}, {}) has {} runs, expected {runs}",
                c.row, c.col, c.n
            ))),
            None => Ok(()),
        }
    }
}

/// `(mean, population std)`; values are sorted first so the result does not
/// depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(results: &[RunResult], row_header: &str) -> Result<ResultTable> {
    let metric = results.first().map_or(Metric::Accuracy, |r| r.metric);
    if let Some(r) = results.iter().find(|r| r.metric != metric) {
        return Err(Error::invalid(format!(
            "cannot aggregate mixed metrics {metric} and {}",
            r.metric
        )));
    }
    let mut groups: BTreeMap<(&Key, &Key), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry((&r.row, &r.col)).or_default().push(r.value);
    }
    let mut rows: Vec<&Key> = results.iter().map(|r| &r.row).collect();
    rows.sort();
    rows.dedup();
    let mut cols: Vec<&Key> = results.iter().map(|r| &r.col).collect();
    cols.sort();
    cols.dedup();
    let mut warnings = Vec::new();
    let cells = groups
        .into_iter()
        .map(|((row, col), values)| {
            let (mean, std) = mean_std(&values);
            if values.len() == 1 {
                warnings.push(format!(
                    "cell ({}, {}) has a single run; std reported as 0",
                    row.label, col.label
                ));
            }
            Cell {
                row: row.label.clone(),
                col: col.label.clone(),
                mean,
                std,
                n: values.len(),
            }
        })
        .collect();
    Ok(ResultTable {
        metric,
        std_convention: STD_CONVENTION.to_string(),
        row_header: row_header.to_string(),
        rows: rows.into_iter().map(|k| k.label.clone()).collect(),
        cols: cols.into_iter().map(|k| k.label.clone()).collect(),
        cells,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            "json" => Ok(Format::Json),
            _ => Err(Error::invalid(format!("unknown table format {s:?}"))),
        }
    }
}

/// `91.0 (0.7)` for mean 0.910, std 0.007.
pub fn percent_cell(mean: f64, std: f64) -> String {
    format!("{:.1} ({:.1})", 100.0 * mean, 100.0 * std)
}

pub fn to_csv(table: &ResultTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row_key", "col_key", "mean", "std", "n"])?;
    for c in &table.cells {
        w.write_record([
            c.row.clone(),
            c.col.clone(),
            c.mean.to_string(),
            c.std.to_string(),
            c.n.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Rows × columns of `mean (std)` in percent. Tables with more than one
/// column get a trailing `Avg` column holding the mean of the row's cell
/// means.
pub fn to_markdown(table: &ResultTable) -> String {
    let with_avg = table.cols.len() > 1;
    let mut out = String::new();
    let mut header = vec![table.row_header.clone()];
    header.extend(table.cols.iter().cloned());
    if with_avg {
        header.push("Avg".into());
    }
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", vec!["---|"; header.len()].concat());
    for row in &table.rows {
        let mut line = vec![row.clone()];
        let mut means = Vec::new();
        for col in &table.cols {
            match table.cell(row, col) {
                Some(c) => {
                    means.push(c.mean);
                    line.push(percent_cell(c.mean, c.std));
                }
                None => line.push("-".into()),
            }
        }
        if with_avg {
            let avg = means.iter().sum::<f64>() / means.len().max(1) as f64;
            line.push(format!("{:.1}", 100.0 * avg));
        }
        let _ = writeln!(out, "| {} |", line.join(" | "));
    }
    out
}

pub fn to_json(table: &ResultTable) -> Result<String> {
    Ok(serde_json::to_string_pretty(table)? + "\n")
}

pub fn render(table: &ResultTable, format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(table),
        Format::Markdown => Ok(to_markdown(table)),
        Format::Json => to_json(table),
    }
}

pub fn emit(table: &ResultTable, format: Format, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render(table, format)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(row: &str, rank: usize, value: f64) -> RunResult {
        RunResult {
            row: Key::new(rank, row),
            col: Key::new(0, "synthetic"),
            metric: Metric::Accuracy,
            value,
        }
    }

    #[test]
    fn constant_runs_have_zero_std() {
        let t = aggregate(&vec![run("Mask", 0, 0.9); 5], "Augmentation").unwrap();
        let c = &t.cells[0];
        assert!((c.mean - 0.9).abs() < 1e-12);
        assert_eq!(c.std, 0.0);
        assert_eq!(c.n, 5);
        assert!(t.warnings.is_empty());
        t.check_runs(5).unwrap();
        assert!(t.check_runs(4).is_err());
    }

    #[test]
    fn population_std() {
        let t = aggregate(&[run("Mask", 0, 0.8), run("Mask", 0, 1.0)], "x").unwrap();
        assert!((t.cells[0].mean - 0.9).abs() < 1e-12);
        assert!((t.cells[0].std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_run_warns() {
        let t = aggregate(&[run("Mask", 0, 0.7)], "x").unwrap();
        assert_eq!(t.cells[0].std, 0.0);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn mixed_metrics_rejected() {
        let mut b = run("Mask", 0, 0.7);
        b.metric = Metric::F1;
        assert!(aggregate(&[run("Mask", 0, 0.7), b], "x").is_err());
    }

    #[test]
    fn mean_and_std_cell_format() {
        assert_eq!(percent_cell(0.910, 0.007), "91.0 (0.7)");
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = aggregate(&[], "Augmentation").unwrap();
        assert_eq!(to_csv(&t).unwrap(), "row_key,col_key,mean,std,n\n");
        assert_eq!(to_markdown(&t).lines().count(), 2);
    }

    #[test]
    fn rows_follow_rank_not_name() {
        let rs = [run("Mask", 4, 0.9), run("Dropout", 0, 0.8), run("Crop", 1, 0.7)];
        let t = aggregate(&rs, "Augmentation").unwrap();
        assert_eq!(t.rows, vec!["Dropout", "Crop", "Mask"]);
    }

    #[test]
    fn json_round_trip_and_emit() {
        let rs = [run("Mask", 0, 0.81), run("Mask", 0, 0.93), run("Swap", 1, 0.77)];
        let t = aggregate(&rs, "Augmentation").unwrap();
        let back: ResultTable = serde_json::from_str(&to_json(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        let dir = tempfile::tempdir().unwrap();
        emit(&t, Format::Markdown, dir.path().join("t.md")).unwrap();
        assert!(emit(&t, Format::Csv, dir.path().join("missing/t.csv")).is_err());
    }

    fn arb_results() -> impl Strategy<Value = Vec<RunResult>> {
        prop::collection::vec((0usize..3, 0usize..2, 0.0f64..1.0), 1..30).prop_map(|v| {
            v.into_iter()
                .map(|(r, c, x)| RunResult {
                    row: Key::new(r, format!("r{r}")),
                    col: Key::new(c, format!("c{c}")),
                    metric: Metric::Accuracy,
                    value: x,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn order_invariant(rs in arb_results(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = rs.clone();
            shuffled.shuffle(&mut crate::rng::Streams::new(seed).rng());
            prop_assert_eq!(aggregate(&shuffled, "h").unwrap(), aggregate(&rs, "h").unwrap());
        }

        #[test]
        fn csv_and_markdown_agree(rs in arb_results()) {
            let t = aggregate(&rs, "h").unwrap();
            let csv_text = to_csv(&t).unwrap();
            let md = to_markdown(&t);
            let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
            for rec in reader.records() {
                let rec = rec.unwrap();
                let mean: f64 = rec[2].parse().unwrap();
                let std: f64 = rec[3].parse().unwrap();
                prop_assert!(std >= 0.0);
                let line = md.lines().find(|l| l.starts_with(&format!("| {} |", &rec[0]))).unwrap();
                let col = t.cols.iter().position(|c| c == &rec[1]).unwrap();
                let cell = line.split(" | ").nth(col + 1).unwrap().trim_end_matches(" |");
                prop_assert_eq!(cell, percent_cell(mean, std));
            }
        }
    }
}
