//! Variant × dataset table of best-depth results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dnsd::layers::{Family, Flags, MapKind};
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::results::{ResultRow, ResultsFile, RESULTS_FILE};

/// Every `results.json` below `dir`, in sorted path order.
pub fn find_results(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|source| dnsd::Error::Io {
            path: d.clone(),
            source,
        })?;
        for entry in entries {
            let path = entry
                .map_err(|source| dnsd::Error::Io {
                    path: d.clone(),
                    source,
                })?
                .path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == RESULTS_FILE) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct VariantKey(Family, MapKind, Flags);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ColumnKey(u32, String);

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub variants: Vec<String>,
    /// `cells[variant][column]`.
    pub cells: Vec<Vec<Option<ResultRow>>>,
}

impl Report {
    /// Rows are variants, columns datasets (`G0..G10` first, in level
    /// order), each cell the variant's best-depth row on that dataset.
    pub fn build(rows: &[ResultRow]) -> Self {
        let mut table: BTreeMap<VariantKey, BTreeMap<ColumnKey, ResultRow>> = BTreeMap::new();
        let mut columns: BTreeMap<ColumnKey, ()> = BTreeMap::new();
        for row in rows {
            let col = ColumnKey(row.level.unwrap_or(u32::MAX), row.dataset.clone());
            columns.insert(col.clone(), ());
            let cells = table.entry(VariantKey(row.model, row.map, row.flags)).or_default();
            let replace = match cells.get(&col) {
                None => true,
                Some(cur) => preferred(row, cur),
            };
            if replace {
                cells.insert(col, row.clone());
            }
        }
        let columns: Vec<ColumnKey> = columns.into_keys().collect();
        let variants = table
            .keys()
            .map(|k| crate::spec::variant_label(k.0, k.1, k.2))
            .collect();
        let cells = table
            .values()
            .map(|cells| columns.iter().map(|c| cells.get(c).cloned()).collect())
            .collect();
        Self {
            columns: columns.into_iter().map(|c| c.1).collect(),
            variants,
            cells,
        }
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("| variant | {} |\n", self.columns.join(" | "));
        s += &format!("|---|{}\n", "---|".repeat(self.columns.len()));
        for (name, cells) in self.variants.iter().zip(&self.cells) {
            let text: Vec<String> = cells.iter().map(cell_text).collect();
            s += &format!("| {name} | {} |\n", text.join(" | "));
        }
        s
    }

    pub fn csv_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["variant".to_string()];
        header.extend(self.columns.iter().cloned());
        let rows = self
            .variants
            .iter()
            .zip(&self.cells)
            .map(|(name, cells)| {
                let mut r = vec![name.clone()];
                r.extend(cells.iter().map(cell_text));
                r
            })
            .collect();
        (header, rows)
    }
}

/// Best-marked rows win over unmarked ones, then higher mean validation
/// accuracy, then the shallower depth.
fn preferred(a: &ResultRow, b: &ResultRow) -> bool {
    (a.best, a.mean_val, std::cmp::Reverse(a.depth)) > (b.best, b.mean_val, std::cmp::Reverse(b.depth))
}

fn cell_text(cell: &Option<ResultRow>) -> String {
    match cell {
        Some(r) => format!("{:.1}±{:.1} (L{})", r.mean, r.std, r.depth),
        None => "-".into(),
    }
}

/// Load every results file under `dir` and tabulate.
pub fn collect(dir: &Path) -> Result<Report> {
    let paths = find_results(dir)?;
    if paths.is_empty() {
        return Err(CliError::EmptyResults(dir.to_path_buf()));
    }
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(ResultsFile::load(p)?.rows);
    }
    Ok(Report::build(&rows))
}
