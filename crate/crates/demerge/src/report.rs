//! Report tables: one row per method, one cell per seed, columns for each
//! in-domain test set, their macro-average, and the OOD macro-average.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const IN_DOMAIN_MACRO: &str = "in_domain_macro";
pub const OOD_MACRO: &str = "ood_macro";

/// Test scores of one model (or ensemble).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub in_domain: Vec<f64>,
    pub ood: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Scores {
    pub fn in_domain_macro(&self) -> f64 {
        mean(&self.in_domain).unwrap_or(f64::NAN)
    }

    pub fn ood_macro(&self) -> Option<f64> {
        mean(&self.ood)
    }

    /// Per-domain scores, the in-domain macro, then the OOD macro if any.
    pub fn row(&self) -> Vec<f64> {
        let mut row = self.in_domain.clone();
        row.push(self.in_domain_macro());
        row.extend(self.ood_macro());
        row
    }

    /// Elementwise mean; every entry must have the same shape.
    pub fn average(all: &[Scores]) -> Option<Scores> {
        let first = all.first()?;
        let avg = |pick: fn(&Scores) -> &Vec<f64>| -> Vec<f64> {
            (0..pick(first).len())
                .map(|j| all.iter().map(|s| pick(s)[j]).sum::<f64>() / all.len() as f64)
                .collect()
        };
        Some(Scores {
            in_domain: avg(|s| &s.in_domain),
            ood: avg(|s| &s.ood),
        })
    }

    /// Per-column maximum over individual models.
    pub fn best_of(all: &[Scores]) -> Option<Scores> {
        let first = all.first()?;
        let max = |pick: fn(&Scores) -> &Vec<f64>| -> Vec<f64> {
            (0..pick(first).len())
                .map(|j| {
                    all.iter()
                        .map(|s| pick(s)[j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        };
        Some(Scores {
            in_domain: max(|s| &s.in_domain),
            ood: max(|s| &s.ood),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    /// Aligned with [`ReportTable::columns`]; absent when the cell failed.
    pub values: Option<Vec<f64>>,
    /// Fitness-evaluator score of the method's output.
    pub dev_score: Option<f64>,
    pub error: Option<String>,
}

impl Cell {
    pub fn ok(seed: u64, scores: &Scores, dev_score: Option<f64>) -> Self {
        Self {
            seed,
            values: Some(scores.row()),
            dev_score,
            error: None,
        }
    }

    pub fn failed(seed: u64, error: impl Into<String>) -> Self {
        Self {
            seed,
            values: None,
            dev_score: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Method parameters as configured.
    pub params: serde_json::Value,
    pub cells: Vec<Cell>,
    /// Mean over the seeds whose cell succeeded.
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHash {
    pub role: String,
    pub sha256: String,
}

/// Provenance of one seed's cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub schema_hash: String,
    pub checkpoints: Vec<CheckpointHash>,
    pub evaluator: String,
    pub dev_fraction: f64,
    /// Model groups merged together: all slots, or every pair.
    pub groups: Vec<Vec<usize>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunManifest>,
}

impl ReportTable {
    pub fn columns_for(n_domains: usize, has_ood: bool) -> Vec<String> {
        let mut cols: Vec<String> = (0..n_domains).map(|d| format!("domain_{d}")).collect();
        cols.push(IN_DOMAIN_MACRO.into());
        if has_ood {
            cols.push(OOD_MACRO.into());
        }
        cols
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    /// One seed's value, if that cell succeeded.
    pub fn value(&self, method: &str, seed: u64, column: &str) -> Option<f64> {
        let j = self.column_index(column)?;
        let cell = self.row(method)?.cells.iter().find(|c| c.seed == seed)?;
        cell.values.as_ref().map(|v| v[j])
    }

    pub fn mean(&self, method: &str, column: &str) -> Option<f64> {
        let j = self.column_index(column)?;
        self.row(method)?.mean.as_ref().map(|m| m[j])
    }

    /// Fills in every row's seed mean.
    pub fn finish(&mut self) {
        for row in &mut self.rows {
            let ok: Vec<&Vec<f64>> = row.cells.iter().filter_map(|c| c.values.as_ref()).collect();
            row.mean = (!ok.is_empty()).then(|| {
                (0..self.columns.len())
                    .map(|j| ok.iter().map(|v| v[j]).sum::<f64>() / ok.len() as f64)
                    .collect()
            });
        }
    }

    /// `method,seed,<columns>,dev_score,error`, with a `mean` line per method.
    pub fn to_csv(&self) -> String {
        let mut out = format!("method,seed,{},dev_score,error\n", self.columns.join(","));
        let blanks = ",".repeat(self.columns.len().saturating_sub(1));
        for row in &self.rows {
            for cell in &row.cells {
                let values = match &cell.values {
                    Some(v) => v
                        .iter()
                        .map(|x| format!("{x:.6}"))
                        .collect::<Vec<_>>()
                        .join(","),
                    None => blanks.clone(),
                };
                let dev = cell
                    .dev_score
                    .map(|d| format!("{d:.6}"))
                    .unwrap_or_default();
                let err = cell.error.as_deref().map(csv_quote).unwrap_or_default();
                let _ = writeln!(out, "{},{},{values},{dev},{err}", row.method, cell.seed);
            }
            if let Some(m) = &row.mean {
                let values = m
                    .iter()
                    .map(|x| format!("{x:.6}"))
                    .collect::<Vec<_>>()
                    .join(",");
                let _ = writeln!(out, "{},mean,{values},,", row.method);
            }
        }
        out
    }
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
}
