//! Vel-R² comparison table: rows are (model, strategy), columns datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use blend_core::{BlendError, Result};
use serde_json::{json, Value};

use crate::commands::{file_hash, provenance, report_label};
use crate::TableArgs;

const MISSING: &str = "—";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: Vec<(String, String)>,
    pub datasets: Vec<String>,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<Option<f64>>>,
}

fn dataset_rank(name: &str) -> (usize, String) {
    let order = ["simple", "hierarchical", "complex"];
    (order.iter().position(|o| *o == name).unwrap_or(order.len()), name.to_string())
}

/// Builds the table; a dataset name seen with two different input hashes,
/// or two reports for one cell, is an error.
pub fn build(reports: &[(String, Value)]) -> Result<Table> {
    let mut dataset_ids: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut cells: BTreeMap<((String, String), String), f64> = BTreeMap::new();
    let mut rows = Vec::new();
    for (source, r) in reports {
        let name = r["dataset"]
            .as_str()
            .ok_or_else(|| BlendError::InvalidArgument(format!("{source}: not an eval report")))?
            .to_string();
        let id = r["provenance"]["inputs"]["dataset"].as_str().unwrap_or("").to_string();
        match dataset_ids.get(&name) {
            Some((prev, prev_src)) if *prev != id => {
                return Err(BlendError::InvalidArgument(format!(
                    "dataset `{name}` has different identifiers in {prev_src} ({prev}) and {source} ({id})"
                )))
            }
            Some(_) => {}
            None => {
                dataset_ids.insert(name.clone(), (id, source.clone()));
            }
        }
        let row = report_label(r);
        let value = r["vel_r2"]["mean"].as_f64();
        if !rows.contains(&row) {
            rows.push(row.clone());
        }
        if let Some(v) = value {
            if cells.insert((row.clone(), name.clone()), v).is_some() {
                return Err(BlendError::InvalidArgument(format!(
                    "two reports for {} / {} on `{name}`",
                    row.0, row.1
                )));
            }
        }
    }
    let mut datasets: Vec<String> = dataset_ids.into_keys().collect();
    datasets.sort_by_key(|d| dataset_rank(d));
    let grid = rows
        .iter()
        .map(|row| datasets.iter().map(|d| cells.get(&(row.clone(), d.clone())).copied()).collect())
        .collect();
    Ok(Table {
        rows,
        datasets,
        cells: grid,
    })
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,strategy");
        for d in &self.datasets {
            let _ = write!(s, ",{d}");
        }
        s.push('\n');
        for (row, vals) in self.rows.iter().zip(&self.cells) {
            let _ = write!(s, "{},{}", row.0, row.1);
            for v in vals {
                match v {
                    Some(x) => {
                        let _ = write!(s, ",{x}");
                    }
                    None => {
                        let _ = write!(s, ",{MISSING}");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<Vec<String>> = vec![];
        let mut header = vec!["model".to_string(), "strategy".to_string()];
        header.extend(self.datasets.iter().cloned());
        lines.push(header);
        for (row, vals) in self.rows.iter().zip(&self.cells) {
            let mut l = vec![row.0.clone(), row.1.clone()];
            l.extend(vals.iter().map(|v| v.map_or(MISSING.to_string(), |x| format!("{x:.3}"))));
            lines.push(l);
        }
        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    let pad = w - v.chars().count();
                    if c < 2 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (cols - 1);
                s.push_str(&"-".repeat(total));
                s.push('\n');
            }
        }
        s
    }
}

pub fn run(a: TableArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut inputs = BTreeMap::new();
    for p in &a.reports {
        let text = fs::read_to_string(p).map_err(|e| BlendError::io(p, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| BlendError::Format {
            path: p.clone(),
            message: e.to_string(),
        })?;
        inputs.insert(p.display().to_string(), file_hash(p)?);
        reports.push((p.display().to_string(), v));
    }
    let table = build(&reports)?;
    let text = table.to_text();
    if let Some(dir) = &a.out {
        let prov = provenance("table", json!({"metric": "vel_r2.mean"}), BTreeMap::new());
        let mut prov = prov;
        prov["inputs"] = json!(inputs);
        let sidecar = json!({
            "provenance": prov,
            "rows": table.rows,
            "datasets": table.datasets,
            "cells": table.cells,
        });
        fs::create_dir_all(dir).map_err(|e| BlendError::io(dir, e))?;
        let w = |name: &str, body: String| -> Result<()> {
            let path: PathBuf = dir.join(name);
            fs::write(&path, body).map_err(|e| BlendError::io(&path, e))
        };
        w("table.csv", table.to_csv())?;
        w("table.txt", text.clone())?;
        w("table.json", format!("{}\n", serde_json::to_string_pretty(&sidecar)?))?;
    }
    print!("{text}");
    Ok(())
}
