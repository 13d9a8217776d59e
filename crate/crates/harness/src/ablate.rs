//! Module ablation grid: rows toggle the auxiliary objectives, columns
//! are training seeds, and each cell trains a fresh model from scratch.

use crate::config::{ModuleToggles, RunConfig};
use crate::synthworld::{DatasetHeader, SceneSample};
use crate::train::train;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Metrics summarized over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

/// Median of a nonempty slice; even lengths average the middle pair.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

impl CellSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let median = median(&values);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        CellSummary {
            median,
            min,
            max,
            values,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: ModuleToggles,
    /// Overall metric value summaries, keyed by metric name. Absent when
    /// every seed in the row failed.
    pub metrics: BTreeMap<String, CellSummary>,
    /// One message per failed seed, e.g. a diverged run. Failures leave
    /// the rest of the table intact.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub metric_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// The five configurations under study: no auxiliary objectives, each one
/// alone, and all of them together.
pub fn ablation_rows() -> Vec<(&'static str, ModuleToggles)> {
    let t = |oid, occ, osc| ModuleToggles { oid, occ, osc };
    vec![
        ("none", t(false, false, false)),
        ("oid", t(true, false, false)),
        ("occ", t(false, true, false)),
        ("osc", t(false, false, true)),
        ("all", t(true, true, true)),
    ]
}

const TABLE_METRICS: [&str; 3] = ["acc@0.25", "acc@0.5", "em@1"];

/// Trains every (row, seed) cell and summarizes. Cells run in parallel;
/// each is internally deterministic, so the table depends only on the
/// dataset, base config, and seed list.
pub fn run_ablation(
    base: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
    seeds: &[u64],
) -> AblationTable {
    let rows = ablation_rows();
    let cells: Vec<(usize, u64)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, _)| seeds.iter().map(move |&s| (r, s)))
        .collect();

    let results: Vec<Result<BTreeMap<String, f64>, String>> = cells
        .par_iter()
        .map(|&(row, seed)| {
            let mut cfg = base.clone();
            cfg.modules = rows[row].1;
            cfg.seed = seed;
            train(&cfg, header, samples, None)
                .map(|out| {
                    TABLE_METRICS
                        .iter()
                        .filter_map(|&name| {
                            out.log
                                .final_metrics
                                .get(name)
                                .map(|v| (name.to_string(), v.overall))
                        })
                        .collect()
                })
                .map_err(|e| format!("seed {seed}: {e}"))
        })
        .collect();

    let mut table_rows = Vec::with_capacity(rows.len());
    for (r, (name, toggles)) in rows.iter().enumerate() {
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut failures = Vec::new();
        for (i, &(row, _)) in cells.iter().enumerate() {
            if row != r {
                continue;
            }
            match &results[i] {
                Ok(metrics) => {
                    for (k, &v) in metrics {
                        per_metric.entry(k.clone()).or_default().push(v);
                    }
                }
                Err(msg) => failures.push(msg.clone()),
            }
        }
        table_rows.push(AblationRow {
            name: name.to_string(),
            toggles: *toggles,
            metrics: per_metric
                .into_iter()
                .map(|(k, vs)| (k, CellSummary::from_values(vs)))
                .collect(),
            failures,
        });
    }

    AblationTable {
        seeds: seeds.to_vec(),
        metric_names: TABLE_METRICS.iter().map(|s| s.to_string()).collect(),
        rows: table_rows,
    }
}

/// Renders the table as aligned text: `median [min, max]` per cell, with
/// failures called out beneath their row.
pub fn render_table(table: &AblationTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<8}", "modules"));
    for name in &table.metric_names {
        out.push_str(&format!("  {name:<22}"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<8}", row.name));
        for name in &table.metric_names {
            match row.metrics.get(name) {
                Some(c) => out.push_str(&format!(
                    "  {:<22}",
                    format!("{:.3} [{:.3}, {:.3}]", c.median, c.min, c.max)
                )),
                None => out.push_str(&format!("  {:<22}", "-")),
            }
        }
        out.push('\n');
        for f in &row.failures {
            out.push_str(&format!("         ! {f}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_even_and_single() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 4.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
        assert_eq!(median(&[5.0, 1.0]), 3.0);
    }

    #[test]
    fn grid_has_the_five_reference_rows() {
        let rows = ablation_rows();
        let names: Vec<&str> = rows.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["none", "oid", "occ", "osc", "all"]);
        assert!(!rows[0].1.oid && !rows[0].1.occ && !rows[0].1.osc);
        assert!(rows[4].1.oid && rows[4].1.occ && rows[4].1.osc);
        assert!(rows[1].1.oid && !rows[1].1.occ && !rows[1].1.osc);
    }

    #[test]
    fn summaries_track_min_median_max() {
        let c = CellSummary::from_values(vec![0.4, 0.2, 0.6]);
        assert_eq!((c.min, c.median, c.max), (0.2, 0.4, 0.6));
    }
}
