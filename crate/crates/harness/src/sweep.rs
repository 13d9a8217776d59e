//! Threshold sweep: retrains the full model and an OID-only variant at
//! several positive/negative IoU thresholds and summarizes grounding
//! accuracy per threshold.

use crate::ablate::CellSummary;
use crate::config::{ModuleToggles, RunConfig};
use crate::synthworld::{DatasetHeader, SceneSample};
use crate::train::train;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub delta: f64,
    pub acc_at_025: CellSummary,
    pub acc_at_05: CellSummary,
    pub failures: Vec<String>,
}

/// Checks the expected shape of the sweep: the loosest threshold should
/// not beat every tighter one. A violation is reported, not fatal; with
/// few seeds the medians are noisy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub metric: String,
    pub highest_delta: f64,
    pub value_at_highest: f64,
    pub best_below: f64,
    pub holds: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub full: Vec<DeltaPoint>,
    pub oid_only: Vec<DeltaPoint>,
    pub monotonicity: Option<MonotonicityReport>,
}

fn variant_points(
    base: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
    deltas: &[f64],
    seeds: &[u64],
    toggles: ModuleToggles,
) -> Vec<DeltaPoint> {
    let cells: Vec<(f64, u64)> = deltas
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results: Vec<Result<(f64, f64), String>> = cells
        .par_iter()
        .map(|&(delta, seed)| {
            let mut cfg = base.clone();
            cfg.modules = toggles;
            cfg.filter.delta = delta;
            cfg.seed = seed;
            train(&cfg, header, samples, None)
                .map(|out| {
                    let m = &out.log.final_metrics;
                    let get = |name: &str| m.get(name).map(|v| v.overall).unwrap_or(f64::NAN);
                    (get("acc@0.25"), get("acc@0.5"))
                })
                .map_err(|e| format!("delta {delta}, seed {seed}: {e}"))
        })
        .collect();

    deltas
        .iter()
        .map(|&delta| {
            let mut a025 = Vec::new();
            let mut a05 = Vec::new();
            let mut failures = Vec::new();
            for (i, &(d, _)) in cells.iter().enumerate() {
                if d != delta {
                    continue;
                }
                match &results[i] {
                    Ok((x, y)) => {
                        a025.push(*x);
                        a05.push(*y);
                    }
                    Err(msg) => failures.push(msg.clone()),
                }
            }
            let summary = |vs: Vec<f64>| {
                if vs.is_empty() {
                    CellSummary::from_values(vec![f64::NAN])
                } else {
                    CellSummary::from_values(vs)
                }
            };
            DeltaPoint {
                delta,
                acc_at_025: summary(a025),
                acc_at_05: summary(a05),
                failures,
            }
        })
        .collect()
}

/// Retrains both variants across the threshold grid. Thresholds are
/// deduplicated and sorted ascending.
pub fn run_delta_sweep(
    base: &RunConfig,
    header: &DatasetHeader,
    samples: &[SceneSample],
    deltas: &[f64],
    seeds: &[u64],
) -> SweepReport {
    let mut deltas: Vec<f64> = deltas.to_vec();
    deltas.sort_by(|a, b| a.partial_cmp(b).expect("thresholds are finite"));
    deltas.dedup();

    let all = ModuleToggles {
        oid: true,
        occ: true,
        osc: true,
    };
    let oid_only = ModuleToggles {
        oid: true,
        occ: false,
        osc: false,
    };
    let full = variant_points(base, header, samples, &deltas, seeds, all);
    let oid_points = variant_points(base, header, samples, &deltas, seeds, oid_only);

    let monotonicity = build_monotonicity(&deltas, &full);

    SweepReport {
        deltas,
        seeds: seeds.to_vec(),
        full,
        oid_only: oid_points,
        monotonicity,
    }
}

fn build_monotonicity(deltas: &[f64], full: &[DeltaPoint]) -> Option<MonotonicityReport> {
    if deltas.len() < 2 {
        return None;
    }
    let highest = *deltas.last().unwrap();
    let value_at_highest = full.last().unwrap().acc_at_05.median;
    let below: Vec<f64> = full[..full.len() - 1]
        .iter()
        .map(|p| p.acc_at_05.median)
        .filter(|v| v.is_finite())
        .collect();
    if below.is_empty() || !value_at_highest.is_finite() {
        return Some(MonotonicityReport {
            metric: "acc@0.5".into(),
            highest_delta: highest,
            value_at_highest,
            best_below: f64::NAN,
            holds: false,
            note: "not enough successful cells to judge".into(),
        });
    }
    let best_below = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let holds = value_at_highest <= best_below;
    let note = if holds {
        format!(
            "median acc@0.5 at delta {highest} ({value_at_highest:.3}) does not exceed the best \
             tighter-threshold median ({best_below:.3})"
        )
    } else {
        format!(
            "median acc@0.5 at delta {highest} ({value_at_highest:.3}) beats every tighter \
             threshold (best {best_below:.3}); flagged for inspection, not fatal"
        )
    };
    Some(MonotonicityReport {
        metric: "acc@0.5".into(),
        highest_delta: highest,
        value_at_highest,
        best_below,
        holds,
        note,
    })
}

/// Writes one two-column CSV (delta, metric median) per variant and
/// metric, returning the created paths.
pub fn write_sweep_csv(dir: &Path, report: &SweepReport) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let variants: [(&str, &[DeltaPoint]); 2] =
        [("full", &report.full), ("oid_only", &report.oid_only)];
    for (vname, points) in variants {
        for (metric, col) in [("acc_at_0.25", 0), ("acc_at_0.5", 1)] {
            let path = dir.join(format!("{vname}_{}.csv", metric.replace('.', "")));
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "delta,{metric}")?;
            for p in points {
                let v = if col == 0 {
                    p.acc_at_025.median
                } else {
                    p.acc_at_05.median
                };
                writeln!(f, "{},{}", p.delta, v)?;
            }
            written.push(path);
        }
    }
    Ok(written)
}
