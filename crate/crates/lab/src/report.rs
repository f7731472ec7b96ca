//! Scaling report: a pure reader of a sweep directory.
//!
//! Writes `scaling.csv` (one row per size x paradigm x variant, seed-averaged)
//! and `scaling_plot.json` (series per paradigm, ready for any plotting tool).
//! Cells the sweep never produced are emitted with `absent = true`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hyt_core::world::TaskFamily;
use serde::{Deserialize, Serialize};

use crate::config::{Paradigm, SweepConfig};
use crate::runner::{write_csv, SweepRecord, SWEEP_CONFIG, SWEEP_RESULTS};
use crate::{metrics, LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub size: usize,
    pub paradigm: Paradigm,
    pub family: TaskFamily,
    pub n_objects: usize,
    pub absent: bool,
    pub seeds: usize,
    /// Mean of the per-seed success rates.
    pub success_rate: f64,
    /// Across seeds when there are several, otherwise the binomial error.
    pub stderr: f64,
    pub tokens_per_step: f64,
    pub seconds_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub paradigm: Paradigm,
    pub family: TaskFamily,
    pub n_objects: usize,
    pub sizes: Vec<usize>,
    /// `None` where the cell is absent.
    pub success: Vec<Option<f64>>,
    pub stderr: Vec<Option<f64>>,
}

/// HyT act mode versus act-only training at the smallest dataset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub size: usize,
    pub hyt: Option<f64>,
    pub act_only: Option<f64>,
    /// `None` when either side is missing.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub cells: Vec<Cell>,
    pub series: Vec<Series>,
    pub trend: Trend,
}

type Key = (usize, Paradigm, TaskFamily, usize);

pub fn build(cfg: &SweepConfig, records: &[SweepRecord]) -> ScalingReport {
    let mut groups: BTreeMap<Key, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.size, r.paradigm, r.family, r.n_objects)).or_default().push(r);
    }
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut cells = Vec::new();
    let mut series = Vec::new();
    for &p in &cfg.paradigms {
        for v in &cfg.eval_variants {
            let mut s = Series {
                paradigm: p,
                family: v.family,
                n_objects: v.n_objects,
                sizes: sizes.clone(),
                success: Vec::new(),
                stderr: Vec::new(),
            };
            for &size in &sizes {
                let cell = cell(size, p, v.family, v.n_objects, groups.get(&(size, p, v.family, v.n_objects)));
                s.success.push((!cell.absent).then_some(cell.success_rate));
                s.stderr.push((!cell.absent).then_some(cell.stderr));
                cells.push(cell);
            }
            series.push(s);
        }
    }
    let trend = trend(&cells, sizes.first().copied().unwrap_or(0));
    ScalingReport { cells, series, trend }
}

fn cell(size: usize, paradigm: Paradigm, family: TaskFamily, n_objects: usize, rs: Option<&Vec<&SweepRecord>>) -> Cell {
    let rs = rs.map(Vec::as_slice).unwrap_or(&[]);
    let mut c = Cell {
        size,
        paradigm,
        family,
        n_objects,
        absent: rs.is_empty(),
        seeds: rs.len(),
        success_rate: f64::NAN,
        stderr: f64::NAN,
        tokens_per_step: f64::NAN,
        seconds_per_step: f64::NAN,
    };
    if rs.is_empty() {
        return c;
    }
    let n = rs.len() as f64;
    let mean = |f: &dyn Fn(&SweepRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
    c.success_rate = mean(&|r| r.summary.success_rate);
    c.tokens_per_step = mean(&|r| r.summary.tokens_per_step);
    c.seconds_per_step = mean(&|r| r.summary.seconds_per_step);
    c.stderr = if rs.len() > 1 {
        let var = rs.iter().map(|r| (r.summary.success_rate - c.success_rate).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        rs[0].summary.stderr
    };
    c
}

fn trend(cells: &[Cell], size: usize) -> Trend {
    // Averaged over every evaluated variant at that size.
    let avg = |p: Paradigm| {
        let xs: Vec<f64> =
            cells.iter().filter(|c| c.size == size && c.paradigm == p && !c.absent).map(|c| c.success_rate).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let hyt = avg(Paradigm::Hyt);
    let act_only = avg(Paradigm::ActOnly);
    let holds = match (hyt, act_only) {
        (Some(h), Some(a)) => Some(h >= a),
        _ => None,
    };
    Trend { size, hyt, act_only, holds }
}

pub const CSV: &str = "scaling.csv";
pub const PLOT: &str = "scaling_plot.json";

/// Reads `sweep.json` and `results.jsonl` (which may be missing or partial)
/// and writes the CSV and plot data next to them.
pub fn report(dir: &Path) -> Result<ScalingReport> {
    let cfg_path = dir.join(SWEEP_CONFIG);
    let text = fs::read_to_string(&cfg_path).map_err(|e| LabError::io(&cfg_path, e))?;
    let cfg: SweepConfig = serde_json::from_str(&text).map_err(|e| LabError::Format(format!("{}: {e}", cfg_path.display())))?;
    let results = dir.join(SWEEP_RESULTS);
    let records: Vec<SweepRecord> = if results.exists() { metrics::read_all(&results)? } else { Vec::new() };
    let rep = build(&cfg, &records);
    write_csv(&dir.join(CSV), &rep.cells)?;
    let plot = dir.join(PLOT);
    fs::write(&plot, serde_json::to_string_pretty(&rep).expect("report serializes")).map_err(|e| LabError::io(&plot, e))?;
    Ok(rep)
}
