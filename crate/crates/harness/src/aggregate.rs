//! Across-seed aggregation of metrics rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dcrl_core::evalx::{EvalMode, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

pub const METRICS: [&str; 5] = ["shd", "dci_d", "dci_c", "intervention_accuracy", "alignment_score"];

pub fn metric_value(r: &MetricsReport, metric: &str) -> f64 {
    match metric {
        "shd" => r.shd as f64,
        "dci_d" => r.dci_d,
        "dci_c" => r.dci_c,
        "intervention_accuracy" => r.intervention_accuracy,
        "alignment_score" => r.alignment_score,
        other => panic!("unknown metric {other}"),
    }
}

/// One (adapter, mode, d, t) group over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub adapter: String,
    pub mode: EvalMode,
    pub d: usize,
    pub t: Option<f64>,
    pub seeds: Vec<u64>,
    pub shd: Stat,
    pub dci_d: Stat,
    pub dci_c: Stat,
    pub intervention_accuracy: Stat,
    pub alignment_score: Stat,
}

impl AggregateRow {
    pub fn stat(&self, metric: &str) -> Stat {
        match metric {
            "shd" => self.shd,
            "dci_d" => self.dci_d,
            "dci_c" => self.dci_c,
            "intervention_accuracy" => self.intervention_accuracy,
            "alignment_score" => self.alignment_score,
            other => panic!("unknown metric {other}"),
        }
    }
}

type GroupKey = (String, u8, usize, Option<u64>);

/// Groups rows by adapter, mode, d and timestep; statistics run over seeds.
/// A seed contributing several rows to one group is an error.
pub fn aggregate(rows: &[MetricsReport]) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<GroupKey, Vec<&MetricsReport>> = BTreeMap::new();
    for r in rows {
        let mode = match r.mode {
            EvalMode::Single => 0,
            EvalMode::Trajectory => 1,
        };
        // t lies in [0, 1], where the bit pattern orders like the value
        let key = (r.adapter.clone(), mode, r.d, r.t.map(f64::to_bits));
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((adapter, _, d, _), members) in groups {
        let mut seeds: Vec<u64> = members.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Runtime(format!(
                "adapter {adapter}, d={d}: a seed appears twice in one group"
            )));
        }
        let stat = |m: &str| Stat::of(&members.iter().map(|r| metric_value(r, m)).collect::<Vec<_>>());
        out.push(AggregateRow {
            adapter,
            mode: members[0].mode,
            d,
            t: members[0].t,
            seeds,
            shd: stat("shd"),
            dci_d: stat("dci_d"),
            dci_c: stat("dci_c"),
            intervention_accuracy: stat("intervention_accuracy"),
            alignment_score: stat("alignment_score"),
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    adapter: &'a str,
    mode: &'static str,
    d: usize,
    t: Option<f64>,
    n_seeds: usize,
    shd_mean: f64,
    shd_std: f64,
    dci_d_mean: f64,
    dci_d_std: f64,
    dci_c_mean: f64,
    dci_c_std: f64,
    intervention_accuracy_mean: f64,
    intervention_accuracy_std: f64,
    alignment_score_mean: f64,
    alignment_score_std: f64,
}

pub fn write_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let err = |e: csv::Error| HarnessError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(CsvRow {
            adapter: &r.adapter,
            mode: crate::cell::mode_name(r.mode),
            d: r.d,
            t: r.t,
            n_seeds: r.seeds.len(),
            shd_mean: r.shd.mean,
            shd_std: r.shd.std,
            dci_d_mean: r.dci_d.mean,
            dci_d_std: r.dci_d.std,
            dci_c_mean: r.dci_c.mean,
            dci_c_std: r.dci_c.std,
            intervention_accuracy_mean: r.intervention_accuracy.mean,
            intervention_accuracy_std: r.intervention_accuracy.std,
            alignment_score_mean: r.alignment_score.mean,
            alignment_score_std: r.alignment_score.std,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}
