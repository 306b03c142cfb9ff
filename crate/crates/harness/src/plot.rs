//! Static plots rendered purely from stored metrics files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dcrl_core::evalx::{read_metrics, EvalMode, MetricsReport};
use plotters::prelude::*;

use crate::aggregate::{aggregate, write_csv, write_json, AggregateRow, METRICS};
use crate::error::{HarnessError, Result};

pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const PLOT_DIR: &str = "plots";

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(format!("plot: {e}"))
}

fn upper_bound(metric: &str, rows: &[&AggregateRow]) -> f64 {
    if metric == "shd" {
        let top = rows
            .iter()
            .map(|r| r.shd.mean + r.shd.std)
            .fold(0.0, f64::max);
        (top * 1.1).max(1.0)
    } else {
        1.05
    }
}

/// Grouped bars per d (one bar per adapter) with +-1 std whiskers.
pub fn bar_chart(path: &Path, metric: &str, rows: &[&AggregateRow]) -> Result<()> {
    let ds: Vec<usize> = rows.iter().map(|r| r.d).collect::<BTreeSet<_>>().into_iter().collect();
    let adapters: Vec<&str> = rows
        .iter()
        .map(|r| r.adapter.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..ds.len() as f64, 0.0..upper_bound(metric, rows))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(ds.len() + 1)
        .x_label_formatter(&|x| {
            let k = x.floor() as usize;
            match ds.get(k) {
                Some(d) if (x - k as f64 - 0.5).abs() < 0.26 => format!("d={d}"),
                _ => String::new(),
            }
        })
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / adapters.len() as f64;
    for (a, adapter) in adapters.iter().enumerate() {
        let color = PALETTE[a % PALETTE.len()];
        let bars: Vec<(f64, f64, f64)> = rows
            .iter()
            .filter(|r| r.adapter == *adapter)
            .map(|r| {
                let g = ds.iter().position(|&d| d == r.d).expect("d listed") as f64;
                let s = r.stat(metric);
                (g + 0.1 + a as f64 * width, s.mean, s.std)
            })
            .collect();
        chart
            .draw_series(bars.iter().map(|&(x, m, _)| {
                Rectangle::new([(x, 0.0), (x + width * 0.9, m)], color.filled())
            }))
            .map_err(plot_err)?
            .label(*adapter)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        chart
            .draw_series(bars.iter().map(|&(x, m, s)| {
                let c = x + width * 0.45;
                PathElement::new(vec![(c, m - s), (c, m + s)], BLACK)
            }))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// One panel per d: the metric's mean over timesteps, a line per adapter.
pub fn trajectory_chart(path: &Path, metric: &str, rows: &[&AggregateRow]) -> Result<()> {
    let ds: Vec<usize> = rows.iter().map(|r| r.d).collect::<BTreeSet<_>>().into_iter().collect();
    let root = SVGBackend::new(path, (360 * ds.len() as u32, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, ds.len()));
    for (panel, &d) in panels.iter().zip(&ds) {
        let here: Vec<&AggregateRow> = rows.iter().copied().filter(|r| r.d == d).collect();
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{metric}, d={d}"), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(32)
            .y_label_area_size(44)
            .build_cartesian_2d(0.0..1.0, 0.0..upper_bound(metric, &here))
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("t")
            .draw()
            .map_err(plot_err)?;
        let adapters: BTreeSet<&str> = here.iter().map(|r| r.adapter.as_str()).collect();
        for (a, adapter) in adapters.into_iter().enumerate() {
            let color = PALETTE[a % PALETTE.len()];
            let mut points: Vec<(f64, f64)> = here
                .iter()
                .filter(|r| r.adapter == adapter)
                .filter_map(|r| r.t.map(|t| (t, r.stat(metric).mean)))
                .collect();
            points.sort_by(|p, q| p.0.total_cmp(&q.0));
            chart
                .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(adapter)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 14, y)], color.stroke_width(2)));
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Renders every plot for the aggregate rows into `dir`.
pub fn render_plots(rows: &[AggregateRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let single: Vec<&AggregateRow> = rows.iter().filter(|r| r.mode == EvalMode::Single).collect();
    let traj: Vec<&AggregateRow> = rows.iter().filter(|r| r.mode == EvalMode::Trajectory).collect();
    let mut out = Vec::new();
    for metric in METRICS {
        if !single.is_empty() {
            let p = dir.join(format!("single_{metric}.svg"));
            bar_chart(&p, metric, &single)?;
            out.push(p);
        }
        if !traj.is_empty() {
            let p = dir.join(format!("trajectory_{metric}.svg"));
            trajectory_chart(&p, metric, &traj)?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Files written by [`plot_metrics`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutputs {
    pub rows: Vec<AggregateRow>,
    pub tables: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Reads metrics files, aggregates over seeds and writes the tables and
/// plots into `out_dir`. Depends on nothing but the given files.
pub fn plot_metrics(files: &[PathBuf], out_dir: &Path) -> Result<PlotOutputs> {
    let mut reports: Vec<MetricsReport> = Vec::new();
    for f in files {
        reports.extend(read_metrics(f)?);
    }
    if reports.is_empty() {
        return Err(HarnessError::Runtime("no metrics rows to plot".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let rows = aggregate(&reports)?;
    let csv = out_dir.join(AGGREGATE_CSV);
    let json = out_dir.join(AGGREGATE_JSON);
    write_csv(&csv, &rows)?;
    write_json(&json, &rows)?;
    let plots = render_plots(&rows, &out_dir.join(PLOT_DIR))?;
    Ok(PlotOutputs {
        rows,
        tables: vec![csv, json],
        plots,
    })
}
