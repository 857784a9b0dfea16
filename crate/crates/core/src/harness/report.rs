//! Sweep execution and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Variant};
use crate::harness::experiment::{CellMetrics, CellOutput, Experiment};
use crate::sampler::{ddim_forward_invert, trace_csv};

pub const METRIC_COLUMNS: [&str; 5] = ["sfid", "csfid", "structure", "structure_raw", "success_rate"];
const HEADER: &str = "config_hash,seed,variant,status,sfid,csfid,structure,structure_raw,success_rate";

#[derive(Debug, Clone)]
pub struct CellRecord {
    pub seed: u64,
    pub variant: Variant,
    pub result: std::result::Result<CellOutput, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub cells: Vec<CellRecord>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }

    pub fn metrics(&self, variant: Variant) -> Vec<(u64, &CellMetrics)> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.result.as_ref().ok().map(|o| (c.seed, &o.metrics)))
            .collect()
    }

    pub fn mean(&self, variant: Variant, column: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .metrics(variant)
            .iter()
            .map(|(_, m)| metric_value(m, column))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn metric_value(m: &CellMetrics, column: &str) -> f64 {
    match column {
        "sfid" => m.sfid,
        "csfid" => m.csfid,
        "structure" => m.structure,
        "structure_raw" => m.structure_raw,
        "success_rate" => m.success_rate,
        _ => f64::NAN,
    }
}

/// Execute every `(seed, variant)` cell in a worker pool.
pub fn execute(experiment: &Experiment, threads: Option<usize>) -> Result<Vec<CellRecord>> {
    let cfg = &experiment.config;
    let cells: Vec<(u64, Variant)> = cfg
        .run
        .seeds
        .iter()
        .flat_map(|&s| cfg.run.variants.iter().map(move |&v| (s, v)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(seed, variant)| {
                let start = Instant::now();
                let result = experiment.run_cell(seed, variant).map_err(|e| e.to_string());
                CellRecord {
                    seed,
                    variant,
                    result,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    }))
}

pub fn metrics_csv(hash: &str, cells: &[CellRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for c in cells {
        match &c.result {
            Ok(o) => {
                let m = &o.metrics;
                let _ = writeln!(
                    out,
                    "{hash},{},{},ok,{:e},{:e},{:e},{:e},{:e}",
                    c.seed, c.variant, m.sfid, m.csfid, m.structure, m.structure_raw, m.success_rate
                );
            }
            Err(e) => {
                let msg = e.replace([',', '\n', '"'], " ");
                let _ = writeln!(out, "{hash},{},{},error: {msg},NaN,NaN,NaN,NaN,NaN", c.seed, c.variant);
            }
        }
    }
    out
}

fn points_csv(dim: usize, rows: impl Iterator<Item = (u64, usize, nalgebra::DVector<f64>)>) -> String {
    let mut out = String::new();
    for i in 0..dim {
        let _ = write!(out, "x{i},");
    }
    out.push_str("seed,class\n");
    for (seed, class, x) in rows {
        for v in x.iter() {
            let _ = write!(out, "{v:e},");
        }
        let _ = writeln!(out, "{seed},{class}");
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Scatter of the first two coordinates: sources in grey, one colour per variant.
pub fn scatter_svg(sources: &[nalgebra::DVector<f64>], groups: &[(String, Vec<nalgebra::DVector<f64>>)]) -> String {
    let coord = |x: &nalgebra::DVector<f64>, i: usize| x.get(i).copied().unwrap_or(0.0);
    let all = sources.iter().chain(groups.iter().flat_map(|(_, g)| g.iter()));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in all {
        let (x, y) = (coord(p, 0), coord(p, 1));
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(1e-9);
    let (w, h, margin) = (640.0, 480.0, 40.0);
    let sx = |x: f64| margin + (x - x0 + pad) / (x1 - x0 + 2.0 * pad) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0 + pad) / (y1 - y0 + 2.0 * pad) * (h - 2.0 * margin);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let dots = |pts: &[nalgebra::DVector<f64>], colour: &str, out: &mut String| {
        for p in pts {
            let (x, y) = (coord(p, 0), coord(p, 1));
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{colour}" fill-opacity="0.6"/>"#,
                    sx(x),
                    sy(y)
                );
            }
        }
    };
    dots(sources, "#999999", &mut out);
    for (i, (_, g)) in groups.iter().enumerate() {
        dots(g, PALETTE[i % PALETTE.len()], &mut out);
    }
    let _ = writeln!(
        out,
        r##"<text x="{margin}" y="20" font-size="12" fill="#999999">source</text>"##
    );
    for (i, (name, _)) in groups.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="20" font-size="12" fill="{}">{name}</text>"#,
            margin + 70.0 * (i + 1) as f64,
            PALETTE[i % PALETTE.len()]
        );
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Serialize)]
struct VariantSummary {
    cells: usize,
    failed: usize,
    mean: BTreeMap<String, f64>,
    std_error: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    config_hash: &'a str,
    seeds: usize,
    trajectories_per_cell: usize,
    failed_cells: Vec<String>,
    variants: BTreeMap<String, VariantSummary>,
    config: &'a ExperimentConfig,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Run a validated config and write all artifacts under its output directory.
pub fn run(config: &ExperimentConfig, threads: Option<usize>) -> Result<RunReport> {
    let experiment = Experiment::build(config)?;
    let dir = config.output_path();
    run_experiment(&experiment, &dir, threads)
}

pub fn run_experiment(experiment: &Experiment, dir: &Path, threads: Option<usize>) -> Result<RunReport> {
    let config = &experiment.config;
    let hash = config.hash();
    let cells = execute(experiment, threads)?;
    mkdir(dir)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&hash, &cells))?;

    let mut timings = String::from("seed,variant,seconds\n");
    for c in &cells {
        let _ = writeln!(timings, "{},{},{:.6}", c.seed, c.variant, c.seconds);
    }
    write(&dir.join("timings.csv"), &timings)?;

    let points = dir.join("points");
    mkdir(&points)?;
    let dim = config.data_dim();
    let ok: Vec<&CellOutput> = cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let first_variant = config.run.variants[0];
    let src_points: Vec<_> = ok
        .iter()
        .filter(|o| o.variant == first_variant)
        .flat_map(|o| o.sources.iter().cloned())
        .collect();
    let source_classes: Vec<usize> = config
        .run
        .pairs
        .iter()
        .flat_map(|p| std::iter::repeat_n(p[0], config.run.trajectories))
        .collect();
    let src_rows = ok.iter().filter(|o| o.variant == first_variant).flat_map(|o| {
        o.sources
            .iter()
            .zip(&source_classes)
            .map(|(x, &c)| (o.seed, c, x.clone()))
            .collect::<Vec<_>>()
    });
    write(&points.join("sources.csv"), &points_csv(dim, src_rows))?;
    let mut groups = Vec::new();
    for &v in &config.run.variants {
        let outs: Vec<&CellOutput> = ok.iter().copied().filter(|o| o.variant == v).collect();
        let rows = outs.iter().flat_map(|o| {
            o.outputs
                .iter()
                .zip(&o.classes)
                .map(|(x, &c)| (o.seed, c, x.clone()))
                .collect::<Vec<_>>()
        });
        write(&points.join(format!("{v}.csv")), &points_csv(dim, rows))?;
        groups.push((
            v.to_string(),
            outs.iter().flat_map(|o| o.outputs.iter().cloned()).collect(),
        ));
    }
    write(&dir.join("scatter.svg"), &scatter_svg(&src_points, &groups))?;

    if config.run.traces {
        let traces = dir.join("traces");
        mkdir(&traces)?;
        for o in &ok {
            for (j, t) in o.traces.iter().enumerate() {
                if !t.is_empty() {
                    write(
                        &traces.join(format!("{}_seed{}_traj{j}.csv", o.variant, o.seed)),
                        &trace_csv(t),
                    )?;
                }
            }
        }
    }

    let report = RunReport {
        config_hash: hash,
        output_dir: dir.to_path_buf(),
        cells,
    };
    write(&dir.join("summary.json"), &summary_json(config, &report))?;
    Ok(report)
}

fn summary_json(config: &ExperimentConfig, report: &RunReport) -> String {
    let mut variants = BTreeMap::new();
    for &v in &config.run.variants {
        let rows = report.metrics(v);
        let n = rows.len() as f64;
        let mut mean = BTreeMap::new();
        let mut se = BTreeMap::new();
        for col in METRIC_COLUMNS {
            let vals: Vec<f64> = rows.iter().map(|(_, m)| metric_value(m, col)).collect();
            if vals.is_empty() {
                continue;
            }
            let mu = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            mean.insert(col.to_string(), mu);
            se.insert(col.to_string(), (var / n).sqrt());
        }
        let total = report.cells.iter().filter(|c| c.variant == v).count();
        variants.insert(
            v.to_string(),
            VariantSummary {
                cells: total,
                failed: total - rows.len(),
                mean,
                std_error: se,
            },
        );
    }
    let failed_cells = report
        .cells
        .iter()
        .filter_map(|c| {
            c.result
                .as_ref()
                .err()
                .map(|e| format!("seed {} / {}: {e}", c.seed, c.variant))
        })
        .collect();
    let summary = Summary {
        name: &config.name,
        config_hash: &report.config_hash,
        seeds: config.run.seeds.len(),
        trajectories_per_cell: config.run.trajectories * config.run.pairs.len(),
        failed_cells,
        variants,
        config,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// One row of a parsed metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub ok: bool,
    pub values: [f64; 5],
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        _ => return Err(Error::Config("metrics file has an unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Config(format!("metrics line {} has {} fields", i + 2, f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{s}` on line {}", i + 2)))
        };
        rows.push(MetricRow {
            config_hash: f[0].to_string(),
            seed: f[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad seed on line {}", i + 2)))?,
            variant: f[2].to_string(),
            ok: f[3] == "ok",
            values: [num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?],
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnComparison {
    pub column: String,
    /// Seeds where A is strictly better than B.
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    /// Mean of `A − B`.
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub variant_a: String,
    pub variant_b: String,
    pub seeds: usize,
    pub columns: Vec<ColumnComparison>,
}

impl Comparison {
    pub fn column(&self, name: &str) -> Option<&ColumnComparison> {
        self.columns.iter().find(|c| c.column == name)
    }
}

fn select<'a>(rows: &'a [MetricRow], variant: Option<&str>) -> Result<(String, BTreeMap<u64, &'a MetricRow>)> {
    let names: BTreeSet<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    let name = match variant {
        Some(v) => v.to_string(),
        None if names.len() == 1 => names.iter().next().unwrap().to_string(),
        None => {
            return Err(Error::Config(format!(
                "report holds several variants ({}); pick one",
                names.into_iter().collect::<Vec<_>>().join(", ")
            )))
        }
    };
    let map: BTreeMap<u64, &MetricRow> = rows
        .iter()
        .filter(|r| r.variant == name && r.ok)
        .map(|r| (r.seed, r))
        .collect();
    if map.is_empty() {
        return Err(Error::Config(format!("no successful rows for variant `{name}`")));
    }
    Ok((name, map))
}

/// Paired-seed comparison of variant A in `a` against variant B in `b`.
///
/// Lower is better for every column except `success_rate`.
pub fn compare(
    a: &[MetricRow],
    b: &[MetricRow],
    variant_a: Option<&str>,
    variant_b: Option<&str>,
) -> Result<Comparison> {
    let (na, ma) = select(a, variant_a)?;
    let (nb, mb) = select(b, variant_b)?;
    let sa: BTreeSet<u64> = ma.keys().copied().collect();
    let sb: BTreeSet<u64> = mb.keys().copied().collect();
    if sa != sb {
        return Err(Error::Config(format!(
            "seed sets differ: {} vs {} seeds, {} shared",
            sa.len(),
            sb.len(),
            sa.intersection(&sb).count()
        )));
    }
    let n = sa.len();
    let columns = METRIC_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let higher_better = *col == "success_rate";
            let (mut wins, mut ties, mut losses, mut delta) = (0, 0, 0, 0.0);
            for s in &sa {
                let (x, y) = (ma[s].values[i], mb[s].values[i]);
                delta += x - y;
                let better = if higher_better { x > y } else { x < y };
                if x == y {
                    ties += 1;
                } else if better {
                    wins += 1;
                } else {
                    losses += 1;
                }
            }
            ColumnComparison {
                column: col.to_string(),
                wins,
                ties,
                losses,
                win_rate: wins as f64 / n as f64,
                mean_delta: delta / n as f64,
            }
        })
        .collect();
    Ok(Comparison {
        variant_a: na,
        variant_b: nb,
        seeds: n,
        columns,
    })
}

pub fn comparison_text(c: &Comparison) -> String {
    let mut out = format!("{} vs {} over {} paired seeds\n", c.variant_a, c.variant_b, c.seeds);
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>6} {:>6} {:>9} {:>14}",
        "column", "wins", "ties", "losses", "win_rate", "mean_delta"
    );
    for col in &c.columns {
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>6} {:>6} {:>9.3} {:>14.6e}",
            col.column, col.wins, col.ties, col.losses, col.win_rate, col.mean_delta
        );
    }
    out
}

/// Forward-invert the first seed's sources and write the caches as CSV.
pub fn dump_inversions(experiment: &Experiment, path: &Path) -> Result<usize> {
    let cfg = &experiment.config;
    let seed = cfg.run.seeds[0];
    let window = experiment.edit.window(cfg.edit.t_edit);
    let dim = cfg.diffusion_dim();
    let mut out = String::from("pair,trajectory,t");
    for prefix in ["x_t", "x_hat", "eps"] {
        for i in 0..dim {
            let _ = write!(out, ",{prefix}{i}");
        }
    }
    out.push('\n');
    let mut rows = 0;
    for p in 0..cfg.run.pairs.len() {
        for j in 0..cfg.run.trajectories {
            let x = experiment.codec.encode(&experiment.source(seed, p, j))?;
            let inv = ddim_forward_invert(experiment.forward_model(p), &experiment.schedule, &x, window)?;
            for (t, e) in inv.cache.iter() {
                let _ = write!(out, "{p},{j},{t}");
                for v in e.x_t.iter().chain(e.x_hat.iter()).chain(e.eps.iter()) {
                    let _ = write!(out, ",{v:e}");
                }
                out.push('\n');
                rows += 1;
            }
        }
    }
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    write(path, &out)?;
    Ok(rows)
}
