use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::classifier::{per_class_delta, EvalReport, Strategy};
use crate::datasets::Split;
use crate::error::{Error, IoContext, Result};

/// One evaluated classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub source: String,
    pub method: Strategy,
    pub samples_per_class: Option<usize>,
    pub accuracy: f64,
    pub macro_accuracy: f64,
    pub seed: u64,
    pub runtime_seconds: f64,
    /// Directory holding the `eval.json` the row was read from.
    pub eval_path: PathBuf,
}

impl ResultRow {
    pub fn from_report(report: &EvalReport, eval_path: &Path) -> Self {
        Self {
            source: report.source.clone(),
            method: report.strategy,
            samples_per_class: report.samples_per_class,
            accuracy: report.overall_accuracy,
            macro_accuracy: report.macro_accuracy(),
            seed: report.experiment_seed.unwrap_or(report.seed),
            runtime_seconds: report.runtime_seconds,
            eval_path: eval_path.to_path_buf(),
        }
    }
}

/// Mean and sample standard deviation over seeds of one (source, method,
/// samples per class) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub source: String,
    pub method: Strategy,
    pub samples_per_class: Option<usize>,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_accuracy_mean: f64,
    pub macro_accuracy_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn group_key(row: &ResultRow) -> (String, Option<usize>, Strategy) {
    (row.source.clone(), row.samples_per_class, row.method)
}

impl ResultTable {
    /// Every test-split `eval.json` below `dir`, in path order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for eval_dir in find_reports(dir)? {
            let report = EvalReport::load(&eval_dir)?;
            if report.split == Split::Test {
                rows.push(ResultRow::from_report(&report, &eval_dir));
            }
        }
        let mut table = Self { rows };
        table.sort();
        Ok(table)
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.source, a.samples_per_class, a.method, a.seed, &a.eval_path).cmp(&(
                &b.source,
                b.samples_per_class,
                b.method,
                b.seed,
                &b.eval_path,
            ))
        });
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
        self.sort();
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<_, Vec<&ResultRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(group_key(row)).or_default().push(row);
        }
        groups
            .into_iter()
            .map(|((source, samples_per_class, method), rows)| {
                let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
                let mac: Vec<f64> = rows.iter().map(|r| r.macro_accuracy).collect();
                let (accuracy_mean, accuracy_std) = mean_std(&acc);
                let (macro_accuracy_mean, macro_accuracy_std) = mean_std(&mac);
                AggregateRow {
                    source,
                    method,
                    samples_per_class,
                    runs: rows.len(),
                    accuracy_mean,
                    accuracy_std,
                    macro_accuracy_mean,
                    macro_accuracy_std,
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "source",
            "method",
            "samples_per_class",
            "accuracy",
            "macro_accuracy",
            "seed",
            "runtime_seconds",
            "eval_path",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.source.clone(),
                r.method.to_string(),
                r.samples_per_class.map(|k| k.to_string()).unwrap_or_default(),
                r.accuracy.to_string(),
                r.macro_accuracy.to_string(),
                r.seed.to_string(),
                r.runtime_seconds.to_string(),
                r.eval_path.display().to_string(),
            ])?;
        }
        w.flush().at(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("bad {what}"),
        };
        let mut rows = Vec::new();
        for record in reader.records() {
            let r = record?;
            let num = |i: usize, what: &str| r[i].parse::<f64>().map_err(|_| bad(what));
            rows.push(ResultRow {
                source: r[0].to_string(),
                method: r[1].parse().map_err(|_| bad("method"))?,
                samples_per_class: if r[2].is_empty() {
                    None
                } else {
                    Some(r[2].parse().map_err(|_| bad("samples_per_class"))?)
                },
                accuracy: num(3, "accuracy")?,
                macro_accuracy: num(4, "macro_accuracy")?,
                seed: r[5].parse().map_err(|_| bad("seed"))?,
                runtime_seconds: num(6, "runtime_seconds")?,
                eval_path: PathBuf::from(&r[7]),
            });
        }
        Ok(Self { rows })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "source",
            "method",
            "samples_per_class",
            "runs",
            "accuracy_mean",
            "accuracy_std",
            "macro_accuracy_mean",
            "macro_accuracy_std",
        ])?;
        for a in self.aggregate() {
            w.write_record([
                a.source,
                a.method.to_string(),
                a.samples_per_class.map(|k| k.to_string()).unwrap_or_default(),
                a.runs.to_string(),
                a.accuracy_mean.to_string(),
                a.accuracy_std.to_string(),
                a.macro_accuracy_mean.to_string(),
                a.macro_accuracy_std.to_string(),
            ])?;
        }
        w.flush().at(path)
    }
}

fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).at(&d)? {
            let path = entry.at(&d)?.path();
            let hidden = path
                .file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if hidden {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "eval.json") {
                out.push(d.clone());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportBundle {
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub per_class_delta_csv: Option<PathBuf>,
    pub delta_charts: Vec<PathBuf>,
    pub convergence_png: Option<PathBuf>,
}

impl ReportBundle {
    /// Reconstructs the bundle from a report directory.
    pub fn scan(dir: &Path) -> Result<Self> {
        let existing = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        let mut delta_charts: Vec<PathBuf> = fs::read_dir(dir)
            .at(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("per_class_delta_") && n.to_string_lossy().ends_with(".png"))
            })
            .collect();
        delta_charts.sort();
        Ok(Self {
            results_csv: dir.join("results.csv"),
            summary_csv: dir.join("summary.csv"),
            per_class_delta_csv: existing("per_class_delta.csv"),
            delta_charts,
            convergence_png: existing("convergence.png"),
        })
    }
}

const GREEN_BELOW: usize = 10;
const RED_ABOVE: usize = 100;

/// Bar color by training support.
pub fn support_color(support: usize) -> [u8; 3] {
    if support < GREEN_BELOW {
        [46, 160, 67]
    } else if support > RED_ABOVE {
        [207, 34, 46]
    } else {
        [110, 118, 129]
    }
}

/// Collects every test-split report below `results_dir` and writes
/// `results.csv`, `summary.csv`, per-class deltas against the real-only
/// baseline (csv plus one bar chart per treated method) and
/// `convergence.png` into `out_dir`.
pub fn emit_report(results_dir: &Path, out_dir: &Path) -> Result<ReportBundle> {
    let table = ResultTable::from_dir(results_dir)?;
    if table.rows.is_empty() {
        return Err(Error::invalid(format!(
            "no test-split eval.json under {}",
            results_dir.display()
        )));
    }
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut bundle = ReportBundle {
        results_csv: out_dir.join("results.csv"),
        summary_csv: out_dir.join("summary.csv"),
        ..Default::default()
    };
    table.write_csv(&bundle.results_csv)?;
    table.write_summary(&bundle.summary_csv)?;

    let reports: Vec<(ResultRow, EvalReport)> = table
        .rows
        .iter()
        .map(|r| Ok((r.clone(), EvalReport::load(&r.eval_path)?)))
        .collect::<Result<_>>()?;

    // Deltas pair each treated run with the baseline of the same source,
    // budget and seed; charts average over seeds.
    let mut baselines = BTreeMap::new();
    for (row, report) in &reports {
        if row.method == Strategy::Real {
            baselines.insert((row.source.clone(), row.samples_per_class, row.seed), report);
        }
    }
    let mut delta_rows = Vec::new();
    let mut averaged: BTreeMap<(String, Option<usize>, Strategy), (Vec<f64>, Vec<usize>, usize)> = BTreeMap::new();
    for (row, report) in &reports {
        if row.method == Strategy::Real {
            continue;
        }
        let Some(base) = baselines.get(&(row.source.clone(), row.samples_per_class, row.seed)) else {
            continue;
        };
        let delta = per_class_delta(report, base)?;
        let support = report.train_class_counts.clone();
        for (c, d) in delta.iter().enumerate() {
            delta_rows.push((row.clone(), c, support.get(c).copied().unwrap_or(0), *d));
        }
        let entry = averaged
            .entry((row.source.clone(), row.samples_per_class, row.method))
            .or_insert_with(|| (vec![0.0; delta.len()], support.clone(), 0));
        for (acc, d) in entry.0.iter_mut().zip(&delta) {
            *acc += d;
        }
        entry.2 += 1;
    }
    if !delta_rows.is_empty() {
        let path = out_dir.join("per_class_delta.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["source", "samples_per_class", "seed", "method", "class", "train_support", "delta"])?;
        for (row, c, support, d) in &delta_rows {
            w.write_record([
                row.source.clone(),
                row.samples_per_class.map(|k| k.to_string()).unwrap_or_default(),
                row.seed.to_string(),
                row.method.to_string(),
                c.to_string(),
                support.to_string(),
                d.to_string(),
            ])?;
        }
        w.flush().at(&path)?;
        bundle.per_class_delta_csv = Some(path);
        for ((source, spc, method), (sum, support, n)) in &averaged {
            let mean: Vec<f64> = sum.iter().map(|s| s / *n as f64).collect();
            let mut name = format!("per_class_delta_{method}");
            if averaged.keys().any(|(s, k, _)| (s, k) != (source, spc)) {
                name.push_str(&format!("_{}", sanitize(source)));
                if let Some(k) = spc {
                    name.push_str(&format!("_k{k}"));
                }
            }
            let path = out_dir.join(format!("{name}.png"));
            delta_chart(&mean, support).save(&path)?;
            bundle.delta_charts.push(path);
        }
    }

    let curves: Vec<(Strategy, Vec<f64>)> = reports
        .iter()
        .map(|(row, report)| (row.method, report.main_train_curve()))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if !curves.is_empty() {
        let path = out_dir.join("convergence.png");
        convergence_chart(&curves).save(&path)?;
        let csv_path = out_dir.join("convergence.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(["source", "samples_per_class", "seed", "method", "epoch", "train_accuracy"])?;
        for (row, report) in &reports {
            for (e, a) in report.main_train_curve().iter().enumerate() {
                w.write_record([
                    row.source.clone(),
                    row.samples_per_class.map(|k| k.to_string()).unwrap_or_default(),
                    row.seed.to_string(),
                    row.method.to_string(),
                    (e + 1).to_string(),
                    a.to_string(),
                ])?;
            }
        }
        w.flush().at(&csv_path)?;
        bundle.convergence_png = Some(path);
    }
    Ok(bundle)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 30;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (xa, xb) = (x0.min(x1).max(0), x0.max(x1).min(img.width() as i64 - 1));
    let (ya, yb) = (y0.min(y1).max(0), y0.max(y1).min(img.height() as i64 - 1));
    for y in ya..=yb {
        for x in xa..=xb {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        fill_rect(img, x.round() as i64, y.round() as i64 - 1, x.round() as i64, y.round() as i64 + 1, color);
    }
}

/// Bars of per-class accuracy deltas, ordered by training support (largest
/// first) and colored by [`support_color`].
pub fn delta_chart(delta: &[f64], support: &[usize]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(support.get(c).copied().unwrap_or(0)), c));
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let zero_y = MARGIN as f64 + plot_h / 2.0;
    for q in [-1.0, -0.5, 0.5, 1.0] {
        let y = (zero_y - q * plot_h / 2.0) as i64;
        fill_rect(&mut img, MARGIN as i64, y, (WIDTH - MARGIN) as i64, y, GRID);
    }
    let slot = (WIDTH - 2 * MARGIN) as f64 / delta.len().max(1) as f64;
    for (i, &c) in order.iter().enumerate() {
        let x0 = MARGIN as f64 + i as f64 * slot + slot * 0.15;
        let x1 = MARGIN as f64 + (i + 1) as f64 * slot - slot * 0.15;
        let y = zero_y - delta[c].clamp(-1.0, 1.0) * plot_h / 2.0;
        let color = Rgb(support_color(support.get(c).copied().unwrap_or(0)));
        fill_rect(&mut img, x0 as i64, zero_y as i64, x1 as i64, y as i64, color);
    }
    fill_rect(&mut img, MARGIN as i64, zero_y as i64, (WIDTH - MARGIN) as i64, zero_y as i64, AXIS);
    fill_rect(&mut img, MARGIN as i64, MARGIN as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64, AXIS);
    img
}

fn strategy_color(s: Strategy) -> Rgb<u8> {
    Rgb(match s {
        Strategy::Real => [31, 119, 180],
        Strategy::Pretrain => [255, 127, 14],
        Strategy::Regularizer => [44, 160, 44],
        Strategy::Mixup => [148, 103, 189],
    })
}

/// Per-epoch training accuracy, one polyline per run, colored by strategy.
pub fn convergence_chart(curves: &[(Strategy, Vec<f64>)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let epochs = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |e: usize, a: f64| {
        (
            MARGIN as f64 + e as f64 / (epochs - 1) as f64 * plot_w,
            (HEIGHT - MARGIN) as f64 - a.clamp(0.0, 1.0) * plot_h,
        )
    };
    for q in [0.25, 0.5, 0.75, 1.0] {
        let y = to_px(0, q).1 as i64;
        fill_rect(&mut img, MARGIN as i64, y, (WIDTH - MARGIN) as i64, y, GRID);
    }
    for (strategy, curve) in curves {
        for (e, w) in curve.windows(2).enumerate() {
            line(&mut img, to_px(e, w[0]), to_px(e + 1, w[1]), strategy_color(*strategy));
        }
    }
    fill_rect(&mut img, MARGIN as i64, (HEIGHT - MARGIN) as i64, (WIDTH - MARGIN) as i64, (HEIGHT - MARGIN) as i64, AXIS);
    fill_rect(&mut img, MARGIN as i64, MARGIN as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64, AXIS);
    // Legend swatches in strategy order.
    let mut present: Vec<Strategy> = curves.iter().map(|(s, _)| *s).collect();
    present.sort();
    present.dedup();
    for (i, s) in present.iter().enumerate() {
        let x = (WIDTH - MARGIN) as i64 - 16 * (present.len() - i) as i64;
        fill_rect(&mut img, x, 8, x + 10, 18, strategy_color(*s));
    }
    img
}
