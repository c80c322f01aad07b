use std::fmt::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::KeyValue;
use crate::datapipe::{Difficulty, Video};
use crate::error::{Error, Result};
use crate::metrics::{fmt_value, MetricReport, METRIC_NAMES};
use crate::model::{Model, ModelConfig};

use super::{evaluate_dataset, train, TrainConfig};

/// A grid of `(d_f, d_t)` configurations trained and scored identically.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub grid: Vec<(usize, usize)>,
    pub stride: usize,
    /// Everything but `d_f`, `d_t` and `stride`.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        if let Some((f, t)) = self.grid.iter().find(|(f, t)| *t == 0 || f % t != 0) {
            return Err(Error::config(format!("tubelet depth {t} does not divide frame depth {f}")));
        }
        self.train.validate()
    }

    pub fn cell_config(&self, d_f: usize, d_t: usize) -> ModelConfig {
        ModelConfig {
            d_f,
            d_t,
            stride: self.stride,
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub d_f: usize,
    pub d_t: usize,
    /// `Err` holds the failure message of a cell that did not complete.
    pub report: std::result::Result<MetricReport, String>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// Subset labels of the evaluation videos, in report order, then `All`.
    pub subsets: Vec<String>,
}

/// One CSV line of a sweep table.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub d_f: usize,
    pub d_t: usize,
    pub subset: String,
    pub values: [Option<f64>; 7],
}

pub const SWEEP_HEADER: &str = "d_f,d_t,subset,precision,recall,auc,f_score,mae,cc,s_measure";

fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("TUBESAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

fn run_cell(spec: &SweepSpec, d_f: usize, d_t: usize, train_set: &[Video], eval_set: &[Video]) -> SweepCell {
    let mut final_loss = None;
    let report = (|| {
        let cfg = spec.cell_config(d_f, d_t);
        let mut model = Model::new(cfg, spec.train.seed)?;
        let tc = TrainConfig {
            checkpoint_dir: spec.train.checkpoint_dir.as_ref().map(|d| d.join(format!("df{d_f}_dt{d_t}"))),
            ..spec.train.clone()
        };
        let out = train(&mut model, train_set, &tc, |_| {})?;
        final_loss = out.trace.last().map(|r| r.loss);
        evaluate_dataset(&model, eval_set, spec.train.eval_mode)
    })()
    .map_err(|e: Error| e.to_string());
    SweepCell { d_f, d_t, report, final_loss }
}

/// Trains one model per grid cell from the same seed and scores it on
/// `eval_set`. Cells run on up to `TUBESAL_THREADS` threads; a failing cell
/// is kept with its error and the rest continue.
pub fn sweep(spec: &SweepSpec, train_set: &[Video], eval_set: &[Video]) -> Result<SweepResult> {
    spec.validate()?;
    let n = spec.grid.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..worker_count(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let (d_f, d_t) = spec.grid[i];
                let cell = run_cell(spec, d_f, d_t, train_set, eval_set);
                slots.lock().unwrap()[i] = Some(cell);
            });
        }
    });
    let cells = slots.into_inner().unwrap().into_iter().map(|c| c.expect("every cell ran")).collect();
    let mut subsets: Vec<Difficulty> = eval_set.iter().map(|v| v.difficulty).collect();
    subsets.sort();
    subsets.dedup();
    let mut subsets: Vec<String> = subsets.iter().map(|d| d.to_string()).collect();
    subsets.push("All".into());
    Ok(SweepResult { cells, subsets })
}

impl SweepResult {
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for label in &self.subsets {
                let values = match &c.report {
                    Ok(r) => r
                        .rows()
                        .into_iter()
                        .find(|(l, _)| l == label)
                        .map_or([None; 7], |(_, m)| m.values()),
                    Err(_) => [None; 7],
                };
                rows.push(SweepRow {
                    d_f: c.d_f,
                    d_t: c.d_t,
                    subset: label.clone(),
                    values,
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows())
    }

    pub fn table(&self) -> String {
        let rows = self.rows();
        let cols: Vec<(Option<&str>, &SweepRow)> = rows.iter().filter(|r| r.subset == "All").map(|r| (None, r)).collect();
        comparison_table(&cols)
    }

    /// `(file name, svg)` per metric.
    pub fn charts(&self) -> Vec<(String, String)> {
        let rows = self.rows();
        METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| (format!("{name}.svg"), line_chart(&rows, i)))
            .collect()
    }

    /// Where the pooled F-score peaks along `d_t` for each `d_f`. Reported,
    /// not asserted: the location depends on the data.
    pub fn peak_observations(&self) -> String {
        let rows = self.rows();
        let mut out = String::new();
        for d_f in distinct(rows.iter().map(|r| r.d_f)) {
            let pts: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.d_f == d_f && r.subset == "All")
                .filter_map(|r| r.values[3].map(|v| (r.d_t, v)))
                .collect();
            if pts.len() < 2 {
                let _ = writeln!(out, "d_f={d_f}: fewer than two tubelet depths scored, no peak to report");
                continue;
            }
            let best = pts.iter().fold(pts[0], |b, &p| if p.1 > b.1 { p } else { b });
            let _ = writeln!(
                out,
                "d_f={d_f}: F-score peaks at d_t={} ({:.4}); d_f/2 = {}",
                best.0,
                best.1,
                d_f / 2
            );
        }
        out
    }
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.d_f, r.d_t, r.subset);
        for v in r.values {
            let _ = write!(out, ",{}", fmt_value(v));
        }
        out.push('\n');
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_HEADER) {
        return Err(Error::config(format!("sweep csv must start with {SWEEP_HEADER:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::config(format!("sweep csv line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad());
            }
            let mut values = [None; 7];
            for (slot, s) in values.iter_mut().zip(&f[3..]) {
                *slot = if *s == "NA" { None } else { Some(s.parse().map_err(|_| bad())?) };
            }
            Ok(SweepRow {
                d_f: f[0].parse().map_err(|_| bad())?,
                d_t: f[1].parse().map_err(|_| bad())?,
                subset: f[2].to_string(),
                values,
            })
        })
        .collect()
}

/// Configurations as columns, metrics as rows; `source` adds a header row.
pub fn comparison_table(cols: &[(Option<&str>, &SweepRow)]) -> String {
    let labels = ["Precision", "Recall", "AUC", "F-score", "MAE", "CC", "S-measure"];
    let mut out = String::new();
    let cell = |s: String| format!(" {s:>8}");
    if cols.iter().any(|(s, _)| s.is_some()) {
        out.push_str(&format!("{:<10}", "run"));
        for (s, _) in cols {
            out.push_str(&cell(s.unwrap_or("").chars().take(8).collect()));
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<10}", "d_f"));
    for (_, r) in cols {
        out.push_str(&cell(r.d_f.to_string()));
    }
    out.push_str(&format!("\n{:<10}", "d_t"));
    for (_, r) in cols {
        out.push_str(&cell(r.d_t.to_string()));
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        out.push_str(&format!("{label:<10}"));
        for (_, r) in cols {
            out.push_str(&cell(r.values[i].map_or_else(|| "NA".into(), |v| format!("{v:.3}"))));
        }
        out.push('\n');
    }
    out
}

fn distinct(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Metric `metric` of the pooled rows against `d_t`, one polyline per `d_f`.
fn line_chart(rows: &[SweepRow], metric: usize) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 110.0, 30.0, 50.0);
    let pooled: Vec<&SweepRow> = rows.iter().filter(|r| r.subset == "All").collect();
    let xs = distinct(pooled.iter().map(|r| r.d_t));
    let vals: Vec<f64> = pooled.iter().filter_map(|r| r.values[metric]).collect();
    let (mut lo, mut hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if vals.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-3 {
        lo -= 0.05;
        hi += 0.05;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |i: usize| {
        let span = (xs.len().max(2) - 1) as f64;
        let i = if xs.len() == 1 { 0.5 } else { i as f64 };
        left + (w - left - right) * i / span
    };
    let py = |v: f64| top + (h - top - bottom) * (hi - v) / (hi - lo);

    let name = METRIC_NAMES[metric];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{name} vs d_t</text>"#, w / 2.0);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<path d="M{x0:.1},{y0:.1} L{x0:.1},{y1:.1} L{x1:.1},{y1:.1}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#dddddd"/>"##, x0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    for (i, d_t) in xs.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{d_t}</text>"#, px(i), y1 + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">d_t</text>"#, (x0 + x1) / 2.0, h - 12.0);

    for (k, d_f) in distinct(pooled.iter().map(|r| r.d_f)).into_iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let pts: Vec<(f64, f64)> = pooled
            .iter()
            .filter(|r| r.d_f == d_f)
            .filter_map(|r| {
                let i = xs.iter().position(|&x| x == r.d_t)?;
                r.values[metric].map(|v| (px(i), py(v)))
            })
            .collect();
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 * k as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, x1 + 12.0, x1 + 30.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">d_f={d_f}</text>"#, x1 + 34.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(d_f: usize, d_t: usize, f: Option<f64>) -> SweepRow {
        SweepRow {
            d_f,
            d_t,
            subset: "All".into(),
            values: [Some(0.5), Some(0.25), None, f, Some(0.1), Some(-0.2), Some(0.75)],
        }
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![row(4, 2, Some(0.125)), row(4, 4, None)];
        let csv = rows_to_csv(&rows);
        assert_eq!(csv.lines().next(), Some(SWEEP_HEADER));
        assert_eq!(parse_sweep_csv(&csv).unwrap(), rows);
        assert!(parse_sweep_csv("a,b\n").is_err());
    }

    #[test]
    fn chart_has_one_series_per_frame_depth() {
        let rows = vec![row(4, 2, Some(0.3)), row(4, 4, Some(0.5)), row(8, 2, Some(0.4)), row(8, 4, None)];
        let svg = line_chart(&rows, 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("d_f=8"));
        assert_eq!(svg, line_chart(&rows, 3));
    }

    #[test]
    fn invalid_grid_rejected() {
        let spec = SweepSpec {
            grid: vec![(4, 3)],
            stride: 5,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
