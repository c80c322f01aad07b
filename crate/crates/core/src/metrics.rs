//! Saliency metrics and per-subset reports.
//!
//! Every per-frame metric takes a prediction in `[0, 1]` and a ground-truth
//! map of the same shape. Reports average per frame within each difficulty
//! subset; the subset F-score is computed from the averaged precision and
//! recall.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datapipe::Difficulty;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA_SQ: f64 = 0.3;
pub const THRESHOLD: f64 = 0.5;

fn same_shape(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn check_binary(gt: &Tensor<f32>) -> Result<()> {
    match gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::domain(format!("ground truth must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = KahanSum::default();
    let mut n = 0usize;
    for v in values {
        s.add(v);
        n += 1;
    }
    s.value() / n as f64
}

/// Mean absolute error.
pub fn mae(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(mean_of(pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p as f64 - g as f64).abs())))
}

/// Precision and recall of `pred >= threshold` against a binary map. An
/// empty prediction has precision 0 and an empty ground truth recall 0.
pub fn precision_recall(pred: &Tensor<f32>, gt: &Tensor<f32>, threshold: f64) -> Result<(f64, f64)> {
    same_shape(pred, gt)?;
    check_binary(gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p as f64 >= threshold, g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}

/// Weighted harmonic mean `(1 + b) P R / (b P + R)`; 0 when both are 0.
pub fn f_score(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn roc_auc(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    same_shape(pred, gt)?;
    check_binary(gt)?;
    let n_pos = gt.data().iter().filter(|&&g| g == 1.0).count();
    let n_neg = gt.numel() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes in the ground truth".into()));
    }
    let mut order: Vec<usize> = (0..pred.numel()).collect();
    let p = pred.data();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // rank sum of positives, averaging 1-based ranks across ties
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| gt.data()[k] == 1.0).count();
        pos_rank_sum += avg * pos_in_tie as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Pearson correlation over pixels.
pub fn pearson_cc(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    same_shape(pred, gt)?;
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let (mx, my) = (mean_of(x.iter().copied()), mean_of(y.iter().copied()));
    let (mut sxy, mut sxx, mut syy) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    for (a, b) in x.iter().zip(&y) {
        let (dx, dy) = (a - mx, b - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let den = (sxx.value() * syy.value()).sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("CC needs non-constant prediction and ground truth".into()));
    }
    Ok((sxy.value() / den).clamp(-1.0, 1.0))
}

mod structure {
    //! Structure measure: object-aware and region-aware similarity.

    const EPS: f64 = f64::EPSILON;

    /// Row-major `h x w` view.
    pub struct Map<'a> {
        pub data: &'a [f64],
        pub h: usize,
        pub w: usize,
    }

    fn object_score(values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        2.0 * mean / (mean * mean + 1.0 + std + EPS)
    }

    pub fn s_object(pred: &Map, gt: &Map) -> f64 {
        let fg: Vec<f64> = pred.data.iter().zip(gt.data).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
        let bg: Vec<f64> = pred.data.iter().zip(gt.data).filter(|(_, &g)| g != 1.0).map(|(&p, _)| 1.0 - p).collect();
        let u = fg.len() as f64 / gt.data.len() as f64;
        u * object_score(&fg) + (1.0 - u) * object_score(&bg)
    }

    /// Foreground centroid as 1-based (column, row), rounded; the image
    /// centre when there is no foreground.
    fn centroid(gt: &Map) -> (usize, usize) {
        let total: f64 = gt.data.iter().sum();
        if total == 0.0 {
            return ((gt.w as f64 / 2.0).round() as usize, (gt.h as f64 / 2.0).round() as usize);
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 0..gt.h {
            for c in 0..gt.w {
                let v = gt.data[r * gt.w + c];
                sx += v * (c + 1) as f64;
                sy += v * (r + 1) as f64;
            }
        }
        ((sx / total).round() as usize, (sy / total).round() as usize)
    }

    fn block(m: &Map, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            out.extend_from_slice(&m.data[r * m.w + cols.start..r * m.w + cols.end]);
        }
        out
    }

    fn ssim(x: &[f64], y: &[f64]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let den = n - 1.0 + EPS;
        let sxx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / den;
        let syy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / den;
        let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / den;
        let alpha = 4.0 * mx * my * sxy;
        let beta = (mx * mx + my * my) * (sxx + syy);
        if alpha != 0.0 {
            alpha / (beta + EPS)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn s_region(pred: &Map, gt: &Map) -> f64 {
        let (x, y) = centroid(gt);
        let (h, w) = (gt.h, gt.w);
        let area = (h * w) as f64;
        let w1 = (x * y) as f64 / area;
        let w2 = ((w - x) * y) as f64 / area;
        let w3 = (x * (h - y)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let quads = [(0..y, 0..x, w1), (0..y, x..w, w2), (y..h, 0..x, w3), (y..h, x..w, w4)];
        quads
            .into_iter()
            .map(|(rows, cols, weight)| {
                let p = block(pred, rows.clone(), cols.clone());
                let g = block(gt, rows, cols);
                weight * ssim(&p, &g)
            })
            .sum()
    }
}

/// Structure measure `alpha * S_object + (1 - alpha) * S_region`, clamped at
/// 0. An all-background ground truth scores `1 - mean(pred)` and an
/// all-foreground one `mean(pred)`.
pub fn s_measure(pred: &Tensor<f32>, gt: &Tensor<f32>, alpha: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    check_binary(gt)?;
    let s = gt.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[0] == 1 => (s[1], s[2]),
        _ => return Err(Error::dim(format!("s_measure expects [H, W] or [1, H, W], got {s:?}"))),
    };
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let fg_mean = mean_of(g.iter().copied());
    if fg_mean == 0.0 {
        return Ok(1.0 - mean_of(p.iter().copied()));
    }
    if fg_mean == 1.0 {
        return Ok(mean_of(p.iter().copied()));
    }
    let pm = structure::Map { data: &p, h, w };
    let gm = structure::Map { data: &g, h, w };
    let q = alpha * structure::s_object(&pm, &gm) + (1.0 - alpha) * structure::s_region(&pm, &gm);
    Ok(q.max(0.0))
}

/// All per-frame metrics; `None` where the metric is undefined for the frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub precision: f64,
    pub recall: f64,
    pub auc: Option<f64>,
    pub mae: f64,
    pub cc: Option<f64>,
    pub s_measure: f64,
}

/// Binarizes a continuous ground-truth map at 0.5.
pub fn binarize(gt: &Tensor<f32>) -> Tensor<f32> {
    gt.map(|v| if v as f64 >= THRESHOLD { 1.0 } else { 0.0 })
}

/// Scores one prediction; a non-binary ground truth is binarized first.
pub fn frame_metrics(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<FrameMetrics> {
    same_shape(pred, gt)?;
    let bin;
    let gt = if check_binary(gt).is_ok() {
        gt
    } else {
        bin = binarize(gt);
        &bin
    };
    let optional = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let (precision, recall) = precision_recall(pred, gt, THRESHOLD)?;
    Ok(FrameMetrics {
        precision,
        recall,
        auc: optional(roc_auc(pred, gt))?,
        mae: mae(pred, gt)?,
        cc: optional(pearson_cc(pred, gt))?,
        s_measure: s_measure(pred, gt, 0.5)?,
    })
}

/// Subset averages of the seven reported metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetMetrics {
    pub frames: usize,
    pub precision: f64,
    pub recall: f64,
    /// Over frames where AUC is defined; `None` if there are none.
    pub auc: Option<f64>,
    pub f_score: f64,
    pub mae: f64,
    /// Over frames where CC is defined; `None` if there are none.
    pub cc: Option<f64>,
    pub s_measure: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["precision", "recall", "auc", "f_score", "mae", "cc", "s_measure"];

impl SubsetMetrics {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.precision),
            Some(self.recall),
            self.auc,
            Some(self.f_score),
            Some(self.mae),
            self.cc,
            Some(self.s_measure),
        ]
    }
}

/// Formats a metric value, `NA` when missing.
pub fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

#[derive(Clone, Debug, Default)]
struct Accum {
    frames: usize,
    precision: KahanSum,
    recall: KahanSum,
    auc: (KahanSum, usize),
    mae: KahanSum,
    cc: (KahanSum, usize),
    s: KahanSum,
}

/// Collects per-frame metrics by subset.
#[derive(Clone, Debug, Default)]
pub struct ReportBuilder {
    acc: BTreeMap<Difficulty, Accum>,
}

impl ReportBuilder {
    pub fn add(&mut self, m: &FrameMetrics, subset: Difficulty) {
        let a = self.acc.entry(subset).or_default();
        a.frames += 1;
        a.precision.add(m.precision);
        a.recall.add(m.recall);
        if let Some(v) = m.auc {
            a.auc.0.add(v);
            a.auc.1 += 1;
        }
        a.mae.add(m.mae);
        if let Some(v) = m.cc {
            a.cc.0.add(v);
            a.cc.1 += 1;
        }
        a.s.add(m.s_measure);
    }

    pub fn add_pair(&mut self, pred: &Tensor<f32>, gt: &Tensor<f32>, subset: Difficulty) -> Result<()> {
        let m = frame_metrics(pred, gt)?;
        self.add(&m, subset);
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let subsets = self.acc.iter().map(|(&d, a)| (d, a.summary())).collect();
        let overall = (!self.acc.is_empty()).then(|| {
            let mut all = Accum::default();
            for a in self.acc.values() {
                all.merge(a);
            }
            all.summary()
        });
        MetricReport { subsets, overall }
    }
}

impl Accum {
    fn merge(&mut self, o: &Accum) {
        self.frames += o.frames;
        self.precision.add(o.precision.value());
        self.recall.add(o.recall.value());
        self.auc.0.add(o.auc.0.value());
        self.auc.1 += o.auc.1;
        self.mae.add(o.mae.value());
        self.cc.0.add(o.cc.0.value());
        self.cc.1 += o.cc.1;
        self.s.add(o.s.value());
    }

    fn summary(&self) -> SubsetMetrics {
        let n = self.frames as f64;
        let opt = |(s, k): (KahanSum, usize)| (k > 0).then(|| s.value() / k as f64);
        let (p, r) = (self.precision.value() / n, self.recall.value() / n);
        SubsetMetrics {
            frames: self.frames,
            precision: p,
            recall: r,
            auc: opt(self.auc),
            f_score: f_score(p, r, BETA_SQ),
            mae: self.mae.value() / n,
            cc: opt(self.cc),
            s_measure: self.s.value() / n,
        }
    }
}

/// Per-subset table of the seven metrics. Subsets without frames are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub subsets: BTreeMap<Difficulty, SubsetMetrics>,
    /// Every frame of every subset pooled.
    pub overall: Option<SubsetMetrics>,
}

impl MetricReport {
    pub fn get(&self, subset: Difficulty) -> Option<&SubsetMetrics> {
        self.subsets.get(&subset)
    }

    /// Subsets in `Difficulty::ALL` with no frames.
    pub fn missing_subsets(&self) -> Vec<Difficulty> {
        Difficulty::ALL.into_iter().filter(|d| !self.subsets.contains_key(d)).collect()
    }

    /// Labelled rows: each subset, then `All` for the pooled frames.
    pub fn rows(&self) -> Vec<(String, &SubsetMetrics)> {
        let mut rows: Vec<_> = self.subsets.iter().map(|(d, m)| (d.to_string(), m)).collect();
        rows.extend(self.overall.iter().map(|m| ("All".to_string(), m)));
        rows
    }

    /// `subset,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,metric,value\n");
        for (d, m) in self.rows() {
            for (name, v) in METRIC_NAMES.iter().zip(m.values()) {
                let _ = writeln!(out, "{d},{name},{}", fmt_value(v));
            }
        }
        out
    }

    /// Metrics as rows, subsets as columns.
    pub fn to_table(&self) -> String {
        let labels = ["Precision", "Recall", "AUC", "F-score", "MAE", "CC", "S-measure"];
        let mut out = format!("{:<10}", "Metric");
        let rows = self.rows();
        for (d, _) in &rows {
            let _ = write!(out, " {d:>10}");
        }
        out.push('\n');
        for (i, label) in labels.iter().enumerate() {
            let _ = write!(out, "{label:<10}");
            for (_, m) in &rows {
                let v = m.values()[i].map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
                let _ = write!(out, " {v:>10}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<10}", "Frames");
        for (_, m) in &rows {
            let _ = write!(out, " {:>10}", m.frames);
        }
        out.push_str("\n(metrics averaged per frame within each subset)\n");
        out
    }
}

/// Builds a report from `(prediction, ground truth, subset)` triples.
pub fn evaluate_report<'a>(
    pairs: impl IntoIterator<Item = (&'a Tensor<f32>, &'a Tensor<f32>, Difficulty)>,
) -> Result<MetricReport> {
    let mut b = ReportBuilder::default();
    for (p, g, d) in pairs {
        b.add_pair(p, g, d)?;
    }
    Ok(b.finish())
}
