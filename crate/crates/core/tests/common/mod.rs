//! Oracles shared by several integration tests.
#![allow(dead_code)]

/// Published (precision, recall, F-score) triples, rounded to three decimals.
pub const PUBLISHED_TRIPLES: [(f64, f64, f64); 36] = [
    // d_f 4/8/12 at d_t 2, Easy/Normal/Difficult
    (0.335, 0.731, 0.383), (0.336, 0.752, 0.385), (0.301, 0.685, 0.346),
    (0.330, 0.683, 0.374), (0.337, 0.719, 0.384), (0.285, 0.680, 0.329),
    (0.298, 0.702, 0.344), (0.318, 0.732, 0.365), (0.249, 0.716, 0.293),
    // (4,4), (8,4), (8,8)
    (0.489, 0.706, 0.526), (0.484, 0.755, 0.528), (0.432, 0.698, 0.473),
    (0.450, 0.619, 0.481), (0.461, 0.675, 0.498), (0.421, 0.604, 0.453),
    (0.380, 0.700, 0.425), (0.381, 0.757, 0.430), (0.321, 0.755, 0.370),
    // (12,4), (12,6), (12,12)
    (0.355, 0.840, 0.410), (0.354, 0.896, 0.412), (0.312, 0.852, 0.365),
    (0.503, 0.549, 0.513), (0.516, 0.604, 0.534), (0.469, 0.535, 0.483),
    (0.357, 0.779, 0.408), (0.354, 0.830, 0.408), (0.298, 0.833, 0.349),
    // summary over all test subsets
    (0.324, 0.722, 0.371), (0.468, 0.720, 0.509), (0.317, 0.694, 0.362),
    (0.444, 0.633, 0.477), (0.361, 0.737, 0.408), (0.288, 0.717, 0.334),
    (0.340, 0.863, 0.396), (0.496, 0.563, 0.510), (0.336, 0.814, 0.388),
];

/// ROC area by sweeping every distinct score as a threshold and integrating
/// the (FPR, TPR) polyline with the trapezoid rule.
pub fn auc_threshold_sweep(pred: &[f64], gt: &[bool]) -> f64 {
    let pos = gt.iter().filter(|&&g| g).count() as f64;
    let neg = gt.len() as f64 - pos;
    let mut thresholds: Vec<f64> = pred.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = pred.iter().zip(gt).filter(|(&p, &g)| g && p >= t).count() as f64;
        let fp = pred.iter().zip(gt).filter(|(&p, &g)| !g && p >= t).count() as f64;
        points.push((fp / neg, tp / pos));
    }
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Structure measure written out on nested rows.
pub fn s_measure_oracle(pred: &[Vec<f64>], gt: &[Vec<bool>]) -> f64 {
    let h = gt.len();
    let w = gt[0].len();
    let n = (h * w) as f64;
    let eps = f64::EPSILON;
    let fg_frac = gt.iter().flatten().filter(|&&g| g).count() as f64 / n;
    let pred_mean = pred.iter().flatten().sum::<f64>() / n;
    if fg_frac == 0.0 {
        return 1.0 - pred_mean;
    }
    if fg_frac == 1.0 {
        return pred_mean;
    }

    let object = |vals: Vec<f64>| -> f64 {
        let k = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / k;
        let sd = if vals.len() < 2 { 0.0 } else { (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1.0)).sqrt() };
        2.0 * m / (m * m + 1.0 + sd + eps)
    };
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if gt[r][c] { fg.push(pred[r][c]) } else { bg.push(1.0 - pred[r][c]) }
        }
    }
    let s_obj = fg_frac * object(fg) + (1.0 - fg_frac) * object(bg);

    let total = fg_frac * n;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for r in 0..h {
        for c in 0..w {
            if gt[r][c] {
                cx += (c + 1) as f64;
                cy += (r + 1) as f64;
            }
        }
    }
    let x = (cx / total).round() as usize;
    let y = (cy / total).round() as usize;
    let quad = |r0: usize, r1: usize, c0: usize, c1: usize| -> f64 {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                a.push(pred[r][c]);
                b.push(if gt[r][c] { 1.0 } else { 0.0 });
            }
        }
        if a.is_empty() {
            return 0.0;
        }
        let k = a.len() as f64;
        let ma = a.iter().sum::<f64>() / k;
        let mb = b.iter().sum::<f64>() / k;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cab = 0.0;
        for i in 0..a.len() {
            va += (a[i] - ma) * (a[i] - ma);
            vb += (b[i] - mb) * (b[i] - mb);
            cab += (a[i] - ma) * (b[i] - mb);
        }
        let d = k - 1.0 + eps;
        let (va, vb, cab) = (va / d, vb / d, cab / d);
        let num = 4.0 * ma * mb * cab;
        let den = (ma * ma + mb * mb) * (va + vb);
        if num != 0.0 { num / (den + eps) } else if den == 0.0 { 1.0 } else { 0.0 }
    };
    let area = n;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let s_reg = w1 * quad(0, y, 0, x) + w2 * quad(0, y, x, w) + w3 * quad(y, h, 0, x) + w4 * quad(y, h, x, w);
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}
