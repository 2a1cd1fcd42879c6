//! Separability checks on designed statistics.

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

/// Gap between two sample means in units of the standard error of the
/// difference.
pub fn mean_gap_sigma(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    (ma - mb).abs() / se.max(1e-300)
}

/// Train accuracy of a one-feature logistic regression `σ(w·x + b)`
/// separating `neg` (label 0) from `pos` (label 1), fit by Newton's method
/// on standardized features.
pub fn logistic_accuracy(neg: &[f64], pos: &[f64]) -> f64 {
    let all: Vec<(f64, f64)> = neg
        .iter()
        .map(|&x| (x, 0.0))
        .chain(pos.iter().map(|&x| (x, 1.0)))
        .collect();
    let xs: Vec<f64> = all.iter().map(|p| p.0).collect();
    let (mean, var) = mean_var(&xs);
    let sd = var.sqrt().max(1e-300);
    let data: Vec<(f64, f64)> = all.iter().map(|&(x, y)| ((x - mean) / sd, y)).collect();
    let (mut w, mut b) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 1e-6, 0.0, 1e-6);
        for &(x, y) in &data {
            let p = 1.0 / (1.0 + (-(w * x + b)).exp());
            gw += (p - y) * x;
            gb += p - y;
            let s = p * (1.0 - p);
            hww += s * x * x;
            hwb += s * x;
            hbb += s;
        }
        let det = hww * hbb - hwb * hwb;
        if det.abs() < 1e-300 {
            break;
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        // Damped so separable data cannot blow the weights up in one step.
        let step = 1.0f64.min(10.0 / dw.abs().max(db.abs()).max(1e-300));
        w -= step * dw;
        b -= step * db;
    }
    let correct = data
        .iter()
        .filter(|&&(x, y)| ((w * x + b >= 0.0) as u8 as f64) == y)
        .count();
    correct as f64 / data.len() as f64
}
