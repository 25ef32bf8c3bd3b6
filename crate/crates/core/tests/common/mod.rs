//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;

/// Central differences of `loss` around `p`, one coordinate at a time.
pub fn fd_gradient(p: &[f64], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    let mut g = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        q[i] = p[i] + h;
        let up = loss(&q);
        q[i] = p[i] - h;
        let down = loss(&q);
        q[i] = p[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Prints a verdict line that is visible even while test output is captured.
pub fn verdict(label: &str, pass: bool, detail: &str) {
    let line = format!(
        "{label}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}
