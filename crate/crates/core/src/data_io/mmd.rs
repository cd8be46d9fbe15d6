//! Kernel two-sample statistic on flattened images.

use crate::error::DataError;
use crate::grid::GridFunction;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(a: &[GridFunction], b: &[GridFunction]) -> Result<(), DataError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DataError::Invalid(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let s = a[0].shape();
    if a.iter().chain(b).any(|g| g.shape() != s) {
        return Err(DataError::Invalid("MMD sets must share one image shape".into()));
    }
    Ok(())
}

/// Median pairwise Euclidean distance within `set`, a common RBF width.
pub fn median_bandwidth(set: &[GridFunction]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            d.push(sq_dist(set[i].as_slice(), set[j].as_slice()).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

struct KernelSums {
    xx: f64,
    yy: f64,
    xy: f64,
    diag_x: f64,
    diag_y: f64,
}

fn kernel_sums(a: &[GridFunction], b: &[GridFunction], bandwidth: f64) -> KernelSums {
    let k = |x: &GridFunction, y: &GridFunction| {
        (-sq_dist(x.as_slice(), y.as_slice()) / (2.0 * bandwidth * bandwidth)).exp()
    };
    let pair_sum = |s: &[GridFunction]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += k(&s[i], &s[j]);
            }
        }
        2.0 * t
    };
    KernelSums {
        xx: pair_sum(a),
        yy: pair_sum(b),
        xy: a
            .iter()
            .flat_map(|x| b.iter().map(move |y| (x, y)))
            .map(|(x, y)| k(x, y))
            .sum(),
        diag_x: a.iter().map(|x| k(x, x)).sum(),
        diag_y: b.iter().map(|y| k(y, y)).sum(),
    }
}

/// Unbiased estimate of MMD² with an RBF kernel of width `bandwidth`.
/// It is zero in expectation for equal distributions and can be slightly
/// negative.
pub fn mmd_unbiased(a: &[GridFunction], b: &[GridFunction], bandwidth: f64) -> Result<f64, DataError> {
    check(a, b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(DataError::Invalid(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let s = kernel_sums(a, b, bandwidth);
    let (m, n) = (a.len() as f64, b.len() as f64);
    Ok(s.xx / (m * (m - 1.0)) + s.yy / (n * (n - 1.0)) - 2.0 * s.xy / (m * n))
}

/// Biased (V-statistic) estimate of MMD², always nonnegative.
pub fn mmd_biased(a: &[GridFunction], b: &[GridFunction], bandwidth: f64) -> Result<f64, DataError> {
    check(a, b)?;
    let s = kernel_sums(a, b, bandwidth);
    let (m, n) = (a.len() as f64, b.len() as f64);
    Ok(((s.xx + s.diag_x) / (m * m) + (s.yy + s.diag_y) / (n * n) - 2.0 * s.xy / (m * n)).max(0.0))
}
