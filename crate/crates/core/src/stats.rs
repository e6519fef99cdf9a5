//! Small univariate statistics shared across modules.

use std::cmp::Ordering;

/// Consistency factor turning the median absolute deviation into a
/// standard deviation at the Gaussian.
pub const MAD_CONSISTENCY: f64 = 1.4826;

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `(n-1)p` rule). `p` is a fraction in `[0, 1]`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(cmp_f64);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let p = p.clamp(0.0, 1.0);
    let pos = (n - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Median, averaging the two middle values for even sample sizes.
/// Reorders `buf`.
pub fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    assert!(n > 0, "median of an empty sample");
    let mid = n / 2;
    let (_, upper, _) = buf.select_nth_unstable_by(mid, cmp_f64);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = buf[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn median(values: &[f64]) -> f64 {
    median_in_place(&mut values.to_vec())
}

/// Median absolute deviation about the median, scaled by [`MAD_CONSISTENCY`].
pub fn mad(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    mad_in_place(&mut buf)
}

pub fn mad_in_place(buf: &mut [f64]) -> f64 {
    let med = median_in_place(buf);
    for x in buf.iter_mut() {
        *x = (*x - med).abs();
    }
    MAD_CONSISTENCY * median_in_place(buf)
}

/// Rousseeuw–Croux Qn scale estimator with the usual small-sample
/// correction. Quadratic in the sample size.
pub fn qn(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let h = n / 2 + 1;
    let k = h * (h - 1) / 2;
    let mut diffs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            diffs.push((values[i] - values[j]).abs());
        }
    }
    let (_, kth, _) = diffs.select_nth_unstable_by(k - 1, cmp_f64);
    2.2219 * *kth * qn_correction(n)
}

fn qn_correction(n: usize) -> f64 {
    match n {
        2 => 0.399,
        3 => 0.994,
        4 => 0.512,
        5 => 0.844,
        6 => 0.611,
        7 => 0.857,
        8 => 0.669,
        9 => 0.872,
        _ if n % 2 == 1 => n as f64 / (n as f64 + 1.4),
        _ => n as f64 / (n as f64 + 3.8),
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
