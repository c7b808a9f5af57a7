//! Independent reference implementations used to cross-check the fast paths.
//!
//! These are deliberately naive: two-pass moments and full sorts. They share
//! no code with [`crate::stats`].

/// `g1 = m3 / m2^(3/2)` from two-pass central moments; 0 for fewer than
/// three points or zero variance.
pub fn skewness_direct(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 3 {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let m2 = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let m3 = series.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
    if m2 == 0.0 {
        return 0.0;
    }
    m3 / (m2 * m2.sqrt())
}

/// Median via a full sort.
pub fn median_sorted(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median absolute deviation via full sorts.
pub fn mad_sorted(values: &[f64]) -> f64 {
    let m = median_sorted(values);
    let dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median_sorted(&dev)
}
