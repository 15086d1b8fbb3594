//! Sample statistics shared by the estimators: moments, block-bootstrap style
//! standard errors, autocorrelation and histograms.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population (1/n) variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Mean and its standard error from non-overlapping block means.
///
/// Trailing samples that do not fill a whole block are dropped from the
/// error estimate but kept in the mean.
pub fn block_mean_se(xs: &[f64], block_len: usize) -> (f64, f64) {
    let m = mean(xs);
    let block_len = block_len.max(1);
    let n_blocks = xs.len() / block_len;
    if n_blocks < 2 {
        return (m, f64::NAN);
    }
    let means: Vec<f64> = xs
        .chunks_exact(block_len)
        .map(|c| c.iter().sum::<f64>() / block_len as f64)
        .collect();
    let bm = mean(&means);
    let var = means.iter().map(|b| (b - bm) * (b - bm)).sum::<f64>() / (n_blocks - 1) as f64;
    (m, (var / n_blocks as f64).sqrt())
}

/// Normalized autocorrelation for lags `0..=max_lag`.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            let s: f64 = (0..n - k).map(|i| (xs[i] - m) * (xs[i + k] - m)).sum();
            s / (n - k) as f64 / c0
        })
        .collect()
}

/// First lag at which the autocorrelation drops below `threshold`
/// (searching up to `max_lag`; returns `max_lag` if never reached).
pub fn decorrelation_lag(xs: &[f64], threshold: f64, max_lag: usize) -> usize {
    let n = xs.len();
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if !(c0 > 0.0) {
        return 1;
    }
    for k in 1..=max_lag.min(n.saturating_sub(1)) {
        let s: f64 = (0..n - k).map(|i| (xs[i] - m) * (xs[i + k] - m)).sum();
        if (s / (n - k) as f64 / c0).abs() < threshold {
            return k;
        }
    }
    max_lag.max(1)
}

/// Block length (in samples) for standard errors of a series whose
/// decorrelation lag is `tau`, keeping at least `min_blocks` blocks.
pub fn block_length(n: usize, tau: usize, min_blocks: usize) -> usize {
    let wanted = 50 * tau.max(1);
    let cap = (n / min_blocks.max(1)).max(1);
    wanted.min(cap)
}

/// Linear-interpolated quantile of `sorted` (ascending).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&s, q)
}

/// Freedman–Diaconis bin count for `xs` (at least 1, at most 10_000).
pub fn freedman_diaconis_bins(xs: &[f64]) -> usize {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let range = s[s.len() - 1] - s[0];
    if iqr <= 0.0 || range <= 0.0 {
        return 1;
    }
    let width = 2.0 * iqr / (xs.len() as f64).cbrt();
    ((range / width).ceil() as usize).clamp(1, 10_000)
}

/// Bin probabilities of `xs` over `bins` equal bins on `[lo, hi]`.
/// Values outside the range are dropped.
pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in xs {
        if !(lo..=hi).contains(&x) {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let n = xs.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// L1 distance between the normalized histograms of two sample sets, binned
/// over the range of the reference `a`. Mass of `b` outside that range
/// counts in full, so a few runaway values cannot coarsen the binning.
/// Identical samples give 0, disjoint supports give 2.
pub fn histogram_l1(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 0.0;
    }
    let pa = histogram(a, lo, hi, bins);
    let pb = histogram(b, lo, hi, bins);
    let outside = 1.0 - pb.iter().sum::<f64>();
    pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() + outside.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn runaway_values_count_as_missing_mass() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let mut b = a.clone();
        b[0] = 1e9;
        let d = histogram_l1(&a, &b, 10);
        assert!((d - 0.002).abs() < 1e-12, "{d}");
    }

    #[test]
    fn population_variance() {
        assert_eq!(variance(&[-1.0, 1.0]), 1.0);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn block_se_matches_iid_formula() {
        let mut r = rng::stream(3, 0, 0);
        let xs: Vec<f64> = (0..200_000).map(|_| rng::normal(&mut r)).collect();
        let (m, se) = block_mean_se(&xs, 100);
        let iid = 1.0 / (xs.len() as f64).sqrt();
        assert!((se / iid - 1.0).abs() < 0.2, "se {se} vs {iid}");
        assert!(m.abs() < 4.0 * iid);
    }

    #[test]
    fn ar1_decorrelation() {
        let phi: f64 = 0.9;
        let mut r = rng::stream(4, 0, 0);
        let mut x = 0.0;
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                x = phi * x + rng::normal(&mut r);
                x
            })
            .collect();
        let acf = autocorrelation(&xs, 5);
        assert!((acf[1] - 0.9).abs() < 0.02);
        // 0.9^k < 0.2 first at k = 16
        let lag = decorrelation_lag(&xs, 0.2, 100);
        assert!((14..=18).contains(&lag), "lag {lag}");
    }

    #[test]
    fn histogram_distance_edges() {
        let a = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(histogram_l1(&a, &a, 10), 0.0);
        let b = [10.1, 10.2, 10.3, 10.4];
        assert!((histogram_l1(&a, &b, 10) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles() {
        let xs: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile(&xs, 0.5), 50.0);
        assert_eq!(quantile(&xs, 0.01), 1.0);
    }
}
