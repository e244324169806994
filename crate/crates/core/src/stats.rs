//! Scalar statistics helpers: normal CDF, sample moments, quantiles.

/// Standard normal CDF, double-precision rational approximation (West 2004).
pub fn norm_cdf(x: f64) -> f64 {
    let xabs = x.abs();
    let cum = if xabs > 37.0 {
        0.0
    } else {
        let e = (-xabs * xabs / 2.0).exp();
        if xabs < 7.071067811865475 {
            let mut b = 3.52624965998911e-2 * xabs + 0.700383064443688;
            b = b * xabs + 6.37396220353165;
            b = b * xabs + 33.912866078383;
            b = b * xabs + 112.079291497871;
            b = b * xabs + 221.213596169931;
            b = b * xabs + 220.206867912376;
            let mut c = 8.83883476483184e-2 * xabs + 1.75566716318264;
            c = c * xabs + 16.064177579207;
            c = c * xabs + 86.7807322029461;
            c = c * xabs + 296.564248779674;
            c = c * xabs + 637.333633378831;
            c = c * xabs + 793.826512519948;
            c = c * xabs + 440.413735824752;
            e * b / c
        } else {
            let mut d = xabs + 0.65;
            d = xabs + 4.0 / d;
            d = xabs + 3.0 / d;
            d = xabs + 2.0 / d;
            d = xabs + 1.0 / d;
            e / (d * 2.506628274631)
        }
    };
    if x > 0.0 {
        1.0 - cum
    } else {
        cum
    }
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Unbiased (n-1 denominator) standard deviation.
pub fn std_dev(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(samples);
    (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Empirical quantile by linear interpolation of order statistics (type 7).
/// `sorted` must be ascending.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n >= 1);
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
