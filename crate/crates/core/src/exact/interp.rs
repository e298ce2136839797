//! Monotone piecewise-cubic (Fritsch-Carlson) interpolation on uniform nodes.

fn endpoint_slope(d0: f64, d1: f64) -> f64 {
    let s = 0.5 * (3.0 * d0 - d1);
    if s.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

fn node_slopes(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let secant: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut slopes = vec![0.0; n];
    if n == 2 {
        slopes.fill(secant[0]);
        return slopes;
    }
    slopes[0] = endpoint_slope(secant[0], secant[1]);
    slopes[n - 1] = endpoint_slope(secant[n - 2], secant[n - 3]);
    for k in 1..n - 1 {
        let (a, b) = (secant[k - 1], secant[k]);
        slopes[k] = if a * b <= 0.0 { 0.0 } else { 2.0 / (1.0 / a + 1.0 / b) };
    }
    slopes
}

/// Resamples `values` (on `n_src` uniform nodes spanning `[src_lo, src_hi]`)
/// onto `n_dst` uniform nodes spanning `[dst_lo, dst_hi]`. Nodes outside the
/// source interval get zero; monotonicity keeps nonnegative data nonnegative.
pub fn pchip_resample(src_lo: f64, src_hi: f64, values: &[f64], dst_lo: f64, dst_hi: f64, n_dst: usize) -> Vec<f64> {
    let n = values.len();
    assert!(n >= 2 && n_dst >= 2, "need at least two nodes");
    let h = (src_hi - src_lo) / (n - 1) as f64;
    let slopes = node_slopes(values, h);
    let dst_h = (dst_hi - dst_lo) / (n_dst - 1) as f64;
    (0..n_dst)
        .map(|i| {
            let x = dst_lo + i as f64 * dst_h;
            let t = (x - src_lo) / h;
            if t < 0.0 || t > (n - 1) as f64 {
                return 0.0;
            }
            let k = (t.floor() as usize).min(n - 2);
            let s = t - k as f64;
            let (s2, s3) = (s * s, s * s * s);
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            let v = h00 * values[k] + h10 * h * slopes[k] + h01 * values[k + 1] + h11 * h * slopes[k + 1];
            v.max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_nodes_and_cubics_locally() {
        let vals: Vec<f64> = (0..11).map(|i| (i as f64).powi(2)).collect();
        let out = pchip_resample(0.0, 10.0, &vals, 0.0, 10.0, 11);
        for (a, b) in out.iter().zip(&vals) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_monotonicity_and_sign() {
        let vals = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let out = pchip_resample(0.0, 5.0, &vals, 0.0, 5.0, 501);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for w in out[..200].windows(2) {
            assert!(w[1] >= w[0] - 1e-15);
        }
    }

    #[test]
    fn zero_outside_source() {
        let out = pchip_resample(0.0, 1.0, &[1.0, 1.0, 1.0], -1.0, 2.0, 4);
        assert_eq!(out, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn smooth_function_is_accurate() {
        let n = 401;
        let f = |x: f64| (-0.5 * x * x).exp();
        let vals: Vec<f64> = (0..n).map(|i| f(-8.0 + 16.0 * i as f64 / (n - 1) as f64)).collect();
        let out = pchip_resample(-8.0, 8.0, &vals, -3.0, 3.0, 777);
        for (i, v) in out.iter().enumerate() {
            let x = -3.0 + 6.0 * i as f64 / 776.0;
            // harmonic-mean slopes are O(h) accurate at the peak
            assert!((v - f(x)).abs() < 1e-4, "{x}: {}", v - f(x));
        }
    }
}
