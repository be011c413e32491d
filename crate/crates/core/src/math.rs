//! Scalar special-function helpers shared across modules.

use statrs::function::erf::{erf, erfc};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard normal CDF Φ(z), computed via erfc for tail accuracy.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal survival function 1 − Φ(z).
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Standard normal density φ(z).
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile Φ⁻¹(p) for p ∈ (0, 1).
///
/// Acklam's rational approximation, polished with two Halley steps
/// against the erfc-based CDF; round-trips through [`normal_cdf`] to
/// well below 1e-12 over the usable range.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let mut z = acklam(p);
    for _ in 0..2 {
        // Halley refinement; err is well conditioned via erf/erfc.
        let err = if z < 0.0 {
            normal_cdf(z) - p
        } else {
            (1.0 - p) - normal_sf(z)
        };
        let pdf = normal_pdf(z);
        if pdf == 0.0 {
            break;
        }
        let u = err / pdf;
        z -= u / (1.0 + 0.5 * z * u);
    }
    z
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Error of the normal CDF identity used by tests: Φ(0) must be 1/2.
pub fn erf_scaled(x: f64) -> f64 {
    erf(x)
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    assert!(n >= 2, "sample sd needs at least two values");
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

/// Adaptive Simpson quadrature of `f` on [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// One-sided exact binomial tail: P(Bin(n, 1/2) ≥ k).
pub fn binomial_upper_tail_half(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // Exact summation in log space; n stays small (≤ a few hundred).
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut total = 0.0;
    for j in k..=n {
        total += (ln_choose(n, j) + ln_half_n).exp();
    }
    total.min(1.0)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::gamma::ln_gamma(n as f64 + 1.0)
        - statrs::function::gamma::ln_gamma(k as f64 + 1.0)
        - statrs::function::gamma::ln_gamma((n - k) as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_cdf_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 5e-12);
        assert!((normal_sf(3.0) - 0.0013498980316300945).abs() < 1e-12);
    }

    #[test]
    fn quantile_round_trips_through_cdf() {
        for &p in &[1e-9, 1e-6, 0.01, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-6, 1.0 - 1e-9] {
            let z = normal_quantile(p);
            assert!(
                (normal_cdf(z) - p).abs() <= 1e-12 * p.max(1e-3),
                "p={p} z={z} cdf={}",
                normal_cdf(z)
            );
        }
    }

    #[test]
    fn simpson_integrates_polynomial_exactly() {
        let v = adaptive_simpson(&|x: f64| x * x * x, 0.0, 2.0, 1e-12);
        assert!((v - 4.0).abs() < 1e-10);
    }

    #[test]
    fn binomial_tail_matches_small_case() {
        // P(Bin(4, 1/2) >= 3) = (4 + 1) / 16
        assert!((binomial_upper_tail_half(4, 3) - 5.0 / 16.0).abs() < 1e-12);
    }
}
