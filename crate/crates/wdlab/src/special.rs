//! Special functions needed by the statistics and constants modules:
//! incomplete gamma, error function, normal CDF and quantile, the
//! asymptotic Kolmogorov distribution, and exact gamma values at
//! half-integer arguments.

/// Natural log of the gamma function (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gammp(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
pub fn gammq(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cf(a, x)
    }
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..500 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cf(a: f64, x: f64) -> f64 {
    // Modified Lentz continued fraction.
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x > 0.0 {
        gammp(0.5, x * x)
    } else {
        -gammp(0.5, x * x)
    }
}

/// Standard normal CDF, stable in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 - 0.5 * gammq_half(z)
    } else {
        0.5 * gammq_half(-z)
    }
}

fn gammq_half(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        gammq(0.5, 0.5 * z * z)
    }
}

/// Standard normal quantile (Acklam's rational approximation plus one
/// Halley refinement against `normal_cdf`).
pub fn inv_normal_cdf(p: f64) -> f64 {
    let x = inv_normal_cdf_fast(p);
    // Halley refinement.
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Acklam's rational approximation of the normal quantile without
/// refinement: |relative error| < 1.2e-9, a few times faster than the
/// refined version. The noise field generator is built on this.
pub fn inv_normal_cdf_fast(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile argument must be in (0,1)");
    const A: [f64; 6] = [
        -39.69683028665376,
        220.9460984245205,
        -275.9285104469687,
        138.3577518672690,
        -30.66479806614716,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -54.47609879822406,
        161.5858368580409,
        -155.6989798598866,
        66.80131188771972,
        -13.28068155288572,
    ];
    const C: [f64; 6] = [
        -0.007784894002430293,
        -0.3223964580411365,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        0.007784695709041462,
        0.3224671290700398,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let x = if p < P_LOW {
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
    };
    x
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Gamma(two_a / 2) exactly, for half-integer arguments.
pub fn gamma_half_integer(two_a: u32) -> f64 {
    assert!(two_a >= 1);
    if two_a % 2 == 0 {
        // Integer argument n: (n-1)!
        let n = two_a / 2;
        (1..n).map(|k| k as f64).product()
    } else {
        // n + 1/2 with n = (two_a - 1) / 2: (2n)! sqrt(pi) / (4^n n!)
        let n = (two_a - 1) / 2;
        let mut v = std::f64::consts::PI.sqrt();
        // Gamma(x + 1) = x Gamma(x) upward from Gamma(1/2).
        for k in 0..n {
            v *= k as f64 + 0.5;
        }
        v
    }
}

/// P(|X| <= radius) for X ~ N(0, variance * I_d): the chi-square CDF at
/// half-integer degrees of freedom.
pub fn gaussian_ball_prob(d: u32, variance: f64, radius: f64) -> f64 {
    assert!(variance > 0.0 && radius >= 0.0);
    gammp(d as f64 / 2.0, radius * radius / (2.0 * variance))
}

/// Chi-square quantile by the Wilson-Hilferty transform; adequate for the
/// normal-theory variance intervals at the sample sizes used here.
pub fn chi2_quantile(p: f64, dof: f64) -> f64 {
    let z = inv_normal_cdf(p);
    let t = 2.0 / (9.0 * dof);
    dof * (1.0 - t + z * t.sqrt()).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_half_values() {
        assert_relative_eq!(gamma_half_integer(2), 1.0);
        assert_relative_eq!(gamma_half_integer(4), 1.0);
        assert_relative_eq!(gamma_half_integer(6), 2.0);
        assert_relative_eq!(
            gamma_half_integer(3),
            std::f64::consts::PI.sqrt() / 2.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(gamma_half_integer(1), std::f64::consts::PI.sqrt());
    }

    #[test]
    fn ln_gamma_matches_exact() {
        for two_a in 1..20u32 {
            assert_relative_eq!(
                ln_gamma(two_a as f64 / 2.0),
                gamma_half_integer(two_a).ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn erf_reference_values() {
        assert_relative_eq!(erf(1.0), 0.8427007929497149, epsilon = 1e-12);
        assert_relative_eq!(erf(0.5), 0.5204998778130465, epsilon = 1e-12);
        assert_relative_eq!(erf(-2.0), -0.9953222650189527, epsilon = 1e-12);
    }

    #[test]
    fn normal_cdf_tails_and_center() {
        assert_relative_eq!(normal_cdf(0.0), 0.5);
        assert_relative_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-9);
        assert_relative_eq!(normal_cdf(-6.0), 9.865876450376946e-10, max_relative = 1e-8);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-8, 0.01, 0.3, 0.5, 0.8, 0.99, 1.0 - 1e-8] {
            assert_relative_eq!(normal_cdf(inv_normal_cdf(p)), p, max_relative = 1e-12);
        }
    }

    #[test]
    fn kolmogorov_known_points() {
        // Q(0.8275...) ~ 0.5; the 5% point is lambda = 1.3581.
        assert_relative_eq!(kolmogorov_sf(1.3581015), 0.05, epsilon = 1e-4);
        assert!(kolmogorov_sf(0.1) == 1.0);
        assert!(kolmogorov_sf(3.0) < 1e-7);
    }

    #[test]
    fn ball_prob_d3_closed_form() {
        // d = 3: P(|Z| <= t) = erf(t/sqrt2) - sqrt(2/pi) t exp(-t^2/2).
        for &t in &[0.3, 1.0, 2.5] {
            let exact = erf(t / 2f64.sqrt())
                - (2.0 / std::f64::consts::PI).sqrt() * t * (-0.5 * t * t).exp();
            assert_relative_eq!(gaussian_ball_prob(3, 1.0, t), exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn chi2_quantile_sane() {
        // Median of chi-square(k) is about k(1 - 2/(9k))^3.
        let q = chi2_quantile(0.5, 100.0);
        assert_relative_eq!(q, 99.33, epsilon = 0.05);
        assert!(chi2_quantile(0.975, 100.0) > chi2_quantile(0.025, 100.0));
    }
}
