//! Statistical machinery: mergeable moment accumulators (the parallel
//! reduction contract for the whole crate), normality diagnostics against
//! a target Gaussian, power-law slope fits, and the variance-profile
//! comparison for the fluctuation process.

use crate::error::{Error, Result};
use crate::special::{chi2_quantile, kolmogorov_sf, normal_cdf};
use serde::{Deserialize, Serialize};

/// A Monte Carlo point estimate with its standard error and sampling
/// diagnostics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    pub n: u64,
    /// Effective sample size when importance sampling was used.
    pub ess: Option<f64>,
    /// Set when the requested disorder strength exceeded the
    /// weak-disorder bound; the estimate is still returned.
    pub beta_warning: bool,
}

impl EstimateWithError {
    pub fn exact(value: f64) -> Self {
        EstimateWithError {
            value,
            std_error: 0.0,
            n: 0,
            ess: None,
            beta_warning: false,
        }
    }

    pub fn from_accumulator(acc: &McAccumulator) -> Self {
        EstimateWithError {
            value: acc.mean(),
            std_error: acc.std_error(),
            n: acc.count,
            ess: None,
            beta_warning: false,
        }
    }

    pub fn shifted(mut self, offset: f64) -> Self {
        self.value += offset;
        self
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.value *= factor;
        self.std_error *= factor.abs();
        self
    }

    /// Root-sum-square of the two standard errors.
    pub fn combined_se(&self, other: &EstimateWithError) -> f64 {
        (self.std_error * self.std_error + other.std_error * other.std_error).sqrt()
    }

    /// Whether the two estimates agree within `k` combined standard
    /// errors.
    pub fn agrees_with(&self, other: &EstimateWithError, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.combined_se(other)
    }
}

/// Raw power sums `(n, sum x, sum x^2, sum x^3, sum x^4)`. Merging is an
/// exact field-wise sum, so moments of merged state equal moments of the
/// concatenated samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct McAccumulator {
    pub count: u64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

impl McAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.s1 += x;
        let x2 = x * x;
        self.s2 += x2;
        self.s3 += x2 * x;
        self.s4 += x2 * x2;
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = Self::new();
        for &x in samples {
            acc.push(x);
        }
        acc
    }

    pub fn merge(mut self, other: McAccumulator) -> McAccumulator {
        self.count += other.count;
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.s3 += other.s3;
        self.s4 += other.s4;
        self
    }

    pub fn mean(&self) -> f64 {
        self.s1 / self.count as f64
    }

    /// Population variance (divides by n).
    pub fn variance(&self) -> f64 {
        let n = self.count as f64;
        let m = self.mean();
        (self.s2 / n - m * m).max(0.0)
    }

    /// Unbiased sample variance (divides by n - 1).
    pub fn sample_variance(&self) -> f64 {
        let n = self.count as f64;
        (self.variance() * n / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        (self.sample_variance() / self.count as f64).sqrt()
    }

    pub fn skewness(&self) -> f64 {
        let n = self.count as f64;
        let m = self.mean();
        let var = self.variance();
        if var <= 0.0 {
            return 0.0;
        }
        let m3 = self.s3 / n - 3.0 * m * self.s2 / n + 2.0 * m * m * m;
        m3 / var.powf(1.5)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        let n = self.count as f64;
        let m = self.mean();
        let var = self.variance();
        if var <= 0.0 {
            return 0.0;
        }
        let m4 = self.s4 / n - 4.0 * m * self.s3 / n + 6.0 * m * m * self.s2 / n
            - 3.0 * m * m * m * m;
        m4 / (var * var) - 3.0
    }
}

/// Exact field-wise merge of two accumulators.
pub fn accumulate_merge(a: McAccumulator, b: McAccumulator) -> McAccumulator {
    a.merge(b)
}

/// Default shard width for [`parallel_reduce`].
pub const DEFAULT_SHARD: u64 = 256;

/// Deterministic parallel map-reduce over sample indices `0..n`.
///
/// Work is split into fixed-width shards processed independently; shard
/// results are merged in shard order. Because the shard layout does not
/// depend on the thread count, the reduction is bit-identical whether it
/// runs on one core or many.
pub fn parallel_reduce<A: Send>(
    n: u64,
    shard: u64,
    make: impl Fn() -> A + Sync,
    body: impl Fn(&mut A, u64) + Sync,
    merge: impl Fn(A, A) -> A,
) -> Option<A> {
    use rayon::prelude::*;
    if n == 0 {
        return None;
    }
    let shard = shard.max(1);
    let shards = n.div_ceil(shard);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut acc = make();
            let hi = ((s + 1) * shard).min(n);
            for i in s * shard..hi {
                body(&mut acc, i);
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(merge)
}

/// Thresholds for declaring a sample compatible with the target normal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormalityThresholds {
    pub max_abs_skewness: f64,
    pub max_abs_excess_kurtosis: f64,
    pub min_ks_p: f64,
}

impl Default for NormalityThresholds {
    fn default() -> Self {
        NormalityThresholds {
            max_abs_skewness: 0.2,
            max_abs_excess_kurtosis: 0.5,
            min_ks_p: 0.01,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalityReport {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
    pub ks_p: f64,
    pub pass: bool,
}

/// One-sample Kolmogorov-Smirnov distance and p-value of `samples`
/// against the centered normal with variance `sigma2_target`, together
/// with the moment diagnostics. The p-value uses the asymptotic
/// Kolmogorov distribution with Stephens' small-sample argument
/// correction; at least 100 samples are required.
pub fn normality_report(
    samples: &[f64],
    sigma2_target: f64,
    thresholds: &NormalityThresholds,
) -> Result<NormalityReport> {
    if samples.len() < 100 {
        return Err(Error::SampleSize {
            needed: 100,
            got: samples.len(),
        });
    }
    if sigma2_target <= 0.0 {
        return Err(Error::Domain("target variance must be positive".into()));
    }
    let acc = McAccumulator::from_samples(samples);
    let sigma = sigma2_target.sqrt();
    let d = ks_distance(samples, |x| normal_cdf(x / sigma));
    let n = samples.len() as f64;
    let lambda = d * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
    let p = kolmogorov_sf(lambda);
    let variance = acc.variance();
    let pass = variance > 0.0
        && acc.skewness().abs() < thresholds.max_abs_skewness
        && acc.excess_kurtosis().abs() < thresholds.max_abs_excess_kurtosis
        && p > thresholds.min_ks_p;
    Ok(NormalityReport {
        n: samples.len(),
        mean: acc.mean(),
        variance,
        skewness: acc.skewness(),
        excess_kurtosis: acc.excess_kurtosis(),
        ks_distance: d,
        ks_p: p,
        pass,
    })
}

/// Supremum distance between the empirical CDF and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        sup = sup.max((f - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - f).abs());
    }
    sup
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
pub fn two_sample_ks_p(a: &[f64], b: &[f64]) -> f64 {
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let mut i = 0;
    let mut j = 0;
    let mut sup: f64 = 0.0;
    while i < n && j < m {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        sup = sup.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    kolmogorov_sf(sup * (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()))
}

/// Least-squares fit of `log y = intercept + slope * log T`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub rms_residual: f64,
}

pub fn fit_power_slope(pairs: &[(f64, f64)]) -> Result<PowerFit> {
    if pairs.len() < 3 {
        return Err(Error::SampleSize {
            needed: 3,
            got: pairs.len(),
        });
    }
    if pairs.iter().any(|(t, y)| *t <= 0.0 || *y <= 0.0) {
        return Err(Error::Domain(
            "power-law fit needs strictly positive abscissae and values".into(),
        ));
    }
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (t, y) in pairs {
        let x = t.ln();
        let v = y.ln();
        sx += x;
        sy += v;
        sxx += x * x;
        sxy += x * v;
    }
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mut ss = 0.0;
    for (t, y) in pairs {
        let r = y.ln() - intercept - slope * t.ln();
        ss += r * r;
    }
    Ok(PowerFit {
        slope,
        intercept,
        rms_residual: (ss / n).sqrt(),
    })
}

/// Per-tau comparison of the empirical variance of the fluctuation
/// samples against the predicted profile `g(tau)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileRow {
    pub tau: f64,
    pub n: usize,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub g_target: f64,
    pub within_ci: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IncrementCheck {
    pub tau_low: f64,
    pub tau_high: f64,
    pub covariance: f64,
    pub std_error: f64,
    pub within_3se: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub rows: Vec<ProfileRow>,
    pub increments: Vec<IncrementCheck>,
}

/// Predicted fluctuation variance `g(tau) = sigma^2 (1 - tau^{-(d-2)/2})`.
pub fn g_profile(tau: f64, sigma2: f64, d: u32) -> f64 {
    sigma2 * (1.0 - tau.powf(-0.5 * (d as f64 - 2.0)))
}

/// Compare per-tau empirical variances with `g` and test independence of
/// increments: for consecutive taus the covariance of
/// `(G_{tau2} - G_{tau1})` with `G_{tau1}` should vanish.
///
/// `samples_per_env[e][i]` is the fluctuation draw of environment `e` at
/// `taus[i]`, so increments are coupled within an environment.
pub fn variance_profile_check(
    taus: &[f64],
    samples_per_env: &[Vec<f64>],
    sigma2: f64,
    d: u32,
) -> Result<VarianceProfile> {
    if taus.len() < 2 {
        return Err(Error::SampleSize {
            needed: 2,
            got: taus.len(),
        });
    }
    if samples_per_env.iter().any(|row| row.len() != taus.len()) {
        return Err(Error::Shape(
            "every environment row must hold one sample per tau".into(),
        ));
    }
    let n = samples_per_env.len();
    if n < 3 {
        return Err(Error::SampleSize { needed: 3, got: n });
    }

    let mut rows = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let col: Vec<f64> = samples_per_env.iter().map(|row| row[i]).collect();
        let acc = McAccumulator::from_samples(&col);
        let var = acc.sample_variance();
        let dof = (n - 1) as f64;
        // Normal-theory chi-square interval; approximate for finite-T,
        // non-Gaussian samples.
        let ci_low = dof * var / chi2_quantile(0.975, dof);
        let ci_high = dof * var / chi2_quantile(0.025, dof);
        let g = g_profile(tau, sigma2, d);
        rows.push(ProfileRow {
            tau,
            n,
            variance: var,
            ci_low,
            ci_high,
            g_target: g,
            within_ci: g >= ci_low && g <= ci_high,
        });
    }

    let mut increments = Vec::new();
    for i in 0..taus.len() - 1 {
        let x: Vec<f64> = samples_per_env.iter().map(|r| r[i]).collect();
        let incr: Vec<f64> = samples_per_env.iter().map(|r| r[i + 1] - r[i]).collect();
        let (cov, se) = covariance_with_se(&x, &incr);
        increments.push(IncrementCheck {
            tau_low: taus[i],
            tau_high: taus[i + 1],
            covariance: cov,
            std_error: se,
            within_3se: cov.abs() <= 3.0 * se,
        });
    }

    Ok(VarianceProfile { rows, increments })
}

/// Sample covariance and the moment-based standard error of the
/// covariance estimator.
pub fn covariance_with_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
    }
    cov /= n - 1.0;
    // Var(cov_hat) ~ (m22 - cov^2) / n with m22 the joint central moment.
    let mut m22 = 0.0;
    for (a, b) in x.iter().zip(y) {
        m22 += ((a - mx) * (b - my) - cov).powi(2);
    }
    m22 /= n;
    (cov, (m22 / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn merge_identity_and_commutativity() {
        let a = McAccumulator::from_samples(&[1.0, 2.0]);
        let b = McAccumulator::from_samples(&[3.0]);
        assert_eq!(accumulate_merge(a, McAccumulator::new()), a);
        assert_eq!(accumulate_merge(a, b), accumulate_merge(b, a));
        // Merged moments equal moments of the concatenation, exactly.
        let merged = accumulate_merge(a, b);
        let concat = McAccumulator::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(merged, concat);
        assert_eq!(merged.mean(), 2.0);
    }

    #[test]
    fn moments_of_known_sample() {
        let acc = McAccumulator::from_samples(&[2.0, 8.0, 0.0, 4.0, 1.0, 9.0, 9.0, 0.0]);
        assert_relative_eq!(acc.mean(), 4.125);
        assert_relative_eq!(acc.skewness(), 0.2650554122698573, max_relative = 1e-12);
    }

    #[test]
    fn normality_accepts_gaussian_and_rejects_exponential() {
        let mut rng = StreamRng::new(7, 0);
        let gauss: Vec<f64> = (0..10_000).map(|_| rng.next_normal()).collect();
        let strict = NormalityThresholds {
            max_abs_skewness: 0.1,
            max_abs_excess_kurtosis: 0.2,
            min_ks_p: 0.01,
        };
        let rep = normality_report(&gauss, 1.0, &strict).unwrap();
        assert!(rep.pass, "gaussian sample failed: {rep:?}");

        // Centered exponential fails on skewness/kurtosis and KS.
        let expo: Vec<f64> = (0..10_000).map(|_| -rng.next_unit().ln() - 1.0).collect();
        let rep = normality_report(&expo, 1.0, &strict).unwrap();
        assert!(!rep.pass);
        assert!(rep.skewness > 1.0);

        // Constant samples have zero variance and automatically fail.
        let consts = vec![0.3; 500];
        let rep = normality_report(&consts, 1.0, &NormalityThresholds::default()).unwrap();
        assert!(!rep.pass && rep.variance < 1e-15);

        assert!(normality_report(&[0.0; 50], 1.0, &NormalityThresholds::default()).is_err());
    }

    #[test]
    fn ks_critical_values_match_published_tables() {
        // Invert the p-value at alpha by bisection on D and compare with
        // published one-sample critical values.
        let crit = |n: usize, alpha: f64| -> f64 {
            let (mut lo, mut hi) = (1e-4, 0.9);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let nf = n as f64;
                let lambda = mid * (nf.sqrt() + 0.12 + 0.11 / nf.sqrt());
                if kolmogorov_sf(lambda) > alpha {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        assert_abs_diff_eq!(crit(100, 0.05), 0.13403, epsilon = 1e-3);
        assert_abs_diff_eq!(crit(100, 0.01), 0.16081, epsilon = 1e-3);
        assert_abs_diff_eq!(crit(1000, 0.05), 0.04294, epsilon = 1e-3);
        assert_abs_diff_eq!(crit(1000, 0.01), 0.05148, epsilon = 1e-3);
    }

    #[test]
    fn slope_fit_exact_laws() {
        let pairs: Vec<(f64, f64)> = [4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|&t: &f64| (t, 2.7 * t.powf(-0.5)))
            .collect();
        let fit = fit_power_slope(&pairs).unwrap();
        assert_abs_diff_eq!(fit.slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.rms_residual, 0.0, epsilon = 1e-12);

        let flat: Vec<(f64, f64)> = [1.0, 2.0, 5.0].iter().map(|&t| (t, 3.3)).collect();
        assert_abs_diff_eq!(fit_power_slope(&flat).unwrap().slope, 0.0, epsilon = 1e-12);

        assert!(fit_power_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_power_slope(&[(1.0, 1.0), (2.0, -2.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn variance_profile_degenerate_and_ratio() {
        // tau = 1 column is identically zero; g(1) = 0 sits in the
        // degenerate interval.
        let mut rng = StreamRng::new(9, 1);
        let sigma2 = 0.04;
        let taus = [1.0, 4.0, 16.0];
        let mut rows = Vec::new();
        for _ in 0..4000 {
            // Independent-increment synthetic process with variance g.
            let g4 = g_profile(4.0, sigma2, 3);
            let g16 = g_profile(16.0, sigma2, 3);
            let z1 = rng.next_normal() * g4.sqrt();
            let z2 = rng.next_normal() * (g16 - g4).sqrt();
            rows.push(vec![0.0, z1, z1 + z2]);
        }
        let profile = variance_profile_check(&taus, &rows, sigma2, 3).unwrap();
        assert_eq!(profile.rows[0].variance, 0.0);
        let ratio = profile.rows[1].variance / profile.rows[2].variance;
        assert!(
            (ratio - 2.0 / 3.0).abs() < 0.2 * (2.0 / 3.0),
            "variance ratio {ratio}"
        );
        assert!(profile.rows[1].within_ci && profile.rows[2].within_ci);
        for inc in &profile.increments {
            assert!(inc.within_3se, "increment check failed: {inc:?}");
        }
    }

    #[test]
    fn covariance_se_detects_dependence() {
        let mut rng = StreamRng::new(11, 0);
        let x: Vec<f64> = (0..5000).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + 1.0).collect();
        let (cov, se) = covariance_with_se(&x, &y);
        assert!((cov - 0.5).abs() < 4.0 * se);
        assert!(cov / se > 10.0);
    }
}
