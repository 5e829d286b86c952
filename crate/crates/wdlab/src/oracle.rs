//! Annealed (noise-averaged) quantities as pure Brownian expectations.
//!
//! Averaging the quenched weight over the noise turns every moment of the
//! partition function into a Brownian functional: for n independent
//! paths,
//! `E[prod_i Phi_T(W^i)] = exp{beta^2 int_0^T sum_{i<j} V(W^i_s - W^j_s) ds}`.
//! The estimators here sample that identity directly. Endpoint-pinned
//! integrands (the compensated-bracket terms) additionally use bridge
//! importance sampling: the terminal point is drawn inside the kernel
//! support with an explicit density weight, and the path in between is a
//! Brownian bridge, which removes the `T^{-d/2}` hit-rate of plain
//! sampling.

use crate::error::{Error, Result};
use crate::kernel::{sphere_surface, CovarianceKernel};
use crate::paths::{heat_kernel, BridgePathStream, FreePathStream};
use crate::quad::gauss_legendre_on;
use crate::rng::{hash2, hash3, StreamRng};
use crate::special::gamma_half_integer;
use crate::stats::{parallel_reduce, EstimateWithError, McAccumulator, DEFAULT_SHARD};
use serde::{Deserialize, Serialize};

/// Volume of the unit ball in `R^d`.
pub fn ball_volume(d: u32) -> f64 {
    std::f64::consts::PI.powf(0.5 * d as f64) / gamma_half_integer(d + 2)
}

/// Request for an annealed moment `E[M_T^n]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentRequest {
    pub beta: f64,
    /// Number of independent paths per sample; 1, 2 or 4.
    pub n_paths: u32,
    pub horizon: f64,
    pub n_samples: u64,
    pub dt: f64,
    pub seed: u64,
}

fn check_beta(beta: f64, beta0: f64) -> bool {
    beta >= beta0
}

/// Monte Carlo estimate of `E[M_T^n]` via the Gaussian moment identity.
/// `n = 1` is exactly one (mean-one martingale), returned without
/// sampling. `beta0` is the weak-disorder bound used only to set the
/// warning flag.
pub fn annealed_moment(
    kernel: &CovarianceKernel,
    req: &MomentRequest,
    beta0: f64,
) -> Result<EstimateWithError> {
    if ![1, 2, 4].contains(&req.n_paths) {
        return Err(Error::Domain(format!(
            "annealed moments support n in {{1, 2, 4}}, got {}",
            req.n_paths
        )));
    }
    if req.n_samples < 100 {
        return Err(Error::SampleSize {
            needed: 100,
            got: req.n_samples as usize,
        });
    }
    let warn = check_beta(req.beta, beta0);
    if req.n_paths == 1 {
        let mut est = EstimateWithError::exact(1.0);
        est.beta_warning = warn;
        return Ok(est);
    }

    let d = kernel.dimension() as usize;
    let n_paths = req.n_paths as usize;
    let steps = (req.horizon / req.dt).round() as usize;
    let beta_sq = req.beta * req.beta;
    let acc = parallel_reduce(
        req.n_samples,
        DEFAULT_SHARD,
        McAccumulator::new,
        |acc, i| {
            let mut streams: Vec<FreePathStream> = (0..n_paths)
                .map(|p| {
                    FreePathStream::new(
                        hash2(req.seed, 0x6d6f6d),
                        i * n_paths as u64 + p as u64,
                        &vec![0.0; d],
                        req.dt,
                    )
                })
                .collect();
            let mut prev: Vec<Vec<f64>> =
                streams.iter().map(|s| s.position().to_vec()).collect();
            let mut interaction = 0.0;
            for _ in 0..steps {
                for s in streams.iter_mut() {
                    s.advance();
                }
                for a in 0..n_paths {
                    for b in a + 1..n_paths {
                        let mut sq = 0.0;
                        for j in 0..d {
                            let m = 0.5 * (prev[a][j] + streams[a].position()[j])
                                - 0.5 * (prev[b][j] + streams[b].position()[j]);
                            sq += m * m;
                        }
                        interaction += kernel.value(sq.sqrt());
                    }
                }
                for (p, s) in prev.iter_mut().zip(&streams) {
                    p.copy_from_slice(s.position());
                }
            }
            acc.push((beta_sq * interaction * req.dt).exp());
        },
        McAccumulator::merge,
    )
    .unwrap_or_default();
    let mut est = EstimateWithError::from_accumulator(&acc);
    est.beta_warning = warn;
    Ok(est)
}

/// `Var(M_T) = E_0[exp(beta^2 int_0^T V(sqrt2 W_s) ds)] - 1`, by single
/// paths from the origin.
pub fn variance_mt(
    kernel: &CovarianceKernel,
    beta: f64,
    horizon: f64,
    n_samples: u64,
    dt: f64,
    seed: u64,
) -> EstimateWithError {
    if beta == 0.0 {
        return EstimateWithError::exact(0.0);
    }
    let d = kernel.dimension() as usize;
    let steps = (horizon / dt).round() as usize;
    let beta_sq = beta * beta;
    let sqrt2 = 2f64.sqrt();
    let acc = parallel_reduce(
        n_samples,
        DEFAULT_SHARD,
        McAccumulator::new,
        |acc, i| {
            let mut s = FreePathStream::new(hash2(seed, 0x766172), i, &vec![0.0; d], dt);
            let mut prev = s.position().to_vec();
            let mut integral = 0.0;
            for _ in 0..steps {
                s.advance();
                let cur = s.position();
                let mut sq = 0.0;
                for j in 0..d {
                    let m = 0.5 * (prev[j] + cur[j]);
                    sq += m * m;
                }
                integral += kernel.value(sqrt2 * sq.sqrt());
                prev.copy_from_slice(cur);
            }
            acc.push((beta_sq * integral * dt).exp() - 1.0);
        },
        McAccumulator::merge,
    )
    .unwrap_or_default();
    EstimateWithError::from_accumulator(&acc)
}

/// Covariance estimate at one separation, with the rescaled product
/// `|x|^{d-2} Cov` for separations outside the kernel support.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub x_norm: f64,
    pub estimate: EstimateWithError,
    /// `|x|^{d-2} * estimate` when `|x| >= 1`.
    pub rescaled: Option<f64>,
    pub rescaled_std_error: Option<f64>,
}

/// `Cov(M_inf(0), M_inf(x)) = E_{x/sqrt2}[exp(beta^2 int_0^inf
/// V(sqrt2 W)) - 1]` for a batch of separations.
///
/// Separations inside the kernel support start the path at `x/sqrt2`
/// directly and share one driving ensemble (common random numbers give a
/// smooth radial profile). Separations with `|x| >= 1` are reduced by
/// the strong Markov property at the hitting time of the support ball:
/// the covariance factorizes exactly into the hitting probability
/// `|x|^{2-d}` times a boundary-start expectation that does not depend
/// on `x`. The direct truncated estimator would lose the late hits, an
/// `O((|x|-1)/sqrt(t_cut))` relative deficit that grows with the
/// separation, while the reduction leaves only an `x`-independent
/// truncation error. Each outside separation gets an independent
/// boundary ensemble, so the rescaled products are independent
/// measurements of the same constant.
pub fn covariance_minf_batch(
    kernel: &CovarianceKernel,
    beta: f64,
    xs: &[Vec<f64>],
    n_samples: u64,
    t_cut: f64,
    dt: f64,
    seed: u64,
) -> Vec<CovarianceEstimate> {
    let d = kernel.dimension() as usize;
    let sqrt2 = 2f64.sqrt();
    let dm2 = kernel.dimension() as i32 - 2;
    let norms: Vec<f64> = xs
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    // Inside-support starts, sharing one driving ensemble.
    let inner_idx: Vec<usize> = (0..xs.len()).filter(|&i| norms[i] < 1.0).collect();
    let inner_starts: Vec<Vec<f64>> = inner_idx
        .iter()
        .map(|&i| xs[i].iter().map(|v| v / sqrt2).collect())
        .collect();
    let inner_ests = if inner_idx.is_empty() || beta == 0.0 {
        vec![EstimateWithError::exact(0.0); inner_idx.len()]
    } else {
        exp_occupation_batch(
            kernel,
            beta,
            &inner_starts,
            n_samples,
            t_cut,
            dt,
            hash2(seed, 0x636f76),
        )
    };

    let mut out: Vec<Option<CovarianceEstimate>> = vec![None; xs.len()];
    for (slot, est) in inner_idx.iter().zip(inner_ests) {
        out[*slot] = Some(CovarianceEstimate {
            x_norm: norms[*slot],
            estimate: est,
            rescaled: None,
            rescaled_std_error: None,
        });
    }

    // Outside separations: exact hitting reduction, one independent
    // boundary ensemble per separation.
    let mut boundary = vec![0.0; d];
    boundary[0] = std::f64::consts::FRAC_1_SQRT_2;
    for (i, &norm) in norms.iter().enumerate() {
        if norm < 1.0 {
            continue;
        }
        let est = if beta == 0.0 {
            EstimateWithError::exact(0.0)
        } else {
            exp_occupation_batch(
                kernel,
                beta,
                &[boundary.clone()],
                n_samples,
                t_cut,
                dt,
                hash3(seed, 0x626e64, i as u64),
            )
            .pop()
            .unwrap()
        };
        let p_hit = norm.powi(-dm2);
        out[i] = Some(CovarianceEstimate {
            x_norm: norm,
            estimate: est.scaled(p_hit),
            rescaled: Some(est.value),
            rescaled_std_error: Some(est.std_error),
        });
    }
    out.into_iter().map(Option::unwrap).collect()
}

/// Shared-ensemble estimates of `E_start[exp(beta^2 int_0^{t_cut}
/// V(sqrt2 W)) - 1]` for several start points: one set of origin-driven
/// paths is translated to each start. Only midpoints within reach of
/// some start can contribute, so paths are recorded sparsely.
fn exp_occupation_batch(
    kernel: &CovarianceKernel,
    beta: f64,
    starts: &[Vec<f64>],
    n_samples: u64,
    t_cut: f64,
    dt: f64,
    seed: u64,
) -> Vec<EstimateWithError> {
    let d = kernel.dimension() as usize;
    let sqrt2 = 2f64.sqrt();
    let radius = starts
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max)
        + std::f64::consts::FRAC_1_SQRT_2
        + 1e-9;
    let radius_sq = radius * radius;
    let steps = (t_cut / dt).round() as usize;
    let beta_sq = beta * beta;

    let accs = parallel_reduce(
        n_samples,
        DEFAULT_SHARD,
        || vec![McAccumulator::new(); starts.len()],
        |accs, i| {
            let mut stream = FreePathStream::new(seed, i, &vec![0.0; d], dt);
            let mut prev = stream.position().to_vec();
            let mut mids: Vec<f64> = Vec::with_capacity(32 * d);
            for _ in 0..steps {
                stream.advance();
                let cur = stream.position();
                let mut sq = 0.0;
                for j in 0..d {
                    let m = 0.5 * (prev[j] + cur[j]);
                    sq += m * m;
                }
                if sq < radius_sq {
                    for j in 0..d {
                        mids.push(0.5 * (prev[j] + cur[j]));
                    }
                }
                prev.copy_from_slice(cur);
            }
            for (acc, start) in accs.iter_mut().zip(starts) {
                let mut integral = 0.0;
                for mid in mids.chunks_exact(d) {
                    let mut sq = 0.0;
                    for j in 0..d {
                        let v = start[j] + mid[j];
                        sq += v * v;
                    }
                    integral += kernel.value(sqrt2 * sq.sqrt());
                }
                acc.push((beta_sq * integral * dt).exp() - 1.0);
            }
        },
        |a, b| a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect(),
    )
    .unwrap_or_else(|| vec![McAccumulator::new(); starts.len()]);
    accs.iter().map(EstimateWithError::from_accumulator).collect()
}

/// Single-separation convenience wrapper over the batch estimator.
pub fn covariance_minf(
    kernel: &CovarianceKernel,
    beta: f64,
    x: &[f64],
    n_samples: u64,
    t_cut: f64,
    dt: f64,
    seed: u64,
) -> CovarianceEstimate {
    covariance_minf_batch(kernel, beta, &[x.to_vec()], n_samples, t_cut, dt, seed)
        .pop()
        .unwrap()
}

/// Radial model of `z -> Cov(M_inf(0), M_inf(z))`: a Monte Carlo table on
/// `[0, 1)` joined to the exact scaling form `c1_hat |z|^{-(d-2)}`
/// outside the kernel support. `c1_hat` is the inverse-variance weighted
/// mean of the products `|x|^{d-2} Cov(|x|)` over the fit separations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceProfile {
    d: u32,
    grid_radii: Vec<f64>,
    grid_values: Vec<f64>,
    pub c1_hat: f64,
    pub c1_hat_std_error: f64,
    pub fit_points: Vec<CovarianceEstimate>,
}

impl CovarianceProfile {
    pub fn build(
        kernel: &CovarianceKernel,
        beta: f64,
        n_samples: u64,
        t_cut: f64,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        const INNER_RADII: usize = 32;
        const FIT_RADII: [f64; 4] = [1.0, 1.5, 2.0, 3.0];
        let d = kernel.dimension();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut e1 = vec![0.0; d as usize];
        e1[0] = 1.0;
        for k in 0..INNER_RADII {
            let r = k as f64 / INNER_RADII as f64;
            xs.push(e1.iter().map(|v| v * r).collect());
        }
        for r in FIT_RADII {
            xs.push(e1.iter().map(|v| v * r).collect());
        }
        let ests = covariance_minf_batch(kernel, beta, &xs, n_samples, t_cut, dt, seed);
        let (inner, fit) = ests.split_at(INNER_RADII);

        let mut c1_hat = 0.0;
        let mut weight_sum = 0.0;
        for est in fit {
            let (v, se) = (est.rescaled.unwrap(), est.rescaled_std_error.unwrap());
            if beta == 0.0 {
                // Degenerate profile; covariance is identically zero.
                continue;
            }
            if se <= 0.0 {
                return Err(Error::Consistency(
                    "covariance fit point has zero standard error".into(),
                ));
            }
            let w = 1.0 / (se * se);
            c1_hat += w * v;
            weight_sum += w;
        }
        let (c1_hat, c1_se) = if beta == 0.0 {
            (0.0, 0.0)
        } else {
            (c1_hat / weight_sum, (1.0 / weight_sum).sqrt())
        };

        let mut grid_radii: Vec<f64> = (0..INNER_RADII)
            .map(|k| k as f64 / INNER_RADII as f64)
            .collect();
        let mut grid_values: Vec<f64> =
            inner.iter().map(|e| e.estimate.value).collect();
        // Close the table with the exact scaling value at the support edge.
        grid_radii.push(1.0);
        grid_values.push(c1_hat);

        Ok(CovarianceProfile {
            d,
            grid_radii,
            grid_values,
            c1_hat,
            c1_hat_std_error: c1_se,
            fit_points: fit.to_vec(),
        })
    }

    /// Covariance at separation norm `r`: table interpolation inside the
    /// support, the exact scaling law outside.
    pub fn eval(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return self.c1_hat * r.powi(2 - self.d as i32);
        }
        let n = self.grid_radii.len() - 1;
        let x = r * n as f64;
        let idx = (x as usize).min(n - 1);
        let frac = x - idx as f64;
        self.grid_values[idx] + frac * (self.grid_values[idx + 1] - self.grid_values[idx])
    }
}

/// One point of the `L^2` convergence-rate curve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct L2RatePoint {
    pub horizon: f64,
    pub estimate: EstimateWithError,
    /// `T^{(d-2)/2} * estimate`, which should flatten to the constant
    /// `c1_hat * c2 * E[M_inf^2]` for large `T`.
    pub rescaled: f64,
    pub rescaled_std_error: f64,
}

/// `||M_inf - M_T||_2^2 = E_0[exp(beta^2 int_0^T V(sqrt2 W)) *
/// c(sqrt2 W_T)]` for each requested horizon, where `c` is the
/// covariance profile.
pub fn l2_distance_curve(
    kernel: &CovarianceKernel,
    beta: f64,
    profile: &CovarianceProfile,
    horizons: &[f64],
    n_samples: u64,
    dt: f64,
    seed: u64,
) -> Result<Vec<L2RatePoint>> {
    if horizons.iter().any(|t| *t < 1.0) {
        return Err(Error::Domain(
            "rate horizons below 1 are outside the scaling regime".into(),
        ));
    }
    let d = kernel.dimension() as usize;
    let sqrt2 = 2f64.sqrt();
    let beta_sq = beta * beta;
    let half_power = 0.5 * (kernel.dimension() as f64 - 2.0);
    Ok(horizons
        .iter()
        .enumerate()
        .map(|(ti, &horizon)| {
            let steps = (horizon / dt).round() as usize;
            let acc = parallel_reduce(
                n_samples,
                DEFAULT_SHARD,
                McAccumulator::new,
                |acc, i| {
                    let mut s = FreePathStream::new(
                        hash2(seed, 0x7261 + ti as u64),
                        i,
                        &vec![0.0; d],
                        dt,
                    );
                    let mut prev = s.position().to_vec();
                    let mut integral = 0.0;
                    for _ in 0..steps {
                        s.advance();
                        let cur = s.position();
                        let mut sq = 0.0;
                        for j in 0..d {
                            let m = 0.5 * (prev[j] + cur[j]);
                            sq += m * m;
                        }
                        integral += kernel.value(sqrt2 * sq.sqrt());
                        prev.copy_from_slice(cur);
                    }
                    let end_norm =
                        s.position().iter().map(|v| v * v).sum::<f64>().sqrt();
                    let c = profile.eval(sqrt2 * end_norm);
                    acc.push((beta_sq * integral * dt).exp() * c);
                },
                McAccumulator::merge,
            )
            .unwrap_or_default();
            let estimate = EstimateWithError::from_accumulator(&acc);
            let f = horizon.powf(half_power);
            L2RatePoint {
                horizon,
                estimate,
                rescaled: f * estimate.value,
                rescaled_std_error: f * estimate.std_error,
            }
        })
        .collect())
}

/// The two halves of `E[L_T]` and their difference. `L_T` compensates the
/// rescaled endpoint overlap with `c3`:
/// `E(L_T) = E_0[e^{beta^2 int_0^T V(sqrt2 W)} (T^{d/2} V(sqrt2 W_T) - c3)]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExpectedLt {
    pub endpoint_term: EstimateWithError,
    pub compensator_term: EstimateWithError,
    pub difference: EstimateWithError,
}

/// Estimate `E[L_T]`. The endpoint term integrates over terminal points
/// `y` inside the support of `V(sqrt2 .)` with weight
/// `|B| V(sqrt2 y) T^{d/2} rho(T, y)` and Brownian bridges in between;
/// with `endpoint_is = false` it falls back to plain path sampling of
/// `e^{beta^2 int V} T^{d/2} V(sqrt2 W_T)` (feasible only for small `T`).
pub fn expected_lt(
    kernel: &CovarianceKernel,
    beta: f64,
    horizon: f64,
    c3: f64,
    n_samples: u64,
    dt: f64,
    seed: u64,
    endpoint_is: bool,
) -> Result<ExpectedLt> {
    if c3 < 0.0 {
        return Err(Error::Domain("c3 must be nonnegative".into()));
    }
    let d = kernel.dimension() as usize;
    let du = kernel.dimension();
    let sqrt2 = 2f64.sqrt();
    let beta_sq = beta * beta;
    let steps = (horizon / dt).round() as usize;
    let td2 = horizon.powf(0.5 * du as f64);

    // Endpoint term.
    let endpoint_term = if endpoint_is {
        let vol = ball_volume(du) * (0.5f64).powf(0.5 * du as f64); // |y| <= 1/sqrt2
        let acc = parallel_reduce(
            n_samples,
            DEFAULT_SHARD,
            || (McAccumulator::new(), 0.0f64, 0.0f64),
            |(acc, wsum, wsq), i| {
                let mut rng = StreamRng::substream(seed, 0x6c7431, i);
                let y = uniform_in_ball(&mut rng, d, std::f64::consts::FRAC_1_SQRT_2);
                let weight = vol * kernel.value(sqrt2 * norm(&y)) * td2 * heat_kernel(horizon, &y);
                if weight == 0.0 {
                    acc.push(0.0);
                    return;
                }
                let mut s = BridgePathStream::new(
                    hash2(seed, 0x6c7432),
                    i,
                    &vec![0.0; d],
                    &y,
                    horizon,
                    dt,
                );
                let mut prev = s.position().to_vec();
                let mut integral = 0.0;
                for _ in 0..steps {
                    s.advance();
                    let cur = s.position();
                    let mut sq = 0.0;
                    for j in 0..d {
                        let m = 0.5 * (prev[j] + cur[j]);
                        sq += m * m;
                    }
                    integral += kernel.value(sqrt2 * sq.sqrt());
                    prev.copy_from_slice(cur);
                }
                acc.push(weight * (beta_sq * integral * dt).exp());
                *wsum += weight;
                *wsq += weight * weight;
            },
            |(a, aw, aw2), (b, bw, bw2)| (a.merge(b), aw + bw, aw2 + bw2),
        )
        .unwrap_or_default();
        let (macc, wsum, wsq) = acc;
        let mut est = EstimateWithError::from_accumulator(&macc);
        est.ess = if wsq > 0.0 {
            Some(wsum * wsum / wsq)
        } else {
            Some(0.0)
        };
        est
    } else {
        let acc = parallel_reduce(
            n_samples,
            DEFAULT_SHARD,
            McAccumulator::new,
            |acc, i| {
                let mut s =
                    FreePathStream::new(hash2(seed, 0x6c7433), i, &vec![0.0; d], dt);
                let mut prev = s.position().to_vec();
                let mut integral = 0.0;
                for _ in 0..steps {
                    s.advance();
                    let cur = s.position();
                    let mut sq = 0.0;
                    for j in 0..d {
                        let m = 0.5 * (prev[j] + cur[j]);
                        sq += m * m;
                    }
                    integral += kernel.value(sqrt2 * sq.sqrt());
                    prev.copy_from_slice(cur);
                }
                let v_end = kernel.value(sqrt2 * norm(s.position()));
                acc.push((beta_sq * integral * dt).exp() * td2 * v_end);
            },
            McAccumulator::merge,
        )
        .unwrap_or_default();
        EstimateWithError::from_accumulator(&acc)
    };

    // Compensator term: c3 * E_0[e^{beta^2 int_0^T V(sqrt2 W)}].
    let compensator_term = variance_mt(kernel, beta, horizon, n_samples, dt, hash2(seed, 0x6c7434))
        .shifted(1.0)
        .scaled(c3);

    let difference = EstimateWithError {
        value: endpoint_term.value - compensator_term.value,
        std_error: endpoint_term.combined_se(&compensator_term),
        n: endpoint_term.n,
        ess: endpoint_term.ess,
        beta_warning: false,
    };
    Ok(ExpectedLt {
        endpoint_term,
        compensator_term,
        difference,
    })
}

/// Four-path estimate of `E[L_T^2]` with endpoint importance sampling on
/// the two compensated terminal separations.
///
/// Per sample, the terminal separations `s_1 = W^1_T - W^2_T` and
/// `s_3 = W^3_T - W^4_T` are drawn from a defensive mixture (half the
/// nominal `N(0, 2T I)`, half uniform in the kernel support) with exact
/// density weights; pair centers are drawn from their exact conditional
/// law; the four paths are bridges to the resulting endpoints. The
/// estimator is unbiased and keeps the rare overlap events in view. The
/// returned `ess` should be checked against ~50 before trusting the
/// standard error.
pub fn second_moment_lt(
    kernel: &CovarianceKernel,
    beta: f64,
    horizon: f64,
    c3: f64,
    n_samples: u64,
    dt: f64,
    seed: u64,
) -> Result<EstimateWithError> {
    if c3 < 0.0 {
        return Err(Error::Domain("c3 must be nonnegative".into()));
    }
    let d = kernel.dimension() as usize;
    let du = kernel.dimension();
    let sqrt2t = (2.0 * horizon).sqrt();
    let beta_sq = beta * beta;
    let steps = (horizon / dt).round() as usize;
    let td2 = horizon.powf(0.5 * du as f64);
    let vol = ball_volume(du);

    let mixture_density = |s: &[f64]| -> f64 {
        let gauss = heat_kernel(2.0 * horizon, s);
        let uni = if norm(s) < 1.0 { 1.0 / vol } else { 0.0 };
        0.5 * gauss + 0.5 * uni
    };

    let acc = parallel_reduce(
        n_samples,
        DEFAULT_SHARD,
        || (McAccumulator::new(), 0.0f64, 0.0f64),
        |(acc, wsum, wsq), i| {
            let mut rng = StreamRng::substream(seed, 0x6c7435, i);
            // Separations from the defensive mixture, with weights.
            let mut seps = [Vec::new(), Vec::new()];
            let mut weight = 1.0;
            for sep in seps.iter_mut() {
                let s = if rng.next_unit() < 0.5 {
                    (0..d).map(|_| sqrt2t * rng.next_normal()).collect::<Vec<f64>>()
                } else {
                    uniform_in_ball(&mut rng, d, 1.0)
                };
                weight *= heat_kernel(2.0 * horizon, &s) / mixture_density(&s);
                *sep = s;
            }
            // Pair centers from the exact conditional: sum ~ N(0, 2T I).
            let centers: Vec<Vec<f64>> = (0..2)
                .map(|_| (0..d).map(|_| sqrt2t * rng.next_normal()).collect())
                .collect();
            let mut endpoints: Vec<Vec<f64>> = Vec::with_capacity(4);
            for p in 0..2 {
                let a = &centers[p];
                let s = &seps[p];
                endpoints.push((0..d).map(|j| 0.5 * (a[j] + s[j])).collect());
                endpoints.push((0..d).map(|j| 0.5 * (a[j] - s[j])).collect());
            }
            // Compensated endpoint factors.
            let factor = (td2 * kernel.value(norm(&seps[0])) - c3)
                * (td2 * kernel.value(norm(&seps[1])) - c3);

            // Four coupled bridges, accumulating all six interactions.
            let mut streams: Vec<BridgePathStream> = endpoints
                .iter()
                .enumerate()
                .map(|(p, y)| {
                    BridgePathStream::new(
                        hash2(seed, 0x6c7436),
                        i * 4 + p as u64,
                        &vec![0.0; d],
                        y,
                        horizon,
                        dt,
                    )
                })
                .collect();
            let mut prev: Vec<Vec<f64>> =
                streams.iter().map(|s| s.position().to_vec()).collect();
            let mut interaction = 0.0;
            for _ in 0..steps {
                for s in streams.iter_mut() {
                    s.advance();
                }
                for a in 0..4 {
                    for b in a + 1..4 {
                        let mut sq = 0.0;
                        for j in 0..d {
                            let m = 0.5 * (prev[a][j] + streams[a].position()[j])
                                - 0.5 * (prev[b][j] + streams[b].position()[j]);
                            sq += m * m;
                        }
                        interaction += kernel.value(sq.sqrt());
                    }
                }
                for (p, s) in prev.iter_mut().zip(&streams) {
                    p.copy_from_slice(s.position());
                }
            }
            acc.push(weight * factor * (beta_sq * interaction * dt).exp());
            *wsum += weight;
            *wsq += weight * weight;
        },
        |(a, aw, aw2), (b, bw, bw2)| (a.merge(b), aw + bw, aw2 + bw2),
    )
    .unwrap_or_default();
    let (macc, wsum, wsq) = acc;
    let mut est = EstimateWithError::from_accumulator(&macc);
    est.ess = if wsq > 0.0 {
        Some(wsum * wsum / wsq)
    } else {
        Some(0.0)
    };
    Ok(est)
}

/// Pure-quadrature value of `E[L_T^2]` at `beta = 0`, where the four-path
/// expectation factorizes:
/// `(T^{d/2} int rho(2T, s) V(s) ds - c3)^2`.
pub fn expected_lt2_beta0_quadrature(kernel: &CovarianceKernel, horizon: f64, c3: f64) -> f64 {
    let d = kernel.dimension();
    let (nodes, weights) = gauss_legendre_on(256, 0.0, 1.0);
    let gauss_int: f64 = nodes
        .iter()
        .zip(&weights)
        .map(|(&r, &w)| {
            let mut e1 = vec![0.0; d as usize];
            e1[0] = r;
            w * kernel.value(r) * heat_kernel(2.0 * horizon, &e1) * r.powi(d as i32 - 1)
        })
        .sum::<f64>()
        * sphere_surface(d);
    let q = horizon.powf(0.5 * d as f64) * gauss_int;
    (q - c3) * (q - c3)
}

/// Pure-quadrature value of the endpoint term of `E[L_T]` at `beta = 0`:
/// `T^{d/2} int rho(T, y) V(sqrt2 y) dy`.
pub fn expected_lt_beta0_quadrature(kernel: &CovarianceKernel, horizon: f64) -> f64 {
    let d = kernel.dimension();
    let sqrt2 = 2f64.sqrt();
    let (nodes, weights) = gauss_legendre_on(256, 0.0, std::f64::consts::FRAC_1_SQRT_2);
    horizon.powf(0.5 * d as f64)
        * sphere_surface(d)
        * nodes
            .iter()
            .zip(&weights)
            .map(|(&r, &w)| {
                let mut e1 = vec![0.0; d as usize];
                e1[0] = r;
                w * kernel.value(sqrt2 * r) * heat_kernel(horizon, &e1) * r.powi(d as i32 - 1)
            })
            .sum::<f64>()
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform draw from the ball of given radius, by rejection from the
/// bounding cube.
fn uniform_in_ball(rng: &mut StreamRng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| 2.0 * rng.next_unit() - 1.0).collect();
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return v.into_iter().map(|x| x * radius).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{beta0_bound, green_mass, sigma2};
    use crate::kernel::test_support::kernel_d3;
    use crate::paths::{pair_kernel_integral, path_kernel_integral, sample_path};
    use approx::assert_relative_eq;

    fn beta0() -> f64 {
        beta0_bound(green_mass(kernel_d3()).unwrap())
    }

    #[test]
    fn mean_one_martingale() {
        let k = kernel_d3();
        let req = MomentRequest {
            beta: 0.7,
            n_paths: 1,
            horizon: 4.0,
            n_samples: 100,
            dt: 0.25,
            seed: 1,
        };
        let est = annealed_moment(k, &req, beta0()).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.std_error, 0.0);

        let req = MomentRequest {
            beta: 0.0,
            n_paths: 2,
            ..req
        };
        let est = annealed_moment(k, &req, beta0()).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn request_validation_and_beta_warning() {
        let k = kernel_d3();
        let bad = MomentRequest {
            beta: 0.1,
            n_paths: 3,
            horizon: 1.0,
            n_samples: 200,
            dt: 0.25,
            seed: 1,
        };
        assert!(annealed_moment(k, &bad, beta0()).is_err());
        let small = MomentRequest {
            n_paths: 2,
            n_samples: 10,
            ..bad
        };
        assert!(annealed_moment(k, &small, beta0()).is_err());
        let hot = MomentRequest {
            beta: 2.0 * beta0(),
            n_paths: 2,
            n_samples: 200,
            ..bad
        };
        assert!(annealed_moment(k, &hot, beta0()).unwrap().beta_warning);
    }

    #[test]
    fn pair_and_scaled_single_integrals_agree_in_mean() {
        // (W^1 - W^2)/sqrt2 is a Brownian motion, so pair integrals match
        // sqrt2-scaled single-path integrals in distribution.
        let k = kernel_d3();
        let (dt, steps, n) = (1.0 / 32.0, 128, 4000u64);
        let mut pair = McAccumulator::new();
        let mut single = McAccumulator::new();
        for i in 0..n {
            let p1 = sample_path(901, 2 * i, 3, &[0.0; 3], dt, steps);
            let p2 = sample_path(901, 2 * i + 1, 3, &[0.0; 3], dt, steps);
            pair.push(pair_kernel_integral(&p1, &p2, k).unwrap().value);
            let q = sample_path(902, i, 3, &[0.0; 3], dt, steps);
            single.push(path_kernel_integral(&q, k, 2f64.sqrt()).value);
        }
        let pe = EstimateWithError::from_accumulator(&pair);
        let se = EstimateWithError::from_accumulator(&single);
        assert!(
            pe.agrees_with(&se, 3.0),
            "pair {} +- {} vs scaled single {} +- {}",
            pe.value,
            pe.std_error,
            se.value,
            se.std_error
        );
    }

    #[test]
    fn variance_mt_zero_beta_and_cap() {
        let k = kernel_d3();
        assert_eq!(variance_mt(k, 0.0, 4.0, 100, 0.25, 1).value, 0.0);
        // T = dt: one step; the integrand is capped by dt * V0.
        let beta = 0.5 * beta0();
        let dt = 1.0 / 32.0;
        let est = variance_mt(k, beta, dt, 2_000, dt, 2);
        let cap = (beta * beta * dt * k.v0()).exp() - 1.0;
        assert!(est.value >= -3.0 * est.std_error && est.value <= cap + 1e-12);
    }

    #[test]
    fn variance_equals_two_path_moment() {
        // E[M_T^2] - 1 computed by two-path interaction equals the
        // sqrt2-scaled single-path variance formula.
        let k = kernel_d3();
        let beta = 0.5 * beta0();
        let req = MomentRequest {
            beta,
            n_paths: 2,
            horizon: 4.0,
            n_samples: 20_000,
            dt: 1.0 / 32.0,
            seed: 11,
        };
        let two = annealed_moment(k, &req, beta0()).unwrap().shifted(-1.0);
        let one = variance_mt(k, beta, 4.0, 20_000, 1.0 / 32.0, 12);
        assert!(
            two.agrees_with(&one, 3.0),
            "two-path {} +- {} vs variance {} +- {}",
            two.value,
            two.std_error,
            one.value,
            one.std_error
        );
    }

    #[test]
    fn variance_mt_converges_with_shrinking_tail() {
        // Estimates over growing horizons increase toward the limit and
        // the increments shrink like the occupation tail.
        let k = kernel_d3();
        let beta = 0.5 * beta0();
        let dt = 1.0 / 32.0;
        let v: Vec<EstimateWithError> = [50.0, 100.0, 200.0]
            .iter()
            .map(|&t| variance_mt(k, beta, t, 6_000, dt, 91))
            .collect();
        let se01 = v[0].combined_se(&v[1]);
        let se12 = v[1].combined_se(&v[2]);
        assert!(v[1].value >= v[0].value - 3.0 * se01);
        assert!(v[2].value >= v[1].value - 3.0 * se12);
        // Tail control: successive increments stay below the
        // m^{-1/2} occupation-tail scale (with exponential-moment slack).
        let slack = |m: f64| {
            8.0 * beta * beta * crate::constants::occupation_tail_bound(3, m)
        };
        assert!((v[1].value - v[0].value).abs() <= slack(50.0) + 3.0 * se01);
        assert!((v[2].value - v[1].value).abs() <= slack(100.0) + 3.0 * se12);
    }

    #[test]
    fn second_moment_lt_zero_compensator_control() {
        // With the compensator removed the four-path moment stays
        // bounded away from zero.
        let k = kernel_d3();
        let est = second_moment_lt(k, 0.0, 4.0, 0.0, 20_000, 1.0 / 16.0, 93).unwrap();
        assert!(
            est.value > 5.0 * est.std_error,
            "uncompensated E[L_T^2] = {} +- {} should be positive",
            est.value,
            est.std_error
        );
        let quad = expected_lt2_beta0_quadrature(k, 4.0, 0.0);
        assert!((est.value - quad).abs() < 3.0 * est.std_error + 1e-6);
    }

    #[test]
    fn estimators_are_monotone_in_beta_at_fixed_seed() {
        let k = kernel_d3();
        let b0 = beta0();
        let mk = |beta: f64| MomentRequest {
            beta,
            n_paths: 2,
            horizon: 2.0,
            n_samples: 500,
            dt: 1.0 / 16.0,
            seed: 77,
        };
        let lo = annealed_moment(k, &mk(0.2 * b0), b0).unwrap();
        let hi = annealed_moment(k, &mk(0.4 * b0), b0).unwrap();
        assert!(hi.value >= lo.value);
        let vlo = variance_mt(k, 0.2 * b0, 2.0, 500, 1.0 / 16.0, 78);
        let vhi = variance_mt(k, 0.4 * b0, 2.0, 500, 1.0 / 16.0, 78);
        assert!(vhi.value >= vlo.value);
    }

    #[test]
    fn jensen_gap_matches_variance_correction() {
        // log E[e^{beta^2 X}] vs the strict Jensen bound beta^2 E[X]:
        // the gap is the cumulant series, led by beta^4 Var(X)/2.
        let k = kernel_d3();
        let beta = 0.5 * beta0();
        let (dt, steps, n) = (1.0 / 32.0, 256, 20_000u64);
        let mut xacc = McAccumulator::new();
        for i in 0..n {
            let p1 = sample_path(501, 2 * i, 3, &[0.0; 3], dt, steps);
            let p2 = sample_path(501, 2 * i + 1, 3, &[0.0; 3], dt, steps);
            xacc.push(pair_kernel_integral(&p1, &p2, k).unwrap().value);
        }
        let req = MomentRequest {
            beta,
            n_paths: 2,
            horizon: 8.0,
            n_samples: n,
            dt,
            seed: 502,
        };
        let est2 = annealed_moment(k, &req, beta0()).unwrap();
        let b2 = beta * beta;
        let jensen = b2 * xacc.mean();
        let gap = est2.value.ln() - jensen;
        let log_se = est2.std_error / est2.value;
        let mean_se = b2 * xacc.std_error();
        assert!(
            gap > -3.0 * (log_se + mean_se),
            "Jensen violated: gap {gap}"
        );
        // The second-order correction explains the gap up to higher
        // cumulants; allow half-to-double bracketing plus MC error.
        let correction = 0.5 * b2 * b2 * xacc.sample_variance();
        assert!(
            (gap - correction).abs() < 0.5 * correction + 3.0 * (log_se + mean_se),
            "gap {gap} vs correction {correction}"
        );
    }

    #[test]
    fn covariance_at_origin_equals_variance() {
        let k = kernel_d3();
        let beta = 0.5 * beta0();
        let c = covariance_minf(k, beta, &[0.0, 0.0, 0.0], 20_000, 30.0, 1.0 / 32.0, 31);
        let v = variance_mt(k, beta, 30.0, 20_000, 1.0 / 32.0, 32);
        assert!(
            c.estimate.agrees_with(&v, 3.0),
            "cov(0) {} +- {} vs var {} +- {}",
            c.estimate.value,
            c.estimate.std_error,
            v.value,
            v.std_error
        );
        assert!(c.rescaled.is_none());
        assert_eq!(
            covariance_minf(k, 0.0, &[0.5, 0.0, 0.0], 1_000, 10.0, 0.25, 1)
                .estimate
                .value,
            0.0
        );
    }

    #[test]
    fn profile_eval_blends_table_and_scaling_law() {
        let k = kernel_d3();
        let beta = 0.4 * beta0();
        let prof = CovarianceProfile::build(k, beta, 8_000, 30.0, 1.0 / 32.0, 41).unwrap();
        assert!(prof.c1_hat > 0.0);
        // Outside the support the profile is the exact power law.
        assert_relative_eq!(
            prof.eval(2.0),
            prof.c1_hat / 2.0,
            max_relative = 1e-12
        );
        // At the origin it matches the tabulated variance-like value.
        assert!(prof.eval(0.0) > prof.eval(0.9));
        // Fit points carry their products for the consistency check.
        for p in &prof.fit_points {
            assert!(p.rescaled.is_some());
        }
    }

    #[test]
    fn expected_lt_is_unbiased_with_and_without_is() {
        // At T = 2 plain sampling still sees the endpoint event, so the
        // two routes must agree.
        let k = kernel_d3();
        let beta = 0.4 * beta0();
        let s2 = sigma2(k, beta, 4_000, 30.0, 1.0 / 32.0, 51).unwrap();
        let a = expected_lt(k, beta, 2.0, s2.c3.value, 30_000, 1.0 / 32.0, 52, true).unwrap();
        let b = expected_lt(k, beta, 2.0, s2.c3.value, 30_000, 1.0 / 32.0, 53, false).unwrap();
        assert!(
            a.endpoint_term.agrees_with(&b.endpoint_term, 3.0),
            "IS endpoint {} +- {} vs plain {} +- {}",
            a.endpoint_term.value,
            a.endpoint_term.std_error,
            b.endpoint_term.value,
            b.endpoint_term.std_error
        );
        assert!(a.endpoint_term.ess.unwrap() > 50.0);
    }

    #[test]
    fn expected_lt_beta0_matches_quadrature() {
        let k = kernel_d3();
        // c3 at beta = 0 is (4 pi)^{-d/2} for a unit-mass kernel.
        let c3 = crate::constants::sigma2(k, 0.0, 0, 10.0, 0.25, 1)
            .unwrap()
            .c3
            .value;
        for t in [4.0, 16.0, 64.0] {
            let quad = expected_lt_beta0_quadrature(k, t);
            let est = expected_lt(k, 0.0, t, c3, 20_000, 1.0 / 16.0, 61, true).unwrap();
            assert!(
                (est.endpoint_term.value - quad).abs()
                    < 3.0 * est.endpoint_term.std_error + 1e-4,
                "T={t}: endpoint IS {} +- {} vs quadrature {quad}",
                est.endpoint_term.value,
                est.endpoint_term.std_error
            );
            // Dominated convergence: the difference shrinks as T grows.
            if t >= 16.0 {
                assert!(est.difference.value.abs() < 0.05 * c3.max(1e-6) + 3.0 * est.difference.std_error);
            }
        }
    }

    #[test]
    fn second_moment_lt_beta0_matches_quadrature() {
        let k = kernel_d3();
        let c3 = crate::constants::sigma2(k, 0.0, 0, 10.0, 0.25, 1)
            .unwrap()
            .c3
            .value;
        let t = 4.0;
        let quad = expected_lt2_beta0_quadrature(k, t, c3);
        let est = second_moment_lt(k, 0.0, t, c3, 20_000, 1.0 / 16.0, 71).unwrap();
        assert!(
            (est.value - quad).abs() < 3.0 * est.std_error + 1e-6,
            "E[L_T^2] at beta=0: {} +- {} vs quadrature {quad}",
            est.value,
            est.std_error
        );
        assert!(est.ess.unwrap() > 50.0);
    }

    #[test]
    fn ball_volume_values() {
        assert_relative_eq!(
            ball_volume(3),
            4.0 * std::f64::consts::PI / 3.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            ball_volume(4),
            std::f64::consts::PI * std::f64::consts::PI / 2.0,
            max_relative = 1e-14
        );
    }
}
