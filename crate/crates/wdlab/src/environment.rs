//! Discretized space-time white noise and the quenched partition
//! function.
//!
//! Space is cut into cells of side `h`, time into steps of `delta`; the
//! white-noise mass of a cell-step block is a centered Gaussian of
//! variance `delta h^d`, generated on demand from
//! `(master seed, step, cell)` by the counter RNG so the field is never
//! stored. A path's energy is
//! `S = sum_{k,c} phi(W_{k delta} - y_c) xi_{k,c}`, and the quenched
//! weight compensates with the exact discrete variance,
//! `Phi_T = exp(beta S - beta^2 Var(S) / 2)`, which makes the weight
//! mean-one in the simulated model exactly rather than only in the
//! continuum limit.
//!
//! Averages of these weights estimate the partition function `M_T`; the
//! coupled ratio across horizons gives one draw of the rescaled
//! fluctuation statistic per environment, and the weighted two-replica
//! endpoint overlap gives the compensated-bracket statistic.

use crate::constants::ConstantsBundle;
use crate::error::{Error, Result};
use crate::kernel::{CovarianceKernel, Mollifier};
use crate::paths::{DiscretePath, FreePathStream};
use crate::rng::{fold_coord, hash2, keyed_normal};
use crate::stats::{parallel_reduce, EstimateWithError, McAccumulator, DEFAULT_SHARD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

const MAX_DIM: usize = 8;
const MAX_CANDIDATES: usize = 8;

/// Lookup table for the mollifier profile against squared radius, used
/// in the hot cell loops (the bump profile is smooth in `r^2`).
#[derive(Debug)]
struct PhiLut {
    step_inv: f64,
    values: Vec<f64>,
}

impl PhiLut {
    fn build(moll: &Mollifier, entries: usize) -> Self {
        let max_sq = 0.25;
        let step = max_sq / entries as f64;
        let values: Vec<f64> = (0..=entries)
            .map(|i| moll.eval((i as f64 * step).sqrt()))
            .collect();
        PhiLut {
            step_inv: 1.0 / step,
            values,
        }
    }

    #[inline(always)]
    fn value_sq(&self, r_sq: f64) -> f64 {
        if r_sq >= 0.25 {
            return 0.0;
        }
        let x = r_sq * self.step_inv;
        let idx = x as usize;
        let frac = x - idx as f64;
        self.values[idx] + frac * (self.values[idx + 1] - self.values[idx])
    }
}

#[inline(always)]
fn cell_key(step_key: u64, cell: &[i64]) -> u64 {
    let mut key = step_key;
    for (j, &c) in cell.iter().enumerate() {
        key = fold_coord(key, c, j as u64);
    }
    key
}

/// Handle to one realization of the discretized environment. Cloning is
/// cheap; [`EnvironmentHandle::with_seed`] derives sibling environments
/// sharing the same discretization.
#[derive(Clone, Debug)]
pub struct EnvironmentHandle {
    master_seed: u64,
    dimension: usize,
    cell_size: f64,
    time_step: f64,
    beta: f64,
    t_max: f64,
    noise_sd: f64,
    phi: Arc<PhiLut>,
}

/// Coupled partition-function estimates for one environment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuenchedEstimate {
    pub environment_id: u64,
    pub horizons: Vec<f64>,
    pub m_hat: Vec<f64>,
    pub se_within: Vec<f64>,
    /// Coupled ratios `M_hat[j] / M_hat[0]` and their delta-method
    /// standard errors; the fluctuation statistic is built from these,
    /// so its Monte Carlo noise is known per environment.
    pub ratio_to_first: Vec<f64>,
    pub ratio_se: Vec<f64>,
    pub n_paths: u64,
}

/// One draw of the rescaled fluctuation statistic
/// `G = T^{(d-2)/4} (M_{tau T} / M_T - 1)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CltDraw {
    pub g: f64,
    pub m_t: f64,
    pub m_tau_t: f64,
    pub se_within_t: f64,
    pub se_within_tau_t: f64,
    /// `M_T` fell below 1e-6; should not happen at small beta.
    pub degenerate: bool,
}

/// Self-normalized bracket statistic for one environment.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BracketDraw {
    /// `T^{d/2} beta^2 M_hat^2 E_polymer^{x2}[V(x_i - x_j)]`.
    pub statistic: f64,
    pub m_hat: f64,
    /// Effective sample size of the weighted overlap pairs.
    pub ess_pairs: f64,
    pub reliable: bool,
    /// Unweighted fraction of endpoint pairs within unit distance.
    pub endpoint_hit_fraction: f64,
}

impl EnvironmentHandle {
    pub fn new(
        master_seed: u64,
        mollifier: &Mollifier,
        cell_size: f64,
        time_step: f64,
        beta: f64,
        t_max: f64,
    ) -> Result<Self> {
        let d = mollifier.dimension() as usize;
        if d > MAX_DIM {
            return Err(Error::Domain(format!("dimension capped at {MAX_DIM}")));
        }
        if !(cell_size > 0.0 && cell_size <= 0.5) {
            return Err(Error::Domain(
                "cell size must lie in (0, 1/2] so cells never exceed the mollifier support"
                    .into(),
            ));
        }
        if cell_size < 0.125 {
            return Err(Error::Domain(
                "cell size below 1/8 exceeds the candidate-cell budget".into(),
            ));
        }
        if time_step <= 0.0 || t_max <= 0.0 || beta < 0.0 {
            return Err(Error::Domain(
                "time step, capacity and beta must be positive".into(),
            ));
        }
        Ok(EnvironmentHandle {
            master_seed,
            dimension: d,
            cell_size,
            time_step,
            beta,
            t_max,
            noise_sd: (time_step * cell_size.powi(d as i32)).sqrt(),
            phi: Arc::new(PhiLut::build(mollifier, 4096)),
        })
    }

    /// Sibling environment with a fresh noise realization but identical
    /// discretization.
    pub fn with_seed(&self, master_seed: u64) -> Self {
        let mut env = self.clone();
        env.master_seed = master_seed;
        env
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// White-noise mass of the block `(time step k, cell c)`: a centered
    /// Gaussian of variance `delta h^d`, recomputed on demand.
    pub fn noise_increment(&self, k: u64, cell: &[i64]) -> f64 {
        assert!(cell.len() == self.dimension, "cell dimension mismatch");
        assert!(
            (k as f64) * self.time_step <= self.t_max + 1e-9,
            "time index beyond environment capacity"
        );
        self.noise_sd * keyed_normal(cell_key(self.step_key(k), cell), 0)
    }

    #[inline(always)]
    fn step_key(&self, k: u64) -> u64 {
        hash2(self.master_seed ^ 0x6e6f697365, k)
    }

    /// `(S, Var S)` contributions of one path position at time step `k`,
    /// in units of raw standard normals; the caller scales by the noise
    /// standard deviation.
    #[inline]
    fn step_terms(&self, k: u64, pos: &[f64]) -> (f64, f64) {
        let step_key = self.step_key(k);
        let d = self.dimension;
        let h = self.cell_size;
        let mut lo = [0i64; MAX_DIM];
        let mut count = [0usize; MAX_DIM];
        let mut dx2 = [[0.0f64; MAX_CANDIDATES]; MAX_DIM];
        for j in 0..d {
            let l = ((pos[j] - 0.5) / h - 0.5).ceil() as i64;
            let hi = ((pos[j] + 0.5) / h - 0.5).floor() as i64;
            lo[j] = l;
            let c = ((hi - l + 1).max(0) as usize).min(MAX_CANDIDATES);
            count[j] = c;
            for (t, slot) in dx2[j].iter_mut().enumerate().take(c) {
                let center = (l + t as i64) as f64 * h + 0.5 * h;
                let dx = pos[j] - center;
                *slot = dx * dx;
            }
        }
        let mut idx = [0usize; MAX_DIM];
        let mut cell = [0i64; MAX_DIM];
        let mut s = 0.0;
        let mut var = 0.0;
        'outer: loop {
            let mut r_sq = 0.0;
            for j in 0..d {
                r_sq += dx2[j][idx[j]];
            }
            if r_sq < 0.25 {
                let a = self.phi.value_sq(r_sq);
                if a > 0.0 {
                    for j in 0..d {
                        cell[j] = lo[j] + idx[j] as i64;
                    }
                    let z = keyed_normal(cell_key(step_key, &cell[..d]), 0);
                    s += a * z;
                    var += a * a;
                }
            }
            // Odometer over the candidate box.
            for j in 0..d {
                idx[j] += 1;
                if idx[j] < count[j] {
                    continue 'outer;
                }
                idx[j] = 0;
            }
            break;
        }
        (s, var)
    }

    /// Log-weight of a stored path over the time-step range
    /// `[k_start, k_end)`. Log-weights over disjoint blocks add, which is
    /// the discrete form of the Markov factorization of the partition
    /// function.
    pub fn log_weight_block(
        &self,
        path: &DiscretePath,
        k_start: usize,
        k_end: usize,
    ) -> Result<f64> {
        if (path.dt() - self.time_step).abs() > 1e-12 {
            return Err(Error::Shape(
                "path grid must match the environment time step".into(),
            ));
        }
        if k_end > path.n_steps() + 1 {
            return Err(Error::Shape("block extends past the path".into()));
        }
        let mut s = 0.0;
        let mut var = 0.0;
        for k in k_start..k_end {
            let (ds, dv) = self.step_terms(k as u64, path.position(k));
            s += ds;
            var += dv;
        }
        let s = self.noise_sd * s;
        let var = self.noise_sd * self.noise_sd * var;
        Ok(self.beta * s - 0.5 * self.beta * self.beta * var)
    }

    /// Quenched weight `Phi_T(W)` of a stored path.
    pub fn quenched_weight(&self, path: &DiscretePath, horizon: f64) -> Result<f64> {
        if horizon > path.horizon() + 1e-9 {
            return Err(Error::Shape("horizon exceeds the stored path".into()));
        }
        let n_t = (horizon / self.time_step).round() as usize;
        Ok(self.log_weight_block(path, 0, n_t)?.exp())
    }

    /// Sample `n_paths` free paths from the origin (streams derived from
    /// `path_seed`), extend each to the largest horizon, and return the
    /// coupled averages `M_hat_T` for every requested horizon.
    pub fn estimate_partition(
        &self,
        path_seed: u64,
        horizons: &[f64],
        n_paths: u64,
    ) -> Result<QuenchedEstimate> {
        if horizons.is_empty() || n_paths == 0 {
            return Err(Error::Config(
                "need at least one horizon and one path".into(),
            ));
        }
        if horizons.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("horizons must be sorted ascending".into()));
        }
        if *horizons.last().unwrap() > self.t_max + 1e-9 {
            return Err(Error::Config(
                "largest horizon exceeds environment capacity".into(),
            ));
        }
        let steps: Vec<usize> = horizons
            .iter()
            .map(|t| (t / self.time_step).round() as usize)
            .collect();
        let k_max = *steps.last().unwrap();
        let d = self.dimension;
        let beta = self.beta;
        let half_beta_sq = 0.5 * beta * beta;
        let nsd = self.noise_sd;

        // Per horizon j: weight moments plus the cross moments with the
        // first horizon's weight x, for the delta-method ratio error.
        #[derive(Clone)]
        struct HorizonAcc {
            acc: McAccumulator,
            sum_xy: f64,
            sum_y2: f64,
        }
        let accs = parallel_reduce(
            n_paths,
            DEFAULT_SHARD,
            || {
                (
                    vec![
                        HorizonAcc {
                            acc: McAccumulator::new(),
                            sum_xy: 0.0,
                            sum_y2: 0.0,
                        };
                        horizons.len()
                    ],
                    0.0f64,
                )
            },
            |(accs, sum_x2), p| {
                let mut stream =
                    FreePathStream::new(path_seed, p, &vec![0.0; d], self.time_step);
                let mut raw_s = 0.0;
                let mut raw_var = 0.0;
                let mut h_idx = 0;
                let mut first_w = None;
                let mut record = |h_idx: &mut usize, w: f64, sum_x2: &mut f64| {
                    let x = *first_w.get_or_insert(w);
                    if *h_idx == 0 {
                        *sum_x2 += x * x;
                    }
                    let slot = &mut accs[*h_idx];
                    slot.acc.push(w);
                    slot.sum_xy += x * w;
                    slot.sum_y2 += w * w;
                    *h_idx += 1;
                };
                while h_idx < steps.len() && steps[h_idx] == 0 {
                    record(&mut h_idx, 1.0, sum_x2);
                }
                for k in 0..k_max {
                    let (ds, dv) = self.step_terms(k as u64, stream.position());
                    raw_s += ds;
                    raw_var += dv;
                    stream.advance();
                    while h_idx < steps.len() && steps[h_idx] == k + 1 {
                        let log_w = beta * nsd * raw_s - half_beta_sq * nsd * nsd * raw_var;
                        record(&mut h_idx, log_w.exp(), sum_x2);
                    }
                }
            },
            |(mut a, ax2), (b, bx2)| {
                for (x, y) in a.iter_mut().zip(b) {
                    x.acc = x.acc.merge(y.acc);
                    x.sum_xy += y.sum_xy;
                    x.sum_y2 += y.sum_y2;
                }
                (a, ax2 + bx2)
            },
        )
        .unwrap_or_else(|| {
            (
                vec![
                    HorizonAcc {
                        acc: McAccumulator::new(),
                        sum_xy: 0.0,
                        sum_y2: 0.0,
                    };
                    horizons.len()
                ],
                0.0,
            )
        });
        let (accs, sum_x2) = accs;
        let sum_x = accs[0].acc.s1;
        let mut ratio_to_first = Vec::with_capacity(horizons.len());
        let mut ratio_se = Vec::with_capacity(horizons.len());
        for h in &accs {
            let r = h.acc.s1 / sum_x;
            // Var(sum y / sum x) ~ sum (y_i - r x_i)^2 / (sum x)^2.
            let var = (h.sum_y2 - 2.0 * r * h.sum_xy + r * r * sum_x2) / (sum_x * sum_x);
            ratio_to_first.push(r);
            ratio_se.push(var.max(0.0).sqrt());
        }

        Ok(QuenchedEstimate {
            environment_id: self.master_seed,
            horizons: horizons.to_vec(),
            m_hat: accs.iter().map(|a| a.acc.mean()).collect(),
            se_within: accs.iter().map(|a| a.acc.std_error()).collect(),
            ratio_to_first,
            ratio_se,
            n_paths,
        })
    }

    /// One draw of `G^{(T)}_tau = T^{(d-2)/4} (M_{tau T}/M_T - 1)` from
    /// coupled partition estimates. `tau = 1` returns exactly zero.
    pub fn clt_sample(
        &self,
        path_seed: u64,
        horizon: f64,
        tau: f64,
        n_paths: u64,
        constants: &ConstantsBundle,
    ) -> Result<CltDraw> {
        if tau < 1.0 {
            return Err(Error::Domain("tau must be >= 1".into()));
        }
        debug_assert!(
            self.beta <= 0.5 * constants.beta0_bound + 1e-12,
            "clt statistic is calibrated for beta <= beta0/2"
        );
        let est = if tau == 1.0 {
            self.estimate_partition(path_seed, &[horizon], n_paths)?
        } else {
            self.estimate_partition(path_seed, &[horizon, tau * horizon], n_paths)?
        };
        let m_t = est.m_hat[0];
        let m_tau_t = *est.m_hat.last().unwrap();
        let scale = horizon.powf(0.25 * (self.dimension as f64 - 2.0));
        let g = if tau == 1.0 {
            0.0
        } else {
            scale * (m_tau_t / m_t - 1.0)
        };
        Ok(CltDraw {
            g,
            m_t,
            m_tau_t,
            se_within_t: est.se_within[0],
            se_within_tau_t: *est.se_within.last().unwrap(),
            degenerate: m_t < 1e-6,
        })
    }

    /// Self-normalized estimate of the rescaled bracket derivative:
    /// `T^{d/2} beta^2 M_hat^2 sum_{i != j} w_i w_j V(x_i - x_j) / (sum w)^2`
    /// over the sampled paths' weights `w_i = Phi_T(W^i)` and endpoints
    /// `x_i = W^i_T`. Compared downstream against `c3 M_hat^2`.
    pub fn bracket_derivative_estimate(
        &self,
        kernel: &CovarianceKernel,
        path_seed: u64,
        horizon: f64,
        n_paths: u64,
    ) -> Result<BracketDraw> {
        if horizon > self.t_max + 1e-9 {
            return Err(Error::Config("horizon exceeds environment capacity".into()));
        }
        if n_paths < 2 {
            return Err(Error::Config("need at least two paths".into()));
        }
        let k_max = (horizon / self.time_step).round() as usize;
        let d = self.dimension;
        let beta = self.beta;
        let half_beta_sq = 0.5 * beta * beta;
        let nsd = self.noise_sd;

        let results = parallel_reduce(
            n_paths,
            DEFAULT_SHARD,
            Vec::new,
            |out: &mut Vec<(f64, Vec<f64>)>, p| {
                let mut stream =
                    FreePathStream::new(path_seed, p, &vec![0.0; d], self.time_step);
                let mut raw_s = 0.0;
                let mut raw_var = 0.0;
                for k in 0..k_max {
                    let (ds, dv) = self.step_terms(k as u64, stream.position());
                    raw_s += ds;
                    raw_var += dv;
                    stream.advance();
                }
                let log_w = beta * nsd * raw_s - half_beta_sq * nsd * nsd * raw_var;
                out.push((log_w.exp(), stream.position().to_vec()));
            },
            |mut a, b| {
                a.extend(b);
                a
            },
        )
        .unwrap_or_default();

        let weight_sum: f64 = results.iter().map(|(w, _)| w).sum();
        let m_hat = weight_sum / n_paths as f64;

        // Neighbor search on the unit lattice: V vanishes past distance 1.
        // BTreeMap keeps the pair visit order deterministic.
        let mut grid: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
        for (i, (_, x)) in results.iter().enumerate() {
            let cell: Vec<i64> = x.iter().map(|v| v.floor() as i64).collect();
            grid.entry(cell).or_default().push(i);
        }
        let mut offsets = vec![[0i64; MAX_DIM]];
        for j in 0..d {
            let mut next = Vec::with_capacity(offsets.len() * 3);
            for base in &offsets {
                for s in -1..=1i64 {
                    let mut o = *base;
                    o[j] = s;
                    next.push(o);
                }
            }
            offsets = next;
        }
        let mut overlap_num = 0.0;
        let mut ess_num = 0.0;
        let mut ess_den = 0.0;
        let mut hit_pairs = 0u64;
        for (cell, members) in &grid {
            for off in &offsets {
                let ncell: Vec<i64> = (0..d).map(|j| cell[j] + off[j]).collect();
                if ncell < *cell {
                    continue; // each unordered cell pair is visited once
                }
                let same = ncell == *cell;
                if let Some(others) = grid.get(&ncell) {
                    for (a_pos, &i) in members.iter().enumerate() {
                        let start = if same { a_pos + 1 } else { 0 };
                        for &j in &others[start..] {
                            let (wi, xi) = &results[i];
                            let (wj, xj) = &results[j];
                            let mut sq = 0.0;
                            for t in 0..d {
                                let v = xi[t] - xj[t];
                                sq += v * v;
                            }
                            if sq < 1.0 {
                                hit_pairs += 1;
                                let v = kernel.value(sq.sqrt());
                                let u = wi * wj;
                                overlap_num += 2.0 * u * v;
                                ess_num += u;
                                ess_den += u * u;
                            }
                        }
                    }
                }
            }
        }
        let overlap = overlap_num / (weight_sum * weight_sum);
        let statistic =
            horizon.powf(0.5 * d as f64) * beta * beta * m_hat * m_hat * overlap;
        let ess_pairs = if ess_den > 0.0 {
            ess_num * ess_num / ess_den
        } else {
            0.0
        };
        let total_pairs = n_paths * (n_paths - 1) / 2;
        Ok(BracketDraw {
            statistic,
            m_hat,
            ess_pairs,
            reliable: ess_pairs >= 50.0,
            endpoint_hit_fraction: hit_pairs as f64 / total_pairs as f64,
        })
    }

    /// Pair kernel matched to this discretization:
    /// `V_eff(x, y) = h^d sum_c phi(x - y_c) phi(y - y_c)`, the exact
    /// covariance density of the discrete noise field.
    pub fn matched_pair_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dimension;
        let h = self.cell_size;
        let mut lo = [0i64; MAX_DIM];
        let mut count = [0usize; MAX_DIM];
        for j in 0..d {
            // Candidates must lie within 1/2 of both points.
            let l = ((x[j].max(y[j]) - 0.5) / h - 0.5).ceil() as i64;
            let hi = ((x[j].min(y[j]) + 0.5) / h - 0.5).floor() as i64;
            lo[j] = l;
            let c = ((hi - l + 1).max(0) as usize).min(MAX_CANDIDATES);
            if c == 0 {
                return 0.0;
            }
            count[j] = c;
        }
        let mut idx = [0usize; MAX_DIM];
        let mut total = 0.0;
        'outer: loop {
            let mut rx = 0.0;
            let mut ry = 0.0;
            for j in 0..d {
                let center = (lo[j] + idx[j] as i64) as f64 * h + 0.5 * h;
                let dx = x[j] - center;
                let dy = y[j] - center;
                rx += dx * dx;
                ry += dy * dy;
            }
            total += self.phi.value_sq(rx) * self.phi.value_sq(ry);
            for j in 0..d {
                idx[j] += 1;
                if idx[j] < count[j] {
                    continue 'outer;
                }
                idx[j] = 0;
            }
            break;
        }
        total * h.powi(d as i32)
    }

    /// Annealed variance of `M_T` in the matched discrete model:
    /// `E^{x2}[exp(beta^2 delta sum_k V_eff(W^1_k, W^2_k))] - 1` over
    /// independent path pairs, with the same left-endpoint time rule as
    /// the quenched weight. This is the oracle side of the
    /// quenched/annealed cross-validation, where the discretization error
    /// cancels exactly.
    pub fn matched_variance_oracle(
        &self,
        pair_seed: u64,
        horizon: f64,
        n_pairs: u64,
    ) -> EstimateWithError {
        let k_max = (horizon / self.time_step).round() as usize;
        let d = self.dimension;
        let beta_sq = self.beta * self.beta;
        let dt = self.time_step;
        let acc = parallel_reduce(
            n_pairs,
            DEFAULT_SHARD,
            McAccumulator::new,
            |acc, p| {
                let mut s1 =
                    FreePathStream::new(hash2(pair_seed, 0x70), 2 * p, &vec![0.0; d], dt);
                let mut s2 =
                    FreePathStream::new(hash2(pair_seed, 0x70), 2 * p + 1, &vec![0.0; d], dt);
                let mut q = 0.0;
                for _ in 0..k_max {
                    q += self.matched_pair_kernel(s1.position(), s2.position());
                    s1.advance();
                    s2.advance();
                }
                acc.push((beta_sq * dt * q).exp() - 1.0);
            },
            McAccumulator::merge,
        )
        .unwrap_or_default();
        EstimateWithError::from_accumulator(&acc)
    }
}

/// Map the mollification scale of the stochastic heat equation onto the
/// polymer horizon: `u_{eps,t}(.)` has the law of `M_{t/eps^2}(./eps)`,
/// so the experiment at `(eps, t)` runs at horizon `T = t / eps^2` with
/// spatial dilation `1 / eps`.
pub fn she_scaling_map(epsilon: f64, t: f64) -> Result<(f64, f64)> {
    if epsilon <= 0.0 || t <= 0.0 {
        return Err(Error::Domain("epsilon and t must be positive".into()));
    }
    Ok((t / (epsilon * epsilon), 1.0 / epsilon))
}
