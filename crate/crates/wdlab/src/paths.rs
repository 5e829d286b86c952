//! Discretized Brownian motions and bridges in d dimensions, plus the
//! kernel time-integrals `int_0^T V(scale * W_s) ds` that appear inside
//! every expectation downstream. All samplers are pure functions of
//! `(seed, stream, parameters)`.

use crate::error::{Error, Result};
use crate::kernel::CovarianceKernel;
use crate::rng::StreamRng;

/// Standard heat kernel `rho(t, x) = (2 pi t)^{-d/2} exp(-|x|^2 / 2t)`.
pub fn heat_kernel(t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    (2.0 * std::f64::consts::PI * t).powf(-0.5 * d) * (-0.5 * sq / t).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub enum PathKind {
    Free,
    /// Pinned at both ends over the stated horizon.
    Bridge { horizon: f64 },
}

/// A time-gridded path: positions at `0, dt, ..., n dt`, flattened row
/// per time point.
#[derive(Clone, Debug)]
pub struct DiscretePath {
    dimension: usize,
    dt: f64,
    positions: Vec<f64>,
    kind: PathKind,
}

impl DiscretePath {
    /// Wrap explicit positions (used by tests and frozen fixtures).
    pub fn from_positions(
        dimension: usize,
        dt: f64,
        positions: Vec<f64>,
        kind: PathKind,
    ) -> Result<Self> {
        if dimension == 0 || dt <= 0.0 {
            return Err(Error::Domain("dimension and dt must be positive".into()));
        }
        if positions.is_empty() || positions.len() % dimension != 0 {
            return Err(Error::Shape(format!(
                "positions length {} is not a multiple of dimension {dimension}",
                positions.len()
            )));
        }
        Ok(DiscretePath {
            dimension,
            dt,
            positions,
            kind,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.positions.len() / self.dimension - 1
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    pub fn kind(&self) -> &PathKind {
        &self.kind
    }

    #[inline]
    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn start(&self) -> &[f64] {
        self.position(0)
    }

    pub fn end(&self) -> &[f64] {
        self.position(self.n_steps())
    }

    /// Refine the grid to `dt/2` by conditional-Gaussian midpoint infill,
    /// keeping the original positions on the coarse grid. The refinement
    /// is itself a pure function of the seed pair.
    pub fn refine_with_midpoints(&self, seed: u64, stream: u64) -> DiscretePath {
        let d = self.dimension;
        let n = self.n_steps();
        let mut rng = StreamRng::substream(seed, stream, 0x52464e);
        let half_sd = (self.dt / 4.0).sqrt();
        let mut out = Vec::with_capacity((2 * n + 1) * d);
        for k in 0..n {
            let a = self.position(k);
            let b = self.position(k + 1);
            out.extend_from_slice(a);
            for j in 0..d {
                out.push(0.5 * (a[j] + b[j]) + half_sd * rng.next_normal());
            }
        }
        out.extend_from_slice(self.end());
        DiscretePath {
            dimension: d,
            dt: 0.5 * self.dt,
            positions: out,
            kind: self.kind.clone(),
        }
    }
}

/// Streaming free Brownian path: one position in memory at a time.
pub(crate) struct FreePathStream {
    dimension: usize,
    sd: f64,
    pos: Vec<f64>,
    rng: StreamRng,
}

impl FreePathStream {
    pub fn new(seed: u64, stream: u64, start: &[f64], dt: f64) -> Self {
        FreePathStream {
            dimension: start.len(),
            sd: dt.sqrt(),
            pos: start.to_vec(),
            rng: StreamRng::new(seed, stream),
        }
    }

    #[inline]
    pub fn position(&self) -> &[f64] {
        &self.pos
    }

    #[inline]
    pub fn advance(&mut self) {
        for j in 0..self.dimension {
            self.pos[j] += self.sd * self.rng.next_normal();
        }
    }
}

/// Sample a free Brownian path started at `x` with `n` steps of size `dt`.
pub fn sample_path(
    seed: u64,
    stream: u64,
    dimension: usize,
    x: &[f64],
    dt: f64,
    n: usize,
) -> DiscretePath {
    assert_eq!(x.len(), dimension);
    assert!(dt > 0.0 && n >= 1);
    let mut s = FreePathStream::new(seed, stream, x, dt);
    let mut positions = Vec::with_capacity((n + 1) * dimension);
    positions.extend_from_slice(x);
    for _ in 0..n {
        s.advance();
        positions.extend_from_slice(s.position());
    }
    DiscretePath {
        dimension,
        dt,
        positions,
        kind: PathKind::Free,
    }
}

/// Streaming Brownian bridge from `x` to `y` over `[0, horizon]`,
/// constructed by the sequential conditional-Gaussian recursion, so the
/// terminal point is hit exactly.
pub(crate) struct BridgePathStream {
    dimension: usize,
    dt: f64,
    horizon: f64,
    target: Vec<f64>,
    pos: Vec<f64>,
    step: usize,
    n: usize,
    rng: StreamRng,
}

impl BridgePathStream {
    pub fn new(seed: u64, stream: u64, x: &[f64], y: &[f64], horizon: f64, dt: f64) -> Self {
        let n = (horizon / dt).round() as usize;
        BridgePathStream {
            dimension: x.len(),
            dt,
            horizon,
            target: y.to_vec(),
            pos: x.to_vec(),
            step: 0,
            n,
            rng: StreamRng::new(seed, stream),
        }
    }

    #[inline]
    pub fn position(&self) -> &[f64] {
        &self.pos
    }

    #[inline]
    pub fn advance(&mut self) {
        let remaining = self.horizon - self.step as f64 * self.dt;
        self.step += 1;
        if self.step >= self.n {
            self.pos.copy_from_slice(&self.target);
            return;
        }
        let drift = self.dt / remaining;
        let sd = (self.dt * (remaining - self.dt) / remaining).sqrt();
        for j in 0..self.dimension {
            let mean = self.pos[j] + drift * (self.target[j] - self.pos[j]);
            self.pos[j] = mean + sd * self.rng.next_normal();
        }
    }
}

/// Sample a Brownian bridge pinned at `x` and `y`. `dt` must divide the
/// horizon.
pub fn sample_bridge(
    seed: u64,
    stream: u64,
    dimension: usize,
    x: &[f64],
    y: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<DiscretePath> {
    if horizon <= 0.0 || dt <= 0.0 {
        return Err(Error::Domain("horizon and dt must be positive".into()));
    }
    let steps = horizon / dt;
    let n = steps.round() as usize;
    if n == 0 || (steps - n as f64).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "dt = {dt} does not divide the horizon {horizon}"
        )));
    }
    assert_eq!(x.len(), dimension);
    assert_eq!(y.len(), dimension);
    let mut s = BridgePathStream::new(seed, stream, x, y, horizon, dt);
    let mut positions = Vec::with_capacity((n + 1) * dimension);
    positions.extend_from_slice(x);
    for _ in 0..n {
        s.advance();
        positions.extend_from_slice(s.position());
    }
    Ok(DiscretePath {
        dimension,
        dt,
        positions,
        kind: PathKind::Bridge { horizon },
    })
}

/// Result of a kernel time-integral along a path.
#[derive(Clone, Copy, Debug)]
pub struct PathIntegralResult {
    pub value: f64,
    pub dt: f64,
}

#[inline(always)]
fn midpoint_norm(a: &[f64], b: &[f64]) -> f64 {
    let mut sq = 0.0;
    for j in 0..a.len() {
        let m = 0.5 * (a[j] + b[j]);
        sq += m * m;
    }
    sq.sqrt()
}

#[inline(always)]
fn midpoint_diff_norm(a1: &[f64], b1: &[f64], a2: &[f64], b2: &[f64]) -> f64 {
    let mut sq = 0.0;
    for j in 0..a1.len() {
        let m = 0.5 * (a1[j] + b1[j]) - 0.5 * (a2[j] + b2[j]);
        sq += m * m;
    }
    sq.sqrt()
}

/// Composite midpoint quadrature of `s -> V(scale * W_s)` on the path
/// grid. The value always lands in `[0, T * V(0)]`.
pub fn path_kernel_integral(
    path: &DiscretePath,
    kernel: &CovarianceKernel,
    scale: f64,
) -> PathIntegralResult {
    let n = path.n_steps();
    let mut acc = 0.0;
    for k in 0..n {
        let r = scale * midpoint_norm(path.position(k), path.position(k + 1));
        acc += kernel.value(r);
    }
    PathIntegralResult {
        value: acc * path.dt,
        dt: path.dt,
    }
}

/// Midpoint quadrature of `s -> V(W^1_s - W^2_s)` for two paths on the
/// same grid; equals the single-path integral of the difference path at
/// scale 1.
pub fn pair_kernel_integral(
    p1: &DiscretePath,
    p2: &DiscretePath,
    kernel: &CovarianceKernel,
) -> Result<PathIntegralResult> {
    if p1.dimension != p2.dimension || p1.n_steps() != p2.n_steps() || p1.dt != p2.dt {
        return Err(Error::Shape(
            "pair integral requires matching dimension and time grid".into(),
        ));
    }
    let n = p1.n_steps();
    let mut acc = 0.0;
    for k in 0..n {
        let r = midpoint_diff_norm(
            p1.position(k),
            p1.position(k + 1),
            p2.position(k),
            p2.position(k + 1),
        );
        acc += kernel.value(r);
    }
    Ok(PathIntegralResult {
        value: acc * p1.dt,
        dt: p1.dt,
    })
}
