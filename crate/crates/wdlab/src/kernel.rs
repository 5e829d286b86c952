//! The mollifier `phi` and its autocorrelation `V = phi * phi`, tabulated
//! as radial functions. `phi` is the canonical smooth bump supported in
//! the ball of radius 1/2 and normalized to unit mass, so `V` is smooth,
//! nonnegative and supported in the unit ball. Everything downstream
//! (constants, oracle expectations, the discretized noise) is built on
//! these two tables.

use crate::error::{Error, Result};
use crate::quad::{adaptive_simpson, gauss_legendre_on, integrate_gl};
use crate::special::gamma_half_integer;

/// Surface area of the unit sphere in `R^d`.
pub fn sphere_surface(d: u32) -> f64 {
    2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_half_integer(d)
}

/// Request for a mollifier table: dimension and radial grid resolution
/// (points per unit radius). The radial profile is fixed to the bump
/// `exp(-1 / (1 - |2x|^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MollifierSpec {
    pub dimension: u32,
    pub points_per_unit: u32,
}

impl MollifierSpec {
    pub fn new(dimension: u32, points_per_unit: u32) -> Result<Self> {
        if dimension < 3 {
            return Err(Error::Domain(format!(
                "dimension must be >= 3, got {dimension}"
            )));
        }
        if points_per_unit < 64 {
            return Err(Error::Domain(format!(
                "grid resolution must be >= 64 points per unit radius, got {points_per_unit}"
            )));
        }
        if points_per_unit % 2 != 0 {
            return Err(Error::Domain(
                "grid resolution must be even so the phi table lands on [0, 1/2]".into(),
            ));
        }
        Ok(MollifierSpec {
            dimension,
            points_per_unit,
        })
    }
}

/// Unnormalized bump profile `exp(-1/(1-4r^2))` on `[0, 1/2)`.
#[inline]
fn bump(r: f64) -> f64 {
    if r < 0.5 {
        (-1.0 / (1.0 - 4.0 * r * r)).exp()
    } else {
        0.0
    }
}

/// The normalized mollifier: radial table plus the exact normalizing
/// constant, so off-grid values are available analytically.
#[derive(Clone, Debug)]
pub struct Mollifier {
    dimension: u32,
    normalizer: f64,
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl Mollifier {
    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    /// Normalizing constant `c_d`; equals `phi(0) * e`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Exact radial profile value at radius `r >= 0`.
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        self.normalizer * bump(r)
    }

    /// The tabulated samples on `[0, 1/2]`.
    pub fn table(&self) -> (&[f64], &[f64]) {
        (&self.radii, &self.values)
    }

    /// d-dimensional integral of the table's profile, recomputed by
    /// Gauss-Legendre quadrature of the analytic profile.
    pub fn mass(&self) -> f64 {
        let d = self.dimension;
        sphere_surface(d)
            * integrate_gl(
                |r| self.eval(r) * r.powi(d as i32 - 1),
                0.0,
                0.5,
                256,
            )
    }
}

/// Build the mollifier for `spec`. The normalizing constant comes from
/// adaptive Simpson quadrature of the profile; an independent
/// Gauss-Legendre evaluation must confirm unit mass to 1e-8 relative or
/// the build reports a resolution error.
pub fn build_mollifier(spec: &MollifierSpec) -> Result<Mollifier> {
    let d = spec.dimension;
    let base = adaptive_simpson(
        &|r: f64| bump(r) * r.powi(d as i32 - 1),
        0.0,
        0.5,
        1e-14,
        48,
    )?;
    let normalizer = 1.0 / (sphere_surface(d) * base);

    let n = spec.points_per_unit / 2;
    let dr = 1.0 / spec.points_per_unit as f64;
    let radii: Vec<f64> = (0..=n).map(|k| k as f64 * dr).collect();
    let values: Vec<f64> = radii.iter().map(|&r| normalizer * bump(r)).collect();

    let moll = Mollifier {
        dimension: d,
        normalizer,
        radii,
        values,
    };

    let check = moll.mass();
    if (check - 1.0).abs() > 1e-8 {
        return Err(Error::Resolution(format!(
            "mollifier mass check failed: got {check:.12}, expected 1"
        )));
    }
    Ok(moll)
}

/// Radial table of `V = phi * phi` on `[0, 1]`, with `V(r) = 0` enforced
/// exactly for `r >= 1`. Immutable after construction and freely shared
/// across threads.
#[derive(Clone, Debug)]
pub struct CovarianceKernel {
    dimension: u32,
    /// Uniform grid spacing of the table.
    dr: f64,
    values: Vec<f64>,
    v0: f64,
    integral: f64,
}

impl CovarianceKernel {
    /// Numerical convolution of the mollifier with itself, using the
    /// two-variable radial quadrature (distance x angle) with `nodes`
    /// Gauss-Legendre points per variable.
    pub fn from_mollifier(moll: &Mollifier, nodes: usize) -> Result<Self> {
        let d = moll.dimension();
        let n_r = moll.radii.len() * 2 - 2; // points per unit radius
        let dr = 1.0 / n_r as f64;

        let (r_nodes, r_weights) = gauss_legendre_on(nodes, 0.0, 0.5);
        let (u_nodes, u_weights) = gauss_legendre_on(nodes, -1.0, 1.0);
        // Angular measure (1 - u^2)^{(d-3)/2} and the (d-2)-sphere factor.
        let ang_pow = (d as f64 - 3.0) / 2.0;
        let s_ang = if d == 3 {
            2.0 * std::f64::consts::PI
        } else {
            sphere_surface(d - 1)
        };
        let u_terms: Vec<(f64, f64)> = u_nodes
            .iter()
            .zip(&u_weights)
            .map(|(&u, &w)| {
                let meas = if d == 3 {
                    1.0
                } else {
                    (1.0 - u * u).max(0.0).powf(ang_pow)
                };
                (u, w * meas)
            })
            .collect();
        let r_terms: Vec<(f64, f64)> = r_nodes
            .iter()
            .zip(&r_weights)
            .map(|(&r, &w)| (r, w * moll.eval(r) * r.powi(d as i32 - 1)))
            .collect();

        let eval_v = |s: f64| -> f64 {
            if s >= 1.0 {
                return 0.0;
            }
            let mut total = 0.0;
            for &(r, wr) in &r_terms {
                if wr == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for &(u, wu) in &u_terms {
                    let t2 = s * s + r * r - 2.0 * s * r * u;
                    inner += wu * moll.eval(t2.max(0.0).sqrt());
                }
                total += wr * inner;
            }
            s_ang * total
        };

        use rayon::prelude::*;
        let values: Vec<f64> = (0..=n_r)
            .into_par_iter()
            .map(|k| eval_v(k as f64 * dr))
            .collect();

        // Normalization check on fresh quadrature values, not the table.
        let (chk_nodes, chk_weights) = gauss_legendre_on(128, 0.0, 1.0);
        let integral: f64 = sphere_surface(d)
            * chk_nodes
                .iter()
                .zip(&chk_weights)
                .map(|(&s, &w)| w * eval_v(s) * s.powi(d as i32 - 1))
                .sum::<f64>();

        Ok(CovarianceKernel {
            dimension: d,
            dr,
            v0: values[0],
            values,
            integral,
        })
    }

    /// Build straight from a spec with the default 512 x 512 quadrature.
    pub fn build(spec: &MollifierSpec) -> Result<Self> {
        let moll = build_mollifier(spec)?;
        Self::from_mollifier(&moll, 512)
    }

    /// Wrap an explicit radial table on a uniform grid over `[0, 1]`.
    /// Used by tests that need stub kernels.
    pub fn from_samples(dimension: u32, values: Vec<f64>) -> Result<Self> {
        if dimension < 3 {
            return Err(Error::Domain("dimension must be >= 3".into()));
        }
        if values.len() < 2 {
            return Err(Error::Domain("table needs at least two samples".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain("table values must be finite and >= 0".into()));
        }
        let n = values.len() - 1;
        let dr = 1.0 / n as f64;
        let d = dimension;
        let mut k = CovarianceKernel {
            dimension,
            dr,
            v0: values[0],
            values,
            integral: 0.0,
        };
        k.integral = sphere_surface(d)
            * integrate_gl(|s| k.value(s) * s.powi(d as i32 - 1), 0.0, 1.0, 256);
        Ok(k)
    }

    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    /// `V(0)`.
    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// d-dimensional integral of the tabulated kernel.
    pub fn integral(&self) -> f64 {
        self.integral
    }

    /// Support radius (always exactly 1).
    pub fn support_radius(&self) -> f64 {
        1.0
    }

    /// The radial table `(r_k, V(r_k))`.
    pub fn table(&self) -> (Vec<f64>, &[f64]) {
        let rs = (0..self.values.len())
            .map(|k| k as f64 * self.dr)
            .collect();
        (rs, &self.values)
    }

    /// Linear interpolation of the radial table; exact zero outside the
    /// unit ball. Negative radii are a caller bug in hot paths, so they
    /// are rejected only by the checked wrapper `eval`.
    #[inline(always)]
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        if r >= 1.0 {
            return 0.0;
        }
        let x = r / self.dr;
        let idx = x as usize;
        if idx + 1 >= self.values.len() {
            let last = *self.values.last().unwrap();
            // Interpolate to the exact zero at the support boundary.
            let frac = x - (self.values.len() - 1) as f64;
            return if frac > 0.0 { 0.0 } else { last };
        }
        let frac = x - idx as f64;
        self.values[idx] + frac * (self.values[idx + 1] - self.values[idx])
    }

    /// Checked evaluation per the kernel interface contract.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::Domain(format!("radius must be >= 0, got {r}")));
        }
        Ok(self.value(r))
    }
}
