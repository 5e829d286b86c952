//! Convergence rate of M_T to its limit in L^2: the distance decays as
//! T^{-(d-2)/2}, and the rescaled curve flattens onto the scaling
//! constant.
//!
//! Run with: cargo run --release --example l2_rate

use wdlab::constants::{beta0_bound, green_mass};
use wdlab::kernel::{CovarianceKernel, MollifierSpec};
use wdlab::oracle::{l2_distance_curve, CovarianceProfile};
use wdlab::stats::fit_power_slope;

fn main() -> wdlab::Result<()> {
    let kernel = CovarianceKernel::build(&MollifierSpec::new(3, 256)?)?;
    let beta = 0.5 * beta0_bound(green_mass(&kernel)?);
    let (n, t_cut, dt) = (20_000, 50.0, 1.0 / 64.0);

    let profile = CovarianceProfile::build(&kernel, beta, n, t_cut, dt, 21)?;
    println!(
        "covariance profile: c1_hat = {:.5} +- {:.1e}",
        profile.c1_hat, profile.c1_hat_std_error
    );

    let horizons = [4.0, 8.0, 16.0, 32.0, 64.0];
    let curve = l2_distance_curve(&kernel, beta, &profile, &horizons, n, dt, 22)?;
    println!("||M_inf - M_T||_2^2 at beta = {beta:.4}:");
    for p in &curve {
        println!(
            "  T = {:4}: {:.5e} +- {:.1e}   sqrt(T) * value = {:.5e}",
            p.horizon, p.estimate.value, p.estimate.std_error, p.rescaled
        );
    }
    let pairs: Vec<(f64, f64)> = curve.iter().map(|p| (p.horizon, p.estimate.value)).collect();
    let fit = fit_power_slope(&pairs)?;
    println!(
        "log-log slope = {:.4} (theory: -(d-2)/2 = -0.5), rms residual {:.1e}",
        fit.slope, fit.rms_residual
    );
    Ok(())
}
