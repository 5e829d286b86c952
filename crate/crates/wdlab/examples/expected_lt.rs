//! The compensated endpoint statistic E[L_T]: bridge importance sampling
//! for the rescaled endpoint overlap against the bracket constant.
//!
//! Run with: cargo run --release --example expected_lt

use wdlab::constants::{beta0_bound, green_mass, sigma2};
use wdlab::kernel::{CovarianceKernel, MollifierSpec};
use wdlab::oracle::expected_lt;

fn main() -> wdlab::Result<()> {
    let kernel = CovarianceKernel::build(&MollifierSpec::new(3, 256)?)?;
    let beta = 0.5 * beta0_bound(green_mass(&kernel)?);
    let c3 = sigma2(&kernel, beta, 4_000, 50.0, 1.0 / 64.0, 31)?.c3.value;
    println!("bracket constant c3 = {c3:.6} at beta = {beta:.4}");

    for horizon in [8.0, 16.0, 32.0, 64.0] {
        let est = expected_lt(&kernel, beta, horizon, c3, 8_000, 1.0 / 64.0, 32, true)?;
        println!(
            "  T = {horizon:4}: E[L_T] = {:+.4e} +- {:.1e}  (endpoint term {:.5}, ess {:.0})",
            est.difference.value,
            est.difference.std_error,
            est.endpoint_term.value,
            est.endpoint_term.ess.unwrap_or(0.0)
        );
    }
    println!("the doubled-compensator control shows what a wrong constant looks like:");
    let est = expected_lt(&kernel, beta, 64.0, c3, 8_000, 1.0 / 64.0, 33, true)?;
    let control = est.endpoint_term.value - 2.0 * est.compensator_term.value;
    println!(
        "  T =   64: endpoint - 2 c3 compensator = {control:+.4e} (rejected at {:.0} SE)",
        control.abs() / est.difference.std_error
    );
    Ok(())
}
