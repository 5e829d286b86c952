//! Covariance of the limit partition function across separations: the
//! products |x|^{d-2} Cov should agree for every |x| >= 1.
//!
//! Run with: cargo run --release --example covariance_decay

use wdlab::constants::{beta0_bound, green_mass};
use wdlab::kernel::{CovarianceKernel, MollifierSpec};
use wdlab::oracle::covariance_minf_batch;

fn main() -> wdlab::Result<()> {
    let kernel = CovarianceKernel::build(&MollifierSpec::new(3, 256)?)?;
    let beta = 0.5 * beta0_bound(green_mass(&kernel)?);

    let xs: Vec<Vec<f64>> = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
        .iter()
        .map(|r| vec![*r, 0.0, 0.0])
        .collect();
    let ests = covariance_minf_batch(&kernel, beta, &xs, 20_000, 50.0, 1.0 / 64.0, 11);

    println!("Cov(M_inf(0), M_inf(x)) at beta = {beta:.4}:");
    for est in &ests {
        match est.rescaled {
            Some(p) => println!(
                "  |x| = {:3.1}: cov = {:.5} +- {:.1e}   |x|^(d-2) cov = {:.5}",
                est.x_norm, est.estimate.value, est.estimate.std_error, p
            ),
            None => println!(
                "  |x| = {:3.1}: cov = {:.5} +- {:.1e}   (inside kernel support)",
                est.x_norm, est.estimate.value, est.estimate.std_error
            ),
        }
    }
    Ok(())
}
