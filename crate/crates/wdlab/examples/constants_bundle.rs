//! Evaluate the closed-form constants of the weak-disorder theory at
//! half the weak-disorder bound and print the bundle.
//!
//! Run with: cargo run --release --example constants_bundle

use wdlab::constants::{BetaRequest, ConstantsBundle, ConstantsOptions};
use wdlab::kernel::{CovarianceKernel, MollifierSpec};

fn main() -> wdlab::Result<()> {
    let kernel = CovarianceKernel::build(&MollifierSpec::new(3, 256)?)?;
    // Demo-scale sampling; the shipped experiments use t_cut = 200 and
    // more paths.
    let opts = ConstantsOptions {
        n_samples: 4_000,
        t_cut: 50.0,
        dt: 1.0 / 64.0,
        seed: 7,
        with_green_mc: true,
    };
    let bundle = ConstantsBundle::compute(&kernel, 256, BetaRequest::FractionOfBound(0.5), &opts)?;

    println!("constants bundle (hash {}):", bundle.hash());
    println!("  green mass   = {:.6}", bundle.green_mass);
    println!(
        "  green MC     = {:.6} +- {:.1e} (t_cut = {})",
        bundle.meta.green_mass_mc.unwrap(),
        bundle.meta.green_mass_mc_std_error.unwrap(),
        opts.t_cut
    );
    println!("  beta0 bound  = {:.6}", bundle.beta0_bound);
    println!("  beta         = {:.6}", bundle.beta);
    println!(
        "  sigma^2      = {:.6} +- {:.1e}",
        bundle.sigma2, bundle.meta.sigma2_std_error
    );
    println!(
        "  c3           = {:.6} (direct route {:.6})",
        bundle.c3, bundle.meta.c3_direct
    );
    println!("  c2           = {:.6}", bundle.c2);
    println!(
        "  tail bound   = {:.2e} (occupation mass past t_cut)",
        bundle.meta.truncation_tail_bound
    );
    Ok(())
}
