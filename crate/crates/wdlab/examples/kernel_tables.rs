//! Build the mollifier and its self-convolution and print the radial
//! tables' key values.
//!
//! Run with: cargo run --release --example kernel_tables

use wdlab::kernel::{build_mollifier, CovarianceKernel, MollifierSpec};

fn main() -> wdlab::Result<()> {
    let spec = MollifierSpec::new(3, 256)?;
    let moll = build_mollifier(&spec)?;
    let kernel = CovarianceKernel::from_mollifier(&moll, 512)?;

    println!("mollifier: d = 3, {} points per unit radius", 256);
    println!("  normalizer  c_d   = {:.8}", moll.normalizer());
    println!("  peak        phi(0) = {:.8}", moll.eval(0.0));
    println!("  unit mass   int phi = {:.12}", moll.mass());
    println!();
    println!("covariance kernel V = phi * phi:");
    println!("  V(0)       = {:.8}", kernel.v0());
    println!("  int V      = {:.12}", kernel.integral());
    println!("  support    = [0, {}]", kernel.support_radius());
    for r in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0, 1.5] {
        println!("  V({r:4.2})    = {:.8}", kernel.eval(r)?);
    }
    Ok(())
}
