//! Recomputes the `gp.rkhs_bounds` entries of a configuration.
//!
//! A dense sample of the mismatch is drawn from the excitation run, the
//! RKHS norm of its regularized interpolant `sqrt(yᵀ (K + σ² I)⁻¹ y)` is
//! taken per output, and the result is scaled by a safety factor.
//!
//! ```text
//! cargo run --release -p singcbf --example rkhs_oracle -- [config.toml] [dense_size] [seed] [factor]
//! ```

use std::path::Path;

use anyhow::Result;
use singcbf::pipeline::Stack;
use singcbf::RunConfig;
use singcbf_core::gp::estimate_rkhs_bounds;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first().filter(|a| a.as_str() != "-") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::reference(),
    };
    let dense_size: usize = args.get(1).map_or(Ok(1000), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(99), |s| s.parse())?;
    let factor: f64 = args.get(3).map_or(Ok(2.0), |s| s.parse())?;

    let stack = Stack::new(config.clone());
    let dense = stack.full_dataset()?.subsample(dense_size, seed)?;
    let bounds = estimate_rkhs_bounds(&dense, &config.kernels(), factor)?;
    println!("dense_size = {dense_size}, seed = {seed}, factor = {factor}");
    println!("rkhs_bounds = {bounds:?}");
    println!("configured  = {:?}", config.gp.rkhs_bounds);
    Ok(())
}
