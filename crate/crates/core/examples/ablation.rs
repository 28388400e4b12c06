//! Runs every method variant over a few seeds and prints Avg/Last per
//! variant, the gap after the final task and the subspace coverage.
//!
//!     cargo run --release --example ablation -- [config.toml] [seeds...]

use mgclip::protocol::{render_report, run_seeds, MethodVariant, PretrainCache, RunConfig};

fn main() -> mgclip::Result<()> {
    let mut base = RunConfig::default();
    let mut seeds = Vec::new();
    for arg in std::env::args().skip(1) {
        match arg.parse::<u64>() {
            Ok(seed) => seeds.push(seed),
            Err(_) => base = RunConfig::load(&arg)?,
        }
    }
    if seeds.is_empty() {
        seeds = vec![7, 8, 9];
    }
    let mut cache = PretrainCache::new();
    let mut results = Vec::new();
    for method in MethodVariant::ALL {
        let cfg = RunConfig { method, ..base.clone() };
        results.extend(run_seeds(&cfg, &seeds, &mut cache)?.results);
    }
    print!("{}", render_report(&results));
    Ok(())
}
