//! Simulate a dataset with a planted context window, run every stage and
//! report what the statistics recover.
//!
//!     cargo run --release --example synthetic_end_to_end -- /tmp/ctx-demo

use std::path::PathBuf;

use ctxprobe::fixture;
use ctxprobe::pipeline::run_pipeline;
use ctxprobe::simulate::{simulate_dataset, SyntheticSpec};

fn main() -> ctxprobe::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctxprobe-demo"));
    let spec = SyntheticSpec { planted_window: 10, n_subjects: 6, n_runs: 4, scans_per_run: 200, ..SyntheticSpec::default() };
    let ds = simulate_dataset(&spec, &fixture::default_checkpoint(0), &fixture::vocabulary(), None, &dir, None)?;
    println!("dataset in {}", ds.dir.display());
    println!("planted parcels {:?}", ds.ground_truth.planted_parcels);
    let out = run_pipeline(&ds.config)?;
    for r in &out.context_results {
        let planted = ds.ground_truth.planted_parcels.contains(&r.parcel_id);
        println!(
            "parcel {:>2} planted {:<5} slope {:+.2e} p {:.2e} significant {}",
            r.parcel_id, planted, r.mean_slope, r.p_value, r.significant
        );
    }
    // where the planted parcels' mean centred curve peaks
    let curves = std::fs::read_to_string(&out.curves).map_err(|e| ctxprobe::Error::io(&out.curves, e))?;
    let mut by_size: Vec<(usize, f64)> = Vec::new();
    for line in curves.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if ds.ground_truth.planted_parcels.iter().any(|p| p == f[0]) {
            let (size, score): (usize, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            match by_size.iter_mut().find(|(s, _)| *s == size) {
                Some((_, acc)) => *acc += score,
                None => by_size.push((size, score)),
            }
        }
    }
    if let Some((peak, _)) = by_size.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
        println!("planted curves peak at n={peak} (planted window {})", spec.planted_window);
    }
    println!("results in {}", out.results.display());
    Ok(())
}
