//! HRF-convolved design and nested leave-one-run-out ridge on a toy
//! response driven by two of eight features.
//!
//!     cargo run --example encoding_model

use ctxprobe::encoding::{build_design, cross_validated_r, default_lambda_grid, hrf, ScanReference};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn main() -> ctxprobe::Result<()> {
    let peak = (0..=3200).map(|k| k as f64 / 100.0).max_by(|a, b| hrf(*a).unwrap().total_cmp(&hrf(*b).unwrap()));
    println!("hrf peak at {:.2}s, value at 30s {:.4}", peak.unwrap_or(0.0), hrf(30.0)?);

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let (tr, scans, words, d) = (2.0, 150, 600, 8);
    let mut runs = Vec::new();
    for _ in 0..4 {
        let features = DMatrix::<f64>::from_fn(words, d, |_, _| rng.sample(StandardNormal));
        let offsets: Vec<f64> = (0..words).map(|i| 1.0 + i as f64 * 0.45).collect();
        let x = build_design(&features, &offsets, tr, scans, ScanReference::default())?;
        let signal = x.column(0) * 1.0 - x.column(3) * 0.5;
        let y = DMatrix::<f64>::from_fn(scans, 3, |k, v| match v {
            0 => signal[k] + 0.3 * rng.sample::<f64, _>(StandardNormal),
            1 => signal[k] + 2.0 * rng.sample::<f64, _>(StandardNormal),
            _ => rng.sample(StandardNormal),
        });
        runs.push((x, y));
    }
    let map = cross_validated_r(&runs, &default_lambda_grid())?;
    for (v, label) in ["low noise", "high noise", "pure noise"].iter().enumerate() {
        println!("{label:<10} r = {:.3} (pooled {:.3})", map.r[v], map.pooled_r[v]);
    }
    for f in &map.folds {
        println!("held-out run {} lambda {:.3}", f.held_out_run, f.lambda);
    }
    Ok(())
}
