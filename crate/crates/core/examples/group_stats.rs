//! From per-subject ROI curves to slopes, a one-sided group t-test, FDR
//! control and the maximal context size of each parcel.
//!
//!     cargo run --example group_stats

use ctxprobe::stats::{analyze, AnalysisOptions, Parcel, ParcelAtlas, RoiScores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn main() -> ctxprobe::Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let sizes = ctxprobe::masking::context_schedule().sizes().to_vec();
    // saturating curves that level off at different sizes, plus one flat parcel
    let knees = [3.0, 8.0, 20.0, f64::NAN];
    let parcels: Vec<String> = ["short", "medium", "long", "flat"].iter().map(|s| s.to_string()).collect();
    let subjects: Vec<String> = (0..12).map(|s| format!("{s:02}")).collect();
    let scores = subjects
        .iter()
        .map(|_| {
            let offset: f64 = rng.random_range(0.0..0.1);
            sizes
                .iter()
                .map(|&n| {
                    knees
                        .iter()
                        .map(|&k| {
                            let rise = if k.is_nan() { 0.0 } else { 0.05 * (1.0 - (-(n as f64) / k).exp()) };
                            offset + rise + 0.004 * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let roi = RoiScores { subjects, sizes, parcels: parcels.clone(), scores };
    let atlas = ParcelAtlas {
        parcels: parcels
            .iter()
            .enumerate()
            .map(|(i, id)| Parcel { id: id.clone(), loadings: vec![(i, 1.0)], hemisphere: None })
            .collect(),
    };
    for r in analyze(&roi, &atlas, AnalysisOptions::default())? {
        println!(
            "{:<6} slope {:+.2e} t {:>7.2} p {:.2e} significant {:<5} max context {}",
            r.parcel_id,
            r.mean_slope,
            r.t_stat,
            r.p_value,
            r.significant,
            r.max_context_size.map_or("-".into(), |m| m.to_string())
        );
    }
    Ok(())
}
