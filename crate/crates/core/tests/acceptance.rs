//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero when any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use ctxprobe::encoding::ridge_fit;
use ctxprobe::fixture;
use ctxprobe::masking::{context_schedule, generate_embeddings, EmbeddingOptions, Pooling, WindowOptions};
use ctxprobe::model::AttentionMask;
use ctxprobe::pipeline::{collect_rscores, run_pipeline};
use ctxprobe::simulate::{simulate_dataset, SyntheticSpec};
use ctxprobe::stats::{bh_fdr, group_ttest, ParcelAtlas, RoiScores, Tail};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use statrs::function::beta::beta_reg;

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn out_of_window_independence() -> Outcome {
    let ckpt = tiny_checkpoint();
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let start = Instant::now();
    let trials = 1000;
    let worst = (0..trials).map(|_| out_of_window_trial(&ckpt, &mut rng)).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && elapsed <= Duration::from_secs(120),
        format!("{trials} trials, max change {worst:.2e} (limit 1e-5), {:.1}s (limit 120s)", elapsed.as_secs_f64()),
    )
}

fn causal_subsumption() -> Outcome {
    let ckpt = tiny_checkpoint();
    let vocab = tiny_vocabulary();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut checked = 0;
    // raw masks: any n >= t + 1 admits every earlier key
    for _ in 0..200 {
        let len = rng.random_range(1..=48usize);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..ckpt.config.vocab_size as u32)).collect();
        let t = rng.random_range(0..len);
        let n = rng.random_range(t + 1..=t + 20);
        let positions: Vec<usize> = (0..len).collect();
        let mask = AttentionMask::from_bools((0..len).map(|j| j + n > t && j <= t).collect()).unwrap();
        let masked = ckpt.forward(&ids, &positions, &mask).unwrap();
        let full = ckpt.forward(&ids, &positions, &AttentionMask::all_ones(len)).unwrap();
        for l in 0..=ckpt.config.n_layers {
            let (a, b) = (masked.row(l, t).unwrap(), full.row(l, t).unwrap());
            worst = a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(worst, f64::max);
        }
        checked += 1;
    }
    // embedding generation with a window covering the whole text
    for seed in 0..5 {
        let t = vocab.encode(&fixture::text(30, seed).join(" ")).unwrap();
        let positions: Vec<usize> = (0..t.token_ids.len()).collect();
        let full = ckpt.forward(&t.token_ids, &positions, &AttentionMask::all_ones(positions.len())).unwrap();
        for layer in 0..=ckpt.config.n_layers {
            let options = EmbeddingOptions { layer, pooling: Pooling::Last, window: WindowOptions::default() };
            let set = generate_embeddings(&ckpt, &t, positions.len(), &options).unwrap();
            for (w, &(_, last)) in t.word_spans.iter().enumerate() {
                let b = full.row(layer, last).unwrap();
                worst = set.row(w).iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(worst, f64::max);
                checked += 1;
            }
        }
    }
    outcome(worst <= 1e-6, format!("{checked} targets, max difference {worst:.2e} (limit 1e-6)"))
}

fn reference_parity() -> Outcome {
    let r = reference();
    let ckpt = tiny_checkpoint();
    let ids = as_u32s(&r["hidden_states"]["ids"]);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let h = ckpt.forward(&ids, &positions, &AttentionMask::all_ones(ids.len())).unwrap();
    let mut worst = 0.0f64;
    for (l, expected) in r["hidden_states"]["layers"].as_array().unwrap().iter().enumerate() {
        for (t, row) in as_matrix(expected).iter().enumerate() {
            worst = worst.max(max_abs_diff(h.row(l, t).unwrap(), row));
        }
    }
    let w = &r["windowed"];
    let text = tiny_vocabulary().encode(w["text"].as_str().unwrap()).unwrap();
    let options = EmbeddingOptions {
        layer: w["layer"].as_u64().unwrap() as usize,
        pooling: Pooling::Last,
        window: WindowOptions::default(),
    };
    let set = generate_embeddings(&ckpt, &text, w["n"].as_u64().unwrap() as usize, &options).unwrap();
    for (i, row) in as_matrix(&w["embeddings"]).iter().enumerate() {
        worst = worst.max(max_abs_diff(set.row(i), row));
    }
    let ids_match = text.token_ids == as_u32s(&w["ids"])
        && tiny_vocabulary().encode(r["tokenizer"]["text"].as_str().unwrap()).unwrap().token_ids
            == as_u32s(&r["tokenizer"]["ids"]);
    outcome(
        worst <= 1e-4 && ids_match,
        format!("max elementwise difference {worst:.2e} (limit 1e-4), token ids match: {ids_match}"),
    )
}

fn ridge_correctness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let gaussian = |rng: &mut ChaCha20Rng, r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let mut worst_residual = 0.0f64;
    for _ in 0..500 {
        let (n, d, v) = (rng.random_range(5..120), rng.random_range(1..40), rng.random_range(1..8));
        let x = gaussian(&mut rng, n, d);
        let y = gaussian(&mut rng, n, v);
        let lambda = 10f64.powf(rng.random_range(-4.0..5.0));
        let w = ridge_fit(&x, &y, lambda).unwrap();
        let xty = x.transpose() * &y;
        let mut a = x.transpose() * &x;
        for i in 0..d {
            a[(i, i)] += lambda;
        }
        worst_residual = worst_residual.max((a * w - &xty).amax() / xty.amax());
    }
    let mut worst_recovery = 0.0f64;
    for _ in 0..500 {
        let d = rng.random_range(1..16);
        let x = DMatrix::<f64>::identity(d, d) * 4.0 + gaussian(&mut rng, d, d) * 0.5;
        let w0 = gaussian(&mut rng, d, 3);
        let w = ridge_fit(&x, &(&x * &w0), 0.0).unwrap();
        worst_recovery = worst_recovery.max((w - w0).amax());
    }
    outcome(
        worst_residual <= 1e-6 && worst_recovery <= 1e-8,
        format!("relative residual {worst_residual:.2e} (limit 1e-6), lambda=0 recovery {worst_recovery:.2e} (limit 1e-8)"),
    )
}

fn bh_brute_force(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    for k in (1..=m).rev() {
        let threshold = k as f64 * q / m as f64;
        if p.iter().filter(|&&v| v <= threshold).count() >= k {
            return p.iter().map(|&v| v <= threshold).collect();
        }
    }
    vec![false; m]
}

fn bh_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let mut mismatches = 0;
    for i in 0..10_000 {
        let m = rng.random_range(1..=12);
        // every third vector draws from a coarse grid to force ties
        let p: Vec<f64> = (0..m)
            .map(|_| if i % 3 == 0 { f64::from(rng.random_range(0..=20u32)) / 20.0 } else { rng.random::<f64>() * 0.2 })
            .collect();
        let q = [0.01, 0.05, 0.1, 0.2][i % 4];
        if bh_fdr(&p, q).unwrap() != bh_brute_force(&p, q) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("10000 vectors of length 1-12, {mismatches} mismatches"))
}

fn ttest_oracle() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let (mut worst_t, mut worst_p) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(3..=60);
        let shift: f64 = rng.random_range(-1.0..1.0);
        let slopes: Vec<f64> = (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
        let mean = slopes.iter().sum::<f64>() / n as f64;
        let var = slopes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let t = mean / (var / n as f64).sqrt();
        let df = n as f64 - 1.0;
        let upper = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
        let one = if t >= 0.0 { upper } else { 1.0 - upper };
        let a = group_ttest(&slopes, Tail::One).unwrap();
        let b = group_ttest(&slopes, Tail::Two).unwrap();
        worst_t = worst_t.max((a.t_stat - t).abs() / t.abs().max(1.0));
        worst_p = worst_p.max((a.p_value - one).abs()).max((b.p_value - (2.0 * upper).min(1.0)).abs());
    }
    outcome(
        worst_t <= 1e-6 && worst_p <= 1e-6,
        format!("1000 samples, t difference {worst_t:.2e}, p difference {worst_p:.2e} (limit 1e-6)"),
    )
}

struct SeedResult {
    detection: bool,
    sizes_ok: bool,
    planted_hits: usize,
    false_positives: usize,
    max_sizes: Vec<Option<usize>>,
    peak: usize,
}

/// Mean ROI curve over subjects and planted parcels; returns its argmax size.
fn planted_peak(out: &Path, atlas: &Path, planted: &[String], spec: &SyntheticSpec) -> usize {
    let (subjects, maps) = collect_rscores(out, &spec.schedule).unwrap();
    let atlas = ParcelAtlas::load(atlas).unwrap();
    let roi = RoiScores::from_maps(&atlas, subjects, spec.schedule.sizes().to_vec(), &maps).unwrap();
    let mut curve = vec![0.0; roi.sizes.len()];
    for (p, id) in roi.parcels.iter().enumerate() {
        if planted.contains(id) {
            for subject in &roi.scores {
                for (acc, row) in curve.iter_mut().zip(subject) {
                    *acc += row[p];
                }
            }
        }
    }
    let best = (0..curve.len()).max_by(|&a, &b| curve[a].total_cmp(&curve[b])).unwrap();
    roi.sizes[best]
}

fn recover(spec: &SyntheticSpec, dir: &Path, cache: &Path) -> SeedResult {
    let ds = simulate_dataset(spec, &fixture::default_checkpoint(0), &fixture::vocabulary(), None, dir, Some(cache)).unwrap();
    let out = run_pipeline(&ds.config).unwrap();
    let planted = &ds.ground_truth.planted_parcels;
    let step = spec.schedule.position(spec.planted_window).unwrap() as isize;
    let mut result = SeedResult {
        detection: true,
        sizes_ok: true,
        planted_hits: 0,
        false_positives: 0,
        max_sizes: Vec::new(),
        peak: planted_peak(&out.rscores_dir, &ds.config.atlas, planted, spec),
    };
    for r in &out.context_results {
        if planted.contains(&r.parcel_id) {
            result.planted_hits += usize::from(r.significant);
            result.detection &= r.significant;
            result.max_sizes.push(r.max_context_size);
            let near = r
                .max_context_size
                .and_then(|m| spec.schedule.position(m))
                .is_some_and(|k| (k as isize - step).abs() <= 1);
            result.sizes_ok &= near;
        } else if r.significant {
            result.false_positives += 1;
            result.detection = false;
        }
    }
    result
}

fn synthetic_recovery(root: &Path) -> Outcome {
    let start = Instant::now();
    let cache = root.join("cache");
    let seeds = 20;
    let mut pass = true;
    let mut lines = Vec::new();
    for planted_window in [4, 10, 20] {
        let (mut detected, mut sized) = (0, 0);
        let (mut hits, mut planted_total, mut false_pos) = (0, 0, 0);
        let mut sizes: std::collections::BTreeMap<String, usize> = Default::default();
        let mut peaks: std::collections::BTreeMap<usize, usize> = Default::default();
        for seed in 0..seeds {
            let spec = SyntheticSpec { planted_window, seed, ..SyntheticSpec::default() };
            let dir = root.join(format!("w{planted_window}-s{seed}"));
            let r = recover(&spec, &dir, &cache);
            fs::remove_dir_all(&dir).unwrap();
            detected += usize::from(r.detection);
            sized += usize::from(r.sizes_ok);
            hits += r.planted_hits;
            planted_total += r.max_sizes.len();
            false_pos += r.false_positives;
            for m in r.max_sizes {
                *sizes.entry(m.map_or("none".into(), |m| m.to_string())).or_default() += 1;
            }
            *peaks.entry(r.peak).or_default() += 1;
        }
        let detection_rate = detected as f64 / seeds as f64;
        let size_rate = sized as f64 / seeds as f64;
        pass &= detection_rate >= 0.95 && size_rate >= 0.80;
        lines.push(format!(
            "w*={planted_window}: detection {detected}/{seeds} (need 95%), size within one step {sized}/{seeds} (need 80%); \
             planted significant {hits}/{planted_total}, false positives {false_pos}; \
             returned sizes {sizes:?}; mean-curve argmax {peaks:?}"
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= Duration::from_secs(15 * 60);
    lines.push(format!("runtime {:.0}s (limit 900s)", elapsed.as_secs_f64()));
    outcome(pass, lines.join("\n       "))
}

fn determinism(root: &Path) -> Outcome {
    let spec = SyntheticSpec { seed: 3, ..SyntheticSpec::default() };
    let run = |name: &str| {
        let dir = root.join(name);
        let cache = dir.join("cache");
        let ds = simulate_dataset(&spec, &fixture::default_checkpoint(0), &fixture::vocabulary(), None, &dir, Some(&cache)).unwrap();
        fs::read(run_pipeline(&ds.config).unwrap().results).unwrap()
    };
    let (a, b) = (run("first"), run("second"));
    outcome(a == b, format!("results.csv of two independent runs: {} bytes, identical: {}", a.len(), a == b))
}

fn schedule_contract() -> Outcome {
    let s = context_schedule();
    let sizes = s.sizes();
    let increasing = sizes.windows(2).all(|w| w[0] < w[1]);
    outcome(
        sizes.len() == 21 && sizes[0] == 1 && s.max() == 45 && increasing,
        format!("{} sizes from {} to {}: {sizes:?}", sizes.len(), sizes[0], s.max()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("schedule contract", Box::new(schedule_contract)),
        ("out-of-window independence", Box::new(out_of_window_independence)),
        ("causal subsumption", Box::new(causal_subsumption)),
        ("reference parity", Box::new(reference_parity)),
        ("ridge correctness", Box::new(ridge_correctness)),
        ("BH-FDR equivalence", Box::new(bh_equivalence)),
        ("t-test oracle", Box::new(ttest_oracle)),
        ("determinism", Box::new(|| determinism(&tmp.path().join("determinism")))),
        ("synthetic recovery", Box::new(|| synthetic_recovery(&tmp.path().join("recovery")))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {failed} of 9 criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
