use ctxprobe::encoding::{
    build_design, convolve, cross_validated_r, default_lambda_grid, hrf, pearson_r, ridge_fit,
    zscore_columns, ScanReference,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[test]
fn hrf_peak_and_undershoot_on_a_dense_grid() {
    let grid: Vec<f64> = (0..=32_000).map(|k| k as f64 * 1e-3).collect();
    let values: Vec<f64> = grid.iter().map(|&t| hrf(t).unwrap()).collect();
    let argmax = (0..grid.len()).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    assert!((grid[argmax] - 5.0).abs() <= 0.2, "peak at {}", grid[argmax]);
    let at30 = hrf(30.0).unwrap();
    assert!(at30 < 0.0 && at30.abs() < 0.05, "{at30}");
}

#[test]
fn two_words_superpose_their_shifted_responses() {
    let features = DMatrix::from_element(2, 1, 1.0);
    let offsets = [3.2, 11.7];
    let (tr, n_scans) = (2.0, 30);
    for scan_ref in [ScanReference::Start, ScanReference::End, ScanReference::Middle] {
        let x = convolve(&features, &offsets, tr, n_scans, scan_ref).unwrap();
        for k in 0..n_scans {
            let t = scan_ref.time(k, tr);
            let expected: f64 = offsets
                .iter()
                .map(|&o| if t >= o { hrf(t - o).unwrap() } else { 0.0 })
                .sum();
            assert!((x[(k, 0)] - expected).abs() < 1e-12, "scan {k}");
        }
    }
}

#[test]
fn design_is_linear_then_scale_free_after_zscoring() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let emb = gaussian(&mut rng, 40, 3);
    let offsets: Vec<f64> = (0..40).map(|i| 0.5 + i as f64 * 0.9).collect();
    let base = convolve(&emb, &offsets, 1.5, 30, ScanReference::End).unwrap();
    for alpha in [0.01, 2.5, 1e3] {
        let scaled = convolve(&(&emb * alpha), &offsets, 1.5, 30, ScanReference::End).unwrap();
        assert!((&scaled - &base * alpha).amax() <= 1e-12 * alpha * base.amax());
        let a = build_design(&emb, &offsets, 1.5, 30, ScanReference::End).unwrap();
        let b = build_design(&(&emb * alpha), &offsets, 1.5, 30, ScanReference::End).unwrap();
        assert!((a - b).amax() < 1e-9);
    }
}

#[test]
fn pinned_three_by_two_system_matches_the_hand_solution() {
    let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
    // (XᵀX + I) = [[36, 44], [44, 57]], Xᵀy = [22, 28], det = 116
    let w = ridge_fit(&x, &y, 1.0).unwrap();
    assert!((w[0] - 22.0 / 116.0).abs() < 1e-12);
    assert!((w[1] - 40.0 / 116.0).abs() < 1e-12);
}

#[test]
fn ridge_solutions_satisfy_the_normal_equations() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (n, d, v) = (rng.random_range(5..80), rng.random_range(1..20), rng.random_range(1..6));
        let x = gaussian(&mut rng, n, d);
        let y = gaussian(&mut rng, n, v);
        let lambda = 10f64.powf(rng.random_range(-3.0..4.0));
        let w = ridge_fit(&x, &y, lambda).unwrap();
        let xty = x.transpose() * &y;
        let mut a = x.transpose() * &x;
        for i in 0..d {
            a[(i, i)] += lambda;
        }
        let residual = (a * w - &xty).amax();
        assert!(residual <= 1e-6 * xty.amax(), "{residual}");
    }
}

#[test]
fn zero_penalty_interpolates_invertible_systems() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for _ in 0..50 {
        let d = rng.random_range(1..10);
        let x = DMatrix::<f64>::identity(d, d) * 4.0 + gaussian(&mut rng, d, d) * 0.5;
        let w0 = gaussian(&mut rng, d, 3);
        let w = ridge_fit(&x, &(&x * &w0), 0.0).unwrap();
        assert!((w - w0).amax() <= 1e-8);
    }
}

#[test]
fn pearson_reference_values() {
    let a = [1.0, 2.0, 3.0];
    assert!((pearson_r(&a, &[2.0, 4.0, 7.0]).unwrap() - 0.9934).abs() < 1e-3);
    assert_eq!(pearson_r(&a, &a).unwrap(), 1.0);
    assert_eq!(pearson_r(&a, &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
    assert_eq!(pearson_r(&a, &[5.0; 3]).unwrap(), 0.0);
}

/// Nested leave-one-run-out written out directly: explicit fits, explicit
/// predictions, explicit correlations.
type Run = (DMatrix<f64>, DMatrix<f64>);

fn naive_cv(runs: &[Run], grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let stack = |idx: &[usize], pick: fn(&Run) -> &DMatrix<f64>| {
        let parts: Vec<&DMatrix<f64>> = idx.iter().map(|&i| pick(&runs[i])).collect();
        let rows: usize = parts.iter().map(|m| m.nrows()).sum();
        let mut out = DMatrix::zeros(rows, parts[0].ncols());
        let mut at = 0;
        for m in parts {
            out.rows_mut(at, m.nrows()).copy_from(m);
            at += m.nrows();
        }
        out
    };
    let score = |train: &[usize], test: usize, lambda: f64| -> Vec<f64> {
        let w = ridge_fit(&stack(train, |r| &r.0), &stack(train, |r| &r.1), lambda).unwrap();
        let pred = &runs[test].0 * w;
        (0..pred.ncols())
            .map(|v| pearson_r(pred.column(v).as_slice(), runs[test].1.column(v).as_slice()).unwrap())
            .collect()
    };
    let v = runs[0].1.ncols();
    let mut r = vec![0.0; v];
    let mut lambdas = Vec::new();
    for outer in 0..runs.len() {
        let train: Vec<usize> = (0..runs.len()).filter(|&i| i != outer).collect();
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for &lambda in grid {
            let mut total = 0.0;
            for &inner in &train {
                let fit: Vec<usize> = train.iter().copied().filter(|&i| i != inner).collect();
                total += score(&fit, inner, lambda).iter().sum::<f64>() / v as f64;
            }
            let mean = total / train.len() as f64;
            if mean > best.0 {
                best = (mean, lambda);
            }
        }
        lambdas.push(best.1);
        for (acc, s) in r.iter_mut().zip(score(&train, outer, best.1)) {
            *acc += s / runs.len() as f64;
        }
    }
    (r, lambdas)
}

fn synthetic_runs(rng: &mut ChaCha20Rng, n_runs: usize, scans: usize, d: usize, v: usize, noise: f64) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let w = gaussian(rng, d, v);
    (0..n_runs)
        .map(|_| {
            let mut x = gaussian(rng, scans, d);
            zscore_columns(&mut x);
            let y = &x * &w + gaussian(rng, scans, v) * noise;
            (x, y)
        })
        .collect()
}

#[test]
fn cross_validation_matches_the_naive_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    for noise in [0.5, 3.0, 20.0] {
        let runs = synthetic_runs(&mut rng, 4, 25, 5, 6, noise);
        let grid = default_lambda_grid();
        let fast = cross_validated_r(&runs, &grid).unwrap();
        let (r, lambdas) = naive_cv(&runs, &grid);
        for (a, b) in fast.r.iter().zip(&r) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(fast.folds.iter().map(|f| f.lambda).collect::<Vec<_>>(), lambdas);
        let mut held: Vec<usize> = fast.folds.iter().map(|f| f.held_out_run).collect();
        held.sort();
        assert_eq!(held, (0..4).collect::<Vec<_>>());
    }
}

#[test]
fn noise_free_targets_are_predicted_perfectly() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let runs = synthetic_runs(&mut rng, 5, 60, 8, 10, 0.0);
    let map = cross_validated_r(&runs, &default_lambda_grid()).unwrap();
    assert!(map.r.iter().all(|&r| r >= 0.999), "{:?}", map.r);
}

#[test]
fn pure_noise_targets_average_to_zero_correlation() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let runs: Vec<_> = (0..4)
        .map(|_| {
            let mut x = gaussian(&mut rng, 200, 8);
            zscore_columns(&mut x);
            (x, gaussian(&mut rng, 200, 200))
        })
        .collect();
    let map = cross_validated_r(&runs, &default_lambda_grid()).unwrap();
    let mean = map.r.iter().sum::<f64>() / map.r.len() as f64;
    assert!(mean.abs() <= 0.05, "{mean}");
}

#[test]
fn scores_are_invariant_to_affine_rescaling_of_each_voxel() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let runs = synthetic_runs(&mut rng, 4, 40, 6, 5, 2.0);
    let base = cross_validated_r(&runs, &default_lambda_grid()).unwrap();
    let scale: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(0.01..100.0), rng.random_range(-500.0..500.0))).collect();
    let rescaled: Vec<_> = runs
        .iter()
        .map(|(x, y)| {
            let mut y = y.clone();
            for (v, &(c, d)) in scale.iter().enumerate() {
                y.column_mut(v).apply(|b| *b = c * *b + d);
            }
            (x.clone(), y)
        })
        .collect();
    let other = cross_validated_r(&rescaled, &default_lambda_grid()).unwrap();
    for (a, b) in base.r.iter().zip(&other.r) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn constant_voxel_scores_zero() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut runs = synthetic_runs(&mut rng, 3, 30, 4, 2, 1.0);
    for (_, y) in &mut runs {
        y.column_mut(1).fill(3.0);
    }
    let map = cross_validated_r(&runs, &default_lambda_grid()).unwrap();
    assert_eq!(map.r[1], 0.0);
    assert_eq!(map.pooled_r[1], 0.0);
}
