use std::fs;
use std::path::Path;
use std::process::Command;

use ctxprobe::masking::ContextSchedule;
use ctxprobe::model::Checkpoint;
use ctxprobe::pipeline::{load_rscores, rscore_path, run_pipeline, run_stats_only, PipelineConfig};
use ctxprobe::simulate::{simulate_dataset, SimulatedDataset, SyntheticSpec};
use ctxprobe::{fixture, Error};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        planted_window: 5,
        n_voxels: 30,
        n_runs: 3,
        scans_per_run: 60,
        n_subjects: 3,
        schedule: ContextSchedule::custom(vec![1, 2, 5, 10]).unwrap(),
        ..SyntheticSpec::default()
    }
}

fn simulate(spec: &SyntheticSpec, dir: &Path) -> SimulatedDataset {
    simulate_dataset(spec, &fixture::default_checkpoint(0), &fixture::vocabulary(), None, dir, None).unwrap()
}

fn manifest_json(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn end_to_end_outputs_are_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let ds = simulate(&spec, &tmp.path().join("data"));
    let out = run_pipeline(&ds.config).unwrap();

    let results = fs::read_to_string(&out.results).unwrap();
    assert_eq!(results.lines().count(), 1 + spec.n_parcels());
    assert!(results.starts_with("parcel_id,mean_slope,t_stat,p_value,significant,max_context_size\n"));
    let curves = fs::read_to_string(&out.curves).unwrap();
    assert_eq!(curves.lines().count(), 1 + spec.n_parcels() * 4);
    for subject in ["00", "01", "02"] {
        for n in [1, 2, 5, 10] {
            assert!(rscore_path(&out.rscores_dir, subject, n).exists(), "{subject} {n}");
        }
    }
    let m = manifest_json(&ds.config.out);
    for stage in ["embed", "encode", "stats"] {
        assert_eq!(m["stages"][stage], "complete");
    }
    assert!(m["error"].is_null());

    // a fresh output directory and cache reproduce every byte
    let mut again = ds.config.clone();
    again.out = tmp.path().join("out2");
    again.cache_dir = Some(tmp.path().join("cache2"));
    let out2 = run_pipeline(&again).unwrap();
    assert_eq!(fs::read(&out.results).unwrap(), fs::read(&out2.results).unwrap());
    assert_eq!(fs::read(&out.curves).unwrap(), fs::read(&out2.curves).unwrap());

    // stats alone, without the model or the BOLD data
    fs::remove_file(&ds.config.checkpoint).unwrap();
    fs::remove_dir_all(ds.dir.join("bold")).unwrap();
    let before = fs::read(&out.results).unwrap();
    let stats = run_stats_only(&ds.config).unwrap();
    assert_eq!(fs::read(&stats.results).unwrap(), before);
    assert_eq!(manifest_json(&ds.config.out)["stages"]["encode"], "reused");
}

#[test]
fn noise_free_planted_voxels_are_predicted_at_the_planted_size() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        noise_sd: 0.0,
        ..small_spec()
    };
    let ds = simulate(&spec, tmp.path());
    let out = run_pipeline(&ds.config).unwrap();
    for subject in ["00", "01", "02"] {
        let (_, n, r) = load_rscores(&rscore_path(&out.rscores_dir, subject, spec.planted_window)).unwrap();
        assert_eq!(n, spec.planted_window);
        for &v in &ds.ground_truth.responsive_voxels {
            assert!(r[v] >= 0.999, "subject {subject} voxel {v}: r = {}", r[v]);
        }
    }
}

#[test]
fn short_text_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text: Vec<String> = fixture::text(50, 0);
    let err = simulate_dataset(
        &small_spec(),
        &fixture::default_checkpoint(0),
        &fixture::vocabulary(),
        Some(&text),
        tmp.path(),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("text too short")), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn failures_leave_an_incomplete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = simulate(&small_spec(), tmp.path());
    fs::write(ds.dir.join("bold/sub-02_run-01.ctxpb"), b"not a container").unwrap();
    let err = run_pipeline(&ds.config).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let m = manifest_json(&ds.config.out);
    assert!(m["error"].as_str().unwrap().contains("sub-02_run-01"), "{}", m["error"]);
    assert_ne!(m["stages"]["stats"], "complete");
    assert!(m["stages"].as_object().unwrap().values().any(|s| s == "incomplete"));
}

#[test]
fn configuration_round_trips_through_toml() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = simulate(&small_spec(), tmp.path());
    let mut c = ds.config.clone();
    c.fdr = 0.05;
    c.pca = Some(4);
    c.tr = Some(1.5);
    let path = tmp.path().join("copy.toml");
    c.save(&path).unwrap();
    assert!(!fs::read_to_string(&path).unwrap().contains(tmp.path().to_str().unwrap()));
    assert_eq!(PipelineConfig::load(&path).unwrap(), c);

    fs::write(&path, "checkpoint = 'm'\nunknown_key = 1\n").unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap_err().exit_code(), 2);
}

fn ctxprobe(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ctxprobe"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn command_line_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();

    assert_eq!(ctxprobe(&["--out", dir, "fixture"]).0, 0);
    assert!(tmp.path().join("model.ctxpw").exists());
    assert_eq!(ctxprobe(&["encode"]).0, 2);
    assert_eq!(ctxprobe(&["--jobs", "0", "fixture"]).0, 2);
    assert_eq!(ctxprobe(&["--bogus"]).0, 2);

    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap();
    let (code, err) = ctxprobe(&[
        "--out", data_s, "simulate", "--subjects", "3", "--runs", "3", "--scans", "40", "--voxels", "20",
        "--planted-window", "5",
    ]);
    assert_eq!(code, 0, "{err}");
    let config = data.join("pipeline.toml");
    let config_s = config.to_str().unwrap();
    let (code, err) = ctxprobe(&["--config", config_s, "run", "--schedule", "1,2,5,10", "--fdr", "0.2"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(ctxprobe(&["--config", config_s, "stats", "--schedule", "1,2,5,10"]).0, 0);
    assert_eq!(ctxprobe(&["--config", config_s, "plot-data", "--schedule", "1,2,5,10"]).0, 0);
    assert!(data.join("out/histogram.csv").exists());
    assert_eq!(ctxprobe(&["--config", config_s, "run", "--fdr", "1.5"]).0, 2);

    // a numeric error: a checkpoint whose forward pass overflows
    let model = data.join("model.ctxpw");
    let mut ckpt = Checkpoint::load(&model).unwrap();
    let intact = ckpt.clone();
    ckpt.lnf_gamma.iter_mut().for_each(|g| *g = f32::INFINITY);
    ckpt.layers.iter_mut().for_each(|l| l.ln1_gamma.iter_mut().for_each(|g| *g = f32::INFINITY));
    ckpt.save(&model).unwrap();
    fs::remove_dir_all(data.join("cache")).ok();
    let (code, err) = ctxprobe(&["--config", config_s, "embed", "--schedule", "1,2,5,10"]);
    assert_eq!(code, 4, "{err}");
    intact.save(&model).unwrap();

    // a data error: the runs manifest points at a missing BOLD file
    fs::remove_file(data.join("bold/sub-01_run-01.ctxpb")).unwrap();
    let (code, err) = ctxprobe(&["--config", config_s, "run", "--schedule", "1,2,5,10"]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn no_responsive_voxels_means_no_significant_parcels() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let seeds = 20;
    let mut clean = 0;
    for seed in 0..seeds {
        let spec = SyntheticSpec {
            responsive_voxel_fraction: 0.0,
            n_runs: 4,
            scans_per_run: 100,
            n_voxels: 60,
            seed,
            ..SyntheticSpec::default()
        };
        let dir = tmp.path().join(format!("s{seed}"));
        let ds = simulate_dataset(&spec, &fixture::default_checkpoint(0), &fixture::vocabulary(), None, &dir, Some(&cache))
            .unwrap();
        assert!(ds.ground_truth.responsive_voxels.is_empty());
        let out = run_pipeline(&ds.config).unwrap();
        clean += usize::from(out.context_results.iter().all(|r| !r.significant));
        fs::remove_dir_all(&dir).unwrap();
    }
    assert!(clean as f64 >= 0.95 * seeds as f64, "{clean}/{seeds} seeds without a significant parcel");
}
