//! Synthetic datasets with a planted context window.
//!
//! Responsive voxels read out a random linear combination of the
//! HRF-convolved embeddings at the planted context size; everything else is
//! Gaussian noise. The word layout depends only on `text_seed`, so datasets
//! that differ only in `seed` share their stimuli and embedding cache.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::annotation::{tokenize_events, write_annotations, WordEvent};
use crate::encoding::{build_design, embedding_matrix, BoldRun, ScanReference};
use crate::error::{Error, Result};
use crate::fixture;
use crate::masking::{ContextSchedule, Pooling};
use crate::model::Checkpoint;
use crate::pipeline::{embed_cached, write_manifest, PipelineConfig, RunEntry};
use crate::stats::{Parcel, ParcelAtlas};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub planted_window: usize,
    pub n_voxels: usize,
    pub n_runs: usize,
    pub scans_per_run: usize,
    pub noise_sd: f64,
    pub responsive_voxel_fraction: f64,
    pub seed: u64,
    pub n_subjects: usize,
    pub voxels_per_parcel: usize,
    pub tr: f64,
    /// Seeds the generated text and word timings.
    pub text_seed: u64,
    pub layer: usize,
    pub pooling: Pooling,
    pub schedule: ContextSchedule,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            planted_window: 10,
            n_voxels: 120,
            n_runs: 8,
            scans_per_run: 300,
            noise_sd: 0.5,
            responsive_voxel_fraction: 0.25,
            seed: 0,
            n_subjects: 12,
            voxels_per_parcel: 10,
            tr: 2.0,
            text_seed: 0,
            layer: 2,
            pooling: Pooling::Last,
            schedule: ContextSchedule::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.schedule.position(self.planted_window).is_none() {
            return cfg(format!("planted window {} is not a scheduled context size", self.planted_window));
        }
        if !(self.noise_sd >= 0.0) {
            return cfg(format!("noise_sd {} must be non-negative", self.noise_sd));
        }
        if !(0.0..=1.0).contains(&self.responsive_voxel_fraction) {
            return cfg("responsive_voxel_fraction must lie in [0, 1]".into());
        }
        if self.n_voxels == 0 || self.voxels_per_parcel == 0 || self.n_subjects == 0 {
            return cfg("voxel, parcel and subject counts must be positive".into());
        }
        if self.n_runs < 3 {
            return cfg(format!("{} runs; cross-validation needs at least 3", self.n_runs));
        }
        if self.scans_per_run < 10 || !(self.tr > 0.0) {
            return cfg("need at least 10 scans per run and a positive TR".into());
        }
        Ok(())
    }

    pub fn n_parcels(&self) -> usize {
        self.n_voxels.div_ceil(self.voxels_per_parcel)
    }

    pub fn n_planted(&self) -> usize {
        (self.responsive_voxel_fraction * self.n_parcels() as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub planted_parcels: Vec<String>,
    pub responsive_voxels: Vec<usize>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub ground_truth: GroundTruth,
}

/// Word timings for every run, drawn from the text seed.
fn layout(spec: &SyntheticSpec, words: &[String]) -> Result<Vec<Vec<WordEvent>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.text_seed);
    let duration = spec.scans_per_run as f64 * spec.tr;
    let mut runs = Vec::with_capacity(spec.n_runs);
    let mut next = 0usize;
    let mut needed = 0usize;
    for _ in 0..spec.n_runs {
        let mut events = Vec::new();
        let mut t = 1.0;
        loop {
            let len: f64 = rng.random_range(0.2..0.45);
            let gap: f64 = rng.random_range(0.02..0.12);
            if t + len > duration - 1.0 {
                break;
            }
            if let Some(w) = words.get(next) {
                events.push(WordEvent {
                    word: w.clone(),
                    onset: t,
                    offset: t + len,
                    sentence_id: None,
                });
            }
            next += 1;
            needed += 1;
            t += len + gap;
        }
        runs.push(events);
    }
    if needed > words.len() {
        return Err(Error::Data(format!(
            "text too short: the layout needs {needed} words, got {}",
            words.len()
        )));
    }
    Ok(runs)
}

/// Sentence ids from terminal punctuation, continuing from `first_id`.
fn assign_sentences(events: &mut [WordEvent], first_id: u64) -> u64 {
    let mut id = first_id;
    for e in events.iter_mut() {
        e.sentence_id = Some(id);
        if e.word.ends_with(['.', '!', '?']) {
            id += 1;
        }
    }
    if events.last().is_some_and(|e| !e.word.ends_with(['.', '!', '?'])) {
        id += 1;
    }
    id
}

fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Write a complete dataset under `dir`: model, vocabulary, word TSVs, BOLD
/// runs, atlas, runs manifest, ground truth and a ready-to-run
/// `pipeline.toml`. Without `text`, a fixture text is generated.
pub fn simulate_dataset(
    spec: &SyntheticSpec,
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    text: Option<&[String]>,
    dir: &Path,
    cache_dir: Option<&Path>,
) -> Result<SimulatedDataset> {
    spec.validate()?;
    if spec.layer > ckpt.config.n_layers {
        return Err(Error::Config(format!(
            "layer {} exceeds the model's {} layers",
            spec.layer, ckpt.config.n_layers
        )));
    }
    for sub in ["words", "bold"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let generated;
    let words = match text {
        Some(t) => t,
        None => {
            let per_run = (spec.scans_per_run as f64 * spec.tr / 0.22).ceil() as usize;
            generated = fixture::text(per_run * spec.n_runs, spec.text_seed);
            &generated
        }
    };
    let mut runs = layout(spec, words)?;

    let checkpoint = dir.join("model.ctxpw");
    ckpt.save(&checkpoint)?;
    let (vocab_path, merges_path) = (dir.join("vocab.json"), dir.join("merges.txt"));
    vocab.save(&vocab_path, &merges_path)?;

    let mut config = PipelineConfig::with_paths(
        checkpoint,
        vocab_path,
        merges_path,
        dir.join("runs.tsv"),
        dir.join("atlas.csv"),
        dir.join("out"),
    );
    config.cache_dir = Some(cache_dir.map(Path::to_owned).unwrap_or_else(|| dir.join("cache")));
    config.layer = spec.layer;
    config.pooling = spec.pooling;
    config.schedule = spec.schedule.clone();
    config.seed = spec.seed;
    let options = config.embedding_options(vocab)?;
    let cache = config.cache_dir();
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;

    // planted designs, shared by every subject
    let mut designs = Vec::with_capacity(spec.n_runs);
    let mut words_paths = Vec::with_capacity(spec.n_runs);
    let mut sentence = 0;
    for (r, events) in runs.iter_mut().enumerate() {
        sentence = assign_sentences(events, sentence);
        let tokens = tokenize_events(vocab, events)?.n_tokens();
        if tokens < spec.schedule.max() {
            return Err(Error::Data(format!(
                "text too short: run {r} holds {tokens} tokens, the largest window needs {}",
                spec.schedule.max()
            )));
        }
        let path = dir.join(format!("words/run-{r:02}.tsv"));
        write_annotations(&path, events)?;
        let hash = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(
            fs::read(&path).map_err(|e| Error::io(&path, e))?,
        ));
        let set = embed_cached(ckpt, vocab, events, &hash, spec.planted_window, &options, &cache)?;
        let offsets: Vec<f64> = events.iter().map(|e| e.offset).collect();
        let x = build_design(
            &embedding_matrix(set.n_words, set.d_model, &set.matrix),
            &offsets,
            spec.tr,
            spec.scans_per_run,
            ScanReference::default(),
        )?;
        designs.push(x);
        words_paths.push(path);
    }

    let n_planted = spec.n_planted();
    let mut atlas = ParcelAtlas::default();
    let mut responsive = vec![false; spec.n_voxels];
    let mut atlas_rng = ChaCha20Rng::seed_from_u64(spec.seed);
    atlas_rng.set_stream(u64::MAX);
    for p in 0..spec.n_parcels() {
        let voxels = p * spec.voxels_per_parcel..((p + 1) * spec.voxels_per_parcel).min(spec.n_voxels);
        if p < n_planted {
            voxels.clone().for_each(|v| responsive[v] = true);
        }
        atlas.parcels.push(Parcel {
            id: p.to_string(),
            loadings: voxels.map(|v| (v, atlas_rng.random_range(0.1..1.0))).collect(),
            hemisphere: Some(if p % 2 == 0 { "left" } else { "right" }.to_owned()),
        });
    }
    atlas.save(&config.atlas)?;

    let d = designs[0].ncols();
    let mut entries = Vec::new();
    for s in 0..spec.n_subjects {
        let subject = format!("{s:02}");
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64);
        let readout: Vec<Vec<f64>> = (0..spec.n_voxels)
            .map(|v| {
                if responsive[v] {
                    (0..d).map(|_| rng.sample(StandardNormal)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        // one scale per voxel across runs keeps the readout exactly linear
        let mut signals: Vec<DMatrix<f64>> = designs
            .iter()
            .map(|_| DMatrix::<f64>::zeros(spec.scans_per_run, spec.n_voxels))
            .collect();
        for (v, beta) in readout.iter().enumerate() {
            if beta.is_empty() {
                continue;
            }
            let beta = DVector::from_column_slice(beta);
            for (signal, x) in signals.iter_mut().zip(&designs) {
                signal.set_column(v, &(x * &beta));
            }
            let values: Vec<f64> = signals.iter().flat_map(|m| (0..m.nrows()).map(move |k| m[(k, v)])).collect();
            let sd = population_sd(&values);
            for signal in &mut signals {
                signal.column_mut(v).apply(|y| *y = if sd > 0.0 { *y / sd } else { 0.0 });
            }
        }
        for (r, mut data) in signals.into_iter().enumerate() {
            let mut noise = DMatrix::<f64>::from_fn(spec.scans_per_run, spec.n_voxels, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            if spec.noise_sd == 0.0 {
                noise.fill(0.0);
            }
            data += noise * spec.noise_sd;
            let run = BoldRun {
                data,
                tr_seconds: spec.tr,
                run_id: r as u64,
                subject_id: subject.clone(),
            };
            let bold_path = dir.join(format!("bold/sub-{subject}_run-{r:02}.ctxpb"));
            run.save(&bold_path)?;
            entries.push(RunEntry {
                subject_id: subject.clone(),
                run_id: r as u64,
                bold_path,
                words_path: words_paths[r].clone(),
            });
        }
    }
    write_manifest(&config.manifest, &entries)?;

    let ground_truth = GroundTruth {
        spec: spec.clone(),
        planted_parcels: (0..n_planted).map(|p| p.to_string()).collect(),
        responsive_voxels: (0..spec.n_voxels).filter(|&v| responsive[v]).collect(),
        checkpoint_hash: ckpt.content_hash()?,
    };
    let gt_path = dir.join("ground_truth.json");
    let text = serde_json::to_string_pretty(&ground_truth).expect("ground truth serializes");
    fs::write(&gt_path, text + "\n").map_err(|e| Error::io(&gt_path, e))?;
    config.save(&dir.join("pipeline.toml"))?;
    Ok(SimulatedDataset {
        dir: dir.to_owned(),
        config,
        ground_truth,
    })
}
