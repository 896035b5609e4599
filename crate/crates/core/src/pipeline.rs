//! End-to-end orchestration: embed → encode → stats, with content-hash
//! caching of intermediate files and a run manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::annotation::{read_annotations, tokenize_events, WordEvent};
use crate::container::{Container, Tensor, RSCORE_MAGIC};
use crate::encoding::{
    build_design, cross_validated_r, default_lambda_grid, detrend, embedding_matrix, BoldRun, Pca,
    RScoreMap, ScanReference,
};
use crate::error::{Error, Result};
use crate::masking::{
    generate_embeddings, ContextSchedule, EmbeddingOptions, EmbeddingSet, Pooling, WindowOptions,
    WindowScope,
};
use crate::model::Checkpoint;
use crate::stats::{
    analyze, curves_csv, histogram_csv, parse_results, results_csv, AnalysisOptions, ContextResult,
    MaxContextRule, ParcelAtlas, RoiScores, Tail,
};
use crate::tokenizer::{Vocabulary, END_OF_TEXT};

fn default_layer() -> usize {
    9
}
fn default_fdr() -> f64 {
    0.01
}

/// Run configuration. Serialized as TOML; command-line flags override
/// individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    /// Runs manifest: `subject_id, run_id, bold_path, words_path`.
    pub manifest: PathBuf,
    pub atlas: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ContextSchedule,
    #[serde(default = "default_layer")]
    pub layer: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub window_scope: WindowScope,
    #[serde(default)]
    pub special_token: bool,
    /// Overrides the TR stored in the BOLD files when set.
    #[serde(default)]
    pub tr: Option<f64>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub scan_ref: ScanReference,
    #[serde(default)]
    pub pca: Option<usize>,
    #[serde(default)]
    pub detrend_order: usize,
    #[serde(default = "default_fdr")]
    pub fdr: f64,
    #[serde(default)]
    pub tail: Tail,
    #[serde(default)]
    pub maxctx_rule: MaxContextRule,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn with_paths(
        checkpoint: PathBuf,
        vocab: PathBuf,
        merges: PathBuf,
        manifest: PathBuf,
        atlas: PathBuf,
        out: PathBuf,
    ) -> Self {
        PipelineConfig {
            checkpoint,
            vocab,
            merges,
            manifest,
            atlas,
            out,
            cache_dir: None,
            schedule: ContextSchedule::default(),
            layer: default_layer(),
            pooling: Pooling::default(),
            window_scope: WindowScope::default(),
            special_token: false,
            tr: None,
            lambda_grid: default_lambda_grid(),
            scan_ref: ScanReference::default(),
            pca: None,
            detrend_order: 0,
            fdr: default_fdr(),
            tail: Tail::default(),
            maxctx_rule: MaxContextRule::default(),
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in config.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Paths under the file's directory are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut rel = self.clone();
        if let Some(base) = path.parent() {
            for p in rel.paths_mut() {
                if let Ok(r) = p.strip_prefix(base) {
                    *p = r.to_owned();
                }
            }
        }
        let text = toml::to_string(&rel).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [
            &mut self.checkpoint,
            &mut self.vocab,
            &mut self.merges,
            &mut self.manifest,
            &mut self.atlas,
            &mut self.out,
        ]
        .into_iter()
        .chain(self.cache_dir.as_mut())
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.checkpoint, &self.vocab, &self.merges, &self.manifest, &self.atlas] {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if !(self.fdr > 0.0 && self.fdr < 1.0) {
            return Err(Error::Config(format!("fdr {} outside (0, 1)", self.fdr)));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("lambda grid must hold positive values".into()));
        }
        if self.tr.is_some_and(|tr| !(tr > 0.0)) {
            return Err(Error::Config("tr must be positive".into()));
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out.join("embeddings"))
    }

    pub fn embedding_options(&self, vocab: &Vocabulary) -> Result<EmbeddingOptions> {
        let bos_token = if self.special_token {
            Some(vocab.token_id(END_OF_TEXT).ok_or_else(|| {
                Error::Config(format!("special token requested but {END_OF_TEXT} not in vocabulary"))
            })?)
        } else {
            None
        };
        Ok(EmbeddingOptions {
            layer: self.layer,
            pooling: self.pooling,
            window: WindowOptions {
                scope: self.window_scope,
                bos_token,
            },
        })
    }

    pub fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            fdr_q: self.fdr,
            tail: self.tail,
            rule: self.maxctx_rule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunEntry {
    pub subject_id: String,
    pub run_id: u64,
    pub bold_path: PathBuf,
    pub words_path: PathBuf,
}

/// Read the runs manifest; relative paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<RunEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    if header != "subject_id\trun_id\tbold_path\twords_path" {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: format!("unexpected manifest header {header:?}"),
        });
    }
    let mut runs = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message,
        };
        if f.len() != 4 {
            return Err(err("expected 4 tab-separated fields".into()));
        }
        runs.push(RunEntry {
            subject_id: f[0].to_owned(),
            run_id: f[1].parse().map_err(|e| err(format!("run_id: {e}")))?,
            bold_path: base.join(f[2]),
            words_path: base.join(f[3]),
        });
    }
    runs.sort();
    let mut seen = BTreeSet::new();
    for r in &runs {
        if !seen.insert((&r.subject_id, r.run_id)) {
            return Err(Error::Data(format!(
                "subject {} run {} listed twice",
                r.subject_id, r.run_id
            )));
        }
    }
    Ok(runs)
}

pub fn write_manifest(path: &Path, runs: &[RunEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("subject_id\trun_id\tbold_path\twords_path\n");
    for r in runs {
        writeln!(out, "{}\t{}\t{}\t{}", r.subject_id, r.run_id, rel(&r.bold_path), rel(&r.words_path)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// A word file, its events and tokenization.
struct Stimulus {
    hash: String,
    events: Vec<WordEvent>,
}

/// Embedding sets for one words file over the schedule, cached on disk by
/// content hash.
pub fn embed_cached(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    events: &[WordEvent],
    words_hash: &str,
    n: usize,
    options: &EmbeddingOptions,
    cache_dir: &Path,
) -> Result<EmbeddingSet> {
    let key = sha256_hex(
        format!(
            "{}|{words_hash}|n={n}|layer={}|pooling={}|scope={}|bos={:?}",
            ckpt.content_hash()?,
            options.layer,
            options.pooling,
            options.window.scope,
            options.window.bos_token
        )
        .as_bytes(),
    );
    let path = cache_dir.join(format!("emb-{}.ctxpe", &key[..24]));
    if path.exists() {
        if let Ok(set) = EmbeddingSet::load(&path) {
            if set.n_words == events.len() && set.metadata.context_size == n {
                return Ok(set);
            }
        }
    }
    let text = tokenize_events(vocab, events)?;
    let set = generate_embeddings(ckpt, &text, n, options)?;
    set.save(&path)?;
    Ok(set)
}

pub fn rscore_path(dir: &Path, subject: &str, n: usize) -> PathBuf {
    dir.join(format!("sub-{subject}_n{n:02}.ctxpr"))
}

pub fn save_rscores(path: &Path, subject: &str, n: usize, map: &RScoreMap, cache_key: &str) -> Result<()> {
    let mut c = Container::new(RSCORE_MAGIC);
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    c.insert_tensor("r", Tensor::new(vec![map.r.len()], to_f32(&map.r))?);
    c.insert_tensor("pooled_r", Tensor::new(vec![map.pooled_r.len()], to_f32(&map.pooled_r))?);
    c.insert_field(
        "metadata",
        json!({
            "subject_id": subject,
            "context_size": n,
            "folds": map.folds,
            "r_averaging": "mean over outer folds",
            "cache_key": cache_key,
        }),
    );
    c.write(path)
}

/// `(subject, context size, r)` from one R-score file.
pub fn load_rscores(path: &Path) -> Result<(String, usize, Vec<f64>)> {
    let c = Container::read(path, RSCORE_MAGIC)?;
    let meta = c.field("metadata")?;
    let bad = || Error::Format(format!("{}: malformed metadata", path.display()));
    let subject = meta["subject_id"].as_str().ok_or_else(bad)?.to_owned();
    let n = meta["context_size"].as_u64().ok_or_else(bad)? as usize;
    let r = c.tensor("r")?.data.iter().map(|&v| f64::from(v)).collect();
    Ok((subject, n, r))
}

fn rscore_cache_key(path: &Path) -> Option<String> {
    let c = Container::read(path, RSCORE_MAGIC).ok()?;
    c.field("metadata").ok()?["cache_key"].as_str().map(str::to_owned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Complete,
    Incomplete,
    /// Not run; earlier outputs on disk were used instead.
    Reused,
    Skipped,
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Embed,
    Encode,
    Stats,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::Encode => "encode",
            Stage::Stats => "stats",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest {
    version: &'static str,
    seed: u64,
    config: PipelineConfig,
    checkpoint_hash: Option<String>,
    inputs: BTreeMap<String, String>,
    stages: BTreeMap<&'static str, StageStatus>,
    outputs: BTreeMap<String, String>,
    error: Option<String>,
}

impl RunManifest {
    fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Paths of everything a pipeline run wrote.
#[derive(Debug, Clone)]
pub struct PipelineOutputs {
    pub results: PathBuf,
    pub curves: PathBuf,
    pub histogram: PathBuf,
    pub manifest: PathBuf,
    pub rscores_dir: PathBuf,
    pub context_results: Vec<ContextResult>,
}

/// Run every stage. On failure the manifest marks the failing stage
/// incomplete and records the error.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutputs> {
    Ok(run_through(config, Stage::Stats)?.expect("stats stage produces outputs"))
}

/// Run stages up to and including `last`. Outputs are returned once the
/// stats stage has run.
pub fn run_through(config: &PipelineConfig, last: Stage) -> Result<Option<PipelineOutputs>> {
    config.validate()?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let ckpt = Checkpoint::load(&config.checkpoint)?;
    if config.layer > ckpt.config.n_layers {
        return Err(Error::Config(format!(
            "layer {} exceeds the model's {} layers",
            config.layer, ckpt.config.n_layers
        )));
    }
    let runs = read_manifest(&config.manifest)?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config: config.clone(),
        checkpoint_hash: Some(ckpt.content_hash()?),
        inputs: BTreeMap::new(),
        stages: [Stage::Embed, Stage::Encode, Stage::Stats]
            .into_iter()
            .map(|s| (s.name(), if s <= last { StageStatus::Pending } else { StageStatus::Skipped }))
            .collect(),
        outputs: BTreeMap::new(),
        error: None,
    };
    for p in [&config.atlas, &config.manifest] {
        manifest.inputs.insert(p.display().to_string(), file_hash(p)?);
    }
    manifest.write(&config.out)?;

    let result = run_stages(config, &ckpt, &runs, last, &mut manifest);
    if let Err(e) = &result {
        for status in manifest.stages.values_mut() {
            if *status == StageStatus::Pending {
                *status = StageStatus::Incomplete;
            }
        }
        manifest.error = Some(e.to_string());
    }
    manifest.write(&config.out)?;
    result
}

fn run_stages(
    config: &PipelineConfig,
    ckpt: &Checkpoint,
    runs: &[RunEntry],
    last: Stage,
    manifest: &mut RunManifest,
) -> Result<Option<PipelineOutputs>> {
    let vocab = Vocabulary::load(&config.vocab, &config.merges)?;
    let options = config.embedding_options(&vocab)?;

    // stimuli shared across subjects are embedded once
    let mut stimuli: BTreeMap<PathBuf, Stimulus> = BTreeMap::new();
    for r in runs {
        if !stimuli.contains_key(&r.words_path) {
            let hash = file_hash(&r.words_path)?;
            manifest.inputs.insert(r.words_path.display().to_string(), hash.clone());
            let events = read_annotations(&r.words_path)?;
            stimuli.insert(r.words_path.clone(), Stimulus { hash, events });
        }
    }
    let mut bold: BTreeMap<(String, u64), BoldRun> = BTreeMap::new();
    for r in runs {
        let mut run = BoldRun::load(&r.bold_path)?;
        if let Some(tr) = config.tr {
            run.tr_seconds = tr;
        }
        if config.detrend_order > 0 {
            detrend(&mut run.data, config.detrend_order);
        }
        bold.insert((r.subject_id.clone(), r.run_id), run);
    }
    let subjects: Vec<String> = runs.iter().map(|r| r.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();

    let cache_dir = config.cache_dir();
    let mut embeddings: HashMap<(PathBuf, usize), EmbeddingSet> = HashMap::new();
    for &n in config.schedule.sizes() {
        for (path, stim) in &stimuli {
            let set = embed_cached(ckpt, &vocab, &stim.events, &stim.hash, n, &options, &cache_dir)
                .map_err(|e| e.in_stage("embed", None, Some(n)))?;
            embeddings.insert((path.clone(), n), set);
        }
    }
    manifest.stages.insert("embed", StageStatus::Complete);
    manifest.write(&config.out)?;
    if last == Stage::Embed {
        return Ok(None);
    }

    let rscores_dir = config.out.join("rscores");
    fs::create_dir_all(&rscores_dir).map_err(|e| Error::io(&rscores_dir, e))?;
    let bold_hashes: BTreeMap<(String, u64), String> = runs
        .iter()
        .map(|r| Ok(((r.subject_id.clone(), r.run_id), file_hash(&r.bold_path)?)))
        .collect::<Result<_>>()?;
    let encode = Encode {
        config,
        runs,
        stimuli: &stimuli,
        bold: &bold,
        bold_hashes: &bold_hashes,
        rscores_dir: &rscores_dir,
    };
    for &n in config.schedule.sizes() {
        let designs = encode
            .designs(&features_for_size(config, &stimuli, &embeddings, n)?)
            .map_err(|e| e.in_stage("encode", None, Some(n)))?;
        subjects
            .par_iter()
            .map(|subject| {
                encode
                    .subject(&designs, subject, n)
                    .map_err(|e| e.in_stage("encode", Some(subject), Some(n)))
            })
            .collect::<Result<Vec<()>>>()?;
    }
    manifest.stages.insert("encode", StageStatus::Complete);
    manifest.write(&config.out)?;
    if last == Stage::Encode {
        return Ok(None);
    }
    stats_stage(config, manifest).map(Some)
}

fn stats_stage(config: &PipelineConfig, manifest: &mut RunManifest) -> Result<PipelineOutputs> {
    let atlas = ParcelAtlas::load(&config.atlas)?;
    let outputs = run_stats(&config.out.join("rscores"), &atlas, &config.schedule, config.analysis_options(), &config.out)
        .map_err(|e| e.in_stage("stats", None, None))?;
    for p in [&outputs.results, &outputs.curves, &outputs.histogram] {
        manifest.outputs.insert(
            p.file_name().unwrap().to_string_lossy().into_owned(),
            file_hash(p)?,
        );
    }
    manifest.stages.insert("stats", StageStatus::Complete);
    Ok(outputs)
}

/// Stats stage alone, over the R maps an earlier run left in the output
/// directory. Neither the model nor the BOLD data are read.
pub fn run_stats_only(config: &PipelineConfig) -> Result<PipelineOutputs> {
    if !(config.fdr > 0.0 && config.fdr < 1.0) {
        return Err(Error::Config(format!("fdr {} outside (0, 1)", config.fdr)));
    }
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config: config.clone(),
        checkpoint_hash: None,
        inputs: BTreeMap::new(),
        stages: [("embed", StageStatus::Reused), ("encode", StageStatus::Reused), ("stats", StageStatus::Pending)]
            .into_iter()
            .collect(),
        outputs: BTreeMap::new(),
        error: None,
    };
    manifest.inputs.insert(config.atlas.display().to_string(), file_hash(&config.atlas)?);
    let result = stats_stage(config, &mut manifest);
    if let Err(e) = &result {
        manifest.stages.insert("stats", StageStatus::Incomplete);
        manifest.error = Some(e.to_string());
    }
    manifest.write(&config.out)?;
    result
}

/// Embedding matrices for one context size, optionally PCA-reduced with a
/// projection fitted across all stimuli.
fn features_for_size(
    config: &PipelineConfig,
    stimuli: &BTreeMap<PathBuf, Stimulus>,
    embeddings: &HashMap<(PathBuf, usize), EmbeddingSet>,
    n: usize,
) -> Result<HashMap<PathBuf, DMatrix<f64>>> {
    let mut features: HashMap<PathBuf, DMatrix<f64>> = stimuli
        .keys()
        .map(|p| {
            let e = &embeddings[&(p.clone(), n)];
            (p.clone(), embedding_matrix(e.n_words, e.d_model, &e.matrix))
        })
        .collect();
    if let Some(k) = config.pca {
        let ordered: Vec<&DMatrix<f64>> = stimuli.keys().map(|p| &features[p]).collect();
        let pca = Pca::fit(&ordered, k)?;
        for m in features.values_mut() {
            *m = pca.transform(m);
        }
    }
    Ok(features)
}

/// Design matrices keyed by words file, scan count and TR.
type Designs = HashMap<(PathBuf, usize, u64), DMatrix<f64>>;

struct Encode<'a> {
    config: &'a PipelineConfig,
    runs: &'a [RunEntry],
    stimuli: &'a BTreeMap<PathBuf, Stimulus>,
    bold: &'a BTreeMap<(String, u64), BoldRun>,
    bold_hashes: &'a BTreeMap<(String, u64), String>,
    rscores_dir: &'a Path,
}

impl Encode<'_> {
    fn bold(&self, r: &RunEntry) -> &BoldRun {
        &self.bold[&(r.subject_id.clone(), r.run_id)]
    }

    fn design_key(&self, r: &RunEntry) -> (PathBuf, usize, u64) {
        let b = self.bold(r);
        (r.words_path.clone(), b.data.nrows(), b.tr_seconds.to_bits())
    }

    /// Designs depend only on the stimulus and acquisition, so subjects
    /// hearing the same run share them.
    fn designs(&self, features: &HashMap<PathBuf, DMatrix<f64>>) -> Result<Designs> {
        let keys: BTreeSet<_> = self.runs.iter().map(|r| self.design_key(r)).collect();
        keys.into_par_iter()
            .map(|key| {
                let (path, n_scans, tr) = &key;
                let offsets: Vec<f64> = self.stimuli[path].events.iter().map(|e| e.offset).collect();
                let x = build_design(&features[path], &offsets, f64::from_bits(*tr), *n_scans, self.config.scan_ref)
                    .map_err(|e| match e {
                        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
                        other => other,
                    })?;
                Ok((key, x))
            })
            .collect()
    }

    fn subject(&self, designs: &Designs, subject: &str, n: usize) -> Result<()> {
        let config = self.config;
        let mine: Vec<&RunEntry> = self.runs.iter().filter(|r| r.subject_id == subject).collect();
        let key_material = mine
            .iter()
            .map(|r| {
                format!(
                    "{}:{}:{}",
                    r.run_id,
                    self.stimuli[&r.words_path].hash,
                    self.bold_hashes[&(r.subject_id.clone(), r.run_id)]
                )
            })
            .collect::<Vec<_>>()
            .join(",");
        let key = sha256_hex(
            format!(
                "{key_material}|n={n}|layer={}|pooling={}|scope={}|bos={}|pca={:?}|scan={}|detrend={}|tr={:?}|grid={:?}",
                config.layer,
                config.pooling,
                config.window_scope,
                config.special_token,
                config.pca,
                config.scan_ref,
                config.detrend_order,
                config.tr,
                config.lambda_grid
            )
            .as_bytes(),
        );
        let path = rscore_path(self.rscores_dir, subject, n);
        if rscore_cache_key(&path).as_deref() == Some(key.as_str()) {
            return Ok(());
        }
        let pairs: Vec<(DMatrix<f64>, DMatrix<f64>)> = mine
            .iter()
            .map(|r| (designs[&self.design_key(r)].clone(), self.bold(r).data.clone()))
            .collect();
        let map = cross_validated_r(&pairs, &config.lambda_grid)?;
        save_rscores(&path, subject, n, &map, &key)
    }
}

/// Subject ids and their R maps, indexed `[subject][size] -> r per voxel`.
pub type SubjectMaps = (Vec<String>, Vec<Vec<Vec<f64>>>);

/// Collect every R map in a directory.
pub fn collect_rscores(dir: &Path, schedule: &ContextSchedule) -> Result<SubjectMaps> {
    let mut by_subject: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "ctxpr") {
            let (subject, n, r) = load_rscores(&path)?;
            if schedule.position(n).is_some() {
                by_subject.entry(subject).or_default().insert(n, r);
            }
        }
    }
    if by_subject.is_empty() {
        return Err(Error::Data(format!("no R-score files in {}", dir.display())));
    }
    let mut subjects = Vec::new();
    let mut maps = Vec::new();
    for (subject, per_size) in by_subject {
        let row = schedule
            .sizes()
            .iter()
            .map(|n| {
                per_size.get(n).cloned().ok_or_else(|| {
                    Error::Data(format!("subject {subject} has no R map for context size {n}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        subjects.push(subject);
        maps.push(row);
    }
    Ok((subjects, maps))
}

/// Stats stage over an existing R-score directory.
pub fn run_stats(
    rscores_dir: &Path,
    atlas: &ParcelAtlas,
    schedule: &ContextSchedule,
    options: AnalysisOptions,
    out: &Path,
) -> Result<PipelineOutputs> {
    let (subjects, maps) = collect_rscores(rscores_dir, schedule)?;
    let roi = RoiScores::from_maps(atlas, subjects, schedule.sizes().to_vec(), &maps)?;
    let results = analyze(&roi, atlas, options)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results_path = out.join("results.csv");
    fs::write(&results_path, results_csv(&results)).map_err(|e| Error::io(&results_path, e))?;
    let (curves, histogram) = emit_plot_data(&results, &roi, &out.join("curves.csv"), &out.join("histogram.csv"))?;
    Ok(PipelineOutputs {
        results: results_path,
        curves,
        histogram,
        manifest: out.join("manifest.json"),
        rscores_dir: rscores_dir.to_owned(),
        context_results: results,
    })
}

/// Write the centered-curve CSV and the maximal-context-size histogram.
pub fn emit_plot_data(
    results: &[ContextResult],
    roi: &RoiScores,
    curves_path: &Path,
    histogram_path: &Path,
) -> Result<(PathBuf, PathBuf)> {
    fs::write(curves_path, curves_csv(roi)).map_err(|e| Error::io(curves_path, e))?;
    let (hist, split) = histogram_csv(results);
    if !split && results.iter().any(|r| r.max_context_size.is_some()) {
        log::info!("no hemisphere labels on significant parcels; histogram is unsplit");
    }
    fs::write(histogram_path, hist).map_err(|e| Error::io(histogram_path, e))?;
    Ok((curves_path.to_owned(), histogram_path.to_owned()))
}

/// Re-emit the plotting CSVs from an existing `results.csv` and R-score
/// directory. Hemisphere labels come from the atlas.
pub fn plot_data(config: &PipelineConfig) -> Result<(PathBuf, PathBuf)> {
    let results_path = config.out.join("results.csv");
    if !results_path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run the stats stage first",
            results_path.display()
        )));
    }
    let text = fs::read_to_string(&results_path).map_err(|e| Error::io(&results_path, e))?;
    let atlas = ParcelAtlas::load(&config.atlas)?;
    let mut results = parse_results(&text)?;
    for r in &mut results {
        r.hemisphere = atlas
            .parcels
            .iter()
            .find(|p| p.id == r.parcel_id)
            .and_then(|p| p.hemisphere.clone());
    }
    let (subjects, maps) = collect_rscores(&config.out.join("rscores"), &config.schedule)?;
    let roi = RoiScores::from_maps(&atlas, subjects, config.schedule.sizes().to_vec(), &maps)?;
    emit_plot_data(&results, &roi, &config.out.join("curves.csv"), &config.out.join("histogram.csv"))
}
