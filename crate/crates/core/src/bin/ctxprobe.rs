use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxprobe::encoding::ScanReference;
use ctxprobe::masking::{ContextSchedule, Pooling, WindowScope};
use ctxprobe::pipeline::{self, PipelineConfig, Stage};
use ctxprobe::simulate::{simulate_dataset, SyntheticSpec};
use ctxprobe::stats::{MaxContextRule, Tail};
use ctxprobe::{fixture, Error, Result};

/// Context-window encoding analysis of language fMRI.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-attention embeddings for every scheduled context size.
    Embed(Overrides),
    /// Embeddings, then cross-validated encoding R maps.
    Encode(Overrides),
    /// Group statistics over existing R maps.
    Stats(Overrides),
    /// All stages in order.
    Run(Overrides),
    /// Curve and histogram CSVs from existing results.
    PlotData(Overrides),
    /// Synthetic dataset with a planted context window.
    Simulate(SimulateArgs),
    /// Tiny deterministic checkpoint and vocabulary.
    Fixture,
}

/// Flags that override configuration keys.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    pooling: Option<Pooling>,
    /// `default` or a comma-separated list of sizes.
    #[arg(long)]
    schedule: Option<ContextSchedule>,
    #[arg(long)]
    window_scope: Option<WindowScope>,
    /// Prepend the end-of-text token to every window.
    #[arg(long)]
    special_token: Option<bool>,
    #[arg(long)]
    tr: Option<f64>,
    #[arg(long)]
    scan_ref: Option<ScanReference>,
    #[arg(long)]
    pca: Option<usize>,
    #[arg(long)]
    detrend: Option<usize>,
    #[arg(long)]
    fdr: Option<f64>,
    #[arg(long)]
    tail: Option<Tail>,
    #[arg(long)]
    maxctx_rule: Option<MaxContextRule>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    planted_window: usize,
    #[arg(long, default_value_t = 0.5)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0.25)]
    responsive_fraction: f64,
    #[arg(long, default_value_t = 12)]
    subjects: usize,
    #[arg(long, default_value_t = 8)]
    runs: usize,
    #[arg(long, default_value_t = 300)]
    scans: usize,
    #[arg(long, default_value_t = 120)]
    voxels: usize,
    /// Seed of the fixture checkpoint used to build the stimuli features.
    #[arg(long, default_value_t = 0)]
    checkpoint_seed: u64,
    /// Whitespace-separated text to lay out instead of a generated one.
    #[arg(long)]
    text: Option<PathBuf>,
}

fn load_config(cli: &Cli, o: &Overrides) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut c = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        c.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        c.seed = seed;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = o.$flag.clone() { c.$field = v; })*
        };
    }
    set!(layer => layer, pooling => pooling, schedule => schedule, window_scope => window_scope,
         special_token => special_token, scan_ref => scan_ref, detrend => detrend_order,
         fdr => fdr, tail => tail, maxctx_rule => maxctx_rule);
    if o.tr.is_some() {
        c.tr = o.tr;
    }
    if o.pca.is_some() {
        c.pca = o.pca;
    }
    Ok(c)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn fixture_files(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fixture::vocabulary().save(&dir.join("vocab.json"), &dir.join("merges.txt"))?;
    let ckpt = fixture::default_checkpoint(seed);
    ckpt.save(&dir.join("model.ctxpw"))?;
    println!("{}  {}", ckpt.content_hash()?, dir.join("model.ctxpw").display());
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        planted_window: a.planted_window,
        noise_sd: a.noise_sd,
        responsive_voxel_fraction: a.responsive_fraction,
        n_subjects: a.subjects,
        n_runs: a.runs,
        scans_per_run: a.scans,
        n_voxels: a.voxels,
        seed: cli.seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    let text = match &a.text {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))?
                .split_whitespace()
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let dir = out_dir(cli);
    let ds = simulate_dataset(
        &spec,
        &fixture::default_checkpoint(a.checkpoint_seed),
        &fixture::vocabulary(),
        text.as_deref(),
        &dir,
        None,
    )?;
    println!("{}", ds.dir.join("pipeline.toml").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let staged = |o: &Overrides, last: Stage| -> Result<()> {
        let config = load_config(cli, o)?;
        if let Some(outputs) = pipeline::run_through(&config, last)? {
            println!("{}", outputs.results.display());
        }
        Ok(())
    };
    match &cli.command {
        Command::Embed(o) => staged(o, Stage::Embed),
        Command::Encode(o) => staged(o, Stage::Encode),
        Command::Run(o) => staged(o, Stage::Stats),
        Command::Stats(o) => {
            let outputs = pipeline::run_stats_only(&load_config(cli, o)?)?;
            println!("{}", outputs.results.display());
            Ok(())
        }
        Command::PlotData(o) => {
            let (curves, histogram) = pipeline::plot_data(&load_config(cli, o)?)?;
            println!("{}\n{}", curves.display(), histogram.display());
            Ok(())
        }
        Command::Simulate(a) => simulate(cli, a),
        Command::Fixture => fixture_files(&out_dir(cli), cli.seed.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(jobs);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
