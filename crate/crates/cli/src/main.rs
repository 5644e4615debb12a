use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use groundview::embeddings::EmbeddingKind;
use groundview::experiment::{self, DatasetSource, ExperimentConfig, Workspace, CONFIG_FILE};
use groundview::features::ZPolicy;

/// Conditional-GAN ground-view synthesis and land-cover mapping at desk
/// scale.
///
/// Stages share one output directory and run in order: synth, train,
/// generate, extract, probe, interp, map, report. Without --config, the
/// resolved config already in the output directory is reused.
#[derive(Debug, Parser)]
#[command(name = "groundview", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Debug logging (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialise the dataset (synthetic world, manifest or tiles).
    Synth(SynthArgs),
    /// Train the cGAN; writes init and final checkpoints and the loss CSV.
    Train(TrainArgs),
    /// Generate one ground view per location from the trained generator.
    Generate,
    /// Extract discriminator features at every location.
    Extract(ExtractArgs),
    /// Train and score the SVM probes and the reference CNN.
    Probe(ProbeArgs),
    /// Run the interpolate-then-classify baseline.
    Interp(InterpArgs),
    /// Build and score majority-vote land-cover maps.
    Map,
    /// Write the result tables, loss curve and map figure.
    Report,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synthetic grid size as ROWSxCOLS.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// checkerboard, halves or random:SEED.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    images_per_cell: Option<usize>,
    #[arg(long)]
    heterogeneity: Option<f64>,
    #[arg(long)]
    overhead_ambiguity: Option<f64>,
    #[arg(long)]
    overhead_mix: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    ngf: Option<usize>,
    #[arg(long)]
    ndf: Option<usize>,
    /// grayscale, hsv or cnn.
    #[arg(long, value_parser = parse_from_str::<EmbeddingKind>)]
    embedding: Option<EmbeddingKind>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// zero, seed:S or avg:K:S (the seed is re-derived from the root seed).
    #[arg(long, value_parser = parse_from_str::<ZPolicy>)]
    z_policy: Option<ZPolicy>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Cross-validated search over the SVM's C and gamma.
    #[arg(long)]
    grid_search: bool,
    /// Reference CNN epochs.
    #[arg(long)]
    cnn_epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct InterpArgs {
    /// Gaussian kernel bandwidth in km.
    #[arg(long)]
    sigma: Option<f64>,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let dim = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad grid dimension {t:?}"));
    Ok((dim(h)?, dim(w)?))
}

fn parse_from_str<T>(s: &str) -> std::result::Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let out = cli.out.clone().unwrap_or_else(|| ExperimentConfig::default().output_dir);
            let saved = out.join(CONFIG_FILE);
            if saved.exists() {
                ExperimentConfig::load(&saved).with_context(|| format!("loading {}", saved.display()))?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_synth(cfg: &mut ExperimentConfig, a: &SynthArgs) -> Result<()> {
    let touched = a.grid.is_some() || a.layout.is_some() || a.images_per_cell.is_some() || a.heterogeneity.is_some() || a.overhead_ambiguity.is_some() || a.overhead_mix.is_some();
    let s = match &mut cfg.dataset {
        DatasetSource::Synthetic(s) => s,
        _ if touched => bail!("synthetic-world flags need a synthetic dataset source"),
        _ => return Ok(()),
    };
    if let Some((h, w)) = a.grid {
        s.grid_h = h;
        s.grid_w = w;
    }
    if let Some(l) = &a.layout {
        s.layout = l.clone();
    }
    if let Some(n) = a.images_per_cell {
        s.images_per_cell = n;
    }
    if let Some(p) = a.heterogeneity {
        s.heterogeneity = p;
    }
    if let Some(p) = a.overhead_ambiguity {
        s.overhead_ambiguity = p;
    }
    if let Some(p) = a.overhead_mix {
        s.overhead_mix = p;
    }
    Ok(())
}

fn apply_train(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    let t = &mut cfg.cgan.train;
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(v) = a.ngf {
        cfg.cgan.ngf = v;
    }
    if let Some(v) = a.ndf {
        cfg.cgan.ndf = v;
    }
    if let Some(k) = a.embedding {
        cfg.embedding.kind = k;
    }
}

fn print_table(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    println!("{}:", path.display());
    for line in text.lines() {
        println!("  {line}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Command::Synth(a) => {
            apply_synth(&mut cfg, a)?;
            let ws = experiment::synth(&cfg)?;
            println!("wrote {} samples to {}", ws.dataset.samples.len(), ws.dir.join("dataset").display());
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a);
            let ws = Workspace::open(&cfg)?;
            let out = experiment::train(&ws)?;
            println!(
                "trained {} steps; final d_loss {:.4}; held-out discriminator accuracy {:.4}",
                out.history.len(),
                out.history.records.last().map_or(f64::NAN, |r| r.d_loss),
                out.heldout_accuracy
            );
        }
        Command::Generate => {
            let ws = Workspace::open(&cfg)?;
            let views = experiment::generate(&ws)?;
            println!("wrote {} generated views to {}", views.len(), ws.dir.join("generated").display());
        }
        Command::Extract(a) => {
            if let Some(p) = a.z_policy {
                cfg.features.z_policy = p;
            }
            let ws = Workspace::open(&cfg)?;
            let (generated, _) = experiment::extract(&ws)?;
            println!("extracted {}D features at {} locations", generated.dim(), generated.len());
        }
        Command::Probe(a) => {
            if a.grid_search {
                cfg.probe.svm.grid_search = true;
            }
            if let Some(e) = a.cnn_epochs {
                cfg.probe.cnn.epochs = e;
            }
            let ws = Workspace::open(&cfg)?;
            let (rows, fake) = experiment::probe(&ws)?;
            for r in rows {
                println!("{:<20} {:<24} {:>5}D  {:.4}", r.feature_type, r.name, r.dimension, r.accuracy);
            }
            println!("reference CNN: real/real {:.4}, generated/generated {:.4}", fake.real_real, fake.fake_fake);
        }
        Command::Interp(a) => {
            if let Some(s) = a.sigma {
                cfg.interp.sigma_km = s;
            }
            let ws = Workspace::open(&cfg)?;
            let (row, sweep) = experiment::interp(&ws, None)?;
            println!("interpolated probe ({}): {:.4}", row.name, row.accuracy);
            for (s, acc) in sweep {
                println!("  sigma {s:>6} km: {acc:.4}");
            }
        }
        Command::Map => {
            let ws = Workspace::open(&cfg)?;
            for s in experiment::map(&ws)? {
                println!("{:<14} map accuracy {:.4}", s.provenance.to_string(), s.accuracy);
            }
        }
        Command::Report => {
            let ws = Workspace::open(&cfg)?;
            experiment::report(&ws)?;
            for t in ["table2.csv", "table3.csv", "table4.csv"] {
                print_table(&ws.dir.join(t))?;
            }
            info!("figures: {} and {}", ws.dir.join("loss_curve.png").display(), ws.dir.join("maps.png").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
