use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use onetok::config::{parse_config_str, RunConfig};
use onetok::data::{self, Dataset};
use onetok::eval::{self, MetricRow};
use onetok::pipeline::{self, Checkpoint, LatentCache};
use onetok::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "onetok", version, about = "Single-token image autoencoder and latent generator")]
#[command(after_long_help = defaults_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a scalar key, e.g. `--set lambda=0.5` or `--set optim.lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pretraining of the encoder.
    PretrainSsl(Plain),
    /// Stage A: tune the pooled token jointly with the pixel decoder.
    TrainAutoencoder(WithEncoder),
    /// Encode the dataset with a Stage-A checkpoint into a latent cache.
    EncodeDataset(WithCheckpoint),
    /// Stage B: train the latent generator on a latent cache.
    TrainLatent(WithCache),
    /// Generate images and write them as a PNG grid.
    Sample(SampleArgs),
    /// Reconstruct held-out images; writes originals above reconstructions.
    Reconstruct(ReconstructArgs),
    /// Decode a linear path between the tokens of two held-out images.
    Interpolate(InterpolateArgs),
    /// Reconstruction metrics on the held-out split (CSV).
    EvalRecon(WithCheckpoint),
    /// Generation Fréchet distance against the held-out split (CSV).
    EvalGen(EvalGenArgs),
    /// Stage A (and optionally Stage B) for several λ values (CSV).
    LambdaSweep(SweepArgs),
}

#[derive(Args, Debug)]
struct Plain {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct WithEncoder {
    #[command(flatten)]
    common: Common,
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Stage-A checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct WithCache {
    #[command(flatten)]
    common: Common,
    /// Latent cache written by `encode-dataset`.
    #[arg(long)]
    cache: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage_a: PathBuf,
    #[arg(long)]
    stage_b: PathBuf,
    /// Class to generate; omit for one row per class.
    #[arg(long)]
    class: Option<usize>,
    /// Images per class; defaults to `sample.count`.
    #[arg(long)]
    count: Option<usize>,
    /// Guidance scale; defaults to `sample.cfg_scale`.
    #[arg(long)]
    cfg_scale: Option<f32>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of held-out images; defaults to `sample.count`.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Held-out index of the first endpoint.
    #[arg(long, default_value_t = 0)]
    from: usize,
    /// Held-out index of the second endpoint.
    #[arg(long, default_value_t = 1)]
    to: usize,
    /// Number of frames; defaults to `sample.frames`.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalGenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage_a: PathBuf,
    #[arg(long)]
    stage_b: PathBuf,
    /// Generated images; defaults to `sample.count`.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f32>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    encoder: PathBuf,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambdas: Vec<f64>,
    /// Also train the latent generator and score generations.
    #[arg(long)]
    stage_b: bool,
}

fn defaults_help() -> String {
    format!(
        "Configuration defaults (every key may appear in --config or --set):\n\n{}",
        RunConfig::default().to_toml()
    )
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Format { .. } | Error::Io(_) => 2,
            Error::Numerical(_) | Error::Integration(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: msg.into(),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PretrainSsl(a) => &a.common,
            Command::TrainAutoencoder(a) => &a.common,
            Command::EncodeDataset(a) | Command::EvalRecon(a) => &a.common,
            Command::TrainLatent(a) => &a.common,
            Command::Sample(a) => &a.common,
            Command::Reconstruct(a) => &a.common,
            Command::Interpolate(a) => &a.common,
            Command::EvalGen(a) => &a.common,
            Command::LambdaSweep(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::PretrainSsl(_) => "pretrain-ssl",
            Command::TrainAutoencoder(_) => "train-autoencoder",
            Command::EncodeDataset(_) => "encode-dataset",
            Command::TrainLatent(_) => "train-latent",
            Command::Sample(_) => "sample",
            Command::Reconstruct(_) => "reconstruct",
            Command::Interpolate(_) => "interpolate",
            Command::EvalRecon(_) => "eval-recon",
            Command::EvalGen(_) => "eval-gen",
            Command::LambdaSweep(_) => "lambda-sweep",
        }
    }
}

fn resolve_config(c: &Common) -> Outcome<RunConfig> {
    let text = match &c.config {
        Some(p) => fs::read_to_string(p).map_err(|e| {
            Failure::from(Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {}", p.display(), e),
            )))
        })?,
        None => String::new(),
    };
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    Ok(parse_config_str(&text, &overrides)?)
}

fn out_path(c: &Common) -> Outcome<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this command"))
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_splits(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let ds = data::load_dataset(&cfg.dataset, cfg.encoder.image_size)?;
    if ds.images.shape()[1] != cfg.encoder.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, encoder.channels is {}",
            ds.images.shape()[1],
            cfg.encoder.channels
        ))
        .into());
    }
    Ok(ds.split(cfg.dataset.split[0]))
}

fn load(path: &Path) -> Outcome<Checkpoint> {
    pipeline::load_checkpoint(path).map_err(|e| {
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    })
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Outcome<()> {
    let mut buf = Vec::new();
    eval::write_metrics_csv(&mut buf, rows)?;
    fs::write(path, buf).map_err(Error::from)?;
    Ok(())
}

fn write_grid(images: &Tensor, cols: usize, path: &Path) -> Outcome<()> {
    data::emit_image_grid(images, cols, path)?;
    Ok(())
}

fn run(cmd: &Command) -> Outcome<()> {
    let common = cmd.common();
    let cfg = resolve_config(common)?;
    if common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let out = out_path(common)?;
    let started = SystemTime::now();
    match cmd {
        Command::PretrainSsl(_) => {
            let (train, _) = load_splits(&cfg)?;
            let r = pipeline::pretrain_ssl(&cfg, &train)?;
            pipeline::save_checkpoint(&r.checkpoint, out)?;
            write_metrics(&sidecar(out, ".metrics.csv"), &r.metrics)?;
        }
        Command::TrainAutoencoder(a) => {
            let enc = a.encoder.as_deref().map(load).transpose()?;
            let (train, held_out) = load_splits(&cfg)?;
            let r = pipeline::train_stage_a(&cfg, enc.as_ref(), &train, &held_out)?;
            pipeline::save_checkpoint(&r.checkpoint, out)?;
            write_metrics(&sidecar(out, ".metrics.csv"), &r.metrics)?;
        }
        Command::EncodeDataset(a) => {
            let ck = load(&a.checkpoint)?;
            let (train, _) = load_splits(&ck.config.clone().with_dataset(&cfg))?;
            let cache = pipeline::build_latent_cache(&ck, &train)?;
            pipeline::save_checkpoint(&cache.to_checkpoint(&ck.config)?, out)?;
        }
        Command::TrainLatent(a) => {
            let cache = LatentCache::from_checkpoint(&load(&a.cache)?)?;
            let r = pipeline::train_stage_b(&cfg, &cache)?;
            pipeline::save_checkpoint(&r.checkpoint, out)?;
            write_metrics(&sidecar(out, ".metrics.csv"), &r.metrics)?;
        }
        Command::Sample(a) => {
            let (sa, sb) = (load(&a.stage_a)?, load(&a.stage_b)?);
            let count = a.count.unwrap_or(cfg.sample.count);
            let scale = a.cfg_scale.unwrap_or(cfg.sample.cfg_scale as f32);
            let classes: Vec<Option<usize>> = match a.class {
                Some(k) => vec![Some(k); count],
                None => (0..sb.config.mixer.num_classes)
                    .flat_map(|k| std::iter::repeat_n(Some(k), count))
                    .collect(),
            };
            let images = pipeline::generate_classes(
                &sa,
                &sb,
                &classes,
                scale,
                cfg.sample.nfe_latent,
                cfg.sample.nfe_decode,
                cfg.seed,
            )?;
            let cols = if a.class.is_some() { cfg.sample.grid_cols } else { count };
            write_grid(&images, cols, out)?;
        }
        Command::Reconstruct(a) => {
            let ck = load(&a.checkpoint)?;
            let (_, held_out) = load_splits(&cfg)?;
            let n = a.count.unwrap_or(cfg.sample.count).min(held_out.len());
            let originals = held_out.take(n).images;
            let recon = pipeline::reconstruct_images(&ck, &originals, cfg.sample.nfe_decode, cfg.seed)?;
            let both = Tensor::concat_rows(&[&originals, &recon])?;
            write_grid(&both, n.max(1), out)?;
        }
        Command::Interpolate(a) => {
            let ck = load(&a.checkpoint)?;
            let (_, held_out) = load_splits(&cfg)?;
            for i in [a.from, a.to] {
                if i >= held_out.len() {
                    return Err(usage(format!(
                        "index {} outside held-out split of {} images",
                        i,
                        held_out.len()
                    )));
                }
            }
            let frames = a.frames.unwrap_or(cfg.sample.frames);
            let ia = held_out.images.select_rows(&[a.from]);
            let ib = held_out.images.select_rows(&[a.to]);
            let strip = pipeline::interpolate_images(&ck, &ia, &ib, frames, cfg.sample.nfe_decode, cfg.seed)?;
            write_grid(&strip, frames, out)?;
        }
        Command::EvalRecon(a) => {
            let ck = load(&a.checkpoint)?;
            let (_, held_out) = load_splits(&cfg)?;
            let set = held_out.take(cfg.eval_images);
            let m = pipeline::eval_reconstruction(&ck, &set, cfg.eval_nfe, cfg.seed)?;
            let rows = [
                MetricRow::new(ck.step, "psnr", m.psnr as f64, "heldout"),
                MetricRow::new(ck.step, "ssim", m.ssim as f64, "heldout"),
                MetricRow::new(ck.step, "encoder_frechet", m.encoder_frechet, "heldout"),
            ];
            write_metrics(out, &rows)?;
        }
        Command::EvalGen(a) => {
            let (sa, sb) = (load(&a.stage_a)?, load(&a.stage_b)?);
            let (_, held_out) = load_splits(&cfg)?;
            let count = a.count.unwrap_or(cfg.sample.count);
            let scale = a.cfg_scale.unwrap_or(cfg.sample.cfg_scale as f32);
            let fd = pipeline::eval_generation(&sa, &sb, &held_out, count, scale, cfg.seed, None)?;
            write_metrics(out, &[MetricRow::new(sb.step, "encoder_frechet_gen", fd, "heldout")])?;
        }
        Command::LambdaSweep(a) => {
            let enc = load(&a.encoder)?;
            let (train, held_out) = load_splits(&cfg)?;
            let rows = pipeline::run_lambda_sweep(&cfg, &a.lambdas, &enc, &train, &held_out, a.stage_b)?;
            let mut buf = Vec::new();
            pipeline::write_sweep_csv(&mut buf, &rows)?;
            fs::write(out, buf).map_err(Error::from)?;
        }
    }
    write_manifest(cmd, &cfg, out, started)?;
    Ok(())
}

trait WithDataset {
    fn with_dataset(self, from: &RunConfig) -> RunConfig;
}

impl WithDataset for RunConfig {
    /// Model settings from a checkpoint, data location from the invocation.
    fn with_dataset(mut self, from: &RunConfig) -> RunConfig {
        self.dataset = from.dataset.clone();
        self
    }
}

/// Timestamps live here so the primary outputs stay byte-reproducible.
fn write_manifest(cmd: &Command, cfg: &RunConfig, out: &Path, started: SystemTime) -> Outcome<()> {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut s = String::new();
    let _ = writeln!(s, "command = \"{}\"", cmd.name());
    let _ = writeln!(s, "output = {:?}", out.display().to_string());
    let _ = writeln!(s, "started_unix = {}", secs(started));
    let _ = writeln!(s, "finished_unix = {}", secs(SystemTime::now()));
    let _ = writeln!(s, "\n[config]");
    let _ = write!(s, "{}", indent_config(&cfg.to_toml()));
    fs::write(sidecar(out, ".manifest.toml"), s).map_err(Error::from)?;
    Ok(())
}

/// Re-root the config's sections under `[config.*]`.
fn indent_config(text: &str) -> String {
    text.lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[config.{}\n", rest),
            None => format!("{}\n", l),
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
