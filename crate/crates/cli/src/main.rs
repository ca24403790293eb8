use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mlfcgan::ablation;
use mlfcgan::checkpoint::Checkpoint;
use mlfcgan::config::TrainConfig;
use mlfcgan::data::{self, CleanSource, DegradeParams, Manifest, SynthOptions};
use mlfcgan::metrics::fmt_db;
use mlfcgan::train;

#[derive(Parser)]
#[command(name = "mlfcgan", version, about = "Underwater image color correction with a fusion cGAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a generator (and critic) on a dataset.
    Train(TrainArgs),
    /// Train all six generator variants with the MSE objective and compare.
    Ablate(AblateArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Enhance a single image.
    Infer(InferArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives clean/, degraded/ and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Side length of the stored images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Directory of clean PNGs; procedural scenes when absent.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Attenuation per channel as r,g,b.
    #[arg(long)]
    beta: Option<String>,
    /// Veiling color as r,g,b in [0, 1].
    #[arg(long)]
    background: Option<String>,
    /// Distance range as lo,hi.
    #[arg(long)]
    depth_range: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training settings; any flag given overrides the `--config` file.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Flat `key = value` file of training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long)]
    base_channels: Option<String>,
    #[arg(long)]
    max_channels: Option<String>,
    #[arg(long)]
    disc_layers: Option<String>,
    /// cwgan_gp_l1 or mse_only.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    lambda_gp: Option<String>,
    #[arg(long)]
    lambda_l1: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    critic_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
}

impl TrainFlags {
    fn resolve(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        let flags = [
            ("variant", &self.variant),
            ("input_size", &self.input_size),
            ("base_channels", &self.base_channels),
            ("max_channels", &self.max_channels),
            ("disc_layers", &self.disc_layers),
            ("objective", &self.objective),
            ("lambda_gp", &self.lambda_gp),
            ("lambda_l1", &self.lambda_l1),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("critic_steps", &self.critic_steps),
            ("seed", &self.seed),
            ("max_steps", &self.max_steps),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its configuration is used as the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; the table reports medians over them.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory to save generated images into.
    #[arg(long)]
    save_images: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse3(s: &str, what: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing --{what}"))?;
    v.try_into()
        .map_err(|_| anyhow::anyhow!("--{what} needs exactly three comma-separated values"))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut params = DegradeParams {
        seed: a.seed,
        ..DegradeParams::default()
    };
    if let Some(b) = &a.beta {
        params.beta = parse3(b, "beta")?;
    }
    if let Some(b) = &a.background {
        params.background = parse3(b, "background")?;
    }
    if let Some(r) = &a.depth_range {
        let (lo, hi) = r.split_once(',').context("--depth-range needs lo,hi")?;
        params.depth_range = (lo.trim().parse()?, hi.trim().parse()?);
    }
    if let Some(n) = a.noise_sigma {
        params.noise_sigma = n;
    }
    let source = match a.source {
        Some(dir) => CleanSource::Dir(dir),
        None => CleanSource::Procedural,
    };
    let opts = SynthOptions {
        count: a.count,
        size: a.size,
        source,
        params,
    };
    let m = data::synth_dataset(&opts, &a.out)?;
    println!("wrote {} pairs to {}", m.len(), a.out.display());
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let base = resume.as_ref().map(|c| c.config.clone()).unwrap_or_default();
    let cfg = a.flags.resolve(base)?;
    let resume = resume.map(|mut ck| {
        ck.config = cfg.clone();
        ck
    });
    if let Some(ck) = &resume {
        info!("resuming at step {}", ck.step);
    }
    let out = train::train(&cfg, &manifest, &a.out, resume)?;
    if let Some(last) = out.logs.last() {
        println!(
            "trained to step {}: g_total {} d_loss {}",
            last.step, last.g_total, last.d_loss
        );
    }
    println!("checkpoint: {}", out.checkpoint_path.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = load_manifest(&a.data)?;
    let report = train::evaluate(&ck, &manifest, a.report.as_deref(), a.save_images.as_deref())?;
    if a.report.is_none() {
        print!("{}", report.to_tsv());
    } else {
        println!(
            "{} images: PSNR {} dB, SSIM {:.4}, MSE {:.6}",
            report.len(),
            fmt_db(report.mean_psnr()),
            report.mean_ssim(),
            report.mean_mse()
        );
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    train::infer(&ck, &a.input, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let cfg = a.flags.resolve(ablation::default_config())?;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .context("parsing --seeds")?;
    if seeds.is_empty() {
        bail!("--seeds is empty");
    }
    let table = ablation::run(&cfg, &manifest, &a.out, &seeds)?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
    }
}
