//! Command-line entry point: training, evaluation, ingestion, synthetic data
//! generation, invariant verification, and cost/scaling reports.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use heatnet_core::config::RunConfig;
use heatnet_core::events::{self, synth, Split};
use heatnet_core::fusion::FusionMode;
use heatnet_core::head::LossMode;
use heatnet_core::profiler;
use heatnet_core::tensor::DType;
use heatnet_core::train::{self, EvalOptions};
use heatnet_core::verify;
use heatnet_core::StreamMask;

#[derive(Parser)]
#[command(name = "heatnet", version, about = "Heat-conduction recognition over paired RGB and event streams")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a paired dataset (root/train, root/val)
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Stack a raw event CSV into RGB-aligned event frames
    Ingest(IngestArgs),
    /// Generate a synthetic moving-bar dataset
    Synth(SynthArgs),
    /// Run the executable invariant suites
    Verify(VerifyArgs),
    /// Wall-clock scaling of the heat layer vs a dense-attention yardstick
    Bench(BenchArgs),
    /// Analytic FLOP and parameter report
    Count(CountArgs),
}

#[derive(Args)]
struct ConfigOverrides {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per modality
    #[arg(long)]
    frames: Option<usize>,
    /// Square input resolution
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigOverrides {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::desk(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.frames {
            cfg.frames = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = &self.fusion {
            cfg.fusion = FusionMode::parse(v).with_context(|| format!("bad fusion mode {v}"))?;
        }
        if let Some(v) = &self.loss {
            cfg.loss = LossMode::parse(v).with_context(|| format!("bad loss mode {v}"))?;
        }
        if let Some(v) = &self.precision {
            cfg.precision = match v.as_str() {
                "f32" => DType::F32,
                "f64" => DType::F64,
                _ => bail!("bad precision {v} (expected f32 or f64)"),
            };
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding train/ and val/
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv and best.ckpt
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val, or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Zero out the event stream (RGB-only ablation)
    #[arg(long)]
    rgb_only: bool,
    /// Zero out the RGB stream (event-only ablation)
    #[arg(long)]
    event_only: bool,
    /// Override the fusion mode stored in the checkpoint
    #[arg(long)]
    fusion: Option<String>,
    /// Expected config file; the checkpoint must hash-match it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accept a checkpoint whose config does not match --config
    #[arg(long)]
    force: bool,
    /// Directory for per_class.txt and confusion.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Raw events.csv
    #[arg(long)]
    events: PathBuf,
    /// Sample meta file carrying T/H/W and RGB timestamps
    #[arg(long)]
    meta: PathBuf,
    /// Output directory for stacked event-frame PNGs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// clean or noisy-rgb
    #[arg(long, default_value = "clean")]
    preset: String,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// grad, spectral, fusion, ingest, or all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated square resolutions
    #[arg(long, default_value = "32,64,128")]
    resolutions: String,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    attn_dim: usize,
    #[arg(long, default_value_t = 11)]
    runs: usize,
    /// Time on the shared thread pool instead of a single thread
    #[arg(long)]
    parallel: bool,
    /// Write the machine-readable key=value report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// desk or paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// key=value config file (overrides --preset)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = args.overrides.build()?;
            cfg.validate()?;
            let outcome = match cfg.precision {
                DType::F32 => train::train::<f32>(&cfg, &args.data, &args.out)?,
                DType::F64 => train::train::<f64>(&cfg, &args.data, &args.out)?,
            };
            println!(
                "best val top-1 {:.4} at epoch {}; checkpoint {}",
                outcome.best_val_top1,
                outcome.best_epoch,
                outcome.checkpoint_path.display()
            );
            println!("metrics log: {}", outcome.metrics_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval(args) => {
            let split = Split::parse(&args.split).context("split must be train, val, or test")?;
            if args.rgb_only && args.event_only {
                bail!("--rgb-only and --event-only are mutually exclusive");
            }
            let fusion_override = match &args.fusion {
                Some(v) => Some(FusionMode::parse(v).with_context(|| format!("bad fusion mode {v}"))?),
                None => None,
            };
            let expect_config = match &args.config {
                Some(p) => Some(RunConfig::from_file(p)?),
                None => None,
            };
            let opts = EvalOptions {
                split,
                mask: StreamMask {
                    zero_rgb: args.event_only,
                    zero_event: args.rgb_only,
                },
                fusion_override,
                expect_config,
                force_config: args.force,
                out_dir: args.out.clone(),
            };
            let ckpt = heatnet_core::Checkpoint::load(&args.checkpoint)?;
            let result = match ckpt.config.precision {
                DType::F32 => train::evaluate_checkpoint::<f32>(&args.checkpoint, &args.data, &opts)?,
                DType::F64 => train::evaluate_checkpoint::<f64>(&args.checkpoint, &args.data, &opts)?,
            };
            println!(
                "{} samples: top-1 {:.4}, top-{} {:.4}, routes mcf/mdf/msf {:?}",
                result.n, result.top1, result.k, result.topk, result.route_hist
            );
            print!("{}", result.per_class_table());
            if let Some(dir) = &args.out {
                println!("wrote {}/per_class.txt and confusion.csv", dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ingest(args) => {
            let meta = events::parse_meta(&args.meta)?;
            let stream = events::parse_events(&args.events)?;
            stream.check_bounds(meta.width, meta.height)?;
            let stacked = events::stack_events::<f32>(&stream, &meta.timestamps, meta.height, meta.width)?;
            fs::create_dir_all(&args.out)?;
            let (h, w) = (meta.height, meta.width);
            for f in 0..meta.frames {
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = [
                            (stacked.frames.at(&[f, 0, y, x]) * 255.0) as u8,
                            (stacked.frames.at(&[f, 1, y, x]) * 255.0) as u8,
                            (stacked.frames.at(&[f, 2, y, x]) * 255.0) as u8,
                        ];
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(args.out.join(format!("event_frame_{f:03}.png")))?;
            }
            let total: u32 = stacked.counts.iter().sum();
            println!(
                "{} events parsed, {} stacked into {} frames, {} dropped; frames written to {}",
                stream.len(),
                total,
                meta.frames,
                stacked.dropped,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Synth(args) => {
            let cfg = match args.preset.as_str() {
                "clean" => synth::SynthConfig::clean(&args.out, args.samples_per_class, args.frames, args.resolution),
                "noisy-rgb" => {
                    synth::SynthConfig::noisy_rgb(&args.out, args.samples_per_class, args.frames, args.resolution)
                }
                other => bail!("unknown preset {other} (expected clean or noisy-rgb)"),
            };
            let summary = synth::synth_generate(&cfg, args.seed)?;
            println!(
                "wrote {} samples ({} train / {} val / {} test), {} events total, to {}",
                summary.samples,
                summary.per_split[0],
                summary.per_split[1],
                summary.per_split[2],
                summary.events,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify(args) => {
            let reports = match args.suite.as_str() {
                "spectral" => vec![verify::spectral_suite(args.seed)],
                "grad" => vec![verify::grad_suite(args.seed)],
                "fusion" => vec![verify::fusion_suite(args.seed)],
                "ingest" => vec![verify::ingest_suite(args.seed)],
                "all" => verify::all_suites(args.seed),
                other => bail!("unknown suite {other}"),
            };
            let mut ok = true;
            for r in &reports {
                print!("{}", r.render());
                ok &= r.passed();
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Bench(args) => {
            let sides: Vec<usize> = args
                .resolutions
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("bad --resolutions list")?;
            let report = profiler::scaling_bench(&sides, args.channels, args.attn_dim, args.runs, args.parallel)?;
            print!("{}", report.to_table());
            if let Some(path) = &args.out {
                fs::write(path, report.to_key_values())?;
                println!("report written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Count(args) => {
            let cfg = match &args.config {
                Some(p) => RunConfig::from_file(p)?,
                None => match args.preset.as_str() {
                    "desk" => RunConfig::desk(),
                    "paper" => RunConfig::paper(),
                    other => bail!("unknown preset {other} (expected desk or paper)"),
                },
            };
            let report = profiler::count_costs(&cfg.model_spec())?;
            print!("{}", report.to_table());
            println!(
                "~{:.1} GFLOPs per frame pair, ~{:.1}M params",
                report.flops as f64 / 1e9,
                report.params as f64 / 1e6
            );
            if let Some(path) = &args.out {
                fs::write(path, report.to_key_values())?;
                println!("report written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
