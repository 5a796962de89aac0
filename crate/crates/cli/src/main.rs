use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use mcdncnn::datapipe::{build_training_set, PatchConfig, Regime, DEFAULT_STRIDE, DEFAULT_TARGET_COUNT, PATCH_SIZE};
use mcdncnn::metrics::{evaluate, SsimConstants};
use mcdncnn::network::{denoise_volume, load_model, save_model};
use mcdncnn::noise::{add_rician, NoiseLevel};
use mcdncnn::optim::{train, write_loss_csv, TrainConfig};
use mcdncnn::phantom::phantom;
use mcdncnn::selfcheck::{self, SelfcheckOptions};
use mcdncnn::volume::{is_volume_path, read_volume, write_volume};
use mcdncnn::{build_model, ModelConfig, Volume};

#[derive(Parser, Debug)]
#[command(name = "mcdncnn", version, about = "Multi-channel residual CNN for Rician denoising of MR volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corrupt a volume with Rician noise
    AddNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise level in percent of the reference intensity
        #[arg(long, allow_hyphen_values = true)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reference intensity for the percentage (default: volume maximum)
        #[arg(long)]
        reference: Option<f64>,
    },
    /// Train a model on every volume in a directory
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `specific:<percent>`, `general` (1–15% sweep) or `general:<p1>,<p2>,...`
        #[arg(long, default_value = "specific:9")]
        regime: String,
        /// Output model file
        #[arg(long)]
        out: PathBuf,
        /// Loss log (default: <out>.loss.csv)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-1)]
        lr_start: f64,
        #[arg(long, default_value_t = 1e-4)]
        lr_end: f64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = PATCH_SIZE)]
        patch: usize,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        /// Number of training patches
        #[arg(long, default_value_t = DEFAULT_TARGET_COUNT)]
        patches: usize,
    },
    /// Denoise a volume slice by slice
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and global SSIM of test volumes against a clean reference
    Evaluate {
        #[arg(long)]
        clean: PathBuf,
        /// `name=path`, repeatable
        #[arg(long = "test", required = true)]
        tests: Vec<String>,
        #[arg(long)]
        csv: PathBuf,
        /// Noise level recorded in the level_percent column
        #[arg(long)]
        level: Option<f64>,
    },
    /// Finite-difference gradient checks and metric oracles
    Selfcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, hide = true)]
        corrupt_conv_grad: bool,
    },
    /// Write a synthetic head phantom (maximum intensity 255)
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// `X,Y,Z`
        #[arg(long, default_value = "96,96,32")]
        dims: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Command failures, mapped to exit codes 2 (usage) and 1 (everything else).
enum Failure {
    Usage(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

impl From<mcdncnn::Error> for Failure {
    fn from(e: mcdncnn::Error) -> Self {
        Failure::Internal(e.into())
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::AddNoise {
            input,
            out,
            level,
            seed,
            reference,
        } => add_noise(&input, &out, level, seed, reference),
        Command::Train {
            data,
            regime,
            out,
            loss_csv,
            epochs,
            batch,
            lr_start,
            lr_end,
            width,
            depth,
            seed,
            patch,
            stride,
            patches,
        } => {
            let model_config = ModelConfig {
                width,
                depth,
                ..ModelConfig::default()
            };
            let train_config = TrainConfig {
                batch_size: batch,
                epochs,
                lr_start,
                lr_end,
                seed,
                ..TrainConfig::default()
            };
            let patch_config = PatchConfig {
                patch,
                stride,
                target_count: patches,
            };
            let loss_csv = loss_csv.unwrap_or_else(|| suffixed(&out, ".loss.csv"));
            cmd_train(&data, &regime, &out, &loss_csv, model_config, train_config, patch_config)
        }
        Command::Denoise { input, model, out } => cmd_denoise(&input, &model, &out),
        Command::Evaluate {
            clean,
            tests,
            csv,
            level,
        } => cmd_evaluate(&clean, &tests, &csv, level),
        Command::Selfcheck {
            cases,
            corrupt_conv_grad,
        } => cmd_selfcheck(SelfcheckOptions {
            cases,
            corrupt_conv_kernel_grad: corrupt_conv_grad,
        }),
        Command::Phantom { out, dims, seed } => {
            let dims = parse_dims(&dims)?;
            let volume = phantom(dims, seed).map_err(|e| usage(e))?;
            write_volume(&volume, &out)?;
            println!("wrote {:?} phantom to {}", dims, out.display());
            Ok(())
        }
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_dims(text: &str) -> Result<[usize; 3], Failure> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("bad --dims {text:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| usage(format!("--dims needs three comma-separated extents, got {text:?}")))
}

fn parse_regime(text: &str) -> Result<Regime, Failure> {
    let regime = match text.split_once(':') {
        None if text == "general" => Regime::general(),
        Some(("general", levels)) => Regime::General(
            levels
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| usage(format!("bad --regime {text:?}: {e}")))?,
        ),
        Some(("specific", p)) => {
            Regime::Specific(p.parse().map_err(|e| usage(format!("bad --regime {text:?}: {e}")))?)
        }
        _ => return Err(usage(format!("--regime must be specific:<percent> or general, got {text:?}"))),
    };
    regime.validate().map_err(usage)?;
    Ok(regime)
}

fn add_noise(input: &Path, out: &Path, percent: f64, seed: u64, reference: Option<f64>) -> Result<(), Failure> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(usage(format!("--level must be in (0, 100], got {percent}")));
    }
    let volume = read_volume(input)?;
    let level = match reference {
        Some(r) => NoiseLevel::new(percent, r).map_err(usage)?,
        None => NoiseLevel::for_volume(percent, &volume).map_err(usage)?,
    };
    let noisy = add_rician(&volume, level, seed)?;
    write_volume(&noisy, out)?;
    println!("sigma = {}", level.sigma);
    Ok(())
}

fn volume_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| usage(format!("cannot read --data {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.context("listing data directory")?.path();
        if path.is_file() && is_volume_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no .nii or raw (.json) volumes in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_train(
    data: &Path,
    regime: &str,
    out: &Path,
    loss_csv: &Path,
    model_config: ModelConfig,
    train_config: TrainConfig,
    patch_config: PatchConfig,
) -> Result<(), Failure> {
    let regime = parse_regime(regime)?;
    model_config.validate().map_err(usage)?;
    train_config.validate().map_err(usage)?;
    let files = volume_files(data)?;
    let mut volumes = Vec::with_capacity(files.len());
    for f in &files {
        let v = read_volume(f).with_context(|| format!("reading {}", f.display()))?;
        volumes.push(v.normalize().with_context(|| format!("normalizing {}", f.display()))?);
    }
    println!("{} training volumes, regime {:?}", volumes.len(), regime);

    let samples = build_training_set(&volumes, &regime, &patch_config, train_config.seed).map_err(usage)?;
    println!("{} patches of {}×{}", samples.len(), patch_config.patch, patch_config.patch);
    let mut model = build_model(model_config, train_config.seed)?;
    let history = train(&mut model, &samples, &train_config, |log| {
        println!("epoch {:>3}  lr {:.3e}  loss {:.6e}", log.epoch, log.lr, log.mean_loss);
    })?;
    save_model(&model, out)?;
    write_loss_csv(&history, loss_csv)?;
    println!("wrote model {} and loss log {}", out.display(), loss_csv.display());
    Ok(())
}

fn cmd_denoise(input: &Path, model_path: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_model(model_path)?;
    let volume = read_volume(input)?;
    let cfg = model.config();
    if cfg.in_channels != mcdncnn::datapipe::STACK_DEPTH || cfg.out_channels != 1 {
        return Err(usage(format!(
            "model expects {} input channels and emits {}; denoising needs 5 and 1",
            cfg.in_channels, cfg.out_channels
        )));
    }
    let denoised = denoise_volume(&model, &volume)?;
    write_volume(&denoised, out)?;
    println!("denoised {:?} volume written to {}", denoised.dims(), out.display());
    Ok(())
}

struct Row {
    name: String,
    psnr_db: f64,
    ssim_global: f64,
}

fn format_psnr(psnr: f64) -> String {
    if psnr.is_infinite() {
        "inf".into()
    } else {
        format!("{psnr:.4}")
    }
}

fn cmd_evaluate(clean_path: &Path, tests: &[String], csv_path: &Path, level: Option<f64>) -> Result<(), Failure> {
    let clean = read_volume(clean_path)?.normalize()?;
    let scale = clean.intensity_scale.expect("set by normalize");
    let constants = SsimConstants::default();
    let mut rows = Vec::with_capacity(tests.len());
    for spec in tests {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--test takes name=path, got {spec:?}")))?;
        let test: Volume = read_volume(path)?;
        if test.dims() != clean.dims() {
            return Err(usage(format!(
                "{name}: dims {:?} differ from clean {:?}",
                test.dims(),
                clean.dims()
            )));
        }
        let report = evaluate(&clean, &test.normalize_like(scale)?, constants).map_err(usage)?;
        rows.push(Row {
            name: name.to_string(),
            psnr_db: report.psnr_db,
            ssim_global: report.ssim_global,
        });
    }

    let mut writer = csv::Writer::from_path(csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    writer
        .write_record(["name", "level_percent", "psnr_db", "ssim_global"])
        .context("writing CSV")?;
    let level = level.map(|l| l.to_string()).unwrap_or_default();
    println!("{:<16} {:>8} {:>10} {:>10}", "name", "level %", "PSNR dB", "SSIM");
    for row in &rows {
        let psnr = format_psnr(row.psnr_db);
        let ssim = format!("{:.6}", row.ssim_global);
        writer
            .write_record([row.name.as_str(), level.as_str(), psnr.as_str(), ssim.as_str()])
            .context("writing CSV")?;
        println!("{:<16} {:>8} {:>10} {:>10}", row.name, level, psnr, ssim);
    }
    writer.flush().context("writing CSV")?;
    Ok(())
}

fn cmd_selfcheck(options: SelfcheckOptions) -> Result<(), Failure> {
    let start = std::time::Instant::now();
    let outcomes = selfcheck::run(options);
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.passed {
            failed.push(o.name.as_str());
        }
    }
    println!("{} checks in {:.1?}", outcomes.len(), start.elapsed());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("failing checks: {}", failed.join(", ")).into())
    }
}
