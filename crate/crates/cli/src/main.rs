//! Command-line front end: dataset synthesis, training, detection,
//! evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 validation failure (bad arguments, bad config,
//! malformed inputs), 2 runtime failure (I/O, numeric breakdown, failed
//! checks).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use image::{GrayImage, RgbImage};

use imnet_core::checkpoint;
use imnet_core::dataset;
use imnet_core::eval::score_dataset;
use imnet_core::gradcheck::check_model;
use imnet_core::synth::{synthesize_dataset, AttackConfig};
use imnet_core::train::{train, TrainEvent};
use imnet_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "imnet", version, about = "Copy-move forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pin single-threaded deterministic execution. Byte-identical outputs
    /// across runs are only promised with this flag (the current build is
    /// single-threaded either way).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Config file (flat `key = value` lines, dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override prototype.update-rounds.
    #[arg(long = "proto-rounds", global = true)]
    proto_rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic copy-move dataset.
    Synth {
        /// Output dataset directory (images/, masks/, provenance/).
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Square image side, 32..=256.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Disable the rotation attack.
        #[arg(long)]
        no_rotate: bool,
        /// Disable the rescaling attack.
        #[arg(long)]
        no_scale: bool,
        /// Disable the blur attack.
        #[arg(long)]
        no_blur: bool,
        /// Disable JPEG recompression.
        #[arg(long)]
        no_jpeg: bool,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint on one image and write the predicted mask.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Grayscale mask output (0/128/255).
        #[arg(long)]
        out_mask: PathBuf,
        /// Optional RGB overlay output (source green, tampered red).
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Score a checkpoint over a dataset directory and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// JSON report output path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient check on a tiny configuration.
    Gradcheck {
        /// Maximum relative error tolerated per parameter group.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // validation failure.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_validation() { 1 } else { 2 })
        }
    }
}

/// Config assembly order: file, then --seed, then --proto-rounds, then
/// ablation-mode implications and validation.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(rounds) = cli.proto_rounds {
        cfg.prototype.update_rounds = rounds;
    }
    cfg.apply_ablation_mode();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            out_dir,
            count,
            size,
            no_rotate,
            no_scale,
            no_blur,
            no_jpeg,
        } => {
            let seed = cli.seed.unwrap_or_else(|| RunConfig::default().seed);
            let attacks = AttackConfig {
                rotate: !no_rotate,
                scale: !no_scale,
                blur: !no_blur,
                jpeg: !no_jpeg,
            };
            cmd_synth(out_dir, *count, *size, seed, &attacks)
        }
        Command::Train { data_dir, out } => {
            let cfg = load_config(&cli)?;
            cmd_train(&cfg, data_dir, out)
        }
        Command::Detect {
            checkpoint,
            image,
            out_mask,
            overlay,
        } => cmd_detect(checkpoint, image, out_mask, overlay.as_deref()),
        Command::Eval {
            checkpoint,
            data_dir,
            report,
        } => cmd_eval(checkpoint, data_dir, report),
        Command::Gradcheck { tolerance } => {
            let cfg = match &cli.config {
                Some(_) => load_config(&cli)?,
                None => {
                    let mut cfg = RunConfig::gradcheck_default();
                    if let Some(seed) = cli.seed {
                        cfg.seed = seed;
                    }
                    if let Some(rounds) = cli.proto_rounds {
                        cfg.prototype.update_rounds = rounds;
                        cfg.apply_ablation_mode();
                    }
                    cfg.validate()?;
                    cfg
                }
            };
            cmd_gradcheck(&cfg, *tolerance)
        }
    }
}

fn cmd_synth(
    out_dir: &std::path::Path,
    count: usize,
    size: usize,
    seed: u64,
    attacks: &AttackConfig,
) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            op: "synth",
            reason: "count must be >= 1".into(),
        });
    }
    let samples = synthesize_dataset(seed, count, size, attacks)?;
    dataset::write_dataset(out_dir, &samples)?;
    let mean_fraction: f64 = samples
        .iter()
        .map(|s| {
            let forged = s.truth.iter().filter(|&&l| l != 0).count();
            forged as f64 / s.truth.len() as f64
        })
        .sum::<f64>()
        / count as f64;
    println!(
        "wrote {} samples ({}x{}) to {} mean-forged-fraction={:.4}",
        count,
        size,
        size,
        out_dir.display(),
        mean_fraction
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_dir: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let samples = dataset::read_dataset(data_dir)?;
    let result = train(cfg, &samples, |event| match event {
        TrainEvent::Step { step, loss } => println!("step={step} loss={loss:.6}"),
        TrainEvent::Validation { step, f1, improved } => {
            println!("step={step} val-f1={f1:.4} improved={improved}")
        }
    })?;
    checkpoint::save(out, &result.model)?;
    println!(
        "saved {} best-step={} best-val-f1={:.4} final-loss={:.6}",
        out.display(),
        result.best_step,
        result.best_f1,
        result.final_loss
    );
    Ok(())
}

fn cmd_detect(
    ckpt: &std::path::Path,
    image_path: &std::path::Path,
    out_mask: &std::path::Path,
    overlay: Option<&std::path::Path>,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let size = model.config().backbone.input_size;
    let image = image::open(image_path)
        .map_err(|e| Error::Image(format!("{}: {e}", image_path.display())))?
        .to_rgb8();
    if image.width() as usize != size || image.height() as usize != size {
        return Err(Error::InvalidArgument {
            op: "detect",
            reason: format!(
                "image is {}x{} but the checkpoint expects {}x{}; resize the image to {}x{}",
                image.width(),
                image.height(),
                size,
                size,
                size,
                size
            ),
        });
    }
    let tensor = dataset::image_to_tensor::<f32>(&image)?;
    let mask = model.predict(&tensor)?;
    let bytes = dataset::encode_labels(&mask.labels)?;
    let gray = GrayImage::from_vec(size as u32, size as u32, bytes)
        .ok_or_else(|| Error::Image("mask buffer mismatch".into()))?;
    gray.save(out_mask)
        .map_err(|e| Error::Image(format!("{}: {e}", out_mask.display())))?;
    if let Some(path) = overlay {
        let mut blend = RgbImage::new(size as u32, size as u32);
        for y in 0..size as u32 {
            for x in 0..size as u32 {
                let base = image.get_pixel(x, y).0;
                let label = mask.labels[(y as usize) * size + x as usize];
                let tint = match label {
                    1 => [0u8, 255, 0],
                    2 => [255, 0, 0],
                    _ => base,
                };
                let mixed = [
                    ((base[0] as u16 + tint[0] as u16) / 2) as u8,
                    ((base[1] as u16 + tint[1] as u16) / 2) as u8,
                    ((base[2] as u16 + tint[2] as u16) / 2) as u8,
                ];
                blend.put_pixel(x, y, image::Rgb(mixed));
            }
        }
        blend
            .save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    let forged = mask.labels.iter().filter(|&&l| l != 0).count();
    println!(
        "wrote {} forged-pixels={} ({:.2}%)",
        out_mask.display(),
        forged,
        100.0 * forged as f64 / mask.labels.len() as f64
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &std::path::Path,
    data_dir: &std::path::Path,
    report_path: &std::path::Path,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let samples = dataset::read_dataset(data_dir)?;
    let mut preds: Vec<Vec<u8>> = Vec::with_capacity(samples.len());
    for sample in &samples {
        let tensor = dataset::image_to_tensor::<f32>(&sample.image)?;
        preds.push(model.predict(&tensor)?.labels);
    }
    let pairs: Vec<(&[u8], &[u8])> = preds
        .iter()
        .zip(&samples)
        .map(|(p, s)| (p.as_slice(), s.truth.as_slice()))
        .collect();
    let report = score_dataset(&pairs)?;
    fs::write(report_path, report.to_json() + "\n")
        .map_err(|e| Error::Config(format!("{}: {e}", report_path.display())))?;
    println!(
        "evaluated {} images: combined-f1={:.4} class1-f1={:.4} class2-f1={:.4} ({})",
        report.images.len(),
        report.aggregate.combined.f1,
        report.aggregate.class1.f1,
        report.aggregate.class2.f1,
        report_path.display()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<()> {
    let reports = check_model(cfg, tolerance)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "check {} params={} max-rel-err={:.3e} {}",
            r.name,
            r.params_checked,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::GradCheck(format!(
            "{failed} of {} groups exceed tolerance {tolerance:.1e}",
            reports.len()
        )));
    }
    println!("all {} gradient groups pass at {:.1e}", reports.len(), tolerance);
    Ok(())
}
