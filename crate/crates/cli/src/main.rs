//! `tpd`: dataset generation, training, two-stage try-on inference,
//! conditioning-mode ablation, and gradient verification, driven by a
//! JSON config.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 verification
//! failure.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tpd_core::cli::{cmd_ablate, cmd_gen_data, cmd_grad_check, cmd_infer, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "tpd", about = "Pixel-space try-on diffusion engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoising model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory for checkpoints and the loss log
        /// (defaults to paths.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Run two-stage try-on over the dataset and write images plus an
    /// evaluation report.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trained checkpoint (defaults to paths.checkpoint).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dress each person in their own garment (reconstruction
        /// protocol) instead of the next sample's garment.
        #[arg(long)]
        paired: bool,
    },
    /// Train both conditioning modes under identical budgets and
    /// compare held-out reconstruction.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Report path (defaults to paths.out_dir/ablate.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify gradients of every layer family in f64.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run() -> Result<(), (String, u8)> {
    let cli = Cli::parse();
    let fail = |e: tpd_core::Error| (e.to_string(), 1u8);

    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config).map_err(|e| (e.to_string(), 1))?;
            let out = out
                .or(cfg.paths.data_dir.clone())
                .ok_or(("no output directory: pass --out or set paths.data_dir".to_string(), 1))?;
            let n = cmd_gen_data(&cfg, &out).map_err(fail)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, out, ckpt } => {
            let cfg = RunConfig::load(&config).map_err(|e| (e.to_string(), 1))?;
            let data = cfg
                .paths
                .data_dir
                .clone()
                .ok_or(("paths.data_dir is required for train".to_string(), 1))?;
            let out = out
                .or(cfg.paths.out_dir.clone())
                .ok_or(("no output directory: pass --out or set paths.out_dir".to_string(), 1))?;
            let outcome = cmd_train(&cfg, &data, &out, ckpt.as_deref()).map_err(fail)?;
            if let (Some(first), Some(last)) = (outcome.loss_log.first(), outcome.loss_log.last())
            {
                println!(
                    "trained steps {}..{}: loss {:.4} -> {:.4}",
                    first.0, last.0, first.1, last.1
                );
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Infer { config, out, ckpt, paired } => {
            let cfg = RunConfig::load(&config).map_err(|e| (e.to_string(), 1))?;
            let data = cfg
                .paths
                .data_dir
                .clone()
                .ok_or(("paths.data_dir is required for infer".to_string(), 1))?;
            let ckpt = ckpt
                .or(cfg.paths.checkpoint.clone())
                .ok_or(("no checkpoint: pass --ckpt or set paths.checkpoint".to_string(), 1))?;
            let out = out
                .or(cfg.paths.out_dir.clone())
                .ok_or(("no output directory: pass --out or set paths.out_dir".to_string(), 1))?;
            let report = cmd_infer(&cfg, &ckpt, &data, &out, paired).map_err(fail)?;
            println!(
                "{} samples: mean SSIM {:.4}, mean PSNR {:.2} dB, preservation violations {}",
                report.sample_count,
                report.mean_ssim,
                report.mean_psnr_db,
                report.total_preservation_violations
            );
            if let Some(iou) = report.mean_stage1_iou {
                println!("stage-1 mask IoU {:.4}", iou);
            }
            if let Some(mass) = report.attention_mass {
                println!("cross-half attention mass {:.4}", mass);
            }
        }
        Command::Ablate { config, out } => {
            let cfg = RunConfig::load(&config).map_err(|e| (e.to_string(), 1))?;
            let data = cfg
                .paths
                .data_dir
                .clone()
                .ok_or(("paths.data_dir is required for ablate".to_string(), 1))?;
            let out = out
                .or_else(|| cfg.paths.out_dir.clone().map(|d| d.join("ablate.json")))
                .ok_or(("no report path: pass --out or set paths.out_dir".to_string(), 1))?;
            let report = cmd_ablate(&cfg, &data, &out).map_err(fail)?;
            for row in &report.rows {
                println!(
                    "{:>8}: held-out SSIM {:.4} over {} samples ({} steps)",
                    row.mode,
                    row.mean_holdout_ssim,
                    row.per_sample_ssim.len(),
                    row.train_steps
                );
            }
            println!("report: {}", out.display());
        }
        Command::GradCheck { config } => {
            let cfg = RunConfig::load(&config).map_err(|e| (e.to_string(), 1))?;
            let report = cmd_grad_check(&cfg).map_err(fail)?;
            for f in &report.families {
                println!("{:<20} max relative error {:.3e}", f.family, f.max_rel_err);
            }
            if !report.passed() {
                let names: Vec<&str> =
                    report.offenders().iter().map(|f| f.family.as_str()).collect();
                return Err((
                    format!(
                        "gradient check failed (threshold {:.0e}): {}",
                        report.threshold,
                        names.join(", ")
                    ),
                    2,
                ));
            }
            println!("all families within {:.0e}", report.threshold);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
