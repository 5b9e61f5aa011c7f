//! Command implementations behind the `tpd` binary. Each returns its
//! results as data; printing and exit codes live in the binary.

use super::config::{Mode, RunConfig};
use crate::diffusion::{make_schedule, training_loss, NoiseSchedule, UNetDenoiser};
use crate::error::{CheckpointError, DatasetError, Error};
use crate::gradcheck::{run_grad_check_opts, GradCheckReport};
use crate::mask::BinaryMask;
use crate::metrics::{mask_iou_masks, preservation_check, psnr, ssim, EvalReport, SampleEval};
use crate::nnet::{adam_step, load_checkpoint, save_checkpoint, AdamConfig, UNet, UNetParams};
use crate::synthdata::{gen_sample, read_dataset, write_dataset, TryOnSample};
use crate::tensor::{Tape, Tensor};
use crate::tryon::{
    assemble, augment_mask, cross_half_attention_mass, two_stage_tryon, ConditioningMode,
    GarmentRef, InpaintingMask, MaskProvenance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Worker-count cap from the environment, clamped to at least one.
pub fn thread_count() -> usize {
    std::env::var("TPD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1)
}

fn thread_pool() -> crate::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::msg(format!("thread pool: {e}")))
}

// ---- gen-data ----

/// Writes the configured number of deterministic samples plus the
/// validating manifest.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path) -> crate::Result<usize> {
    if cfg.dataset.count == 0 {
        return Err(Error::msg("empty dataset"));
    }
    let gen_cfg = cfg.dataset.generator();
    let mut samples = Vec::with_capacity(cfg.dataset.count);
    for i in 0..cfg.dataset.count {
        samples.push(gen_sample(cfg.dataset.sample_seed(i), &gen_cfg)?);
    }
    write_dataset(&samples, &gen_cfg, out_dir)?;
    Ok(samples.len())
}

// ---- train ----

fn load_matching_dataset(cfg: &RunConfig, data_dir: &Path) -> crate::Result<Vec<TryOnSample>> {
    let (samples, manifest) = read_dataset(data_dir)?;
    let expected = cfg.dataset_hash();
    if manifest.config_hash != expected {
        return Err(DatasetError::HashMismatch { found: manifest.config_hash, expected }.into());
    }
    if samples.len() != cfg.dataset.count {
        return Err(DatasetError::BadManifest(format!(
            "dataset has {} samples, config expects {}",
            samples.len(),
            cfg.dataset.count
        ))
        .into());
    }
    Ok(samples)
}

struct TrainDraw {
    sample_idx: usize,
    t: usize,
    lambda: f64,
    eps: Tensor<f32>,
}

/// The per-step randomness is a pure function of (training seed, step
/// index), so an interrupted run resumed from a checkpoint replays
/// exactly the draws an uninterrupted run would have seen.
fn draw_batch(cfg: &RunConfig, step: u64, state_shape: &[usize]) -> Vec<TrainDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.training.seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    (0..cfg.training.batch_size)
        .map(|_| TrainDraw {
            sample_idx: rng.gen_range(0..cfg.dataset.train_count),
            t: rng.gen_range(0..cfg.schedule.timesteps),
            lambda: rng.gen_range(0.0..=1.0),
            eps: Tensor::randn(state_shape, &mut rng),
        })
        .collect()
}

fn run_draw(
    unet: &UNet,
    params: &UNetParams<f32>,
    sample: &TryOnSample,
    mode: ConditioningMode,
    draw: &TrainDraw,
    sched: &NoiseSchedule,
) -> crate::Result<(f64, Vec<Vec<f32>>)> {
    let parse = InpaintingMask::from_inpaint_region(&sample.parse_mask, MaskProvenance::Parse);
    let bbox = InpaintingMask::from_inpaint_region(&sample.bbox, MaskProvenance::Bbox);
    let keep = augment_mask(&parse, &bbox, draw.lambda)?;
    debug_assert!(keep.inpaint_region().area() > 0, "training mask must inpaint something");
    let bundle = assemble(sample, None, &keep, mode)?;

    let mut tape = Tape::new();
    let bound = unet.bind(&mut tape, params, true)?;
    let total = sched.len();
    let mut predict = |tape: &mut Tape<f32>, z: crate::tensor::NodeId, c: crate::tensor::NodeId, t: usize| {
        unet.forward(tape, &bound, z, c, t, total)
    };
    let loss = training_loss(
        &mut tape,
        &mut predict,
        &bundle.state0,
        &bundle.cond,
        draw.t,
        &draw.eps,
        sched,
    )?;
    let loss_value = tape.value(loss).item() as f64;
    tape.backward(loss)?;

    let grads = params
        .iter()
        .map(|(name, p)| {
            let id = bound.id(name).expect("bound parameter");
            tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    Ok((loss_value, grads))
}

/// Runs the training loop from `params.step` up to the configured step
/// count, invoking `on_step` after every optimizer step with the mean
/// batch loss and the updated parameters.
pub fn train_params(
    cfg: &RunConfig,
    mode: ConditioningMode,
    samples: &[TryOnSample],
    params: &mut UNetParams<f32>,
    mut on_step: impl FnMut(u64, f64, &UNetParams<f32>) -> crate::Result<()>,
) -> crate::Result<()> {
    let unet = UNet::new(cfg.unet_config())?;
    unet.check_params(params)?;
    let sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
    let train = &samples[..cfg.dataset.train_count.min(samples.len())];
    let (canvas_h, canvas_w) = cfg.canvas();
    let state_shape = [crate::tryon::STATE_CHANNELS, canvas_h, canvas_w];
    let adam = AdamConfig {
        lr: cfg.training.lr,
        beta1: cfg.training.beta1,
        beta2: cfg.training.beta2,
        eps: cfg.training.eps,
    };
    let pool = thread_pool()?;

    for step in params.step..cfg.training.steps {
        let draws = draw_batch(cfg, step, &state_shape);
        // Independent tapes per draw; gradients are reduced in draw
        // order afterward, so the result does not depend on the worker
        // count.
        let results: Vec<crate::Result<(f64, Vec<Vec<f32>>)>> = pool.install(|| {
            draws
                .par_iter()
                .map(|draw| run_draw(&unet, params, &train[draw.sample_idx], mode, draw, &sched))
                .collect()
        });
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let mut loss_sum = 0.0;
        for result in results {
            let (loss, grads) = result?;
            loss_sum += loss;
            for (name, g) in names.iter().zip(&grads) {
                params.accumulate_grad(name, g)?;
            }
        }
        params.scale_grads(1.0 / cfg.training.batch_size as f64);
        adam_step(params, &adam)?;
        let mean_loss = loss_sum / cfg.training.batch_size as f64;
        on_step(params.step, mean_loss, params)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub loss_log: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
}

/// Full training command: dataset validation, optional resume, loss
/// log, periodic and final checkpoints.
pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> crate::Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let samples = load_matching_dataset(cfg, data_dir)?;
    let unet = UNet::new(cfg.unet_config())?;
    let model_hash = cfg.model_hash();

    let mut params: UNetParams<f32> = match resume {
        Some(path) => {
            let loaded = load_checkpoint::<f32>(path)?;
            if loaded.config_hash != model_hash {
                return Err(CheckpointError::ConfigHashMismatch {
                    found: loaded.config_hash,
                    expected: model_hash,
                }
                .into());
            }
            unet.check_params(&loaded)?;
            loaded
        }
        None => {
            let mut p = unet.init_params(cfg.seed);
            p.config_hash = model_hash;
            p
        }
    };

    let log_path = out_dir.join("loss_log.tsv");
    let mut log_file = if resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        std::fs::File::create(&log_path)?
    };

    let mut log = Vec::new();
    let interval = cfg.training.checkpoint_interval;
    let mode = cfg.mode.conditioning();
    let out = out_dir.to_path_buf();
    train_params(cfg, mode, &samples, &mut params, |step, loss, p| {
        writeln!(log_file, "{step}\t{loss}").map_err(Error::from)?;
        log.push((step, loss));
        if step % interval == 0 && step < cfg.training.steps {
            save_checkpoint(p, &out.join(format!("ckpt_step{step:06}.tpd")))?;
        }
        Ok(())
    })?;
    log_file.flush()?;

    let final_path = out_dir.join("ckpt_final.tpd");
    save_checkpoint(&params, &final_path)?;
    Ok(TrainOutcome { loss_log: log, final_checkpoint: final_path })
}

// ---- infer ----

fn save_rgb(t: &Tensor<f32>, path: &Path) -> crate::Result<()> {
    crate::synthdata::tensor_to_rgb_image(t)
        .save(path)
        .map_err(|e| Error::msg(format!("{}: {e}", path.display())))
}

fn save_mask(m: &BinaryMask, path: &Path) -> crate::Result<()> {
    crate::synthdata::mask_to_gray_image(m)
        .save(path)
        .map_err(|e| Error::msg(format!("{}: {e}", path.display())))
}

fn side_by_side(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let (c, h, w) = (3, images[0].shape()[1], images[0].shape()[2]);
    let total_w = w * images.len();
    let mut out = vec![0.0f32; c * h * total_w];
    for (k, img) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ch * h * total_w + y * total_w + (k * w + x)] =
                        img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(vec![c, h, total_w], out).expect("grid dims")
}

fn load_params_for(cfg: &RunConfig, unet: &UNet, ckpt: &Path) -> crate::Result<UNetParams<f32>> {
    let params = load_checkpoint::<f32>(ckpt)?;
    let expected = cfg.model_hash();
    if params.config_hash != expected {
        return Err(CheckpointError::ConfigHashMismatch {
            found: params.config_hash,
            expected,
        }
        .into());
    }
    unet.check_params(&params)?;
    Ok(params)
}

/// Two-stage try-on over a whole dataset directory. Paired mode
/// re-dresses each person in their own garment (reconstruction);
/// unpaired mode uses the next sample's garment.
pub fn cmd_infer(
    cfg: &RunConfig,
    ckpt: &Path,
    data_dir: &Path,
    out_dir: &Path,
    paired: bool,
) -> crate::Result<EvalReport> {
    std::fs::create_dir_all(out_dir)?;
    let samples = load_matching_dataset(cfg, data_dir)?;
    let unet = UNet::new(cfg.unet_config())?;
    let params = load_params_for(cfg, &unet, ckpt)?;
    let sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
    let mode = cfg.mode.conditioning();
    let denoiser = UNetDenoiser { unet: &unet, params: &params, total_steps: sched.len() };
    let pool = thread_pool()?;

    let n = samples.len();
    let results: Vec<crate::Result<SampleEval>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let sample = &samples[i];
                let garment_src = &samples[(i + 1) % n];
                let garment = if paired {
                    None
                } else {
                    Some(GarmentRef {
                        image: &garment_src.garment,
                        silhouette: &garment_src.garment_sil,
                    })
                };
                let scfg = cfg.sampler.sampler_config(i);
                let result = two_stage_tryon(&denoiser, sample, garment, &sched, &scfg, mode)?;

                save_rgb(&result.image, &out_dir.join(format!("{i:05}_tryon.png")))?;
                save_mask(
                    &result.stage1_mask.inpaint_region(),
                    &out_dir.join(format!("{i:05}_stage1.png")),
                )?;
                let garment_img = garment
                    .map(|g| g.image.clone())
                    .unwrap_or_else(|| sample.garment.clone());
                let grid = side_by_side(&[&sample.person, &garment_img, &result.image]);
                save_rgb(&grid, &out_dir.join(format!("{i:05}_grid.png")))?;

                let s = ssim(&result.image, &sample.person)?;
                let p = psnr(&result.image, &sample.person)?;
                let iou = if paired {
                    Some(mask_iou_masks(&result.stage1_mask.inpaint_region(), &sample.parse_mask))
                } else {
                    None
                };
                let violations =
                    preservation_check(&result.image, &sample.person, result.union_mask.keep())?;
                Ok(SampleEval {
                    index: i,
                    ssim: s,
                    psnr_db: p,
                    stage1_iou: iou,
                    preservation_violations: violations,
                })
            })
            .collect()
    });
    let per_sample: Vec<SampleEval> = results.into_iter().collect::<crate::Result<_>>()?;

    // Cross-half attention diagnostic on the first sample, mid-schedule.
    let attention_mass = if mode == ConditioningMode::SpatialConcat && !samples.is_empty() {
        let keep =
            InpaintingMask::from_inpaint_region(&samples[0].bbox, MaskProvenance::Bbox);
        let bundle = assemble(&samples[0], None, &keep, mode)?;
        cross_half_attention_mass(
            &unet,
            &params,
            &bundle,
            &keep,
            sched.len() / 2,
            sched.len(),
            cfg.sampler.seed,
        )
        .ok()
    } else {
        None
    };

    let report = EvalReport::from_samples(format!("{:016x}", cfg.model_hash()), per_sample, attention_mass);
    std::fs::write(out_dir.join("report.json"), report.to_json())?;
    Ok(report)
}

// ---- ablate ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub mode: String,
    pub train_steps: u64,
    pub mean_holdout_ssim: f64,
    pub per_sample_ssim: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateReport {
    pub seed: u64,
    pub train_count: usize,
    pub holdout_count: usize,
    pub rows: Vec<AblateRow>,
}

impl AblateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains both conditioning modes under identical seeds and budgets,
/// then scores paired reconstruction on the held-out split.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out_path: &Path) -> crate::Result<AblateReport> {
    let samples = load_matching_dataset(cfg, data_dir)?;
    if cfg.dataset.train_count >= samples.len() {
        return Err(Error::msg("ablation needs a non-empty held-out split (count > train_count)"));
    }
    let holdout = &samples[cfg.dataset.train_count..];
    let sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;

    let mut rows = Vec::new();
    for mode_tag in [Mode::Satt, Mode::Channel] {
        let mode_cfg = RunConfig { mode: mode_tag, ..cfg.clone() };
        let mode = mode_tag.conditioning();
        let unet = UNet::new(mode_cfg.unet_config())?;
        let mut params = unet.init_params::<f32>(mode_cfg.seed);
        params.config_hash = mode_cfg.model_hash();
        train_params(&mode_cfg, mode, &samples, &mut params, |_, _, _| Ok(()))?;

        let denoiser = UNetDenoiser { unet: &unet, params: &params, total_steps: sched.len() };
        let pool = thread_pool()?;
        let ssims: Vec<crate::Result<f64>> = pool.install(|| {
            holdout
                .par_iter()
                .enumerate()
                .map(|(i, sample)| {
                    let scfg = mode_cfg.sampler.sampler_config(cfg.dataset.train_count + i);
                    let result = two_stage_tryon(&denoiser, sample, None, &sched, &scfg, mode)?;
                    Ok(ssim(&result.image, &sample.person)?)
                })
                .collect()
        });
        let per_sample_ssim: Vec<f64> = ssims.into_iter().collect::<crate::Result<_>>()?;
        let mean = per_sample_ssim.iter().sum::<f64>() / per_sample_ssim.len() as f64;
        rows.push(AblateRow {
            mode: match mode_tag {
                Mode::Satt => "satt".into(),
                Mode::Channel => "channel".into(),
            },
            train_steps: cfg.training.steps,
            mean_holdout_ssim: mean,
            per_sample_ssim,
        });
    }

    let report = AblateReport {
        seed: cfg.seed,
        train_count: cfg.dataset.train_count,
        holdout_count: holdout.len(),
        rows,
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, report.to_json())?;
    Ok(report)
}

// ---- grad-check ----

pub const GRAD_CHECK_FAULT_ENV: &str = "TPD_GRAD_CHECK_FAULT";

/// f64 finite-difference verification of every layer family plus the
/// assembled tiny model. The fault-injection env var exists for the
/// command's own negative-control test.
pub fn cmd_grad_check(cfg: &RunConfig) -> crate::Result<GradCheckReport> {
    let inject = std::env::var(GRAD_CHECK_FAULT_ENV).map(|v| v == "1").unwrap_or(false);
    Ok(run_grad_check_opts(cfg.seed, inject)?)
}
