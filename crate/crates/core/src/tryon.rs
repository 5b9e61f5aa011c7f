//! Canvas assembly for attention-based texture transfer, mask
//! augmentation, and the two-stage mask-prediction inference pipeline.
//!
//! The diffused state always carries four channels: the RGB canvas
//! plus one jointly-diffused mask channel that learns the clothing
//! area. Conditioning carries the masked canvas, the keep mask, and
//! the pose / dense-pose planes.

use crate::diffusion::{ddim_sample, Denoiser, NoiseSchedule};
use crate::error::TensorError;
use crate::mask::{signed_distance_field, BinaryMask};
use crate::nnet::{UNet, UNetParams};
use crate::synthdata::TryOnSample;
use crate::tensor::{Tape, Tensor};

/// Diffused state channels: RGB + mask.
pub const STATE_CHANNELS: usize = 4;
/// Conditioning channels shared by both modes: masked canvas RGB,
/// keep mask, pose RGB, dense RGB.
pub const BASE_COND_CHANNELS: usize = 10;
/// Channel-concat mode appends the garment RGB to the conditioning.
pub const CHANNEL_MODE_COND_CHANNELS: usize = 13;

/// How the garment is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// Garment stacked below the person along the spatial (row) axis;
    /// self-attention sees garment pixels as in-image context.
    SpatialConcat,
    /// Garment appended as extra conditioning channels on the person
    /// canvas (the ablation baseline).
    ChannelConcat,
}

impl ConditioningMode {
    pub fn cond_channels(self) -> usize {
        match self {
            ConditioningMode::SpatialConcat => BASE_COND_CHANNELS,
            ConditioningMode::ChannelConcat => CHANNEL_MODE_COND_CHANNELS,
        }
    }

    pub fn in_channels(self) -> usize {
        STATE_CHANNELS + self.cond_channels()
    }

    /// Canvas extent given the person image extent.
    pub fn canvas_height(self, person_height: usize) -> usize {
        match self {
            ConditioningMode::SpatialConcat => 2 * person_height,
            ConditioningMode::ChannelConcat => person_height,
        }
    }
}

/// Where an inpainting mask came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskProvenance {
    Parse,
    Bbox,
    Augmented(f64),
    PredictedStage1,
    Union,
}

/// Binary keep/inpaint plane: grid value 1 keeps the original pixel,
/// 0 marks it for synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct InpaintingMask {
    keep: BinaryMask,
    pub provenance: MaskProvenance,
}

impl InpaintingMask {
    pub fn from_keep(keep: BinaryMask, provenance: MaskProvenance) -> Self {
        InpaintingMask { keep, provenance }
    }

    /// Builds from the region to synthesize (the complement is kept).
    pub fn from_inpaint_region(region: &BinaryMask, provenance: MaskProvenance) -> Self {
        InpaintingMask { keep: region.complement(), provenance }
    }

    pub fn keep(&self) -> &BinaryMask {
        &self.keep
    }

    pub fn inpaint_region(&self) -> BinaryMask {
        self.keep.complement()
    }
}

/// A garment image plus its foreground silhouette, for dressing a
/// person in a garment other than their own.
#[derive(Debug, Clone, Copy)]
pub struct GarmentRef<'a> {
    pub image: &'a Tensor<f32>,
    pub silhouette: &'a BinaryMask,
}

/// The assembled diffusion input: diffused target state plus
/// conditioning planes, with the person/garment row split recorded.
#[derive(Debug, Clone)]
pub struct CanvasBundle {
    pub state0: Tensor<f32>,
    pub cond: Tensor<f32>,
    /// First garment-half row (equals the person height; in channel
    /// mode there is no garment half and this is the canvas height).
    pub split_row: usize,
    pub mode: ConditioningMode,
}

fn norm(v: f32) -> f32 {
    2.0 * v - 1.0
}

fn denorm(v: f32) -> f32 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn mask_to_pm1(m: bool) -> f32 {
    if m {
        1.0
    } else {
        -1.0
    }
}

/// Assembles the spatially concatenated canvas: person rows `[0, H)`,
/// garment rows `[H, 2H)`.
pub fn assemble_satt(
    sample: &TryOnSample,
    garment: Option<GarmentRef<'_>>,
    keep_mask: &InpaintingMask,
) -> Result<CanvasBundle, TensorError> {
    assemble(sample, garment, keep_mask, ConditioningMode::SpatialConcat)
}

/// Assembles the channel-concatenation ablation: garment RGB becomes
/// three extra conditioning channels on the person-sized canvas.
pub fn assemble_channel_concat(
    sample: &TryOnSample,
    garment: Option<GarmentRef<'_>>,
    keep_mask: &InpaintingMask,
) -> Result<CanvasBundle, TensorError> {
    assemble(sample, garment, keep_mask, ConditioningMode::ChannelConcat)
}

pub fn assemble(
    sample: &TryOnSample,
    garment: Option<GarmentRef<'_>>,
    keep_mask: &InpaintingMask,
    mode: ConditioningMode,
) -> Result<CanvasBundle, TensorError> {
    let (h, w) = (sample.person.shape()[1], sample.person.shape()[2]);
    let (g_img, g_sil) = match garment {
        Some(g) => (g.image, g.silhouette),
        None => (&sample.garment, &sample.garment_sil),
    };
    if g_img.shape()[2] != w || g_sil.width() != w {
        return Err(TensorError::shape(
            "assemble",
            format!("garment width {} vs person width {w}", g_img.shape()[2]),
        ));
    }
    if g_img.shape()[1] != h || g_sil.height() != h {
        return Err(TensorError::shape(
            "assemble",
            format!("garment height {} vs person height {h}", g_img.shape()[1]),
        ));
    }
    if keep_mask.keep().height() != h || keep_mask.keep().width() != w {
        return Err(TensorError::shape(
            "assemble",
            format!(
                "keep mask {}x{} vs person {h}x{w}",
                keep_mask.keep().height(),
                keep_mask.keep().width()
            ),
        ));
    }

    let plane = h * w;
    let person = sample.person.data();
    let pose = sample.pose.data();
    let dense = sample.dense.data();
    let keep = keep_mask.keep();

    match mode {
        ConditioningMode::SpatialConcat => {
            let ch = 2 * h;
            let cplane = ch * w;
            let mut state = vec![0.0f32; STATE_CHANNELS * cplane];
            let mut cond = vec![0.0f32; BASE_COND_CHANNELS * cplane];

            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let pi = y * w + x; // person-half canvas index
                    let gi = (h + y) * w + x; // garment-half canvas index
                    let k = keep.get(y, x);

                    // Diffused state: person canvas over garment canvas.
                    for c in 0..3 {
                        state[c * cplane + pi] = norm(person[c * plane + i]);
                        state[c * cplane + gi] = norm(g_img.data()[c * plane + i]);
                    }
                    state[3 * cplane + pi] = mask_to_pm1(sample.parse_mask.get(y, x));
                    state[3 * cplane + gi] = mask_to_pm1(g_sil.get(y, x));

                    // Conditioning: masked canvas, keep plane, pose,
                    // dense. The garment half is fully known context:
                    // unmasked image, keep = 1, auxiliary planes zero.
                    for c in 0..3 {
                        cond[c * cplane + pi] =
                            if k { norm(person[c * plane + i]) } else { 0.0 };
                        cond[c * cplane + gi] = norm(g_img.data()[c * plane + i]);
                    }
                    cond[3 * cplane + pi] = if k { 1.0 } else { 0.0 };
                    cond[3 * cplane + gi] = 1.0;
                    for c in 0..3 {
                        cond[(4 + c) * cplane + pi] = pose[c * plane + i];
                        cond[(7 + c) * cplane + pi] = dense[c * plane + i];
                        // garment half stays 0
                    }
                }
            }
            Ok(CanvasBundle {
                state0: Tensor::new(vec![STATE_CHANNELS, ch, w], state)?,
                cond: Tensor::new(vec![BASE_COND_CHANNELS, ch, w], cond)?,
                split_row: h,
                mode,
            })
        }
        ConditioningMode::ChannelConcat => {
            let mut state = vec![0.0f32; STATE_CHANNELS * plane];
            let mut cond = vec![0.0f32; CHANNEL_MODE_COND_CHANNELS * plane];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let k = keep.get(y, x);
                    for c in 0..3 {
                        state[c * plane + i] = norm(person[c * plane + i]);
                        cond[c * plane + i] = if k { norm(person[c * plane + i]) } else { 0.0 };
                        cond[(4 + c) * plane + i] = pose[c * plane + i];
                        cond[(7 + c) * plane + i] = dense[c * plane + i];
                        cond[(10 + c) * plane + i] = norm(g_img.data()[c * plane + i]);
                    }
                    state[3 * plane + i] = mask_to_pm1(sample.parse_mask.get(y, x));
                    cond[3 * plane + i] = if k { 1.0 } else { 0.0 };
                }
            }
            Ok(CanvasBundle {
                state0: Tensor::new(vec![STATE_CHANNELS, h, w], state)?,
                cond: Tensor::new(vec![CHANNEL_MODE_COND_CHANNELS, h, w], cond)?,
                split_row: h,
                mode,
            })
        }
    }
}

/// Shape-aware interpolation between the tight parse mask and the
/// coarse box: blends their signed distance fields and re-thresholds,
/// then enforces nesting by intersecting with the box region and
/// unioning with the parse region.
pub fn augment_mask(
    parse: &InpaintingMask,
    bbox: &InpaintingMask,
    lambda: f64,
) -> Result<InpaintingMask, TensorError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::invalid("augment_mask", format!("lambda {lambda} outside [0,1]")));
    }
    let parse_region = parse.inpaint_region();
    let bbox_region = bbox.inpaint_region();
    if !parse_region.same_shape(&bbox_region) {
        return Err(TensorError::shape("augment_mask", "mask shapes differ".to_string()));
    }
    if !parse_region.is_subset_of(&bbox_region) {
        return Err(TensorError::invalid(
            "augment_mask",
            "parse inpaint region must nest inside the box region",
        ));
    }
    let d_parse = signed_distance_field(&parse_region);
    let d_bbox = signed_distance_field(&bbox_region);
    let (h, w) = (parse_region.height(), parse_region.width());
    let mut blended = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = (1.0 - lambda) * d_parse[i] + lambda * d_bbox[i];
            blended.set(y, x, d < 0.0);
        }
    }
    let region = blended.intersect(&bbox_region).union(&parse_region);
    Ok(InpaintingMask::from_inpaint_region(&region, MaskProvenance::Augmented(lambda)))
}

/// Sampler knobs for the two-stage pipeline.
#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Threshold on the denormalized mask channel above which a pixel
    /// counts as predicted clothing area.
    pub stage1_threshold: f64,
    /// Dilation applied to the stage-1 prediction to guard against
    /// under-coverage.
    pub dilate_radius: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, eta: 0.0, seed: 0, stage1_threshold: 0.5, dilate_radius: 1 }
    }
}

fn stage_seed(base: u64, stage: u64) -> u64 {
    base.wrapping_mul(2).wrapping_add(stage)
}

/// Stage 1: denoise from the coarse box mask and read the predicted
/// clothing area for this garment off the mask channel.
pub fn stage1_predict_mask(
    denoiser: &dyn Denoiser<f32>,
    sample: &TryOnSample,
    garment: Option<GarmentRef<'_>>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mode: ConditioningMode,
) -> Result<InpaintingMask, TensorError> {
    let keep = InpaintingMask::from_inpaint_region(&sample.bbox, MaskProvenance::Bbox);
    let bundle = assemble(sample, garment, &keep, mode)?;
    let state = ddim_sample(
        denoiser,
        &bundle.cond,
        STATE_CHANNELS,
        sched,
        cfg.steps,
        cfg.eta,
        stage_seed(cfg.seed, 0),
    )?;
    let (h, w) = (sample.person.shape()[1], sample.person.shape()[2]);
    let canvas_h = state.shape()[1];
    let plane = canvas_h * w;
    // Mask channel, person half only.
    let mut region = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = state.data()[3 * plane + y * w + x];
            if denorm(v) as f64 > cfg.stage1_threshold {
                region.set(y, x, true);
            }
        }
    }
    let region = region.dilate(cfg.dilate_radius);
    Ok(InpaintingMask::from_inpaint_region(&region, MaskProvenance::PredictedStage1))
}

/// Inpaint-region union of the stage-1 prediction and the parse mask.
pub fn union_mask(
    stage1: &InpaintingMask,
    parse: &InpaintingMask,
) -> Result<InpaintingMask, TensorError> {
    let a = stage1.inpaint_region();
    let b = parse.inpaint_region();
    if !a.same_shape(&b) {
        return Err(TensorError::shape("union_mask", "mask shapes differ".to_string()));
    }
    Ok(InpaintingMask::from_inpaint_region(&a.union(&b), MaskProvenance::Union))
}

/// Everything the two-stage pipeline produces for one sample.
#[derive(Debug, Clone)]
pub struct TryOnResult {
    /// Final image, `[3,H,W]` in `[0,1]`; kept pixels equal the source
    /// person image bit-exactly.
    pub image: Tensor<f32>,
    pub stage1_mask: InpaintingMask,
    pub union_mask: InpaintingMask,
}

/// Stage 1 predicts the new garment's area; the union with the worn
/// garment's parse area becomes the accurate stage-2 inpainting mask;
/// stage 2 synthesizes under that mask and composites against the
/// original person image. The garment half of the canvas is discarded.
pub fn two_stage_tryon(
    denoiser: &dyn Denoiser<f32>,
    sample: &TryOnSample,
    garment: Option<GarmentRef<'_>>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    mode: ConditioningMode,
) -> Result<TryOnResult, TensorError> {
    let stage1 = stage1_predict_mask(denoiser, sample, garment, sched, cfg, mode)?;
    let parse = InpaintingMask::from_inpaint_region(&sample.parse_mask, MaskProvenance::Parse);
    let stage2_mask = union_mask(&stage1, &parse)?;

    let bundle = assemble(sample, garment, &stage2_mask, mode)?;
    let state = ddim_sample(
        denoiser,
        &bundle.cond,
        STATE_CHANNELS,
        sched,
        cfg.steps,
        cfg.eta,
        stage_seed(cfg.seed, 1),
    )?;

    let (h, w) = (sample.person.shape()[1], sample.person.shape()[2]);
    let canvas_h = state.shape()[1];
    let cplane = canvas_h * w;
    let plane = h * w;
    let mut rgb = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                rgb[c * plane + y * w + x] = denorm(state.data()[c * cplane + y * w + x]);
            }
        }
    }
    let generated = Tensor::new(vec![3, h, w], rgb)?;
    let keep_tensor = stage2_mask.keep().to_tensor::<f32>();
    let image = crate::diffusion::composite(&generated, &keep_tensor, &sample.person)?;
    Ok(TryOnResult { image, stage1_mask: stage1, union_mask: stage2_mask })
}

/// Average attention mass that masked person-half queries place on
/// garment-half keys at the coarsest attention level. Diagnostic for
/// the spatial-concat conditioning; reported, not asserted.
pub fn cross_half_attention_mass(
    unet: &UNet,
    params: &UNetParams<f32>,
    bundle: &CanvasBundle,
    keep_mask: &InpaintingMask,
    t: usize,
    total_steps: usize,
    noise_seed: u64,
) -> Result<f64, TensorError> {
    use rand::SeedableRng;
    if bundle.mode != ConditioningMode::SpatialConcat {
        return Err(TensorError::invalid(
            "attention_mass",
            "diagnostic applies to the spatial-concat canvas",
        ));
    }
    let ss = bundle.state0.shape().to_vec();
    let (canvas_h, w) = (ss[1], ss[2]);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
    let eps = Tensor::<f32>::randn(&ss, &mut rng);
    let sched = crate::diffusion::make_schedule(total_steps, 1e-4, 0.02)?;
    let state_t = crate::diffusion::q_sample(&bundle.state0, t, &eps, &sched)?;

    let mut tape = Tape::new();
    let bound = unet.bind(&mut tape, params, false)?;
    let s4 = tape.leaf(state_t.reshape(vec![1, ss[0], canvas_h, w])?, false);
    let cs = bundle.cond.shape().to_vec();
    let c4 = tape.leaf(bundle.cond.clone().reshape(vec![1, cs[0], canvas_h, w])?, false);
    let (_, probes) = unet.forward_probed(&mut tape, &bound, s4, c4, t, total_steps)?;

    let coarsest = probes.iter().map(|p| p.level).max().ok_or_else(|| {
        TensorError::invalid("attention_mass", "model has no attention blocks")
    })?;
    let factor = 1usize << coarsest;
    let (gh, gw) = (canvas_h / factor, w / factor);
    let split = bundle.split_row / factor;

    // A coarse query cell is "masked" if any fine pixel it covers is
    // inpainted (keep = 0).
    let keep = keep_mask.keep();
    let mut masked_cell = vec![false; gh * gw];
    for (ci, cell) in masked_cell.iter_mut().enumerate() {
        let (cy, cx) = (ci / gw, ci % gw);
        'cell: for dy in 0..factor {
            for dx in 0..factor {
                let (y, x) = (cy * factor + dy, cx * factor + dx);
                if y < keep.height() && !keep.get(y, x) {
                    *cell = true;
                    break 'cell;
                }
            }
        }
    }

    let mut total = 0.0f64;
    let mut count = 0usize;
    for probe in probes.iter().filter(|p| p.level == coarsest) {
        for &wid in &probe.weights {
            let wm = tape.value(wid);
            let p = wm.shape()[0];
            debug_assert_eq!(p, gh * gw);
            for q in 0..p {
                let (qy, _) = (q / gw, q % gw);
                if qy >= split || !masked_cell[q] {
                    continue;
                }
                let row = &wm.data()[q * p..(q + 1) * p];
                let mass: f32 = row
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k / gw >= split)
                    .map(|(_, &v)| v)
                    .sum();
                total += mass as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(TensorError::invalid("attention_mass", "no masked person-half queries"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_sample, GeneratorConfig};

    fn sample() -> TryOnSample {
        gen_sample(11, &GeneratorConfig::default()).unwrap()
    }

    #[test]
    fn satt_bundle_shapes_and_keep_layout() {
        let s = sample();
        let keep = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
        let b = assemble_satt(&s, None, &keep).unwrap();
        let (h, w) = (32, 24);
        assert_eq!(b.state0.shape(), &[4, 2 * h, w]);
        assert_eq!(b.cond.shape(), &[10, 2 * h, w]);
        assert_eq!(b.split_row, h);

        let cplane = 2 * h * w;
        // Garment-half keep plane is all ones; person half equals c_m.
        for y in 0..h {
            for x in 0..w {
                let gk = b.cond.data()[3 * cplane + (h + y) * w + x];
                assert_eq!(gk, 1.0);
                let pk = b.cond.data()[3 * cplane + y * w + x];
                assert_eq!(pk, if keep.keep().get(y, x) { 1.0 } else { 0.0 });
                // Pose/dense planes vanish on the garment half.
                for c in 4..10 {
                    assert_eq!(b.cond.data()[c * cplane + (h + y) * w + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn satt_masked_canvas_reproduces_kept_person_pixels() {
        let s = sample();
        let keep = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
        let b = assemble_satt(&s, None, &keep).unwrap();
        let (h, w) = (32, 24);
        let cplane = 2 * h * w;
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                if keep.keep().get(y, x) {
                    for c in 0..3 {
                        let got = b.cond.data()[c * cplane + y * w + x];
                        let want = norm(s.person.data()[c * plane + y * w + x]);
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_bundle_matches_satt_person_half() {
        let s = sample();
        let keep = InpaintingMask::from_inpaint_region(&s.parse_mask, MaskProvenance::Parse);
        let satt = assemble_satt(&s, None, &keep).unwrap();
        let chan = assemble_channel_concat(&s, None, &keep).unwrap();
        let (h, w) = (32, 24);
        assert_eq!(chan.state0.shape(), &[4, h, w]);
        assert_eq!(chan.cond.shape(), &[13, h, w]);

        let cplane = 2 * h * w;
        let plane = h * w;
        // The 10 shared conditioning channels agree with the person
        // rows of the spatial layout.
        for c in 0..10 {
            for i in 0..plane {
                assert_eq!(
                    chan.cond.data()[c * plane + i],
                    satt.cond.data()[c * cplane + i],
                    "channel {c} pixel {i}"
                );
            }
        }
        // And the appended garment channels equal the garment rows of
        // the spatial state.
        for c in 0..3 {
            for i in 0..plane {
                assert_eq!(
                    chan.cond.data()[(10 + c) * plane + i],
                    satt.state0.data()[c * cplane + plane + i],
                );
            }
        }
    }

    #[test]
    fn assemble_rejects_size_mismatch() {
        let s = sample();
        let other = gen_sample(5, &GeneratorConfig { width: 28, ..Default::default() }).unwrap();
        let keep = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
        let g = GarmentRef { image: &other.garment, silhouette: &other.garment_sil };
        assert!(assemble_satt(&s, Some(g), &keep).is_err());
    }

    #[test]
    fn augment_endpoints_are_bit_exact() {
        for seed in 0..100u64 {
            let s = gen_sample(seed, &GeneratorConfig::default()).unwrap();
            let parse = InpaintingMask::from_inpaint_region(&s.parse_mask, MaskProvenance::Parse);
            let bbox = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
            let at0 = augment_mask(&parse, &bbox, 0.0).unwrap();
            assert_eq!(at0.keep(), parse.keep(), "seed {seed}: lambda 0");
            let at1 = augment_mask(&parse, &bbox, 1.0).unwrap();
            assert_eq!(at1.keep(), bbox.keep(), "seed {seed}: lambda 1");
        }
    }

    #[test]
    fn augment_is_monotone_in_lambda() {
        let s = sample();
        let parse = InpaintingMask::from_inpaint_region(&s.parse_mask, MaskProvenance::Parse);
        let bbox = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
        let mut prev = parse.inpaint_region();
        for k in 0..=10 {
            let lambda = k as f64 / 10.0;
            let m = augment_mask(&parse, &bbox, lambda).unwrap();
            let region = m.inpaint_region();
            assert!(prev.is_subset_of(&region), "lambda {lambda} shrank the region");
            prev = region;
        }
        assert_eq!(prev, bbox.inpaint_region());
    }

    #[test]
    fn augment_disk_in_box_matches_brute_force_sdf_blend() {
        // Centered disk nested in a box, lambda = 1/2, against a
        // brute-force per-pixel SDF blend.
        let (h, w) = (20, 20);
        let disk = BinaryMask::from_fn(h, w, |y, x| {
            let dy = y as f64 - 9.5;
            let dx = x as f64 - 9.5;
            dy * dy + dx * dx <= 16.0
        });
        let boxm = BinaryMask::from_fn(h, w, |y, x| (3..17).contains(&y) && (3..17).contains(&x));
        assert!(disk.is_subset_of(&boxm));
        let parse = InpaintingMask::from_inpaint_region(&disk, MaskProvenance::Parse);
        let bbox = InpaintingMask::from_inpaint_region(&boxm, MaskProvenance::Bbox);
        let got = augment_mask(&parse, &bbox, 0.5).unwrap().inpaint_region();

        // Brute-force SDF: per-pixel nearest opposite-class scan.
        let brute_sdf = |m: &BinaryMask| -> Vec<f64> {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let inside = m.get(y, x);
                    let mut best = f64::INFINITY;
                    for yy in 0..h {
                        for xx in 0..w {
                            if m.get(yy, xx) != inside {
                                let dy = y as f64 - yy as f64;
                                let dx = x as f64 - xx as f64;
                                best = best.min((dy * dy + dx * dx).sqrt());
                            }
                        }
                    }
                    out[y * w + x] = if inside { -best } else { best };
                }
            }
            out
        };
        let d1 = brute_sdf(&disk);
        let d2 = brute_sdf(&boxm);
        let mut want = BinaryMask::zeros(h, w);
        for i in 0..h * w {
            if 0.5 * d1[i] + 0.5 * d2[i] < 0.0 {
                want.set(i / w, i % w, true);
            }
        }
        let want = want.intersect(&boxm).union(&disk);
        assert_eq!(got, want);
        assert!(disk.area() <= got.area() && got.area() <= boxm.area());
    }

    #[test]
    fn augment_rejects_bad_inputs() {
        let s = sample();
        let parse = InpaintingMask::from_inpaint_region(&s.parse_mask, MaskProvenance::Parse);
        let bbox = InpaintingMask::from_inpaint_region(&s.bbox, MaskProvenance::Bbox);
        assert!(augment_mask(&parse, &bbox, -0.1).is_err());
        assert!(augment_mask(&parse, &bbox, 1.1).is_err());
        // Swapped nesting violates the precondition.
        assert!(augment_mask(&bbox, &parse, 0.5).is_err());
    }

    #[test]
    fn union_mask_contracts() {
        let s = sample();
        let parse = InpaintingMask::from_inpaint_region(&s.parse_mask, MaskProvenance::Parse);
        // Idempotence.
        let u = union_mask(&parse, &parse).unwrap();
        assert_eq!(u.inpaint_region(), parse.inpaint_region());

        // Additivity on disjoint regions.
        let a = BinaryMask::from_fn(8, 8, |y, _| y < 2);
        let b = BinaryMask::from_fn(8, 8, |y, _| y >= 6);
        let ia = InpaintingMask::from_inpaint_region(&a, MaskProvenance::Parse);
        let ib = InpaintingMask::from_inpaint_region(&b, MaskProvenance::Parse);
        let u = union_mask(&ia, &ib).unwrap();
        assert_eq!(u.inpaint_region().area(), a.area() + b.area());

        // Random masks vs per-pixel OR.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ra = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
        let rb = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.5));
        let u = union_mask(
            &InpaintingMask::from_inpaint_region(&ra, MaskProvenance::Parse),
            &InpaintingMask::from_inpaint_region(&rb, MaskProvenance::Parse),
        )
        .unwrap();
        let region = u.inpaint_region();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(region.get(y, x), ra.get(y, x) || rb.get(y, x));
            }
        }
    }
}
