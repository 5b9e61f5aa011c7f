//! Procedural paired try-on corpus: a stick person with a textured
//! garment mapped onto the torso, plus ground-truth annotations that
//! real pipelines would extract with pose/parsing tools.

use crate::error::DatasetError;
use crate::mask::BinaryMask;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Geometry and annotation knobs for the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Pixels of Chebyshev dilation applied to the torso bounding box
    /// to form the coarse inpainting region.
    pub bbox_margin: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { height: 32, width: 24, bbox_margin: 1 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.height < 16 || self.width < 16 {
            return Err(DatasetError::BadConfig(format!(
                "canvas {}x{} below the 16-pixel minimum",
                self.height, self.width
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(DatasetError::BadConfig(format!(
                "canvas {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Scale + translate mapping from garment-canvas coordinates onto the
/// person torso; recorded so annotation consistency is checkable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale_y: f64,
    pub scale_x: f64,
    pub offset_y: f64,
    pub offset_x: f64,
}

impl AffineMap {
    /// Person-canvas point -> garment-canvas point.
    pub fn inverse(&self, y: f64, x: f64) -> (f64, f64) {
        ((y - self.offset_y) / self.scale_y, (x - self.offset_x) / self.scale_x)
    }
}

/// One paired person/garment sample with ground-truth annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TryOnSample {
    pub person: Tensor<f32>,
    pub garment: Tensor<f32>,
    /// Visible worn-garment pixels on the person (parse mask M).
    pub parse_mask: BinaryMask,
    /// Dilated torso bounding box (coarse inpainting region).
    pub bbox: BinaryMask,
    pub pose: Tensor<f32>,
    pub dense: Tensor<f32>,
    pub garment_sil: BinaryMask,
    pub seed: u64,
    pub affine: AffineMap,
}

// ---- small rasterizer ----

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(h: usize, w: usize, fill: [u8; 3]) -> Self {
        Canvas { h, w, rgb: vec![fill; h * w] }
    }

    fn put(&mut self, y: usize, x: usize, c: [u8; 3]) {
        self.rgb[y * self.w + x] = c;
    }

    fn get(&self, y: usize, x: usize) -> [u8; 3] {
        self.rgb[y * self.w + x]
    }

    fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.h * self.w;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(vec![3, self.h, self.w], data).expect("canvas dims")
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Convex polygon rasterization by half-plane tests at pixel centers.
fn fill_convex(mask: &mut BinaryMask, pts: &[(f64, f64)]) {
    let n = pts.len();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut inside = true;
            for i in 0..n {
                let (ay, ax) = pts[i];
                let (by, bx) = pts[(i + 1) % n];
                let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                if cross < 0.0 {
                    inside = false;
                    break;
                }
            }
            if inside {
                mask.set(y, x, true);
            }
        }
    }
}

fn fill_disk(mask: &mut BinaryMask, cy: f64, cx: f64, r: f64) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r * r {
                mask.set(y, x, true);
            }
        }
    }
}

fn fill_segment(mask: &mut BinaryMask, a: (f64, f64), b: (f64, f64), half_width: f64) {
    let (ay, ax) = a;
    let (by, bx) = b;
    let len2 = (by - ay) * (by - ay) + (bx - ax) * (bx - ax);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - ay) * (by - ay) + (px - ax) * (bx - ax)) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dy = py - (ay + t * (by - ay));
            let dx = px - (ax + t * (bx - ax));
            if dy * dy + dx * dx <= half_width * half_width {
                mask.set(y, x, true);
            }
        }
    }
}

fn paint(canvas: &mut Canvas, mask: &BinaryMask, color: [u8; 3]) {
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            if mask.get(y, x) {
                canvas.put(y, x, color);
            }
        }
    }
}

// ---- generation ----

/// Deterministically renders one paired sample from (seed, cfg).
pub fn gen_sample(seed: u64, cfg: &GeneratorConfig) -> Result<TryOnSample, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);

    // Palette.
    let bg = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.05..0.18), rng.gen_range(0.85..0.97));
    let skin = hsv_to_rgb(rng.gen_range(20.0..45.0), rng.gen_range(0.25..0.5), rng.gen_range(0.6..0.9));
    // Quantized garment hues so the corpus spans a countable palette.
    let hue_steps = 24.0;
    let garment_hue = (rng.gen_range(0..24) as f64) * (360.0 / hue_steps);
    let garment_a = hsv_to_rgb(garment_hue, rng.gen_range(0.55..0.9), rng.gen_range(0.55..0.9));
    let garment_b = hsv_to_rgb(
        (garment_hue + rng.gen_range(90.0..270.0)) % 360.0,
        rng.gen_range(0.5..0.9),
        rng.gen_range(0.45..0.95),
    );

    // Body geometry.
    let head_r = hf * rng.gen_range(0.07..0.10);
    let head_cy = hf * rng.gen_range(0.12..0.16);
    let head_cx = wf * 0.5 + wf * rng.gen_range(-0.05..0.05);
    let tilt = wf * rng.gen_range(-0.08..0.08); // shoulder lateral shift
    let shoulder_y = head_cy + head_r + 1.2;
    let hip_y = (shoulder_y + hf * rng.gen_range(0.42..0.52)).min(hf - 2.0);
    let shoulder_half = wf * rng.gen_range(0.23..0.29);
    let hip_half = shoulder_half * rng.gen_range(0.78..0.95);
    let torso_cx = wf * 0.5;
    let sl = (shoulder_y, torso_cx + tilt - shoulder_half);
    let sr = (shoulder_y, torso_cx + tilt + shoulder_half);
    let hr = (hip_y, torso_cx + hip_half);
    let hl = (hip_y, torso_cx - hip_half);

    let mut torso = BinaryMask::zeros(h, w);
    // Counter-clockwise in (y, x) with y down: left-shoulder,
    // right-shoulder, right-hip, left-hip ordering keeps cross
    // products one-signed.
    fill_convex(&mut torso, &[sl, sr, hr, hl]);

    let mut head = BinaryMask::zeros(h, w);
    fill_disk(&mut head, head_cy, head_cx, head_r);

    // Arms: from each shoulder, seeded spread; sometimes crossing in
    // front of the torso so occlusion cases exist.
    let arm_w = (hf * 0.035).max(0.9);
    let arm_len = hf * rng.gen_range(0.30..0.42);
    let mut arms = BinaryMask::zeros(h, w);
    let mut arm_ends = Vec::new();
    for (sy, sx, side) in [(sl.0, sl.1, -1.0), (sr.0, sr.1, 1.0)] {
        let spread = rng.gen_range(-0.45..0.95); // negative folds over the torso
        let angle = std::f64::consts::FRAC_PI_2 + side * spread;
        let ey = sy + arm_len * angle.sin().abs();
        let ex = sx + side * arm_len * angle.cos() * -1.0;
        let ex = ex.clamp(1.0, wf - 1.0);
        let ey = ey.clamp(1.0, hf - 1.0);
        fill_segment(&mut arms, (sy, sx), (ey, ex), arm_w);
        arm_ends.push(((sy, sx), (ey, ex)));
    }

    // Garment canvas: a shirt-shaped silhouette with a seeded texture.
    let g_bg = hsv_to_rgb(0.0, 0.0, rng.gen_range(0.96..1.0));
    let mut garment_canvas = Canvas::new(h, w, g_bg);
    let g_top = hf * 0.18;
    let g_bot = hf * 0.85;
    let g_half_top = wf * 0.34;
    let g_half_bot = wf * 0.28;
    let g_cx = wf * 0.5;
    let mut garment_sil = BinaryMask::zeros(h, w);
    fill_convex(
        &mut garment_sil,
        &[
            (g_top, g_cx - g_half_top),
            (g_top, g_cx + g_half_top),
            (g_bot, g_cx + g_half_bot),
            (g_bot, g_cx - g_half_bot),
        ],
    );

    let texture = rng.gen_range(0u8..3);
    let stripe_period = rng.gen_range(3usize..6);
    let vertical = rng.gen_bool(0.5);
    let glyph_y = rng.gen_range(0.35..0.55);
    let glyph_x = rng.gen_range(0.35..0.55);
    for y in 0..h {
        for x in 0..w {
            if !garment_sil.get(y, x) {
                continue;
            }
            let color = match texture {
                // Stripes.
                0 => {
                    let k = if vertical { x } else { y };
                    if (k / stripe_period) % 2 == 0 {
                        garment_a
                    } else {
                        garment_b
                    }
                }
                // Checker.
                1 => {
                    if ((y / stripe_period) + (x / stripe_period)) % 2 == 0 {
                        garment_a
                    } else {
                        garment_b
                    }
                }
                // Solid with a contrasting glyph patch.
                _ => {
                    let gy = (glyph_y * hf) as usize;
                    let gx = (glyph_x * wf) as usize;
                    let half = (h.min(w) / 8).max(2);
                    if y.abs_diff(gy) < half && x.abs_diff(gx) < half {
                        garment_b
                    } else {
                        garment_a
                    }
                }
            };
            garment_canvas.put(y, x, color);
        }
    }

    // Affine garment -> torso: silhouette bbox onto torso bbox.
    let (t_y0, t_y1, t_x0, t_x1) = bbox_of(&torso);
    let (g_y0, g_y1, g_x0, g_x1) = bbox_of(&garment_sil);
    let affine = AffineMap {
        scale_y: (t_y1 - t_y0 + 1) as f64 / (g_y1 - g_y0 + 1) as f64,
        scale_x: (t_x1 - t_x0 + 1) as f64 / (g_x1 - g_x0 + 1) as f64,
        offset_y: t_y0 as f64 - g_y0 as f64 * ((t_y1 - t_y0 + 1) as f64 / (g_y1 - g_y0 + 1) as f64),
        offset_x: t_x0 as f64 - g_x0 as f64 * ((t_x1 - t_x0 + 1) as f64 / (g_x1 - g_x0 + 1) as f64),
    };

    // Person canvas: background, head, torso skin, mapped garment,
    // then arms drawn over everything (occlusion).
    let mut person = Canvas::new(h, w, bg);
    paint(&mut person, &head, skin);
    paint(&mut person, &torso, skin);

    let mut garment_mapped = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !torso.get(y, x) {
                continue;
            }
            let (gy, gx) = affine.inverse(y as f64 + 0.5, x as f64 + 0.5);
            let (gy, gx) = (gy.floor() as isize, gx.floor() as isize);
            if gy >= 0 && gx >= 0 && (gy as usize) < h && (gx as usize) < w {
                let (gy, gx) = (gy as usize, gx as usize);
                if garment_sil.get(gy, gx) {
                    person.put(y, x, garment_canvas.get(gy, gx));
                    garment_mapped.set(y, x, true);
                }
            }
        }
    }
    paint(&mut person, &arms, skin);

    // Parse mask: visible (unoccluded) mapped-garment pixels.
    let parse_mask = garment_mapped.intersect(&arms.complement());
    if parse_mask.area() == 0 {
        return Err(DatasetError::BadConfig(format!(
            "seed {seed}: degenerate sample with empty parse mask"
        )));
    }

    // Coarse box: torso bbox dilated by the configured margin.
    let mut bbox = BinaryMask::zeros(h, w);
    for y in t_y0..=t_y1 {
        for x in t_x0..=t_x1 {
            bbox.set(y, x, true);
        }
    }
    let bbox = bbox.dilate(cfg.bbox_margin);

    // Pose map: five colored skeleton segments on black.
    let mut pose = Canvas::new(h, w, [0, 0, 0]);
    let neck_base = (shoulder_y, torso_cx + tilt);
    let hip_center = (hip_y, torso_cx);
    let segs: [((f64, f64), (f64, f64), [u8; 3]); 5] = [
        ((head_cy, head_cx), neck_base, [255, 0, 0]),            // neck
        (sl, sr, [0, 255, 0]),                                   // shoulders
        (neck_base, hip_center, [0, 0, 255]),                    // spine
        (arm_ends[0].0, arm_ends[0].1, [255, 255, 0]),           // left arm
        (arm_ends[1].0, arm_ends[1].1, [255, 0, 255]),           // right arm
    ];
    for (a, b, color) in segs {
        let mut seg = BinaryMask::zeros(h, w);
        fill_segment(&mut seg, a, b, 0.8);
        paint(&mut pose, &seg, color);
    }

    // Dense-pose surrogate: head / torso / arm body-part colormap.
    let mut dense = Canvas::new(h, w, [0, 0, 0]);
    paint(&mut dense, &torso, [60, 60, 200]);
    paint(&mut dense, &head, [200, 60, 60]);
    paint(&mut dense, &arms, [60, 200, 60]);

    Ok(TryOnSample {
        person: person.to_tensor(),
        garment: garment_canvas.to_tensor(),
        parse_mask,
        bbox,
        pose: pose.to_tensor(),
        dense: dense.to_tensor(),
        garment_sil,
        seed,
        affine,
    })
}

fn bbox_of(mask: &BinaryMask) -> (usize, usize, usize, usize) {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    (y0, y1, x0, x1)
}

// ---- persistence ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub seed: u64,
    pub affine: AffineMap,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub config: GeneratorConfig,
    pub config_hash: String,
    pub samples: Vec<ManifestSample>,
}

const PLANES: [(&str, PlaneKind); 7] = [
    ("person", PlaneKind::Rgb),
    ("garment", PlaneKind::Rgb),
    ("parse", PlaneKind::Gray),
    ("bbox", PlaneKind::Gray),
    ("pose", PlaneKind::Rgb),
    ("dense", PlaneKind::Rgb),
    ("garmsil", PlaneKind::Gray),
];

#[derive(Clone, Copy)]
enum PlaneKind {
    Rgb,
    Gray,
}

pub(crate) fn tensor_to_rgb_image(t: &Tensor<f32>) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            (t.data()[i] * 255.0).round() as u8,
            (t.data()[plane + i] * 255.0).round() as u8,
            (t.data()[2 * plane + i] * 255.0).round() as u8,
        ])
    })
}

fn rgb_image_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image dims")
}

pub(crate) fn mask_to_gray_image(m: &BinaryMask) -> image::GrayImage {
    image::GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        image::Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

fn gray_image_to_mask(img: &image::GrayImage) -> Result<BinaryMask, DatasetError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut m = BinaryMask::zeros(h, w);
    for (x, y, px) in img.enumerate_pixels() {
        match px.0[0] {
            0 => {}
            255 => m.set(y as usize, x as usize, true),
            v => {
                return Err(DatasetError::BadManifest(format!(
                    "mask plane has non-binary value {v}"
                )))
            }
        }
    }
    Ok(m)
}

/// Writes samples plus a validating manifest into `dir`.
pub fn write_dataset(
    samples: &[TryOnSample],
    cfg: &GeneratorConfig,
    dir: &Path,
) -> crate::Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest_samples = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut files = Vec::new();
        for (plane, kind) in PLANES {
            let name = format!("{i:05}_{plane}.png");
            let path = dir.join(&name);
            match (plane, kind) {
                ("person", _) => tensor_to_rgb_image(&s.person).save(&path),
                ("garment", _) => tensor_to_rgb_image(&s.garment).save(&path),
                ("pose", _) => tensor_to_rgb_image(&s.pose).save(&path),
                ("dense", _) => tensor_to_rgb_image(&s.dense).save(&path),
                ("parse", _) => mask_to_gray_image(&s.parse_mask).save(&path),
                ("bbox", _) => mask_to_gray_image(&s.bbox).save(&path),
                ("garmsil", _) => mask_to_gray_image(&s.garment_sil).save(&path),
                _ => unreachable!(),
            }
            .map_err(|e| DatasetError::BadImage { path: path.clone(), msg: e.to_string() })?;
            files.push(name);
        }
        manifest_samples.push(ManifestSample { seed: s.seed, affine: s.affine, files });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        height: cfg.height,
        width: cfg.width,
        count: samples.len(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        samples: manifest_samples,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

/// Loads a dataset directory, validating the manifest hash and the
/// presence of every referenced file.
pub fn read_dataset(dir: &Path) -> crate::Result<(Vec<TryOnSample>, DatasetManifest)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.exists() {
        return Err(DatasetError::MissingFile(manifest_path).into());
    }
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| DatasetError::BadManifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::BadManifest(format!(
            "unsupported manifest version {}",
            manifest.version
        ))
        .into());
    }
    let expected = manifest.config.hash();
    if manifest.config_hash != expected {
        return Err(DatasetError::HashMismatch {
            found: manifest.config_hash.clone(),
            expected,
        }
        .into());
    }
    if manifest.samples.len() != manifest.count {
        return Err(DatasetError::BadManifest(format!(
            "count {} vs {} sample records",
            manifest.count,
            manifest.samples.len()
        ))
        .into());
    }

    let mut samples = Vec::with_capacity(manifest.count);
    for rec in &manifest.samples {
        for name in &rec.files {
            let path = dir.join(name);
            if !path.exists() {
                return Err(DatasetError::MissingFile(path).into());
            }
        }
        let load_rgb = |name: &str| -> crate::Result<Tensor<f32>> {
            let path = dir.join(name);
            let img = image::open(&path)
                .map_err(|e| DatasetError::BadImage { path: path.clone(), msg: e.to_string() })?
                .into_rgb8();
            Ok(rgb_image_to_tensor(&img))
        };
        let load_gray = |name: &str| -> crate::Result<BinaryMask> {
            let path = dir.join(name);
            let img = image::open(&path)
                .map_err(|e| DatasetError::BadImage { path: path.clone(), msg: e.to_string() })?
                .into_luma8();
            Ok(gray_image_to_mask(&img)?)
        };
        let f = |suffix: &str| {
            rec.files
                .iter()
                .find(|n| n.ends_with(&format!("_{suffix}.png")))
                .cloned()
                .ok_or_else(|| DatasetError::BadManifest(format!("no {suffix} plane listed")))
        };
        samples.push(TryOnSample {
            person: load_rgb(&f("person")?)?,
            garment: load_rgb(&f("garment")?)?,
            parse_mask: load_gray(&f("parse")?)?,
            bbox: load_gray(&f("bbox")?)?,
            pose: load_rgb(&f("pose")?)?,
            dense: load_rgb(&f("dense")?)?,
            garment_sil: load_gray(&f("garmsil")?)?,
            seed: rec.seed,
            affine: rec.affine,
        });
    }
    Ok((samples, manifest))
}
