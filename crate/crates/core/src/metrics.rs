//! Evaluation metrics: SSIM (Gaussian-windowed, reflection-padded),
//! PSNR, mask IoU, and bit-exact preservation counting.

use crate::error::TensorError;
use crate::mask::BinaryMask;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mirror index without edge duplication: -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter with reflection padding.
fn gauss_filter(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - r, w);
                acc += kv * img[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - r, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = a.shape();
    if s.len() != 3 {
        return Err(TensorError::shape(op, format!("want [C,H,W], got {:?}", s)));
    }
    Ok((s[0], s[1], s[2]))
}

/// Structural similarity with a 7x7 Gaussian window (sigma 1.5) on
/// unit dynamic range, computed per channel and averaged.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, TensorError> {
    let (c, h, w) = check_pair("ssim", a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TensorError::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    for t in [a, b] {
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TensorError::invalid("ssim", "values must lie in [0,1]"));
        }
    }
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xa: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let mu_a = gauss_filter(&xa, h, w);
        let mu_b = gauss_filter(&xb, h, w);
        let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
        let m_aa = gauss_filter(&aa, h, w);
        let m_bb = gauss_filter(&bb, h, w);
        let m_ab = gauss_filter(&ab, h, w);
        let mut acc = 0.0;
        for i in 0..plane {
            let va = m_aa[i] - mu_a[i] * mu_a[i];
            let vb = m_bb[i] - mu_b[i] * mu_b[i];
            let cov = m_ab[i] - mu_a[i] * mu_b[i];
            let num = (2.0 * mu_a[i] * mu_b[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / plane as f64;
    }
    Ok(total / c as f64)
}

/// 10 log10(1 / MSE) on unit range; identical inputs report +infinity.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, TensorError> {
    let (_, _, _) = check_pair("psnr", a, b)?;
    let n = a.numel() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Intersection over union of two binary masks; both empty counts as
/// a perfect match.
pub fn mask_iou(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            "mask_iou",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let ma = BinaryMask::from_tensor(a)?;
    let mb = BinaryMask::from_tensor(b)?;
    Ok(mask_iou_masks(&ma, &mb))
}

pub fn mask_iou_masks(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.intersect(b).area();
    let uni = a.union(b).area();
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Counts kept-region pixels whose 8-bit quantization differs between
/// the output and the source image (any channel).
pub fn preservation_check(
    output: &Tensor<f32>,
    source: &Tensor<f32>,
    keep_mask: &BinaryMask,
) -> Result<u64, TensorError> {
    let (c, h, w) = check_pair("preservation_check", output, source)?;
    if keep_mask.height() != h || keep_mask.width() != w {
        return Err(TensorError::shape(
            "preservation_check",
            format!("mask {}x{} vs image {h}x{w}", keep_mask.height(), keep_mask.width()),
        ));
    }
    let plane = h * w;
    let mut violations = 0u64;
    for y in 0..h {
        for x in 0..w {
            if !keep_mask.get(y, x) {
                continue;
            }
            let i = y * w + x;
            let differs = (0..c).any(|ch| {
                quantize(output.data()[ch * plane + i]) != quantize(source.data()[ch * plane + i])
            });
            if differs {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    /// +infinity is not representable in JSON numbers; encode the
    /// sentinel as the string "inf".
    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            "inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            #[allow(dead_code)]
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Num(v) => v,
            Raw::Str(_) => f64::INFINITY,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEval {
    pub index: usize,
    pub ssim: f64,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub stage1_iou: Option<f64>,
    pub preservation_violations: u64,
}

/// Per-sample metrics plus their arithmetic means; serialized with
/// stable (declaration-order) keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config_hash: String,
    pub sample_count: usize,
    pub mean_ssim: f64,
    #[serde(with = "psnr_serde")]
    pub mean_psnr_db: f64,
    pub mean_stage1_iou: Option<f64>,
    pub total_preservation_violations: u64,
    /// Cross-half attention diagnostic (spatial-concat mode only).
    pub attention_mass: Option<f64>,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn from_samples(
        config_hash: String,
        per_sample: Vec<SampleEval>,
        attention_mass: Option<f64>,
    ) -> Self {
        let n = per_sample.len().max(1) as f64;
        let mean_ssim = per_sample.iter().map(|s| s.ssim).sum::<f64>() / n;
        let mean_psnr_db = per_sample.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let ious: Vec<f64> = per_sample.iter().filter_map(|s| s.stage1_iou).collect();
        let mean_stage1_iou = if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        };
        let total_preservation_violations =
            per_sample.iter().map(|s| s.preservation_violations).sum();
        EvalReport {
            config_hash,
            sample_count: per_sample.len(),
            mean_ssim,
            mean_psnr_db,
            mean_stage1_iou,
            total_preservation_violations,
            attention_mass,
            per_sample,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_image(&[3, 16, 12], &mut rng);
        let s = ssim(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = rand_image(&[1, 16, 16], &mut rng);
            let inv = x.map(|v| 1.0 - v);
            let s = ssim(&x, &inv).unwrap();
            assert!(s < 0.3, "ssim(x, 1-x) = {s}");
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&[3, 12, 10], &mut rng);
        let b = rand_image(&[3, 12, 10], &mut rng);
        let d = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
        assert!(d < 1e-9);
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let a = Tensor::<f32>::zeros(&[1, 16, 16]);
        let b = Tensor::<f32>::zeros(&[1, 16, 15]);
        assert!(ssim(&a, &b).is_err());
        let tiny = Tensor::<f32>::zeros(&[1, 6, 6]);
        assert!(ssim(&tiny, &tiny).is_err());
        let oob = Tensor::<f32>::full(&[1, 16, 16], 1.5);
        assert!(ssim(&oob, &oob).is_err());
    }

    #[test]
    fn psnr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_image(&[3, 8, 8], &mut rng);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);

        // MSE exactly 0.01 -> 20 dB.
        let a = Tensor::<f32>::zeros(&[1, 4, 4]);
        let b = Tensor::<f32>::full(&[1, 4, 4], 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-6, "psnr {p}");

        // Random pair against the direct formula.
        let y = rand_image(&[3, 8, 8], &mut rng);
        let mse: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&u, &v)| (u as f64 - v as f64).powi(2))
            .sum::<f64>()
            / 192.0;
        let want = 10.0 * (1.0 / mse).log10();
        let got = psnr(&x, &y).unwrap();
        assert!((got - want).abs() / want.abs() < 1e-6);
    }

    #[test]
    fn iou_cases() {
        let a = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        assert_eq!(mask_iou_masks(&a, &a), 1.0);
        let b = BinaryMask::from_fn(8, 8, |y, _| y >= 4);
        assert_eq!(mask_iou_masks(&a, &b), 0.0);
        // Nested areas 10 and 40.
        let small = BinaryMask::from_fn(8, 8, |y, x| y < 2 && x < 5);
        let big = BinaryMask::from_fn(8, 8, |y, x| y < 5 && x < 8);
        assert_eq!(small.area(), 10);
        assert_eq!(big.area(), 40);
        assert_eq!(mask_iou_masks(&small, &big), 0.25);
        // Empty vs empty.
        let e = BinaryMask::zeros(4, 4);
        assert_eq!(mask_iou_masks(&e, &e), 1.0);

        // Tensor path validates binary.
        let bad = Tensor::<f32>::full(&[1, 4, 4], 0.5);
        let ok = Tensor::<f32>::zeros(&[1, 4, 4]);
        assert!(mask_iou(&bad, &ok).is_err());
    }

    #[test]
    fn preservation_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = rand_image(&[3, 8, 8], &mut rng);
        let keep = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        assert_eq!(preservation_check(&src, &src, &keep).unwrap(), 0);

        // One kept pixel perturbed -> 1.
        let mut out = src.clone();
        out.data_mut()[2 * 8 + 3] += 0.1; // (y=2,x=3), kept
        assert_eq!(preservation_check(&out, &src, &keep).unwrap(), 1);

        // Perturbing inpaint-region pixels is free.
        let mut out2 = src.clone();
        out2.data_mut()[6 * 8 + 1] += 0.5;
        out2.data_mut()[7 * 8 + 2] += 0.5;
        assert_eq!(preservation_check(&out2, &src, &keep).unwrap(), 0);
    }

    #[test]
    fn report_means_and_json_round_trip() {
        let per = vec![
            SampleEval { index: 0, ssim: 0.9, psnr_db: 20.0, stage1_iou: Some(0.8), preservation_violations: 0 },
            SampleEval { index: 1, ssim: 0.7, psnr_db: f64::INFINITY, stage1_iou: Some(0.6), preservation_violations: 2 },
        ];
        let r = EvalReport::from_samples("abc".into(), per, Some(0.25));
        assert!((r.mean_ssim - 0.8).abs() < 1e-12);
        assert_eq!(r.mean_stage1_iou, Some(0.7));
        assert_eq!(r.total_preservation_violations, 2);
        let json = r.to_json();
        assert!(json.contains("\"inf\""), "infinite psnr encoded as sentinel: {json}");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_sample[1].psnr_db, f64::INFINITY);
        // Key order is stable between serializations.
        assert_eq!(json, back.to_json());
    }
}
