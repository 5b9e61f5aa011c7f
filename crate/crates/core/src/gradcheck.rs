//! Layer-family gradient verification in f64.
//!
//! Runs central finite differences against tape gradients for every
//! layer family the UNet uses, plus the assembled model itself on a
//! 16x8 canvas with base width 8. Backs the `grad-check` command.

use crate::error::TensorError;
use crate::nnet::{BoundParams, UNet, UNetConfig};
use crate::tensor::{finite_diff_check, finite_diff_check_sampled, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative-error threshold every family must stay under.
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub family: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub families: Vec<FamilyReport>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(|f| f.max_rel_err <= self.threshold)
    }

    pub fn offenders(&self) -> Vec<&FamilyReport> {
        self.families.iter().filter(|f| f.max_rel_err > self.threshold).collect()
    }
}

/// The tiny verification model: 2 levels, base 8, attention at the
/// coarse level, on a 16x8 canvas.
pub fn verification_config() -> UNetConfig {
    UNetConfig {
        in_channels: 14,
        out_channels: 4,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        num_res_blocks_per_level: 1,
        time_embed_dim: 16,
        num_heads: 4,
        norm_groups: 4,
    }
}

fn rand64(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn run_grad_check(seed: u64) -> Result<GradCheckReport, TensorError> {
    run_grad_check_opts(seed, false)
}

/// `inject_fault` makes one family's closure intentionally
/// inconsistent between evaluations, standing in for a corrupted
/// backward implementation; the check must then fail. Used as a
/// negative control by the command's tests.
pub fn run_grad_check_opts(seed: u64, inject_fault: bool) -> Result<GradCheckReport, TensorError> {
    let mut families = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    {
        let x = rand64(&[1, 3, 6, 6], &mut rng);
        let w = rand64(&[4, 3, 3, 3], &mut rng);
        let b = rand64(&[4], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.conv2d(l[0], l[1], l[2], 1, 1)?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
        };
        families.push(FamilyReport {
            family: "conv2d".into(),
            max_rel_err: finite_diff_check(&mut f, &[x, w, b], 1e-4)?,
        });
    }
    {
        let x = rand64(&[4, 6], &mut rng);
        let w = rand64(&[5, 6], &mut rng);
        let b = rand64(&[5], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.linear(l[0], l[1], l[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.mean(sq))
        };
        families.push(FamilyReport {
            family: "linear".into(),
            max_rel_err: finite_diff_check(&mut f, &[x, w, b], 1e-4)?,
        });
    }
    {
        let x = rand64(&[40], &mut rng);
        let mut calls = 0usize;
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            calls += 1;
            let y = t.silu(l[0]);
            let s = t.sum(y);
            // Fault injection: later (numeric) evaluations see a
            // scaled function, so analytic and numeric gradients
            // disagree and the family must be reported as broken.
            Ok(if inject_fault && calls > 1 { t.scale(s, 1.5) } else { s })
        };
        families.push(FamilyReport {
            family: "silu".into(),
            max_rel_err: finite_diff_check(&mut f, &[x], 1e-4)?,
        });
    }
    {
        let x = rand64(&[2, 8, 4, 4], &mut rng);
        let g = rand64(&[8], &mut rng);
        let b = rand64(&[8], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.group_norm(l[0], l[1], l[2], 4, 1e-5)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        families.push(FamilyReport {
            family: "group_norm".into(),
            max_rel_err: finite_diff_check(&mut f, &[x, g, b], 3e-5)?,
        });
    }
    {
        let q = rand64(&[6, 4], &mut rng);
        let k = rand64(&[6, 4], &mut rng);
        let v = rand64(&[6, 4], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.softmax_attention(l[0], l[1], l[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        families.push(FamilyReport {
            family: "softmax_attention".into(),
            max_rel_err: finite_diff_check(&mut f, &[q, k, v], 3e-5)?,
        });
    }
    {
        let x = rand64(&[1, 3, 4, 4], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.avg_pool_2x(l[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        families.push(FamilyReport {
            family: "avgpool2x".into(),
            max_rel_err: finite_diff_check(&mut f, &[x], 1e-4)?,
        });
    }
    {
        let x = rand64(&[1, 3, 3, 3], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.upsample_nearest_2x(l[0])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        families.push(FamilyReport {
            family: "nearest_upsample2x".into(),
            max_rel_err: finite_diff_check(&mut f, &[x], 1e-4)?,
        });
    }
    {
        let x = rand64(&[2, 5, 3, 3], &mut rng);
        let s = rand64(&[5], &mut rng);
        let h = rand64(&[5], &mut rng);
        let mut f = |t: &mut Tape<f64>, l: &[NodeId]| {
            let y = t.scale_shift(l[0], l[1], l[2])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        };
        families.push(FamilyReport {
            family: "scale_shift".into(),
            max_rel_err: finite_diff_check(&mut f, &[x, s, h], 1e-4)?,
        });
    }

    families.push(full_model_family(seed)?);

    Ok(GradCheckReport { families, threshold: GRAD_CHECK_THRESHOLD })
}

/// Finite differences through the assembled UNet on 50 sampled
/// parameter coordinates, against an MSE loss to a fixed noise target.
fn full_model_family(seed: u64) -> Result<FamilyReport, TensorError> {
    let unet = UNet::new(verification_config())?;
    let mut params = unet.init_params::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    // Move off the zero-initialized point so every path carries signal.
    for (_, p) in params.iter_mut() {
        let noise = Tensor::<f64>::randn(p.value.shape(), &mut rng);
        p.value = p.value.zip_map(&noise, |v, n| v + 0.05 * n)?;
    }
    let state = rand64(&[1, 4, 16, 8], &mut rng);
    let cond = rand64(&[1, 10, 16, 8], &mut rng);
    // Modest target scale keeps the loss magnitude (and with it the
    // fd roundoff noise, which is what the near-zero-gradient
    // coordinates are compared against) small.
    let target = rand64(&[1, 4, 16, 8], &mut rng).map(|v| v * 0.3);

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, p)| p.value.clone()).collect();

    let mut f = |tape: &mut Tape<f64>, leaves: &[NodeId]| {
        let bound = BoundParams::from_pairs(
            names.iter().cloned().zip(leaves.iter().copied()),
        );
        let s = tape.leaf(state.clone(), false);
        let c = tape.leaf(cond.clone(), false);
        let out = unet.forward(tape, &bound, s, c, 7, 20)?;
        let tgt = tape.leaf(target.clone(), false);
        let d = tape.sub(out, tgt)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    };
    let err = finite_diff_check_sampled(&mut f, &values, 1e-4, 50, seed ^ 0x17)?;
    Ok(FamilyReport { family: "full_unet".into(), max_rel_err: err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_model_passes_every_family() {
        let report = run_grad_check(1234).unwrap();
        assert_eq!(report.families.len(), 9, "one entry per family");
        let mut seen = std::collections::HashSet::new();
        for f in &report.families {
            assert!(seen.insert(f.family.clone()), "family {} listed twice", f.family);
            assert!(
                f.max_rel_err <= report.threshold,
                "{}: {} > {}",
                f.family,
                f.max_rel_err,
                report.threshold
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = run_grad_check_opts(1234, true).unwrap();
        assert!(!report.passed());
        let offenders = report.offenders();
        assert_eq!(offenders.len(), 1);
        assert_eq!(offenders[0].family, "silu");
    }
}
