//! Noise schedule, forward noising, the training objective, the
//! deterministic DDIM sampler, and known-region compositing.

use crate::error::TensorError;
use crate::nnet::{UNet, UNetParams};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Linear beta schedule with derived alpha / alpha-bar sequences, all
/// kept in f64.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Builds the linear schedule, inclusive of both endpoints (a single
/// step uses `beta_start` alone).
pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, TensorError> {
    if timesteps == 0 {
        return Err(TensorError::invalid("make_schedule", "need at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(TensorError::invalid(
            "make_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"),
        ));
    }
    let mut beta = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let frac = if timesteps > 1 { t as f64 / (timesteps - 1) as f64 } else { 0.0 };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>, TensorError> {
    if x0.shape() != eps.shape() {
        return Err(TensorError::shape(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    if t >= sched.len() {
        return Err(TensorError::invalid("q_sample", format!("t {t} out of range")));
    }
    let ab = sched.alpha_bar(t);
    let signal = T::from_f64(ab.sqrt());
    let noise = T::from_f64((1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| signal * x + noise * e)
}

/// Noise prediction usable outside a gradient tape (sampling).
pub trait Denoiser<T: Scalar> {
    /// `state_t` and `cond` are single samples, `[C,H,W]`.
    fn predict(
        &self,
        state_t: &Tensor<T>,
        cond: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>, TensorError>;
}

/// A UNet with its parameter store, viewed as a denoiser.
pub struct UNetDenoiser<'a, T> {
    pub unet: &'a UNet,
    pub params: &'a UNetParams<T>,
    pub total_steps: usize,
}

impl<T: Scalar> Denoiser<T> for UNetDenoiser<'_, T> {
    fn predict(
        &self,
        state_t: &Tensor<T>,
        cond: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>, TensorError> {
        let ss = state_t.shape().to_vec();
        let cs = cond.shape().to_vec();
        let s4 = state_t.clone().reshape(vec![1, ss[0], ss[1], ss[2]])?;
        let c4 = cond.clone().reshape(vec![1, cs[0], cs[1], cs[2]])?;
        let out = self.unet.predict(self.params, &s4, &c4, t, self.total_steps)?;
        out.reshape(ss)
    }
}

/// The denoising objective for one (sample, t, eps) draw:
/// `mean((eps - predict(q_sample(state0, t, eps), cond, t))^2)`,
/// recorded on `tape` so it is differentiable w.r.t. whatever the
/// prediction closure bound as trainable leaves.
pub fn training_loss<T: Scalar>(
    tape: &mut Tape<T>,
    predict: &mut dyn FnMut(&mut Tape<T>, NodeId, NodeId, usize) -> Result<NodeId, TensorError>,
    state0: &Tensor<T>,
    cond: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<NodeId, TensorError> {
    let z_t = q_sample(state0, t, eps, sched)?;
    let ss = z_t.shape().to_vec();
    let cs = cond.shape().to_vec();
    let z4 = z_t.reshape(vec![1, ss[0], ss[1], ss[2]])?;
    let c4 = cond.clone().reshape(vec![1, cs[0], cs[1], cs[2]])?;
    let z = tape.leaf(z4, false);
    let c = tape.leaf(c4, false);
    let pred = predict(tape, z, c, t)?;
    let eps4 = eps.clone().reshape(vec![1, ss[0], ss[1], ss[2]])?;
    let e = tape.leaf(eps4, false);
    let d = tape.sub(pred, e)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Deterministic (eta = 0) DDIM sampling over a uniform-stride
/// descending timestep subsequence starting at T-1. The predicted
/// clean state is clamped to [-1, 1] at every step.
pub fn ddim_sample<T: Scalar>(
    denoiser: &dyn Denoiser<T>,
    cond: &Tensor<T>,
    state_channels: usize,
    sched: &NoiseSchedule,
    num_steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Tensor<T>, TensorError> {
    let total = sched.len();
    if num_steps == 0 || num_steps > total {
        return Err(TensorError::invalid(
            "ddim_sample",
            format!("num_steps {num_steps} out of range for T {total}"),
        ));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(TensorError::invalid("ddim_sample", format!("eta {eta} outside [0,1]")));
    }
    let cs = cond.shape();
    if cs.len() != 3 {
        return Err(TensorError::shape("ddim_sample", format!("cond must be [C,H,W], got {:?}", cs)));
    }
    let (h, w) = (cs[1], cs[2]);
    let stride = total / num_steps;
    let timesteps: Vec<usize> = (0..num_steps).map(|k| total - 1 - k * stride).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<T>::randn(&[state_channels, h, w], &mut rng);
    let lo = T::from_f64(-1.0);
    let hi = T::from_f64(1.0);

    for (k, &t) in timesteps.iter().enumerate() {
        let eps_hat = denoiser.predict(&x, cond, t)?;
        let ab_t = sched.alpha_bar(t);
        let ab_prev = if k + 1 < timesteps.len() { sched.alpha_bar(timesteps[k + 1]) } else { 1.0 };

        let inv_sqrt_ab = T::from_f64(1.0 / ab_t.sqrt());
        let noise_coef = T::from_f64((1.0 - ab_t).sqrt());
        let x0 = x
            .zip_map(&eps_hat, |xt, e| (xt - noise_coef * e) * inv_sqrt_ab)?
            .map(|v| v.maximum(lo).minimum(hi));

        let sigma = eta
            * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
            * (1.0 - ab_t / ab_prev).sqrt();
        let dir_coef = T::from_f64((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
        let sig_coef = T::from_f64(ab_prev.sqrt());
        x = x0.zip_map(&eps_hat, |x0v, e| sig_coef * x0v + dir_coef * e)?;
        if eta > 0.0 && k + 1 < timesteps.len() {
            let z = Tensor::<T>::randn(x.shape(), &mut rng);
            let s = T::from_f64(sigma);
            x = x.zip_map(&z, |xv, zv| xv + s * zv)?;
        }
    }
    Ok(x)
}

/// Branch-select compositing: pixels where `keep_mask` is 1 come from
/// `original` bit-exactly, the rest from `generated`.
pub fn composite<T: Scalar>(
    generated: &Tensor<T>,
    keep_mask: &Tensor<T>,
    original: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let gs = generated.shape();
    let ms = keep_mask.shape();
    if generated.shape() != original.shape() {
        return Err(TensorError::shape(
            "composite",
            format!("generated {:?} vs original {:?}", gs, original.shape()),
        ));
    }
    if gs.len() != 3 || ms.len() != 3 || ms[0] != 1 || ms[1] != gs[1] || ms[2] != gs[2] {
        return Err(TensorError::shape(
            "composite",
            format!("generated {:?} with mask {:?}", gs, ms),
        ));
    }
    let zero = T::zero();
    let one = T::one();
    if keep_mask.data().iter().any(|&v| v != zero && v != one) {
        return Err(TensorError::invalid("composite", "keep mask must be binary {0,1}"));
    }
    let plane = gs[1] * gs[2];
    let mut out = generated.clone();
    for c in 0..gs[0] {
        for p in 0..plane {
            if keep_mask.data()[p] == one {
                out.data_mut()[c * plane + p] = original.data()[c * plane + p];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.2).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.beta(0) - 0.1).abs() < 1e-15);
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn thousand_step_schedule_matches_log_domain_oracle() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(0) - 0.9999).abs() < 1e-12);
        // Independent product in log domain.
        let mut log_prod = 0.0f64;
        for t in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
            log_prod += (1.0 - beta).ln();
        }
        let want = log_prod.exp();
        let got = s.alpha_bar(999);
        assert!(
            (got - want).abs() / want.abs() < 1e-10,
            "alpha_bar[999] {got} vs log-domain {want}"
        );
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_in_range() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        for t in 0..s.len() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            if t > 0 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_with_zero_noise_scales_signal() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let x0 = Tensor::<f64>::new(vec![2, 2], vec![1.0, -0.5, 0.25, 0.0]).unwrap();
        let eps = Tensor::zeros(&[2, 2]);
        let xt = q_sample(&x0, 20, &eps, &s).unwrap();
        let scale = s.alpha_bar(20).sqrt();
        for (got, want) in xt.data().iter().zip(x0.data()) {
            assert!((got - want * scale).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_rejects_shape_mismatch() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let x0 = Tensor::<f32>::zeros(&[2, 2]);
        let eps = Tensor::<f32>::zeros(&[2, 3]);
        assert!(q_sample(&x0, 1, &eps, &s).is_err());
        let eps_ok = Tensor::<f32>::zeros(&[2, 2]);
        assert!(q_sample(&x0, 10, &eps_ok, &s).is_err(), "t out of range");
    }

    #[test]
    fn perfect_inversion_recovers_x0() {
        // x0 = (x_t - sqrt(1-abar) eps) / sqrt(abar), the sampler's
        // inner inversion step, must reproduce x0 to high accuracy.
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(&[3, 4], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let eps = Tensor::<f64>::randn(&[3, 4], &mut rng);
        for t in [0, 57, 199] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let ab = s.alpha_bar(t);
            let rec = xt.zip_map(&eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "t {t}: {a} vs {b}");
            }
        }
    }

    struct PerfectOracle {
        x0: Tensor<f64>,
        sched: NoiseSchedule,
    }

    impl Denoiser<f64> for PerfectOracle {
        fn predict(
            &self,
            state_t: &Tensor<f64>,
            _cond: &Tensor<f64>,
            t: usize,
        ) -> Result<Tensor<f64>, TensorError> {
            // The exact noise consistent with (x_t, x0, t).
            let ab = self.sched.alpha_bar(t);
            state_t.zip_map(&self.x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
        }
    }

    #[test]
    fn one_step_ddim_with_perfect_oracle_recovers_x0() {
        let sched = make_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // x0 within the clamp range so recovery is exact.
        let x0 = Tensor::<f64>::randn(&[4, 6, 5], &mut rng).map(|v| (v * 0.4).clamp(-0.99, 0.99));
        let oracle = PerfectOracle { x0: x0.clone(), sched: sched.clone() };
        let cond = Tensor::<f64>::zeros(&[1, 6, 5]);
        // num_steps = 1: a single inversion from pure noise. The
        // oracle knows x0, so the first prediction is exact.
        let out = ddim_sample(&oracle, &cond, 4, &sched, 1, 0.0, 99).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    struct HalfStateDenoiser;

    impl Denoiser<f64> for HalfStateDenoiser {
        fn predict(
            &self,
            state_t: &Tensor<f64>,
            _cond: &Tensor<f64>,
            _t: usize,
        ) -> Result<Tensor<f64>, TensorError> {
            Ok(state_t.map(|v| 0.5 * v))
        }
    }

    #[test]
    fn ddim_eta_zero_is_bitwise_deterministic() {
        // A state-dependent (imperfect) denoiser: trajectories depend
        // on the initial draw, so seeds are observable.
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let cond = Tensor::<f64>::zeros(&[1, 4, 4]);
        let a = ddim_sample(&HalfStateDenoiser, &cond, 2, &sched, 10, 0.0, 1234).unwrap();
        let b = ddim_sample(&HalfStateDenoiser, &cond, 2, &sched, 10, 0.0, 1234).unwrap();
        assert_eq!(a.data(), b.data());
        let c = ddim_sample(&HalfStateDenoiser, &cond, 2, &sched, 10, 0.0, 1235).unwrap();
        assert_ne!(a.data(), c.data(), "different seed draws different initial noise");
    }

    #[test]
    fn ddim_output_is_within_clamp_range() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::<f64>::randn(&[2, 4, 4], &mut rng); // deliberately out of range
        let oracle = PerfectOracle { x0, sched: sched.clone() };
        let cond = Tensor::<f64>::zeros(&[1, 4, 4]);
        let out = ddim_sample(&oracle, &cond, 2, &sched, 25, 0.0, 7).unwrap();
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn ddim_rejects_too_many_steps() {
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let cond = Tensor::<f64>::zeros(&[1, 4, 4]);
        let x0 = Tensor::<f64>::zeros(&[2, 4, 4]);
        let oracle = PerfectOracle { x0, sched: sched.clone() };
        assert!(ddim_sample(&oracle, &cond, 2, &sched, 11, 0.0, 0).is_err());
        assert!(ddim_sample(&oracle, &cond, 2, &sched, 5, 1.5, 0).is_err());
    }

    #[test]
    fn composite_endpoints_and_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gen = Tensor::<f32>::randn(&[3, 5, 4], &mut rng);
        let orig = Tensor::<f32>::randn(&[3, 5, 4], &mut rng);

        let all_keep = Tensor::<f32>::ones(&[1, 5, 4]);
        assert_eq!(composite(&gen, &all_keep, &orig).unwrap().data(), orig.data());
        let none_keep = Tensor::<f32>::zeros(&[1, 5, 4]);
        assert_eq!(composite(&gen, &none_keep, &orig).unwrap().data(), gen.data());

        let mask = Tensor::<f32>::new(
            vec![1, 5, 4],
            (0..20).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let out = composite(&gen, &mask, &orig).unwrap();
        // Per-pixel branch-select oracle.
        for c in 0..3 {
            for p in 0..20 {
                let want = if mask.data()[p] == 1.0 { orig.data()[c * 20 + p] } else { gen.data()[c * 20 + p] };
                assert_eq!(out.data()[c * 20 + p], want);
            }
        }

        let bad = Tensor::<f32>::full(&[1, 5, 4], 0.5);
        assert!(composite(&gen, &bad, &orig).is_err());
    }

    #[test]
    fn training_loss_perfect_oracle_is_zero() {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state0 = Tensor::<f64>::randn(&[4, 6, 4], &mut rng);
        let cond = Tensor::<f64>::randn(&[10, 6, 4], &mut rng);
        let eps = Tensor::<f64>::randn(&[4, 6, 4], &mut rng);
        let eps_for_pred = eps.clone().reshape(vec![1, 4, 6, 4]).unwrap();
        let mut tape = Tape::new();
        let mut predict = |tape: &mut Tape<f64>, _z: NodeId, _c: NodeId, _t: usize| {
            Ok(tape.leaf(eps_for_pred.clone(), false))
        };
        let loss = training_loss(&mut tape, &mut predict, &state0, &cond, 13, &eps, &sched).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn training_loss_zero_predictor_is_mean_square_noise() {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Batch of draws: the average must approach E[eps^2] = 1.
        let mut acc = 0.0;
        let n_draws = 64;
        for _ in 0..n_draws {
            let state0 = Tensor::<f64>::randn(&[4, 6, 4], &mut rng);
            let cond = Tensor::<f64>::randn(&[10, 6, 4], &mut rng);
            let eps = Tensor::<f64>::randn(&[4, 6, 4], &mut rng);
            let mut tape = Tape::new();
            let mut predict = |tape: &mut Tape<f64>, z: NodeId, _c: NodeId, _t: usize| {
                Ok(tape.scale(z, 0.0))
            };
            let loss =
                training_loss(&mut tape, &mut predict, &state0, &cond, 31, &eps, &sched).unwrap();
            acc += tape.value(loss).item();
        }
        let mean = acc / n_draws as f64;
        // 3 sigma of the mean of n_draws * 96 chi-square(1) samples.
        let bound = 3.0 * (2.0 / (n_draws as f64 * 96.0)).sqrt();
        assert!((mean - 1.0).abs() < bound, "mean {mean}, bound {bound}");
    }
}
