//! Noise schedule and the sampling-time algebra: forward diffusion,
//! one-step clean prediction, deterministic DDIM stepping, classifier-free
//! guidance combination and blended-latent composition.
//!
//! Latents are plain `[C, H, W]` tensors in roughly [-1, 1]; there is no
//! separate latent encoder, the model works at training resolution.

use crate::error::{bail_mask, bail_param, bail_shape, CoreError, Result};
use crate::mask::BinaryMask;
use crate::math;
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoPolicy {
    /// rho_t = sqrt(1 - alpha_bar_t), the usual score-guidance scaling.
    SqrtOneMinusAlphaBar,
    /// Fixed guidance scale per step.
    Constant(f64),
}

/// Constructor parameters of a schedule; travels with checkpoints so
/// sampling always uses the schedule the model was trained under.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_min, self.beta_max, self.kind)
    }
}

/// Diffusion coefficients for timesteps 0..=T.
///
/// `beta[i]` is the variance of step `t = i + 1`; `alpha_bar` has length
/// T + 1 with `alpha_bar[0] = 1` and is the running product of `1 - beta`.
/// `rho[t]` is the per-step guidance scale used by the sampling correction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    rho: Vec<f64>,
}

impl NoiseSchedule {
    #[inline]
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    #[inline]
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Variance of step t (1-based).
    #[inline]
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    #[inline]
    pub fn rho(&self, t: usize) -> f64 {
        self.rho[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            bail_param!("timestep {t} out of range 0..={}", self.t_max);
        }
        Ok(())
    }

    pub fn with_rho_policy(mut self, policy: RhoPolicy) -> NoiseSchedule {
        self.rho = (0..=self.t_max)
            .map(|t| match policy {
                RhoPolicy::SqrtOneMinusAlphaBar => math::sqrt(1.0 - self.alpha_bar[t]),
                RhoPolicy::Constant(c) => c,
            })
            .collect();
        self
    }
}

pub fn make_schedule(
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        bail_param!("t_max must be >= 1, got {t_max}");
    }
    if !(beta_min > 0.0) {
        bail_param!("beta_min must be > 0, got {beta_min}");
    }
    if beta_max < beta_min {
        bail_param!("beta_max {beta_max} < beta_min {beta_min}");
    }
    if !(beta_max < 1.0) {
        bail_param!("beta_max must be < 1, got {beta_max}");
    }

    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            // alpha_bar target cos^2((t/T + s)/(1 + s) * pi/2); betas derived
            // and clamped into [beta_min, beta_max].
            let s = 0.008;
            let f = |t: f64| {
                let a = math::cos((t / t_max as f64 + s) / (1.0 + s) * math::PI / 2.0);
                a * a
            };
            let f0 = f(0.0);
            (1..=t_max)
                .map(|t| {
                    let b = 1.0 - (f(t as f64) / f0) / (f((t - 1) as f64) / f0);
                    b.clamp(beta_min, beta_max)
                })
                .collect()
        }
    };

    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }

    let schedule = NoiseSchedule {
        t_max,
        beta,
        alpha_bar,
        rho: Vec::new(),
    };
    Ok(schedule.with_rho_policy(RhoPolicy::SqrtOneMinusAlphaBar))
}

fn check_latent(z: &Tensor, ctx: &str) -> Result<()> {
    if z.shape().len() != 3 {
        bail_shape!("{ctx}: latent must be [C,H,W], got {:?}", z.shape());
    }
    if !z.all_finite() {
        return Err(CoreError::Numeric(alloc::format!("{ctx}: non-finite latent")));
    }
    Ok(())
}

/// Forward diffusion: sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    z0.check_same_shape(eps, "q_sample noise")?;
    let ab = s.alpha_bar(t);
    let (ca, ce) = (math::sqrt(ab), math::sqrt(1.0 - ab));
    Ok(z0.binary(eps, |a, e| ca * a + ce * e))
}

/// Closed-form clean-latent estimate from a noisy latent and predicted
/// noise. At t = 0 the latent already is the prediction and is returned
/// unchanged.
pub fn one_step_prediction(
    z_hat_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(t)?;
    check_latent(z_hat_t, "one_step_prediction z")?;
    check_latent(eps_pred, "one_step_prediction eps")?;
    z_hat_t.check_same_shape(eps_pred, "one_step_prediction")?;
    if t == 0 {
        return Ok(z_hat_t.clone());
    }
    let ab = s.alpha_bar(t);
    let inv = 1.0 / math::sqrt(ab);
    let ce = math::sqrt(1.0 - ab);
    Ok(z_hat_t.binary(eps_pred, |z, e| z * inv - ce * e * inv))
}

/// Deterministic DDIM update from step t to an earlier step t_prev.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_t(t)?;
    if t_prev >= t {
        return Err(CoreError::Order(alloc::format!(
            "ddim_step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let z0 = one_step_prediction(z_t, eps_hat, t, s)?;
    let ab = s.alpha_bar(t_prev);
    let (ca, ce) = (math::sqrt(ab), math::sqrt(1.0 - ab));
    Ok(z0.binary(eps_hat, |z, e| ca * z + ce * e))
}

/// Classifier-free guidance: (1 - scale) uncond + scale cond, which keeps
/// the scale = 0 and scale = 1 endpoints exact.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    eps_uncond.check_same_shape(eps_cond, "cfg_combine")?;
    Ok(eps_uncond.binary(eps_cond, |u, c| (1.0 - scale) * u + scale * c))
}

/// Keep the generated latent inside the mask and the forward-diffused
/// original outside it.
pub fn blend_latents(
    z_gen_t: &Tensor,
    z0: &Tensor,
    t: usize,
    mask: &BinaryMask,
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    z_gen_t.check_same_shape(z0, "blend_latents")?;
    let (c, h, w) = z_gen_t.dims3();
    if (mask.height(), mask.width()) != (h, w) {
        bail_mask!(
            "blend mask {}x{} vs latent {h}x{w}",
            mask.height(),
            mask.width()
        );
    }
    let noised = q_sample(z0, t, eps, s)?;
    let mut out = z_gen_t.clone();
    for ch in 0..c {
        for p in 0..h * w {
            if mask.data()[p] == 0 {
                out.data_mut()[ch * h * w + p] = noised.data()[ch * h * w + p];
            }
        }
    }
    Ok(out)
}

/// Descending (t, t_prev) pairs for a uniform-stride DDIM run ending at 0.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<(usize, usize)> {
    let steps = steps.clamp(1, t_max);
    let taus: Vec<usize> = (0..=steps).map(|k| k * t_max / steps).collect();
    let mut pairs = Vec::with_capacity(steps);
    for k in (1..=steps).rev() {
        if taus[k] > taus[k - 1] {
            pairs.push((taus[k], taus[k - 1]));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_latent(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.normal()).collect())
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
    }

    #[test]
    fn fifty_step_schedule_strictly_decreasing() {
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars().len(), 51);
        for t in 0..50 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn linear_alpha_bar_matches_explicit_recurrence() {
        let s = make_schedule(10, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        // independently coded cumulative product
        let mut prod = 1.0;
        for t in 1..=10 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 9.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn cosine_schedule_valid() {
        let s = make_schedule(100, 1e-8, 0.999, ScheduleKind::Cosine).unwrap();
        for t in 0..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            assert!(s.beta(t + 1) > 0.0 && s.beta(t + 1) < 1.0);
        }
    }

    #[test]
    fn bad_schedule_params_rejected() {
        assert!(matches!(
            make_schedule(0, 0.1, 0.2, ScheduleKind::Linear),
            Err(CoreError::Param(_))
        ));
        assert!(make_schedule(5, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(5, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(5, 0.3, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_at_zero_is_identity() {
        let mut rng = Rng::new(1);
        let s = make_schedule(10, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 2, 4, 4);
        let eps = rand_latent(&mut rng, 2, 4, 4);
        assert_eq!(q_sample(&z0, 0, &eps, &s).unwrap(), z0);
    }

    #[test]
    fn q_sample_with_zero_noise_scales() {
        let mut rng = Rng::new(2);
        let s = make_schedule(10, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 2, 4, 4);
        let eps = Tensor::zeros(&[2, 4, 4]);
        let want = z0.scale(math::sqrt(s.alpha_bar(5)));
        let got = q_sample(&z0, 5, &eps, &s).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_matches_scalar_oracle() {
        let mut rng = Rng::new(3);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 3, 4, 4);
        let eps = rand_latent(&mut rng, 3, 4, 4);
        let t = 25;
        let got = q_sample(&z0, t, &eps, &s).unwrap();
        for i in 0..z0.numel() {
            let want =
                s.alpha_bar(t).sqrt() * z0.data()[i] + (1.0 - s.alpha_bar(t)).sqrt() * eps.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_prediction_roundtrip_and_boundary() {
        let mut rng = Rng::new(4);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 3, 4, 4);
        let eps = rand_latent(&mut rng, 3, 4, 4);
        for t in [1, 10, 25, 50] {
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            let rec = one_step_prediction(&zt, &eps, t, &s).unwrap();
            for i in 0..z0.numel() {
                let rel = (rec.data()[i] - z0.data()[i]).abs() / z0.data()[i].abs().max(1.0);
                assert!(rel < 1e-6, "t={t}");
            }
        }
        let zt = rand_latent(&mut rng, 3, 4, 4);
        assert_eq!(one_step_prediction(&zt, &eps, 0, &s).unwrap(), zt);
    }

    #[test]
    fn one_step_prediction_matches_elementwise_oracle() {
        let mut rng = Rng::new(5);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z = rand_latent(&mut rng, 2, 4, 4);
        let e = rand_latent(&mut rng, 2, 4, 4);
        let t = 25;
        let got = one_step_prediction(&z, &e, t, &s).unwrap();
        let ab = s.alpha_bar(t);
        for i in 0..z.numel() {
            let want = z.data()[i] / ab.sqrt() - (1.0 - ab).sqrt() * e.data()[i] / ab.sqrt();
            assert!((got.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn ddim_with_true_noise_jumps_to_clean() {
        let mut rng = Rng::new(6);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 2, 4, 4);
        let eps = rand_latent(&mut rng, 2, 4, 4);
        let zt = q_sample(&z0, 50, &eps, &s).unwrap();
        let out = ddim_step(&zt, &eps, 50, 0, &s).unwrap();
        for i in 0..z0.numel() {
            assert!((out.data()[i] - z0.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ddim_chain_with_perfect_noise_telescopes() {
        let mut rng = Rng::new(7);
        let s = make_schedule(20, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z0 = rand_latent(&mut rng, 2, 4, 4);
        let eps = rand_latent(&mut rng, 2, 4, 4);
        let mut z = q_sample(&z0, 20, &eps, &s).unwrap();
        for t in (1..=20).rev() {
            z = ddim_step(&z, &eps, t, t - 1, &s).unwrap();
        }
        for i in 0..z0.numel() {
            assert!((z.data()[i] - z0.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn ddim_matches_formula_oracle() {
        let mut rng = Rng::new(8);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z = rand_latent(&mut rng, 2, 4, 4);
        let e = rand_latent(&mut rng, 2, 4, 4);
        let got = ddim_step(&z, &e, 30, 20, &s).unwrap();
        let (ab_t, ab_p) = (s.alpha_bar(30), s.alpha_bar(20));
        for i in 0..z.numel() {
            let z0 = z.data()[i] / ab_t.sqrt() - (1.0 - ab_t).sqrt() * e.data()[i] / ab_t.sqrt();
            let want = ab_p.sqrt() * z0 + (1.0 - ab_p).sqrt() * e.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn ddim_ordering_enforced() {
        let s = make_schedule(10, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let z = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            ddim_step(&z, &z, 5, 5, &s),
            Err(CoreError::Order(_))
        ));
    }

    #[test]
    fn cfg_endpoints_exact() {
        let mut rng = Rng::new(9);
        let u = rand_latent(&mut rng, 2, 4, 4);
        let c = rand_latent(&mut rng, 2, 4, 4);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
    }

    #[test]
    fn cfg_matches_elementwise_oracle_at_default_scale() {
        let mut rng = Rng::new(10);
        let u = rand_latent(&mut rng, 2, 4, 4);
        let c = rand_latent(&mut rng, 2, 4, 4);
        let got = cfg_combine(&u, &c, 7.5).unwrap();
        for i in 0..u.numel() {
            let want = u.data()[i] + 7.5 * (c.data()[i] - u.data()[i]);
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_double_combine_is_affine() {
        let mut rng = Rng::new(11);
        let u = rand_latent(&mut rng, 2, 3, 3);
        let c = rand_latent(&mut rng, 2, 3, 3);
        let (a, b) = (2.5, 3.0);
        let once = cfg_combine(&u, &c, a).unwrap();
        let twice = cfg_combine(&u, &once, b).unwrap();
        let direct = cfg_combine(&u, &c, a * b).unwrap();
        for i in 0..u.numel() {
            assert!((twice.data()[i] - direct.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_selects_per_pixel() {
        let mut rng = Rng::new(12);
        let s = make_schedule(50, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let zgen = rand_latent(&mut rng, 2, 4, 4);
        let z0 = rand_latent(&mut rng, 2, 4, 4);
        let eps = rand_latent(&mut rng, 2, 4, 4);

        let ones = BinaryMask::filled(4, 4, 1);
        assert_eq!(blend_latents(&zgen, &z0, 7, &ones, &eps, &s).unwrap(), zgen);

        let zeros = BinaryMask::filled(4, 4, 0);
        let noised = q_sample(&z0, 7, &eps, &s).unwrap();
        assert_eq!(
            blend_latents(&zgen, &z0, 7, &zeros, &eps, &s).unwrap(),
            noised
        );

        let checker = BinaryMask::from_fn(4, 4, |i, j| (i + j) % 2 == 0);
        let out = blend_latents(&zgen, &z0, 7, &checker, &eps, &s).unwrap();
        for ch in 0..2 {
            for p in 0..16 {
                let want = if checker.data()[p] == 1 {
                    zgen.data()[ch * 16 + p]
                } else {
                    noised.data()[ch * 16 + p]
                };
                assert_eq!(out.data()[ch * 16 + p], want);
            }
        }
    }

    #[test]
    fn ddim_timestep_grid_covers_range() {
        let pairs = ddim_timesteps(1000, 50);
        assert_eq!(pairs.len(), 50);
        assert_eq!(pairs[0], (1000, 980));
        assert_eq!(pairs[49], (20, 0));
        let pairs = ddim_timesteps(10, 3);
        assert_eq!(pairs.last().unwrap().1, 0);
        assert_eq!(pairs[0].0, 10);
    }
}
