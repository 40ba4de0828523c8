//! Training objective and the guided, blended editing loop.
//!
//! Training: sample a timestep and noise, forward-diffuse the clean image,
//! drop each condition independently with the configured probability, run
//! the denoiser with reference features and regress the injected noise.
//!
//! Editing: per DDIM step, predict noise for the conditional and the
//! fully-unconditional branch, combine with classifier-free guidance,
//! optionally steer the result so the low-pass content of the one-step
//! prediction tracks the original image on boundary pixels, take the DDIM
//! step and re-blend the unmasked region with the forward-diffused
//! original. The final blend at t = 0 copies unmasked pixels exactly.

use crate::conditioning::{
    caption_ids, encode_image, encode_text, null_text, null_vision, text_forward,
    text_null_forward, vision_forward, Caption, Vocab,
};
use crate::denoiser::{
    denoise, denoise_graph, reference_forward, reference_graph, DenoiseOptions, Model,
};
use crate::diffusion::{
    blend_latents, cfg_combine, ddim_step, ddim_timesteps, make_schedule, one_step_prediction,
    q_sample, NoiseSchedule, ScheduleKind,
};
use crate::error::{bail_mask, bail_param, CoreError, Result};
use crate::freq_guidance::{
    boundary_indices, guidance_gradient, guidance_value, guided_epsilon, lowpass,
    mean_text_attention, FourierMask, GuidanceConfig, StatsMode, WindowMode,
};
use crate::graph::{Graph, ParamSet, Var};
use crate::mask::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::string::String;

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Independent drop probability for each condition.
    pub dropout_p: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub kind: ScheduleKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            dropout_p: 0.05,
            clip_norm: 1.0,
            seed: 0,
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_min, self.beta_max, self.kind)
    }

    pub fn schedule_spec(&self) -> crate::diffusion::ScheduleSpec {
        crate::diffusion::ScheduleSpec {
            t_max: self.t_max,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            kind: self.kind,
        }
    }
}

/// One corpus record ready for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub caption: Caption,
    pub precise_mask: BinaryMask,
    pub coarse_mask: BinaryMask,
}

/// Momentum-free adaptive optimizer: per-coordinate step scaled by the
/// root of a bias-corrected running mean of squared gradients.
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    steps: usize,
    v: Vec<Option<Tensor>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> RmsProp {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            steps: 0,
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        if self.v.len() != params.len() {
            self.v = (0..params.len()).map(|_| None).collect();
        }
        self.steps += 1;
        let correction = 1.0 - crate::math::powf(self.decay, self.steps as f64);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            let v = self
                .v[i]
                .get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(i);
            for ((pv, gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vv = self.decay * *vv + (1.0 - self.decay) * gv * gv;
                let vhat = *vv / correction;
                *pv -= self.lr * gv / (crate::math::sqrt(vhat) + self.eps);
            }
        }
    }
}

fn masked_original(image: &Tensor, mask: &BinaryMask) -> Tensor {
    let (c, h, w) = image.dims3();
    let mut out = image.clone();
    for ch in 0..c {
        for p in 0..h * w {
            if mask.data()[p] == 1 {
                out.data_mut()[ch * h * w + p] = 0.0;
            }
        }
    }
    out
}

fn mask_plane(mask: &BinaryMask) -> Tensor {
    Tensor::from_vec(
        &[1, mask.height(), mask.width()],
        mask.data().iter().map(|&v| v as f64).collect(),
    )
}

/// Build the full training graph for one sample and return the loss node.
/// Differentiates through the denoiser, the reference branch and both
/// condition encoders.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_graph(
    g: &mut Graph,
    model: &Model,
    vocab: &Vocab,
    sample: &TrainSample,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
    drop_text: bool,
    drop_vis: bool,
) -> Result<Var> {
    let z_t = q_sample(&sample.image, t, eps, s)?;
    let (txt_tokens, pooled) = if drop_text {
        text_null_forward(g, &model.enc)
    } else {
        let (ids, n_real) = caption_ids(vocab, &sample.caption.text, model.enc.cfg.n_t)?;
        text_forward(g, &model.enc, &ids, n_real)
    };
    let vis_tokens = if drop_vis {
        g.constant(Tensor::zeros(&[model.n_vision_tokens(), model.enc.cfg.c_v]))
    } else {
        vision_forward(g, &model.enc, &sample.image)?
    };
    let mi = g.constant(masked_original(&sample.image, &sample.coarse_mask));
    let mp = g.constant(mask_plane(&sample.coarse_mask));
    let ztc = g.constant(z_t);
    let temb_feat = crate::denoiser::time_features(g, model, t);
    let (r0, r1, r2) = reference_graph(g, model, mi, mp, ztc, temb_feat);
    let (eps_pred, _rec) = denoise_graph(
        g,
        model,
        ztc,
        t,
        txt_tokens,
        pooled,
        vis_tokens,
        &sample.coarse_mask,
        [r0, r1, r2],
        &DenoiseOptions::default(),
    )?;
    let target = g.constant(eps.clone());
    Ok(g.mse_loss(eps_pred, target))
}

/// One optimizer update over a batch; returns the mean loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut RmsProp,
    vocab: &Vocab,
    batch: &[TrainSample],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        bail_param!("empty training batch");
    }
    let mut total: Vec<Option<Tensor>> = (0..model.params.len()).map(|_| None).collect();
    let mut loss_sum = 0.0;
    for sample in batch {
        let t = 1 + rng.below(s.t_max() as u64) as usize;
        let eps = Tensor::from_vec(
            sample.image.shape(),
            rng.normal_vec(sample.image.numel()),
        );
        let drop_text = rng.bernoulli(cfg.dropout_p);
        let drop_vis = rng.bernoulli(cfg.dropout_p);
        let (loss, grads) = {
            let mut g = Graph::new(model.params.tensors());
            let loss_var =
                training_loss_graph(&mut g, model, vocab, sample, t, &eps, s, drop_text, drop_vis)?;
            let loss = g.value(loss_var).data()[0];
            let grads = g.backward(loss_var);
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(CoreError::Numeric(alloc::format!(
                "non-finite training loss at t={t} caption={:?}",
                sample.caption.text
            )));
        }
        loss_sum += loss;
        let scale = 1.0 / batch.len() as f64;
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_scaled_assign(&g, scale),
                    None => *acc = Some(g.scale(scale)),
                }
            }
        }
    }
    if cfg.clip_norm > 0.0 {
        // adaptive steps amplify rare gradient spikes after quiet stretches;
        // a global-norm ceiling keeps one bad batch from poisoning the run
        let mut sq = 0.0;
        for g in total.iter().flatten() {
            for &v in g.data() {
                sq += v * v;
            }
        }
        let norm = crate::math::sqrt(sq);
        if norm > cfg.clip_norm {
            let scale = cfg.clip_norm / norm;
            for g in total.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    opt.step(&mut model.params, &total);
    Ok(loss_sum / batch.len() as f64)
}

/// Evaluate the training loss for fixed noise and timestep without touching
/// the weights (used by wiring tests and diagnostics).
pub fn training_loss_value(
    model: &Model,
    vocab: &Vocab,
    sample: &TrainSample,
    t: usize,
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<f64> {
    let mut g = Graph::new(model.params.tensors());
    let loss = training_loss_graph(&mut g, model, vocab, sample, t, eps, s, false, false)?;
    Ok(g.value(loss).data()[0])
}

/// Which mechanism to disable when reproducing the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationVariant {
    #[default]
    Full,
    /// Silence the visual branch entirely (text condition kept).
    NoCondAdapter,
    /// Keep the visual branch but disable the score suppression.
    ParallelInjection,
    /// Disable the frequency-domain sampling guidance.
    NoFreqGuidance,
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image: Tensor,
    /// Coarse edit mask at image resolution.
    pub mask: BinaryMask,
    pub prompt: String,
    pub guidance_scale: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub stfg_enabled: bool,
    pub window: WindowMode,
    pub stats: StatsMode,
    pub variant: AblationVariant,
    /// Inclusive timestep range where guidance applies; None = every step.
    pub guidance_t_range: Option<(usize, usize)>,
    /// Keep per-step score maps in the trace (memory-heavy).
    pub capture_scores: bool,
}

impl EditRequest {
    pub fn new(image: Tensor, mask: BinaryMask, prompt: impl Into<String>) -> EditRequest {
        EditRequest {
            image,
            mask,
            prompt: prompt.into(),
            guidance_scale: 7.5,
            lambda: 1.0,
            steps: 50,
            seed: 0,
            stfg_enabled: true,
            window: WindowMode::Centered,
            stats: StatsMode::Masked,
            variant: AblationVariant::Full,
            guidance_t_range: None,
            capture_scores: false,
        }
    }
}

/// Step-by-step diagnostics of one edit.
#[derive(Debug, Clone, Default)]
pub struct EditTrace {
    /// (t, guidance value) for every step where guidance ran.
    pub guidance_values: Vec<(usize, f64)>,
    /// (t, boundary pixel count) per guided step.
    pub boundary_sizes: Vec<(usize, usize)>,
    /// (t, per-layer score maps) when capturing was requested.
    pub score_maps: Vec<(usize, Vec<crate::adapter::ScoreMap>)>,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: Tensor,
    pub trace: EditTrace,
}

/// Run the full guided inpainting loop.
pub fn edit(model: &Model, req: &EditRequest, s: &NoiseSchedule) -> Result<EditOutput> {
    let (c, h, w) = req.image.dims3();
    let size = model.cfg.image_size;
    if (c, h, w) != (model.cfg.image_channels, size, size) {
        return Err(CoreError::Shape(alloc::format!(
            "edit image {c}x{h}x{w} vs model {}x{size}x{size}",
            model.cfg.image_channels
        )));
    }
    if req.mask.is_empty() {
        bail_mask!("edit mask selects no pixels at any resolution");
    }
    if (req.mask.height(), req.mask.width()) != (h, w) {
        bail_mask!("edit mask {}x{} vs image {h}x{w}", req.mask.height(), req.mask.width());
    }
    if req.steps < 1 {
        bail_param!("steps must be >= 1");
    }
    if !req.image.all_finite() {
        return Err(CoreError::Numeric(String::from("non-finite edit input")));
    }

    let vocab = crate::synth::canonical_vocab();
    let stfg_on = req.stfg_enabled && req.variant != AblationVariant::NoFreqGuidance;
    let opts = DenoiseOptions {
        force_score: match req.variant {
            AblationVariant::ParallelInjection => Some(0.0),
            _ => None,
        },
    };

    let txt = encode_text(
        &Caption::new(req.prompt.clone(), u8::MAX),
        &vocab,
        &model.params,
        &model.enc,
    )?;
    let vis = match req.variant {
        AblationVariant::NoCondAdapter => null_vision(model.n_vision_tokens(), &model.enc),
        _ => encode_image(&req.image, &model.params, &model.enc)?,
    };
    let un_txt = null_text(&model.params, &model.enc);
    let un_vis = null_vision(model.n_vision_tokens(), &model.enc);

    let masked_img = masked_original(&req.image, &req.mask);
    let fmask = FourierMask::new(req.window, h, w)?;
    let z0_lp = if stfg_on {
        Some(lowpass(&req.image, &fmask)?)
    } else {
        None
    };
    let gcfg = GuidanceConfig {
        lambda: req.lambda,
        window: req.window,
        stats: req.stats,
    };

    let mut rng = Rng::new(req.seed);
    let mut z = Tensor::from_vec(req.image.shape(), rng.normal_vec(req.image.numel()));
    let mut trace = EditTrace::default();

    for (t, t_prev) in ddim_timesteps(s.t_max(), req.steps) {
        let refs = reference_forward(model, &masked_img, &req.mask, &z, t)?;
        let (eps_c, rec) = denoise(model, &z, t, &txt, &vis, &req.mask, &refs, &opts)?;
        let (eps_u, _) = denoise(model, &z, t, &un_txt, &un_vis, &req.mask, &refs, &opts)?;
        let mut eps = cfg_combine(&eps_u, &eps_c, req.guidance_scale)?;

        if req.capture_scores {
            trace.score_maps.push((t, rec.scores.clone()));
        }

        let in_range = req
            .guidance_t_range
            .map(|(lo, hi)| t >= lo && t <= hi)
            .unwrap_or(true);
        if stfg_on && in_range {
            let a_bar = mean_text_attention(&rec.layers, h, w)?;
            let idx = boundary_indices(&a_bar, &req.mask, req.stats)?;
            if !idx.is_empty() {
                let z0_lp = z0_lp.as_ref().expect("cached low-pass original");
                let zhat0 = one_step_prediction(&z, &eps, t, s)?;
                let zhat_lp = lowpass(&zhat0, &fmask)?;
                let g_val = guidance_value(z0_lp, &zhat_lp, &idx)?;
                let grad = guidance_gradient(z0_lp, &zhat_lp, &idx, t, s, &fmask)?;
                eps = guided_epsilon(&eps, &grad, t, &gcfg, s)?;
                trace.guidance_values.push((t, g_val));
                trace.boundary_sizes.push((t, idx.len()));
            }
        }

        z = ddim_step(&z, &eps, t, t_prev, s)?;
        if !z.all_finite() {
            return Err(CoreError::Numeric(alloc::format!(
                "non-finite latent after step t={t}"
            )));
        }
        let blend_eps = Tensor::from_vec(req.image.shape(), rng.normal_vec(req.image.numel()));
        z = blend_latents(&z, &req.image, t_prev, &req.mask, &blend_eps, s)?;
    }

    Ok(EditOutput { image: z, trace })
}

/// The mean guidance value over a completed trace, used by the efficacy
/// checks; zero when guidance never ran.
pub fn mean_guidance_value(trace: &EditTrace) -> f64 {
    if trace.guidance_values.is_empty() {
        return 0.0;
    }
    trace.guidance_values.iter().map(|(_, v)| v).sum::<f64>()
        / trace.guidance_values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::synth::{canonical_vocab, generate_face, SyntheticFaceSpec};

    fn tiny_model(seed: u64) -> Model {
        let cfg = DenoiserConfig {
            image_size: 16,
            channels: [8, 12, 12],
            groups: 4,
            time_dim: 16,
            attn_d: 8,
            score_hidden: 8,
            encoder: crate::conditioning::EncoderConfig {
                n_t: 6,
                c_t: 8,
                c_v: 8,
                patch: 4,
            },
            ..Default::default()
        };
        Model::new(cfg, &canonical_vocab(), seed)
    }

    fn sample_for(model: &Model, seed: u64) -> TrainSample {
        let spec = SyntheticFaceSpec::sample(seed, model.cfg.image_size);
        let (image, seg, caps) = generate_face(&spec);
        let (attr, caption) = caps[0].clone();
        let mut precise = crate::mask::BinaryMask::filled(16, 16, 0);
        for &cl in crate::synth::attr_classes(attr) {
            precise = precise.union(&crate::mask::attr_mask(&seg, cl).unwrap());
        }
        let coarse = crate::mask::dilate(&precise, 2);
        TrainSample {
            image,
            caption,
            precise_mask: precise,
            coarse_mask: coarse,
        }
    }

    #[test]
    fn initial_loss_is_about_unit_variance() {
        let model = tiny_model(1);
        let vocab = canonical_vocab();
        let cfg = TrainConfig {
            t_max: 100,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let sample = sample_for(&model, 3);
        let mut rng = Rng::new(4);
        let eps = Tensor::from_vec(sample.image.shape(), rng.normal_vec(sample.image.numel()));
        let loss = training_loss_value(&model, &vocab, &sample, 50, &eps, &s).unwrap();
        // zero-initialized head predicts 0, so the loss is mean(eps^2)
        let want = eps.data().iter().map(|v| v * v).sum::<f64>() / eps.numel() as f64;
        assert!((loss - want).abs() < 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn zero_noise_and_zero_head_give_zero_loss() {
        let model = tiny_model(2);
        let vocab = canonical_vocab();
        let cfg = TrainConfig {
            t_max: 100,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let sample = sample_for(&model, 5);
        let eps = Tensor::zeros(sample.image.shape());
        let loss = training_loss_value(&model, &vocab, &sample, 30, &eps, &s).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let mut model = tiny_model(6);
        let vocab = canonical_vocab();
        let cfg = TrainConfig {
            t_max: 100,
            batch_size: 2,
            lr: 1e-3,
            dropout_p: 0.0,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let batch: Vec<TrainSample> = (0..2).map(|i| sample_for(&model, 10 + i)).collect();
        let mut opt = RmsProp::new(cfg.lr);
        let mut rng = Rng::new(7);
        let mut losses = Vec::new();
        for _ in 0..30 {
            losses.push(train_step(&mut model, &mut opt, &vocab, &batch, &s, &cfg, &mut rng).unwrap());
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "loss did not decrease: head {head:.4} tail {tail:.4}"
        );
    }

    #[test]
    fn edit_rejects_empty_mask_and_wrong_steps() {
        let model = tiny_model(8);
        let cfg = TrainConfig {
            t_max: 100,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let spec = SyntheticFaceSpec::sample(1, 16);
        let (image, _, _) = generate_face(&spec);
        let empty = BinaryMask::filled(16, 16, 0);
        let req = EditRequest::new(image.clone(), empty, "thick dark eyebrows");
        assert!(matches!(edit(&model, &req, &s), Err(CoreError::Mask(_))));

        let mask = BinaryMask::from_fn(16, 16, |i, _| i < 4);
        let mut req = EditRequest::new(image, mask, "thick dark eyebrows");
        req.steps = 0;
        assert!(matches!(edit(&model, &req, &s), Err(CoreError::Param(_))));
    }

    #[test]
    fn edit_preserves_unmasked_pixels_exactly_and_is_deterministic() {
        let model = tiny_model(9);
        let cfg = TrainConfig {
            t_max: 100,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let spec = SyntheticFaceSpec::sample(2, 16);
        let (image, _, _) = generate_face(&spec);
        let mask = BinaryMask::from_fn(16, 16, |i, j| (5..10).contains(&i) && (4..12).contains(&j));
        let mut req = EditRequest::new(image.clone(), mask.clone(), "thick dark eyebrows");
        req.steps = 4;
        req.seed = 11;
        let out1 = edit(&model, &req, &s).unwrap();
        let out2 = edit(&model, &req, &s).unwrap();
        assert_eq!(out1.image, out2.image);
        for c in 0..3 {
            for p in 0..16 * 16 {
                if mask.data()[p] == 0 {
                    assert_eq!(
                        out1.image.data()[c * 256 + p],
                        image.data()[c * 256 + p],
                        "unmasked pixel changed"
                    );
                }
            }
        }
        // no-guidance variant also preserves
        req.stfg_enabled = false;
        let out3 = edit(&model, &req, &s).unwrap();
        for c in 0..3 {
            for p in 0..16 * 16 {
                if mask.data()[p] == 0 {
                    assert_eq!(out3.image.data()[c * 256 + p], image.data()[c * 256 + p]);
                }
            }
        }
    }

    #[test]
    fn guided_edit_records_trace() {
        let mut model = tiny_model(10);
        // zero text keys make the attention maps exactly uniform, so the
        // boundary threshold admits every masked pixel and guidance runs on
        // all steps
        for idx in model.params.indices_matching(".w_k_txt") {
            for v in model.params.get_mut(idx).data_mut() {
                *v = 0.0;
            }
        }
        let cfg = TrainConfig {
            t_max: 100,
            ..Default::default()
        };
        let s = cfg.schedule().unwrap();
        let spec = SyntheticFaceSpec::sample(3, 16);
        let (image, _, _) = generate_face(&spec);
        let mask = BinaryMask::from_fn(16, 16, |i, j| (4..12).contains(&i) && (4..12).contains(&j));
        let mut req = EditRequest::new(image, mask.clone(), "a smiling mouth");
        req.steps = 3;
        req.capture_scores = true;
        let out = edit(&model, &req, &s).unwrap();
        assert_eq!(out.trace.guidance_values.len(), 3);
        assert_eq!(out.trace.score_maps.len(), 3);
        assert_eq!(out.trace.score_maps[0].1.len(), 5);
        for (_, g) in &out.trace.guidance_values {
            assert!(g.is_finite() && *g >= 0.0);
        }
        for (_, n) in &out.trace.boundary_sizes {
            assert_eq!(*n, mask.count_ones());
        }
    }
}
