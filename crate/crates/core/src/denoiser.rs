//! U-shaped noise predictor with per-level condition-adapter blocks and a
//! reference encoder branch.
//!
//! Two downsampling levels; one residual block plus one adapter block at
//! each encoder level, the bottleneck and each decoder level — five
//! attention layers in all. The reference branch is a convolutional copy
//! of the encoder fed (masked image, mask, noisy latent) as channels; its
//! features enter the skip connections and the bottleneck through
//! zero-initialized 1x1 projections, so an untrained branch is exactly
//! inert.
//!
//! Text attention maps and score maps of every adapter block are recorded
//! per forward pass for the sampling-time guidance.

use crate::adapter::{adapter_graph, AdapterConfig, AdapterParams, ScoreAxis, ScoreMap};
use crate::conditioning::{EncoderConfig, EncoderParams, TextCondition, VisionCondition, Vocab};
use crate::error::{bail_shape, CoreError, Result};
use crate::freq_guidance::LayerAttention;
use crate::graph::{Graph, ParamSet, Var};
use crate::mask::{downsample_mask, BinaryMask};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub groups: usize,
    pub time_dim: usize,
    pub attn_d: usize,
    pub score_hidden: usize,
    pub score_axis: ScoreAxis,
    pub encoder: EncoderConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            image_channels: 3,
            channels: [64, 128, 128],
            groups: 8,
            time_dim: 128,
            attn_d: 64,
            score_hidden: 64,
            score_axis: ScoreAxis::Class,
            encoder: EncoderConfig::default(),
        }
    }
}

impl DenoiserConfig {
    /// Miniature used by gradient-check tests.
    pub fn miniature() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            image_channels: 3,
            channels: [4, 6, 6],
            groups: 2,
            time_dim: 8,
            attn_d: 4,
            score_hidden: 4,
            score_axis: ScoreAxis::Class,
            encoder: EncoderConfig {
                n_t: 4,
                c_t: 4,
                c_v: 4,
                patch: 4,
            },
        }
    }
}

#[derive(Debug, Clone)]
struct ConvParams {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct ResBlockParams {
    gn1_g: usize,
    gn1_b: usize,
    conv1: ConvParams,
    time_w: usize,
    time_b: usize,
    gn2_g: usize,
    gn2_b: usize,
    conv2: ConvParams,
    skip: Option<ConvParams>,
}

#[derive(Debug, Clone)]
struct AttnBlockParams {
    gn_g: usize,
    gn_b: usize,
    adapter: AdapterParams,
}

/// All parameter slots of the model; conditioning encoders included so one
/// optimizer step trains everything jointly.
pub struct Model {
    pub params: ParamSet,
    pub cfg: DenoiserConfig,
    pub enc: EncoderParams,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    stem: ConvParams,
    enc0: ResBlockParams,
    attn0: AttnBlockParams,
    down0: ConvParams,
    enc1: ResBlockParams,
    attn1: AttnBlockParams,
    down1: ConvParams,
    mid: ResBlockParams,
    attn_mid: AttnBlockParams,
    up1: ConvParams,
    dec1: ResBlockParams,
    attn_dec1: AttnBlockParams,
    up0: ConvParams,
    dec0: ResBlockParams,
    attn_dec0: AttnBlockParams,
    out_gn_g: usize,
    out_gn_b: usize,
    out_conv: ConvParams,
    ref_stem: ConvParams,
    ref_res0: ResBlockParams,
    ref_down0: ConvParams,
    ref_res1: ResBlockParams,
    ref_down1: ConvParams,
    ref_mid: ResBlockParams,
    zero_proj: [ConvParams; 3],
}

/// Reference-branch output: one feature tensor per injection level, shaped
/// like the corresponding backbone tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFeatures {
    pub feats: Vec<Tensor>,
}

impl ReferenceFeatures {
    /// All-zero features with the correct shapes; with zero-initialized
    /// projections this is indistinguishable from a real pass.
    pub fn zeros(cfg: &DenoiserConfig) -> ReferenceFeatures {
        let s = cfg.image_size;
        ReferenceFeatures {
            feats: vec![
                Tensor::zeros(&[cfg.channels[0], s, s]),
                Tensor::zeros(&[cfg.channels[1], s / 2, s / 2]),
                Tensor::zeros(&[cfg.channels[2], s / 4, s / 4]),
            ],
        }
    }
}

/// Per-layer text attention and score maps captured during one forward
/// pass, tagged with the timestep.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
    pub scores: Vec<ScoreMap>,
    pub t: usize,
}

/// Inference-time overrides backing the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DenoiseOptions {
    /// Replace the predicted score by a constant (0 disables suppression).
    pub force_score: Option<f64>,
}

fn alloc_conv(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero: bool,
    rng: &mut Rng,
) -> ConvParams {
    let fan_in = (cin * k * k) as f64;
    let std = 1.0 / math::sqrt(fan_in);
    let w = params.alloc(
        format!("{name}.w"),
        if zero {
            Tensor::zeros(&[cout, cin, k, k])
        } else {
            Tensor::from_vec(
                &[cout, cin, k, k],
                (0..cout * cin * k * k).map(|_| rng.normal() * std).collect(),
            )
        },
    );
    let b = params.alloc(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvParams { w, b }
}

fn alloc_res(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
    rng: &mut Rng,
) -> ResBlockParams {
    let gn1_g = params.alloc(format!("{name}.gn1.g"), Tensor::filled(&[cin], 1.0));
    let gn1_b = params.alloc(format!("{name}.gn1.b"), Tensor::zeros(&[cin]));
    let conv1 = alloc_conv(params, &format!("{name}.conv1"), cin, cout, 3, false, rng);
    let st = 1.0 / math::sqrt(time_dim as f64);
    let time_w = params.alloc(
        format!("{name}.time.w"),
        Tensor::from_vec(
            &[time_dim, cout],
            (0..time_dim * cout).map(|_| rng.normal() * st).collect(),
        ),
    );
    let time_b = params.alloc(format!("{name}.time.b"), Tensor::zeros(&[cout]));
    let gn2_g = params.alloc(format!("{name}.gn2.g"), Tensor::filled(&[cout], 1.0));
    let gn2_b = params.alloc(format!("{name}.gn2.b"), Tensor::zeros(&[cout]));
    let conv2 = alloc_conv(params, &format!("{name}.conv2"), cout, cout, 3, false, rng);
    let skip = if cin != cout {
        Some(alloc_conv(params, &format!("{name}.skip"), cin, cout, 1, false, rng))
    } else {
        None
    };
    ResBlockParams {
        gn1_g,
        gn1_b,
        conv1,
        time_w,
        time_b,
        gn2_g,
        gn2_b,
        conv2,
        skip,
    }
}

fn alloc_attn(
    params: &mut ParamSet,
    name: &str,
    c_z: usize,
    cfg: &DenoiserConfig,
    rng: &mut Rng,
) -> AttnBlockParams {
    let gn_g = params.alloc(format!("{name}.gn.g"), Tensor::filled(&[c_z], 1.0));
    let gn_b = params.alloc(format!("{name}.gn.b"), Tensor::zeros(&[c_z]));
    let adapter = AdapterParams::alloc(
        params,
        &format!("{name}.adapter"),
        AdapterConfig {
            c_z,
            c_t: cfg.encoder.c_t,
            c_v: cfg.encoder.c_v,
            d: cfg.attn_d.min(c_z),
            score_hidden: cfg.score_hidden,
            score_axis: cfg.score_axis,
        },
        rng,
    );
    AttnBlockParams { gn_g, gn_b, adapter }
}

impl Model {
    pub fn new(cfg: DenoiserConfig, vocab: &Vocab, seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::new();
        let enc = EncoderParams::alloc(&mut p, vocab, cfg.encoder, &mut rng);
        let [c0, c1, c2] = cfg.channels;
        let td = cfg.time_dim;
        let stt = 1.0 / math::sqrt(td as f64);
        let time_w1 = p.alloc(
            "time.l1.w",
            Tensor::from_vec(&[td, td], (0..td * td).map(|_| rng.normal() * stt).collect()),
        );
        let time_b1 = p.alloc("time.l1.b", Tensor::zeros(&[td]));
        let time_w2 = p.alloc(
            "time.l2.w",
            Tensor::from_vec(&[td, td], (0..td * td).map(|_| rng.normal() * stt).collect()),
        );
        let time_b2 = p.alloc("time.l2.b", Tensor::zeros(&[td]));

        let ic = cfg.image_channels;
        let stem = alloc_conv(&mut p, "bb.stem", ic, c0, 3, false, &mut rng);
        let enc0 = alloc_res(&mut p, "bb.enc0", c0, c0, td, &mut rng);
        let attn0 = alloc_attn(&mut p, "bb.attn0", c0, &cfg, &mut rng);
        let down0 = alloc_conv(&mut p, "bb.down0", c0, c1, 3, false, &mut rng);
        let enc1 = alloc_res(&mut p, "bb.enc1", c1, c1, td, &mut rng);
        let attn1 = alloc_attn(&mut p, "bb.attn1", c1, &cfg, &mut rng);
        let down1 = alloc_conv(&mut p, "bb.down1", c1, c2, 3, false, &mut rng);
        let mid = alloc_res(&mut p, "bb.mid", c2, c2, td, &mut rng);
        let attn_mid = alloc_attn(&mut p, "bb.attn_mid", c2, &cfg, &mut rng);
        let up1 = alloc_conv(&mut p, "bb.up1", c2, c1, 3, false, &mut rng);
        let dec1 = alloc_res(&mut p, "bb.dec1", c1 + c1, c1, td, &mut rng);
        let attn_dec1 = alloc_attn(&mut p, "bb.attn_dec1", c1, &cfg, &mut rng);
        let up0 = alloc_conv(&mut p, "bb.up0", c1, c0, 3, false, &mut rng);
        let dec0 = alloc_res(&mut p, "bb.dec0", c0 + c0, c0, td, &mut rng);
        let attn_dec0 = alloc_attn(&mut p, "bb.attn_dec0", c0, &cfg, &mut rng);
        let out_gn_g = p.alloc("bb.out.gn.g", Tensor::filled(&[c0], 1.0));
        let out_gn_b = p.alloc("bb.out.gn.b", Tensor::zeros(&[c0]));
        // zero-initialized head: the untrained model predicts zero noise
        let out_conv = alloc_conv(&mut p, "bb.out.conv", c0, ic, 3, true, &mut rng);

        // reference branch: stem takes (masked image, mask, noisy latent)
        let ref_in = 2 * ic + 1;
        let ref_stem = alloc_conv(&mut p, "ref.stem", ref_in, c0, 3, false, &mut rng);
        let ref_res0 = alloc_res(&mut p, "ref.res0", c0, c0, td, &mut rng);
        let ref_down0 = alloc_conv(&mut p, "ref.down0", c0, c1, 3, false, &mut rng);
        let ref_res1 = alloc_res(&mut p, "ref.res1", c1, c1, td, &mut rng);
        let ref_down1 = alloc_conv(&mut p, "ref.down1", c1, c2, 3, false, &mut rng);
        let ref_mid = alloc_res(&mut p, "ref.mid", c2, c2, td, &mut rng);
        let zero_proj = [
            alloc_conv(&mut p, "ref.zero_proj0", c0, c0, 1, true, &mut rng),
            alloc_conv(&mut p, "ref.zero_proj1", c1, c1, 1, true, &mut rng),
            alloc_conv(&mut p, "ref.zero_proj2", c2, c2, 1, true, &mut rng),
        ];

        Model {
            params: p,
            cfg,
            enc,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            stem,
            enc0,
            attn0,
            down0,
            enc1,
            attn1,
            down1,
            mid,
            attn_mid,
            up1,
            dec1,
            attn_dec1,
            up0,
            dec0,
            attn_dec0,
            out_gn_g,
            out_gn_b,
            out_conv,
            ref_stem,
            ref_res0,
            ref_down0,
            ref_res1,
            ref_down1,
            ref_mid,
            zero_proj,
        }
    }

    /// Every zero-initialized projection is still exactly zero.
    pub fn zero_projs_are_zero(&self) -> bool {
        self.zero_proj.iter().all(|c| {
            self.params.get(c.w).data().iter().all(|&v| v == 0.0)
                && self.params.get(c.b).data().iter().all(|&v| v == 0.0)
        })
    }

    /// Vision token count for this image size.
    pub fn n_vision_tokens(&self) -> usize {
        (self.cfg.image_size / self.cfg.encoder.patch).pow(2)
    }
}

/// Sinusoidal timestep features as a [1, dim] row.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[1, dim]);
    for i in 0..half {
        let freq = math::exp(-math::ln(10000.0) * i as f64 / (half.max(2) - 1) as f64);
        out.data_mut()[i] = math::sin(t as f64 * freq);
        out.data_mut()[half + i] = math::cos(t as f64 * freq);
    }
    out
}

fn conv(g: &mut Graph, c: &ConvParams, x: Var, stride: usize, pad: usize) -> Var {
    let w = g.param(c.w);
    let b = g.param(c.b);
    g.conv2d(x, w, b, stride, pad)
}

fn res_block(g: &mut Graph, rb: &ResBlockParams, x: Var, temb: Var, groups: usize) -> Var {
    let g1g = g.param(rb.gn1_g);
    let g1b = g.param(rb.gn1_b);
    let h = g.group_norm(x, g1g, g1b, groups, 1e-5);
    let h = g.silu(h);
    let h = conv(g, &rb.conv1, h, 1, 1);
    let tw = g.param(rb.time_w);
    let tb = g.param(rb.time_b);
    let tproj = g.matmul(temb, tw);
    let tproj = g.add_row_bias(tproj, tb);
    let cout = g.value(tproj).dims2().1;
    let tvec = g.reshape(tproj, &[cout]);
    let h = g.add_chan_bias(h, tvec);
    let g2g = g.param(rb.gn2_g);
    let g2b = g.param(rb.gn2_b);
    let h = g.group_norm(h, g2g, g2b, groups, 1e-5);
    let h = g.silu(h);
    let h = conv(g, &rb.conv2, h, 1, 1);
    let skip = match &rb.skip {
        Some(sc) => conv(g, sc, x, 1, 0),
        None => x,
    };
    g.add(h, skip)
}

struct AttnIo {
    out: Var,
    attn: LayerAttention,
    score: ScoreMap,
}

#[allow(clippy::too_many_arguments)]
fn attn_block(
    g: &mut Graph,
    ab: &AttnBlockParams,
    x: Var,
    txt_tokens: Var,
    pooled: Var,
    vis_tokens: Var,
    mask_flat: &[f64],
    groups: usize,
    opts: &DenoiseOptions,
) -> AttnIo {
    let (c, h, w) = g.value(x).dims3();
    let gg = g.param(ab.gn_g);
    let gb = g.param(ab.gn_b);
    let xn = g.group_norm(x, gg, gb, groups, 1e-5);
    let flat = g.reshape(xn, &[c, h * w]);
    let z = g.transpose(flat);
    let mut sig = adapter_graph(g, &ab.adapter, z, txt_tokens, pooled, vis_tokens, mask_flat);
    if let Some(v) = opts.force_score {
        // rebuild the fusion with a constant score in place of the head
        let forced = g.constant(Tensor::filled(&[h * w], v));
        let mask_c = g.constant(Tensor::from_vec(&[h * w], mask_flat.to_vec()));
        let ones = g.constant(Tensor::filled(&[h * w], 1.0));
        let sm = g.mul(forced, mask_c);
        let gate = g.sub(ones, sm);
        let a_sup = g.mul_rows(sig.a_vis, gate);
        let w_v_v = g.param(ab.adapter.w_v_vis);
        let v_vis = g.matmul(vis_tokens, w_v_v);
        let f_vis = g.matmul(a_sup, v_vis);
        let w_v_t = g.param(ab.adapter.w_v_txt);
        let v_txt = g.matmul(txt_tokens, w_v_t);
        let f_txt = g.matmul(sig.a_txt, v_txt);
        let fused = g.add(f_txt, f_vis);
        let w_out = g.param(ab.adapter.w_out);
        let b_out = g.param(ab.adapter.b_out);
        let zs = g.matmul(fused, w_out);
        let zs = g.add_row_bias(zs, b_out);
        sig.z_s = zs;
        sig.score = forced;
    }
    let zs_t = g.transpose(sig.z_s);
    let zs_map = g.reshape(zs_t, &[c, h, w]);
    let out = g.add(x, zs_map);
    let attn = LayerAttention {
        a_txt: g.value(sig.a_txt).clone(),
        h,
        w,
    };
    let score =
        ScoreMap::new(g.value(sig.score).data().to_vec(), h, w).expect("softmax score in range");
    AttnIo { out, attn, score }
}

/// Time-embedding tower: sinusoidal features through the shared two-layer
/// MLP, as a [1, time_dim] row.
pub fn time_features(g: &mut Graph, model: &Model, t: usize) -> Var {
    let emb = g.constant(time_embedding(t, model.cfg.time_dim));
    let w1 = g.param(model.time_w1);
    let b1 = g.param(model.time_b1);
    let h = g.matmul(emb, w1);
    let h = g.add_row_bias(h, b1);
    let h = g.silu(h);
    let w2 = g.param(model.time_w2);
    let b2 = g.param(model.time_b2);
    let h = g.matmul(h, w2);
    g.add_row_bias(h, b2)
}

/// Build the reference encoder on a graph; returns the three feature vars.
pub fn reference_graph(
    g: &mut Graph,
    model: &Model,
    masked_image: Var,
    mask_plane: Var,
    z_t: Var,
    temb: Var,
) -> (Var, Var, Var) {
    let groups = model.cfg.groups;
    let mm = g.concat_channels(masked_image, mask_plane);
    let input = g.concat_channels(mm, z_t);
    let h = conv(g, &model.ref_stem, input, 1, 1);
    let r0 = res_block(g, &model.ref_res0, h, temb, groups);
    let h = conv(g, &model.ref_down0, r0, 2, 1);
    let r1 = res_block(g, &model.ref_res1, h, temb, groups);
    let h = conv(g, &model.ref_down1, r1, 2, 1);
    let r2 = res_block(g, &model.ref_mid, h, temb, groups);
    (r0, r1, r2)
}

/// Backbone forward on a graph. Conditions arrive as vars so the training
/// path can differentiate through the encoders; reference features can be
/// vars (training) or constants (sampling).
#[allow(clippy::too_many_arguments)]
pub fn denoise_graph(
    g: &mut Graph,
    model: &Model,
    z_t: Var,
    t: usize,
    txt_tokens: Var,
    pooled: Var,
    vis_tokens: Var,
    mask: &BinaryMask,
    ref_feats: [Var; 3],
    opts: &DenoiseOptions,
) -> Result<(Var, AttentionRecord)> {
    let s = model.cfg.image_size;
    let groups = model.cfg.groups;
    if (mask.height(), mask.width()) != (s, s) {
        bail_shape!("mask {}x{} vs image size {s}", mask.height(), mask.width());
    }
    let m32: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let m16d = downsample_mask(mask, s / 2, s / 2)?;
    let m16: Vec<f64> = m16d.data().iter().map(|&v| v as f64).collect();
    let m8d = downsample_mask(mask, s / 4, s / 4)?;
    let m8: Vec<f64> = m8d.data().iter().map(|&v| v as f64).collect();

    let temb = time_features(g, model, t);
    let mut layers = Vec::with_capacity(5);
    let mut scores = Vec::with_capacity(5);

    let h = conv(g, &model.stem, z_t, 1, 1);
    let h = res_block(g, &model.enc0, h, temb, groups);
    let io = attn_block(g, &model.attn0, h, txt_tokens, pooled, vis_tokens, &m32, groups, opts);
    layers.push(io.attn);
    scores.push(io.score);
    let s0 = io.out;

    let h = conv(g, &model.down0, s0, 2, 1);
    let h = res_block(g, &model.enc1, h, temb, groups);
    let io = attn_block(g, &model.attn1, h, txt_tokens, pooled, vis_tokens, &m16, groups, opts);
    layers.push(io.attn);
    scores.push(io.score);
    let s1 = io.out;

    let h = conv(g, &model.down1, s1, 2, 1);
    let r2p = conv(g, &model.zero_proj[2], ref_feats[2], 1, 0);
    let h = g.add(h, r2p);
    let h = res_block(g, &model.mid, h, temb, groups);
    let io = attn_block(g, &model.attn_mid, h, txt_tokens, pooled, vis_tokens, &m8, groups, opts);
    layers.push(io.attn);
    scores.push(io.score);
    let h = io.out;

    let h = g.upsample2x(h);
    let h = conv(g, &model.up1, h, 1, 1);
    let r1p = conv(g, &model.zero_proj[1], ref_feats[1], 1, 0);
    let s1i = g.add(s1, r1p);
    let h = g.concat_channels(h, s1i);
    let h = res_block(g, &model.dec1, h, temb, groups);
    let io = attn_block(g, &model.attn_dec1, h, txt_tokens, pooled, vis_tokens, &m16, groups, opts);
    layers.push(io.attn);
    scores.push(io.score);
    let h = io.out;

    let h = g.upsample2x(h);
    let h = conv(g, &model.up0, h, 1, 1);
    let r0p = conv(g, &model.zero_proj[0], ref_feats[0], 1, 0);
    let s0i = g.add(s0, r0p);
    let h = g.concat_channels(h, s0i);
    let h = res_block(g, &model.dec0, h, temb, groups);
    let io = attn_block(g, &model.attn_dec0, h, txt_tokens, pooled, vis_tokens, &m32, groups, opts);
    layers.push(io.attn);
    scores.push(io.score);
    let h = io.out;

    let og = g.param(model.out_gn_g);
    let ob = g.param(model.out_gn_b);
    let h = g.group_norm(h, og, ob, groups, 1e-5);
    let h = g.silu(h);
    let eps = conv(g, &model.out_conv, h, 1, 1);

    if !g.value(eps).all_finite() {
        return Err(CoreError::Numeric(String::from(
            "non-finite activations in output head",
        )));
    }
    Ok((eps, AttentionRecord { layers, scores, t }))
}

/// Plain reference-branch forward from image-space inputs.
pub fn reference_forward(
    model: &Model,
    masked_image: &Tensor,
    mask: &BinaryMask,
    z_t: &Tensor,
    t: usize,
) -> Result<ReferenceFeatures> {
    let (_c, h, w) = masked_image.dims3();
    if (mask.height(), mask.width()) != (h, w) {
        bail_shape!(
            "reference mask {}x{} vs image {h}x{w}",
            mask.height(),
            mask.width()
        );
    }
    masked_image.check_same_shape(z_t, "reference_forward latent")?;
    let mut g = Graph::new(model.params.tensors());
    let mi = g.constant(masked_image.clone());
    let mp = g.constant(Tensor::from_vec(
        &[1, h, w],
        mask.data().iter().map(|&v| v as f64).collect(),
    ));
    let zt = g.constant(z_t.clone());
    let temb = time_features(&mut g, model, t);
    let (r0, r1, r2) = reference_graph(&mut g, model, mi, mp, zt, temb);
    let feats = vec![
        g.value(r0).clone(),
        g.value(r1).clone(),
        g.value(r2).clone(),
    ];
    for (i, f) in feats.iter().enumerate() {
        if !f.all_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite reference features at level {i}"
            )));
        }
    }
    Ok(ReferenceFeatures { feats })
}

/// Plain denoiser forward over precomputed conditions and reference
/// features; returns the predicted noise and the attention record.
pub fn denoise(
    model: &Model,
    z_t: &Tensor,
    t: usize,
    txt: &TextCondition,
    vis: &VisionCondition,
    mask: &BinaryMask,
    r: &ReferenceFeatures,
    opts: &DenoiseOptions,
) -> Result<(Tensor, AttentionRecord)> {
    let mut g = Graph::new(model.params.tensors());
    let zt = g.constant(z_t.clone());
    let tt = g.constant(txt.tokens.clone());
    let pl = g.constant(txt.pooled.clone());
    let vt = g.constant(vis.tokens.clone());
    let rf = [
        g.constant(r.feats[0].clone()),
        g.constant(r.feats[1].clone()),
        g.constant(r.feats[2].clone()),
    ];
    let (eps, rec) = denoise_graph(&mut g, model, zt, t, tt, pl, vt, mask, rf, opts)?;
    Ok((g.value(eps).clone(), rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{encode_image, encode_text, Caption};
    use crate::synth::canonical_vocab;

    fn small_model(seed: u64) -> Model {
        let cfg = DenoiserConfig {
            image_size: 16,
            channels: [8, 12, 12],
            groups: 4,
            time_dim: 16,
            attn_d: 8,
            score_hidden: 8,
            encoder: EncoderConfig {
                n_t: 6,
                c_t: 8,
                c_v: 8,
                patch: 4,
            },
            ..Default::default()
        };
        Model::new(cfg, &canonical_vocab(), seed)
    }

    fn conditions(model: &Model, image: &Tensor) -> (TextCondition, VisionCondition) {
        let vocab = canonical_vocab();
        let txt = encode_text(
            &Caption::new("thick dark eyebrows", 0),
            &vocab,
            &model.params,
            &model.enc,
        )
        .unwrap();
        let vis = encode_image(image, &model.params, &model.enc).unwrap();
        (txt, vis)
    }

    fn rand_latent(rng: &mut Rng, s: usize) -> Tensor {
        Tensor::from_vec(&[3, s, s], (0..3 * s * s).map(|_| rng.normal()).collect())
    }

    #[test]
    fn output_shape_matches_input() {
        let model = small_model(1);
        let mut rng = Rng::new(2);
        let s = model.cfg.image_size;
        let z = rand_latent(&mut rng, s);
        let img = rand_latent(&mut rng, s);
        let (txt, vis) = conditions(&model, &img);
        let mask = BinaryMask::from_fn(s, s, |i, j| (4..12).contains(&i) && (4..12).contains(&j));
        let refs = ReferenceFeatures::zeros(&model.cfg);
        let (eps, rec) =
            denoise(&model, &z, 10, &txt, &vis, &mask, &refs, &DenoiseOptions::default()).unwrap();
        assert_eq!(eps.shape(), z.shape());
        assert_eq!(rec.layers.len(), 5);
        assert_eq!(rec.scores.len(), 5);
        assert_eq!(rec.t, 10);
        // zero-initialized head predicts exactly zero before training
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let model = small_model(3);
        let mut rng = Rng::new(4);
        let s = model.cfg.image_size;
        let z = rand_latent(&mut rng, s);
        let img = rand_latent(&mut rng, s);
        let (txt, vis) = conditions(&model, &img);
        let mask = BinaryMask::filled(s, s, 1);
        let refs = ReferenceFeatures::zeros(&model.cfg);
        let (_, rec) =
            denoise(&model, &z, 5, &txt, &vis, &mask, &refs, &DenoiseOptions::default()).unwrap();
        for layer in &rec.layers {
            let (r, c) = layer.a_txt.dims2();
            assert_eq!(r, layer.h * layer.w);
            for i in 0..r {
                let sum: f64 = layer.a_txt.data()[i * c..(i + 1) * c].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        for sc in &rec.scores {
            assert!(sc.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_init_reference_branch_is_inert() {
        let model = small_model(5);
        assert!(model.zero_projs_are_zero());
        let mut rng = Rng::new(6);
        let s = model.cfg.image_size;
        let z = rand_latent(&mut rng, s);
        let img = rand_latent(&mut rng, s);
        let (txt, vis) = conditions(&model, &img);
        let mask = BinaryMask::from_fn(s, s, |i, _| i < 8);
        let masked = {
            let mut m = img.clone();
            for c in 0..3 {
                for p in 0..s * s {
                    if mask.data()[p] == 1 {
                        m.data_mut()[c * s * s + p] = 0.0;
                    }
                }
            }
            m
        };
        let real = reference_forward(&model, &masked, &mask, &z, 7).unwrap();
        let zero = ReferenceFeatures::zeros(&model.cfg);
        for (a, b) in real.feats.iter().zip(&zero.feats) {
            assert_eq!(a.shape(), b.shape());
        }
        let opts = DenoiseOptions::default();
        let (e1, _) = denoise(&model, &z, 7, &txt, &vis, &mask, &real, &opts).unwrap();
        let (e2, _) = denoise(&model, &z, 7, &txt, &vis, &mask, &zero, &opts).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn reference_features_deterministic_and_finite_under_full_mask() {
        let model = small_model(7);
        let s = model.cfg.image_size;
        let mask = BinaryMask::filled(s, s, 1);
        // everything masked: neutral input image
        let neutral = Tensor::zeros(&[3, s, s]);
        let mut rng = Rng::new(8);
        let z = rand_latent(&mut rng, s);
        let a = reference_forward(&model, &neutral, &mask, &z, 3).unwrap();
        let b = reference_forward(&model, &neutral, &mask, &z, 3).unwrap();
        assert_eq!(a, b);
        for f in &a.feats {
            assert!(f.all_finite());
        }
    }

    #[test]
    fn null_conditions_give_valid_prediction() {
        let model = small_model(9);
        let mut rng = Rng::new(10);
        let s = model.cfg.image_size;
        let z = rand_latent(&mut rng, s);
        let txt = crate::conditioning::null_text(&model.params, &model.enc);
        let vis = crate::conditioning::null_vision(model.n_vision_tokens(), &model.enc);
        let mask = BinaryMask::filled(s, s, 1);
        let refs = ReferenceFeatures::zeros(&model.cfg);
        let (eps, _) =
            denoise(&model, &z, 2, &txt, &vis, &mask, &refs, &DenoiseOptions::default()).unwrap();
        assert!(eps.all_finite());
    }

    #[test]
    fn forced_score_replaces_predicted_score() {
        let model = small_model(11);
        let mut rng = Rng::new(12);
        let s = model.cfg.image_size;
        let z = rand_latent(&mut rng, s);
        let img = rand_latent(&mut rng, s);
        let (txt, vis) = conditions(&model, &img);
        let mask = BinaryMask::filled(s, s, 1);
        let refs = ReferenceFeatures::zeros(&model.cfg);
        let opts = DenoiseOptions {
            force_score: Some(0.0),
        };
        let (_, rec) = denoise(&model, &z, 5, &txt, &vis, &mask, &refs, &opts).unwrap();
        for sc in &rec.scores {
            assert!(sc.values().iter().all(|&v| v == 0.0));
        }
    }
}
