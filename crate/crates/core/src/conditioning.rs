//! Toy trainable text and vision encoders producing the condition tokens
//! the denoiser cross-attends over.
//!
//! Text: a learned embedding table over a closed vocabulary plus one
//! channel-mixing linear layer; captions are padded to a fixed token count
//! and the pooled vector is the mean of the non-padding rows. Vision:
//! non-overlapping square patches linearly projected to token width.
//!
//! Dropped (null) conditions: text swaps in a learned null token, vision
//! swaps in all-zero tokens so its attention values vanish exactly.

use crate::error::{bail_param, bail_shape, CoreError, Result};
use crate::graph::{Graph, ParamSet, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::string::String;
use alloc::vec::Vec;

pub const PAD_TOKEN: usize = 0;
pub const UNK_TOKEN: usize = 1;

/// Closed vocabulary, one token per line in the external file format;
/// line index = token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[PAD_TOKEN] != "<pad>" || tokens[UNK_TOKEN] != "<unk>" {
            bail_param!("vocab must start with <pad>, <unk>");
        }
        Ok(Vocab { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.tokens
            .iter()
            .position(|t| t == word)
            .unwrap_or(UNK_TOKEN)
    }

    /// Lowercase, strip punctuation, split on whitespace; unknown words map
    /// to the reserved token.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                for lc in ch.to_lowercase() {
                    word.push(lc);
                }
            } else if !word.is_empty() {
                ids.push(self.id_of(&word));
                word.clear();
            }
        }
        if !word.is_empty() {
            ids.push(self.id_of(&word));
        }
        ids
    }
}

/// A caption drawn from the template grammar, tagged with the attribute it
/// describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    pub attribute_id: u8,
}

impl Caption {
    pub fn new(text: impl Into<String>, attribute_id: u8) -> Caption {
        Caption {
            text: text.into(),
            attribute_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Fixed text token count; shorter captions are padded.
    pub n_t: usize,
    pub c_t: usize,
    pub c_v: usize,
    /// Patch side for the vision tokenizer.
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_t: 12,
            c_t: 32,
            c_v: 32,
            patch: 8,
        }
    }
}

/// Parameter slots of both encoders inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed: usize,
    pub mix_w: usize,
    pub mix_b: usize,
    pub null_token: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub cfg: EncoderConfig,
    pub vocab_len: usize,
}

impl EncoderParams {
    pub fn alloc(
        params: &mut ParamSet,
        vocab: &Vocab,
        cfg: EncoderConfig,
        rng: &mut Rng,
    ) -> EncoderParams {
        let v = vocab.len();
        let embed = params.alloc(
            "cond.text.embed",
            Tensor::from_vec(
                &[v, cfg.c_t],
                (0..v * cfg.c_t).map(|_| rng.normal() * 0.05).collect(),
            ),
        );
        let sc = 1.0 / crate::math::sqrt(cfg.c_t as f64);
        let mix_w = params.alloc(
            "cond.text.mix_w",
            Tensor::from_vec(
                &[cfg.c_t, cfg.c_t],
                (0..cfg.c_t * cfg.c_t).map(|_| rng.normal() * sc).collect(),
            ),
        );
        let mix_b = params.alloc("cond.text.mix_b", Tensor::zeros(&[cfg.c_t]));
        let null_token = params.alloc(
            "cond.text.null",
            Tensor::from_vec(&[cfg.c_t], (0..cfg.c_t).map(|_| rng.normal() * 0.05).collect()),
        );
        let pdim = cfg.patch * cfg.patch * 3;
        let sp = 1.0 / crate::math::sqrt(pdim as f64);
        let patch_w = params.alloc(
            "cond.vis.patch_w",
            Tensor::from_vec(
                &[pdim, cfg.c_v],
                (0..pdim * cfg.c_v).map(|_| rng.normal() * sp).collect(),
            ),
        );
        let patch_b = params.alloc("cond.vis.patch_b", Tensor::zeros(&[cfg.c_v]));
        EncoderParams {
            embed,
            mix_w,
            mix_b,
            null_token,
            patch_w,
            patch_b,
            cfg,
            vocab_len: v,
        }
    }
}

/// Text condition tokens. `n_real` counts the non-padding rows feeding the
/// pooled mean; `is_null` marks a dropped condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub tokens: Tensor,
    pub pooled: Tensor,
    pub n_real: usize,
    pub is_null: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionCondition {
    pub tokens: Tensor,
    pub is_null: bool,
}

/// Pad-checked token ids for one caption, fixed length `n_t`.
pub fn caption_ids(vocab: &Vocab, text: &str, n_t: usize) -> Result<(Vec<usize>, usize)> {
    let mut ids = vocab.tokenize(text);
    if ids.len() > n_t {
        return Err(CoreError::Precondition(alloc::format!(
            "caption tokenizes to {} tokens, limit {n_t}",
            ids.len()
        )));
    }
    let n_real = ids.len();
    ids.resize(n_t, PAD_TOKEN);
    Ok((ids, n_real))
}

/// Graph-side text encoder: embedding lookup, channel mixing, pooled mean
/// over real rows. An empty caption yields the learned null token broadcast
/// over all rows.
pub fn text_forward(g: &mut Graph, ep: &EncoderParams, ids: &[usize], n_real: usize) -> (Var, Var) {
    let n_t = ep.cfg.n_t;
    debug_assert_eq!(ids.len(), n_t);
    if n_real == 0 {
        let null = g.param(ep.null_token);
        let tokens = g.broadcast_row(null, n_t);
        return (tokens, null);
    }
    let table = g.param(ep.embed);
    let e = g.embed(table, ids.to_vec());
    let mix_w = g.param(ep.mix_w);
    let mix_b = g.param(ep.mix_b);
    let mixed = g.matmul(e, mix_w);
    let tokens = g.add_row_bias(mixed, mix_b);
    let pooled = g.mean_rows_subset(tokens, (0..n_real).collect());
    (tokens, pooled)
}

/// Graph-side null text condition (the classifier-free unconditional case).
pub fn text_null_forward(g: &mut Graph, ep: &EncoderParams) -> (Var, Var) {
    let null = g.param(ep.null_token);
    let tokens = g.broadcast_row(null, ep.cfg.n_t);
    (tokens, null)
}

/// Graph-side vision encoder over a constant image: raster-order square
/// patches, linear projection.
pub fn vision_forward(g: &mut Graph, ep: &EncoderParams, image: &Tensor) -> Result<Var> {
    let patches = extract_patches(image, ep.cfg.patch)?;
    let pc = g.constant(patches);
    let w = g.param(ep.patch_w);
    let b = g.param(ep.patch_b);
    let proj = g.matmul(pc, w);
    Ok(g.add_row_bias(proj, b))
}

/// Raster-order non-overlapping patches as a [n_v, P*P*C] matrix.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3();
    if h % patch != 0 || w % patch != 0 {
        bail_shape!("image {h}x{w} not divisible by patch {patch}");
    }
    let (ph, pw) = (h / patch, w / patch);
    let pdim = patch * patch * c;
    let mut out = Tensor::zeros(&[ph * pw, pdim]);
    for pi in 0..ph {
        for pj in 0..pw {
            let row = pi * pw + pj;
            let mut col = 0;
            for ch in 0..c {
                for di in 0..patch {
                    for dj in 0..patch {
                        out.data_mut()[row * pdim + col] =
                            image.data()[ch * h * w + (pi * patch + di) * w + (pj * patch + dj)];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Standalone text encoder matching the graph path bit for bit.
pub fn encode_text(
    caption: &Caption,
    vocab: &Vocab,
    params: &ParamSet,
    ep: &EncoderParams,
) -> Result<TextCondition> {
    let (ids, n_real) = caption_ids(vocab, &caption.text, ep.cfg.n_t)?;
    let mut g = Graph::new(params.tensors());
    let (tokens, pooled) = text_forward(&mut g, ep, &ids, n_real);
    Ok(TextCondition {
        tokens: g.value(tokens).clone(),
        pooled: g.value(pooled).clone(),
        n_real: if n_real == 0 { ep.cfg.n_t } else { n_real },
        is_null: false,
    })
}

/// Standalone vision encoder matching the graph path bit for bit.
pub fn encode_image(image: &Tensor, params: &ParamSet, ep: &EncoderParams) -> Result<VisionCondition> {
    let mut g = Graph::new(params.tensors());
    let tokens = vision_forward(&mut g, ep, image)?;
    Ok(VisionCondition {
        tokens: g.value(tokens).clone(),
        is_null: false,
    })
}

pub fn null_text(params: &ParamSet, ep: &EncoderParams) -> TextCondition {
    let mut g = Graph::new(params.tensors());
    let (tokens, pooled) = text_null_forward(&mut g, ep);
    TextCondition {
        tokens: g.value(tokens).clone(),
        pooled: g.value(pooled).clone(),
        n_real: ep.cfg.n_t,
        is_null: true,
    }
}

pub fn null_vision(n_v: usize, ep: &EncoderParams) -> VisionCondition {
    VisionCondition {
        tokens: Tensor::zeros(&[n_v, ep.cfg.c_v]),
        is_null: true,
    }
}

/// Every row becomes the pooled vector; aligns the pooled text token with
/// the spatial positions of the latent.
pub fn broadcast_pooled(cond: &TextCondition, n_z: usize) -> Tensor {
    let c = cond.pooled.numel();
    let mut out = Tensor::zeros(&[n_z, c]);
    for i in 0..n_z {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(cond.pooled.data());
    }
    out
}

/// Independently replace each condition by its null form with probability p.
/// Already-null conditions stay unchanged.
pub fn drop_conditions(
    text: TextCondition,
    vision: VisionCondition,
    p: f64,
    rng: &mut Rng,
    params: &ParamSet,
    ep: &EncoderParams,
) -> (TextCondition, VisionCondition) {
    let n_v = vision.tokens.dims2().0;
    let drop_t = rng.bernoulli(p);
    let drop_v = rng.bernoulli(p);
    let text = if drop_t && !text.is_null {
        null_text(params, ep)
    } else {
        text
    };
    let vision = if drop_v && !vision.is_null {
        null_vision(n_v, ep)
    } else {
        vision
    };
    (text, vision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn setup() -> (Vocab, ParamSet, EncoderParams) {
        let vocab = synth::canonical_vocab();
        let mut params = ParamSet::new();
        let ep = EncoderParams::alloc(&mut params, &vocab, EncoderConfig::default(), &mut Rng::new(7));
        (vocab, params, ep)
    }

    #[test]
    fn tokenizer_maps_unknown_to_unk() {
        let (vocab, _, _) = setup();
        let ids = vocab.tokenize("thick zorp eyebrows");
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[1], UNK_TOKEN);
        assert_ne!(ids[0], UNK_TOKEN);
        assert_ne!(ids[2], UNK_TOKEN);
    }

    #[test]
    fn encode_text_deterministic() {
        let (vocab, params, ep) = setup();
        let c = Caption::new("thick dark eyebrows", 0);
        let a = encode_text(&c, &vocab, &params, &ep).unwrap();
        let b = encode_text(&c, &vocab, &params, &ep).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_of_one_token_caption_is_that_row() {
        let (vocab, params, ep) = setup();
        let c = Caption::new("eyebrows", 0);
        let t = encode_text(&c, &vocab, &params, &ep).unwrap();
        assert_eq!(t.n_real, 1);
        let row = &t.tokens.data()[..ep.cfg.c_t];
        assert_eq!(t.pooled.data(), row);
    }

    #[test]
    fn captions_differing_in_one_word_differ_at_that_row() {
        let (vocab, params, ep) = setup();
        let a = encode_text(&Caption::new("thick dark eyebrows", 0), &vocab, &params, &ep).unwrap();
        let b = encode_text(&Caption::new("thin dark eyebrows", 0), &vocab, &params, &ep).unwrap();
        let c_t = ep.cfg.c_t;
        // embedding-table lookup oracle: the mixed rows must differ exactly
        // where the underlying ids differ
        let ids_a = vocab.tokenize("thick dark eyebrows");
        let ids_b = vocab.tokenize("thin dark eyebrows");
        for k in 0..3 {
            let ra = &a.tokens.data()[k * c_t..(k + 1) * c_t];
            let rb = &b.tokens.data()[k * c_t..(k + 1) * c_t];
            if ids_a[k] != ids_b[k] {
                assert!(ra != rb, "row {k} should differ");
            } else {
                assert_eq!(ra, rb, "row {k} should match");
            }
        }
    }

    #[test]
    fn empty_caption_yields_null_embedding_not_flagged() {
        let (vocab, params, ep) = setup();
        let t = encode_text(&Caption::new("", 0), &vocab, &params, &ep).unwrap();
        assert!(!t.is_null);
        let null = params.get(ep.null_token);
        assert_eq!(t.pooled.data(), null.data());
        for k in 0..ep.cfg.n_t {
            assert_eq!(
                &t.tokens.data()[k * ep.cfg.c_t..(k + 1) * ep.cfg.c_t],
                null.data()
            );
        }
    }

    #[test]
    fn over_long_caption_rejected() {
        let (vocab, params, ep) = setup();
        let long = "thick dark eyebrows and a smiling mouth and round glasses and a dense beard";
        assert!(encode_text(&Caption::new(long, 0), &vocab, &params, &ep).is_err());
    }

    #[test]
    fn patch_count_and_constant_image() {
        let (_, params, ep) = setup();
        let img = Tensor::filled(&[3, 32, 32], 0.25);
        let v = encode_image(&img, &params, &ep).unwrap();
        let (n_v, c_v) = v.tokens.dims2();
        assert_eq!((n_v, c_v), (16, ep.cfg.c_v));
        let first = v.tokens.data()[..c_v].to_vec();
        for k in 1..n_v {
            assert_eq!(&v.tokens.data()[k * c_v..(k + 1) * c_v], &first[..]);
        }
        let odd = Tensor::zeros(&[3, 30, 32]);
        assert!(matches!(
            encode_image(&odd, &params, &ep),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn patch_tokens_match_double_loop_oracle() {
        let (_, params, ep) = setup();
        let mut rng = Rng::new(31);
        let img = Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.normal()).collect());
        let v = encode_image(&img, &params, &ep).unwrap();
        let w = params.get(ep.patch_w);
        let b = params.get(ep.patch_b);
        let p = ep.cfg.patch;
        // naive per-patch projection oracle
        for pi in 0..2 {
            for pj in 0..2 {
                let k = pi * 2 + pj;
                for o in 0..ep.cfg.c_v {
                    let mut s = b.data()[o];
                    let mut col = 0;
                    for ch in 0..3 {
                        for di in 0..p {
                            for dj in 0..p {
                                s += img.data()[ch * 256 + (pi * p + di) * 16 + (pj * p + dj)]
                                    * w.data()[col * ep.cfg.c_v + o];
                                col += 1;
                            }
                        }
                    }
                    let got = v.tokens.data()[k * ep.cfg.c_v + o];
                    assert!((got - s).abs() < 1e-10, "patch {k} ch {o}");
                }
            }
        }
    }

    #[test]
    fn broadcast_pooled_rows() {
        let (vocab, params, ep) = setup();
        let t = encode_text(&Caption::new("round glasses", 3), &vocab, &params, &ep).unwrap();
        for n_z in [1usize, 4, 4096] {
            let b = broadcast_pooled(&t, n_z);
            assert_eq!(b.dims2(), (n_z, ep.cfg.c_t));
            for i in 0..n_z {
                assert_eq!(
                    &b.data()[i * ep.cfg.c_t..(i + 1) * ep.cfg.c_t],
                    t.pooled.data()
                );
            }
        }
    }

    #[test]
    fn drop_conditions_endpoints_and_idempotence() {
        let (vocab, params, ep) = setup();
        let t = encode_text(&Caption::new("narrow sleepy eyes", 1), &vocab, &params, &ep).unwrap();
        let img = Tensor::filled(&[3, 32, 32], 0.1);
        let v = encode_image(&img, &params, &ep).unwrap();

        let mut rng = Rng::new(1);
        let (t0, v0) = drop_conditions(t.clone(), v.clone(), 0.0, &mut rng, &params, &ep);
        assert_eq!(t0, t);
        assert_eq!(v0, v);

        let (t1, v1) = drop_conditions(t.clone(), v.clone(), 1.0, &mut rng, &params, &ep);
        assert!(t1.is_null && v1.is_null);
        assert!(v1.tokens.data().iter().all(|&x| x == 0.0));

        // dropping an already-dropped condition returns it unchanged
        let (t2, v2) = drop_conditions(t1.clone(), v1.clone(), 1.0, &mut rng, &params, &ep);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn drop_rate_statistics() {
        let (vocab, params, ep) = setup();
        let t = encode_text(&Caption::new("a dense beard", 4), &vocab, &params, &ep).unwrap();
        let v = VisionCondition {
            tokens: Tensor::filled(&[16, ep.cfg.c_v], 0.3),
            is_null: false,
        };
        let mut rng = Rng::new(99);
        let trials = 100_000;
        let (mut dt, mut dv) = (0usize, 0usize);
        for _ in 0..trials {
            let (tt, vv) = drop_conditions(t.clone(), v.clone(), 0.05, &mut rng, &params, &ep);
            dt += tt.is_null as usize;
            dv += vv.is_null as usize;
        }
        let tol = 3.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
        for d in [dt, dv] {
            let freq = d as f64 / trials as f64;
            assert!((freq - 0.05).abs() <= tol, "freq {freq} tol {tol}");
        }
    }
}
