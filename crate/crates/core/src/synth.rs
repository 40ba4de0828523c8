//! Procedural "face-like" image generator with exact ground truth.
//!
//! Every sample is a skin oval with a low-frequency tone gradient and fine
//! texture noise, plus parametric attribute shapes (eyebrows, eyes, mouth,
//! optional glasses and facial hair). The seed fully determines the image,
//! its segmentation and its captions, so corpus builds are reproducible and
//! attribute-text-mask alignment is exact rather than approximate.
//!
//! Geometry is expressed in fractions of the image side so the same
//! generator covers 16x16 test grids and the 32x32 training resolution.

use crate::conditioning::Caption;
use crate::mask::SegMask;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Segmentation class ids (of the 19-slot space; the rest stay unused).
pub mod seg_class {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const BROW_LEFT: u8 = 2;
    pub const BROW_RIGHT: u8 = 3;
    pub const EYE_LEFT: u8 = 4;
    pub const EYE_RIGHT: u8 = 5;
    pub const GLASSES: u8 = 6;
    pub const NOSE: u8 = 7;
    pub const MOUTH: u8 = 8;
    pub const FACIAL_HAIR: u8 = 9;
}

/// Attribute ids used by captions, triples and the probe.
pub mod attribute {
    pub const EYEBROWS: u8 = 0;
    pub const EYES: u8 = 1;
    pub const MOUTH: u8 = 2;
    pub const GLASSES: u8 = 3;
    pub const FACIAL_HAIR: u8 = 4;
    pub const COUNT: u8 = 5;
}

/// Word each attribute's captions are guaranteed to contain.
pub fn head_word(attr: u8) -> &'static str {
    match attr {
        attribute::EYEBROWS => "brow",
        attribute::EYES => "eye",
        attribute::MOUTH => "mouth",
        attribute::GLASSES => "glasses",
        attribute::FACIAL_HAIR => "beard",
        _ => panic!("unknown attribute {attr}"),
    }
}

/// Segmentation classes making up one attribute region.
pub fn attr_classes(attr: u8) -> &'static [u8] {
    match attr {
        attribute::EYEBROWS => &[seg_class::BROW_LEFT, seg_class::BROW_RIGHT],
        attribute::EYES => &[seg_class::EYE_LEFT, seg_class::EYE_RIGHT],
        attribute::MOUTH => &[seg_class::MOUTH],
        attribute::GLASSES => &[seg_class::GLASSES],
        attribute::FACIAL_HAIR => &[seg_class::FACIAL_HAIR],
        _ => panic!("unknown attribute {attr}"),
    }
}

const VOCAB_WORDS: &[&str] = &[
    "<pad>", "<unk>", "a", "an", "the", "pair", "of", "thick", "medium", "thin", "dark", "light",
    "eyebrows", "brow", "bold", "expressive", "soft", "even", "faint", "delicate", "round",
    "narrow", "eyes", "wide", "curious", "sleepy", "smiling", "neutral", "frowning", "mouth",
    "cheerful", "calm", "gloomy", "glasses", "square", "beard", "dense", "face", "with", "on",
];

/// The closed vocabulary covering the whole template grammar.
pub fn canonical_vocab() -> crate::conditioning::Vocab {
    crate::conditioning::Vocab::new(VOCAB_WORDS.iter().map(|s| String::from(*s)).collect())
        .expect("canonical vocab is well-formed")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinParams {
    pub base_rgb: [f64; 3],
    /// Unit-ish direction of the tone gradient across the face.
    pub grad_dir: (f64, f64),
    pub grad_amp: f64,
    pub noise_amp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EyebrowParams {
    /// 0 = thin, 1 = medium, 2 = thick.
    pub thickness_bucket: u8,
    pub dark: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EyeParams {
    pub round: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MouthParams {
    /// -1 frowning, 0 neutral, 1 smiling.
    pub curvature: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlassesParams {
    pub on: bool,
    pub square: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FacialHairParams {
    /// 0 = none, 1 = light, 2 = dense.
    pub density_bucket: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFaceSpec {
    pub seed: u64,
    pub size: usize,
    pub skin: SkinParams,
    pub eyebrows: EyebrowParams,
    pub eyes: EyeParams,
    pub mouth: MouthParams,
    pub glasses: GlassesParams,
    pub facial_hair: FacialHairParams,
}

impl SyntheticFaceSpec {
    /// Draw a random face specification; the seed alone determines it.
    pub fn sample(seed: u64, size: usize) -> SyntheticFaceSpec {
        let mut rng = Rng::new(seed).fork(0xFACE);
        let r = rng.uniform_in(0.25, 0.55);
        SyntheticFaceSpec {
            seed,
            size,
            skin: SkinParams {
                base_rgb: [
                    r,
                    r - 0.25 + rng.uniform_in(-0.05, 0.05),
                    r - 0.5 + rng.uniform_in(-0.05, 0.05),
                ],
                grad_dir: {
                    let a = rng.uniform_in(0.0, 2.0 * crate::math::PI);
                    (crate::math::sin(a), crate::math::cos(a))
                },
                grad_amp: rng.uniform_in(0.05, 0.15),
                noise_amp: rng.uniform_in(0.01, 0.04),
            },
            eyebrows: EyebrowParams {
                thickness_bucket: rng.below(3) as u8,
                dark: rng.bernoulli(0.5),
            },
            eyes: EyeParams {
                round: rng.bernoulli(0.5),
            },
            mouth: MouthParams {
                curvature: rng.below(3) as i8 - 1,
            },
            glasses: GlassesParams {
                on: rng.bernoulli(0.35),
                square: rng.bernoulli(0.5),
            },
            facial_hair: FacialHairParams {
                density_bucket: if rng.bernoulli(0.45) {
                    1 + rng.below(2) as u8
                } else {
                    0
                },
            },
        }
    }
}

/// Analytic shape placement derived from the spec; the rasterizer and the
/// test oracles both read from this.
#[derive(Debug, Clone, Copy)]
pub struct FaceGeometry {
    pub cy: f64,
    pub cx: f64,
    pub face_ry: f64,
    pub face_rx: f64,
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub brow_y: f64,
    pub brow_half_w: f64,
    pub brow_half_t: f64,
    pub brow_arch: f64,
    pub nose_top: f64,
    pub nose_bot: f64,
    pub nose_half_w: f64,
    pub mouth_y: f64,
    pub mouth_half_w: f64,
    pub mouth_half_t: f64,
    pub mouth_bend: f64,
    pub lens_r: f64,
    pub beard_top: f64,
}

pub fn geometry(spec: &SyntheticFaceSpec) -> FaceGeometry {
    let s = spec.size as f64;
    let mut rng = Rng::new(spec.seed).fork(0x6E0);
    let cy = 0.53 * s + rng.uniform_in(-0.02, 0.02) * s;
    let cx = 0.50 * s + rng.uniform_in(-0.02, 0.02) * s;
    // half-thickness of at least half a pixel guarantees every brow column
    // rasterizes at 32x32
    let thick = match spec.eyebrows.thickness_bucket {
        0 => 0.020,
        1 => 0.048,
        _ => 0.082,
    };
    FaceGeometry {
        cy,
        cx,
        face_ry: (0.36 + rng.uniform_in(-0.02, 0.02)) * s,
        face_rx: (0.30 + rng.uniform_in(-0.02, 0.02)) * s,
        eye_y: cy - 0.12 * s,
        eye_dx: 0.14 * s,
        eye_rx: 0.055 * s * if spec.eyes.round { 1.0 } else { 1.2 },
        eye_ry: if spec.eyes.round { 0.050 } else { 0.026 } * s,
        brow_y: cy - 0.23 * s,
        brow_half_w: 0.085 * s,
        brow_half_t: thick * s,
        brow_arch: 0.03 * s,
        nose_top: cy - 0.05 * s,
        nose_bot: cy + 0.10 * s,
        nose_half_w: 0.018 * s,
        mouth_y: cy + 0.20 * s,
        mouth_half_w: 0.11 * s,
        mouth_half_t: 0.022 * s,
        mouth_bend: spec.mouth.curvature as f64 * 0.055 * s,
        lens_r: 0.095 * s,
        beard_top: cy + 0.27 * s,
    }
}

fn in_ellipse(i: f64, j: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let dy = (i - cy) / ry;
    let dx = (j - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

fn in_brow(g: &FaceGeometry, i: f64, j: f64, side: f64) -> bool {
    let bx = g.cx + side * g.eye_dx;
    let dx = j - bx;
    if dx.abs() > g.brow_half_w {
        return false;
    }
    let u = dx / g.brow_half_w;
    let center = g.brow_y + g.brow_arch * u * u;
    (i - center).abs() <= g.brow_half_t
}

fn in_mouth(g: &FaceGeometry, i: f64, j: f64) -> bool {
    let dx = j - g.cx;
    if dx.abs() > g.mouth_half_w {
        return false;
    }
    let u = dx / g.mouth_half_w;
    let center = g.mouth_y + g.mouth_bend * (u * u - 0.5);
    (i - center).abs() <= g.mouth_half_t
}

fn in_nose(g: &FaceGeometry, i: f64, j: f64) -> bool {
    i >= g.nose_top && i <= g.nose_bot && (j - g.cx).abs() <= g.nose_half_w
}

/// Frame ring of one lens (round or square), width ~1px.
fn in_lens_frame(g: &FaceGeometry, square: bool, i: f64, j: f64, side: f64) -> bool {
    let cx = g.cx + side * g.eye_dx;
    let r = g.lens_r;
    if square {
        let (di, dj) = ((i - g.eye_y).abs(), (j - cx).abs());
        let inside = di <= r && dj <= r;
        let core = di <= r - 1.0 && dj <= r - 1.0;
        inside && !core
    } else {
        let d = crate::math::hypot(i - g.eye_y, j - cx);
        d <= r && d >= r - 1.0
    }
}

fn in_bridge(g: &FaceGeometry, i: f64, j: f64) -> bool {
    (i - g.eye_y).abs() <= 0.6
        && j > g.cx - g.eye_dx + g.lens_r
        && j < g.cx + g.eye_dx - g.lens_r
}

/// Deterministic output of one sample: image in [-1, 1], segmentation and
/// one caption per present attribute.
pub fn generate_face(spec: &SyntheticFaceSpec) -> (Tensor, SegMask, Vec<(u8, Caption)>) {
    let s = spec.size;
    let g = geometry(spec);
    let mut img = Tensor::zeros(&[3, s, s]);
    let mut seg = SegMask::filled(s, s, seg_class::BACKGROUND);

    let mut noise_rng = Rng::new(spec.seed).fork(0x7E47);
    let mut beard_rng = Rng::new(spec.seed).fork(0xBEA2D);
    let mut bg_rng = Rng::new(spec.seed).fork(0xB6);
    let bg_tint = [
        -0.65 + bg_rng.uniform_in(-0.05, 0.05),
        -0.62 + bg_rng.uniform_in(-0.05, 0.05),
        -0.58 + bg_rng.uniform_in(-0.05, 0.05),
    ];

    // both brow tones sit well below every skin tone so thickness stays
    // readable at 32x32; light vs dark remains a clear 0.4 gap
    let brow_rgb = if spec.eyebrows.dark {
        [-0.78, -0.80, -0.80]
    } else {
        [-0.38, -0.48, -0.55]
    };
    let eye_rgb = [-0.80, -0.80, -0.75];
    let nose_shade = -0.12;
    let mouth_rgb = [0.35, -0.40, -0.35];
    let glass_rgb = [-0.85, -0.85, -0.82];
    let beard_rgb = [-0.50, -0.55, -0.55];

    let put = |img: &mut Tensor, seg: &mut SegMask, i: usize, j: usize, rgb: [f64; 3], class: u8| {
        for c in 0..3 {
            img.data_mut()[c * s * s + i * s + j] = rgb[c].clamp(-1.0, 1.0);
        }
        seg.set(i, j, class);
    };

    for i in 0..s {
        for j in 0..s {
            let (fi, fj) = (i as f64, j as f64);
            // background with a mild vertical ramp
            let mut rgb = [
                bg_tint[0] + 0.06 * fi / s as f64,
                bg_tint[1] + 0.06 * fi / s as f64,
                bg_tint[2] + 0.06 * fi / s as f64,
            ];
            let mut class = seg_class::BACKGROUND;

            if in_ellipse(fi, fj, g.cy, g.cx, g.face_ry, g.face_rx) {
                let t = ((fi - g.cy) / g.face_ry * spec.skin.grad_dir.0
                    + (fj - g.cx) / g.face_rx * spec.skin.grad_dir.1)
                    * spec.skin.grad_amp;
                let n = noise_rng.uniform_in(-1.0, 1.0) * spec.skin.noise_amp;
                rgb = [
                    spec.skin.base_rgb[0] + t + n,
                    spec.skin.base_rgb[1] + t + n,
                    spec.skin.base_rgb[2] + t + n,
                ];
                class = seg_class::SKIN;

                if in_nose(&g, fi, fj) {
                    rgb = [rgb[0] + nose_shade, rgb[1] + nose_shade, rgb[2] + nose_shade];
                    class = seg_class::NOSE;
                }
                if in_mouth(&g, fi, fj) {
                    rgb = mouth_rgb;
                    class = seg_class::MOUTH;
                }
                if spec.facial_hair.density_bucket > 0 && fi >= g.beard_top {
                    let density = if spec.facial_hair.density_bucket == 1 {
                        0.30
                    } else {
                        0.65
                    };
                    // stipple consumes one draw per candidate pixel to stay
                    // independent of the density value
                    if beard_rng.uniform() < density {
                        rgb = beard_rgb;
                        class = seg_class::FACIAL_HAIR;
                    }
                }
            } else {
                // keep the stipple stream aligned regardless of geometry
            }

            if in_brow(&g, fi, fj, -1.0) {
                rgb = brow_rgb;
                class = seg_class::BROW_LEFT;
            } else if in_brow(&g, fi, fj, 1.0) {
                rgb = brow_rgb;
                class = seg_class::BROW_RIGHT;
            }
            if in_ellipse(fi, fj, g.eye_y, g.cx - g.eye_dx, g.eye_ry, g.eye_rx) {
                rgb = eye_rgb;
                class = seg_class::EYE_LEFT;
            } else if in_ellipse(fi, fj, g.eye_y, g.cx + g.eye_dx, g.eye_ry, g.eye_rx) {
                rgb = eye_rgb;
                class = seg_class::EYE_RIGHT;
            }
            if spec.glasses.on
                && (in_lens_frame(&g, spec.glasses.square, fi, fj, -1.0)
                    || in_lens_frame(&g, spec.glasses.square, fi, fj, 1.0)
                    || in_bridge(&g, fi, fj))
            {
                rgb = glass_rgb;
                class = seg_class::GLASSES;
            }

            put(&mut img, &mut seg, i, j, rgb, class);
        }
    }

    let captions = captions_for(spec);
    (img, seg, captions)
}

/// Direct-form eyebrow caption for a thickness bucket, used by edit prompts.
pub fn eyebrow_caption_direct(bucket: u8, dark: bool) -> String {
    let t = ["thin", "medium", "thick"][bucket as usize % 3];
    let d = if dark { "dark" } else { "light" };
    format!("{t} {d} eyebrows")
}

fn captions_for(spec: &SyntheticFaceSpec) -> Vec<(u8, Caption)> {
    let mut rng = Rng::new(spec.seed).fork(0xCAB);
    let mut out = Vec::new();
    let indirect = |rng: &mut Rng| rng.bernoulli(0.3);

    let eb = &spec.eyebrows;
    let text = if indirect(&mut rng) {
        match eb.thickness_bucket {
            0 => "a faint delicate brow",
            1 => "a soft even brow",
            _ => "a bold expressive brow",
        }
        .into()
    } else {
        eyebrow_caption_direct(eb.thickness_bucket, eb.dark)
    };
    out.push((attribute::EYEBROWS, Caption::new(text, attribute::EYEBROWS)));

    let text: String = if indirect(&mut rng) {
        if spec.eyes.round {
            "wide curious eyes".into()
        } else {
            "soft sleepy eyes".into()
        }
    } else if spec.eyes.round {
        "round eyes".into()
    } else {
        "narrow eyes".into()
    };
    out.push((attribute::EYES, Caption::new(text, attribute::EYES)));

    let text: String = if indirect(&mut rng) {
        match spec.mouth.curvature {
            1 => "a cheerful mouth".into(),
            0 => "a calm mouth".into(),
            _ => "a gloomy mouth".into(),
        }
    } else {
        match spec.mouth.curvature {
            1 => "a smiling mouth".into(),
            0 => "a neutral mouth".into(),
            _ => "a frowning mouth".into(),
        }
    };
    out.push((attribute::MOUTH, Caption::new(text, attribute::MOUTH)));

    if spec.glasses.on {
        let shape = if spec.glasses.square { "square" } else { "round" };
        let text = if indirect(&mut rng) {
            format!("a pair of {shape} glasses")
        } else {
            format!("{shape} glasses")
        };
        out.push((attribute::GLASSES, Caption::new(text, attribute::GLASSES)));
    }
    if spec.facial_hair.density_bucket > 0 {
        let d = if spec.facial_hair.density_bucket == 1 {
            "light"
        } else {
            "dense"
        };
        let text = if indirect(&mut rng) {
            format!("a {d} beard on the face")
        } else {
            format!("a {d} beard")
        };
        out.push((
            attribute::FACIAL_HAIR,
            Caption::new(text, attribute::FACIAL_HAIR),
        ));
    }
    out
}
