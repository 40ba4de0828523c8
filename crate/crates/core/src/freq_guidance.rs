//! Frequency-domain sampling guidance for boundary regions.
//!
//! The text cross-attention maps of all layers are averaged into one grid;
//! mask pixels whose mean attention falls at or below (mean - std) of the
//! masked values form the boundary set — the part of the mask the prompt
//! barely drives. The predicted clean latent and the original image are
//! low-passed in the Fourier domain and the squared distance over the
//! boundary set steers the predicted noise.
//!
//! The low-pass window has two modes. `Centered` keeps a block centered on
//! the DC bin of the shifted spectrum. `Literal` keeps an off-center block
//! between the half and three-quarter lines of each axis; it excludes DC
//! and is not conjugate-symmetric, so filtering a real image through it
//! produces complex output and fails the residue check. Both are kept so
//! the discrepancy stays visible; `Centered` uses a window of identical
//! area.

use crate::diffusion::NoiseSchedule;
use crate::error::{bail_mask, bail_param, bail_shape, CoreError, Result};
use crate::fft::{check_pow2_dims, fft2, fftshift, ifft2, Spectrum};
use crate::mask::BinaryMask;
use crate::math;
use crate::tensor::Tensor;
use alloc::vec;
use alloc::vec::Vec;

/// Text attention of one layer: row-stochastic [n_z, n_tokens] with its
/// spatial layout (h * w = n_z).
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub a_txt: Tensor,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowMode {
    #[default]
    Centered,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StatsMode {
    /// Mean/std over the masked elements only.
    #[default]
    Masked,
    /// Sums divided by the full pixel count.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Guidance strength.
    pub lambda: f64,
    pub window: WindowMode,
    pub stats: StatsMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda: 1.0,
            window: WindowMode::Centered,
            stats: StatsMode::Masked,
        }
    }
}

/// Boundary pixels inside the mask, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryIndexSet {
    pub idx: Vec<(usize, usize)>,
    pub h: usize,
    pub w: usize,
}

impl BoundaryIndexSet {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Binary characteristic window on the FFT-shifted grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FourierMask {
    window: Vec<u8>,
    h: usize,
    w: usize,
    pub mode: WindowMode,
}

impl FourierMask {
    pub fn new(mode: WindowMode, h: usize, w: usize) -> Result<FourierMask> {
        check_pow2_dims(h, w)?;
        let keep = |n: usize, i: usize| -> bool {
            let (lo, hi) = match mode {
                // strict bounds between the half and three-quarter lines
                WindowMode::Literal => (n / 2, 3 * n / 4),
                // same open-interval width, centered on the DC bin
                WindowMode::Centered => (3 * n / 8, 5 * n / 8),
            };
            i > lo && i < hi
        };
        let mut window = vec![0u8; h * w];
        for i in 0..h {
            for j in 0..w {
                if keep(h, i) && keep(w, j) {
                    window[i * w + j] = 1;
                }
            }
        }
        if window.iter().all(|&v| v == 0) {
            bail_param!("fourier window empty for {h}x{w} in {mode:?} mode");
        }
        Ok(FourierMask { window, h, w, mode })
    }

    /// All-pass window, useful for identity checks.
    pub fn all_ones(h: usize, w: usize) -> Result<FourierMask> {
        check_pow2_dims(h, w)?;
        Ok(FourierMask {
            window: vec![1u8; h * w],
            h,
            w,
            mode: WindowMode::Centered,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn window(&self) -> &[u8] {
        &self.window
    }

    /// Whether the DC bin (h/2, w/2 on the shifted grid) is kept.
    pub fn contains_dc(&self) -> bool {
        self.window[(self.h / 2) * self.w + self.w / 2] == 1
    }
}

/// Bilinear resampling of an [h, w] grid to [th, tw]. The nested-lerp form
/// reproduces constant grids bit for bit.
pub fn bilinear_resize(map: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    #[inline]
    fn lerp(a: f64, b: f64, t: f64) -> f64 {
        a + t * (b - a)
    }
    let mut out = vec![0.0; th * tw];
    for i in 0..th {
        let sy = ((i as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..tw {
            let sx = ((j as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = lerp(map[y0 * w + x0], map[y0 * w + x1], fx);
            let bot = lerp(map[y1 * w + x0], map[y1 * w + x1], fx);
            out[i * tw + j] = lerp(top, bot, fy);
        }
    }
    out
}

/// Mean over all layers and all text tokens of the per-token attention
/// grids, each bilinearly upsampled to the target resolution first.
pub fn mean_text_attention(layers: &[LayerAttention], th: usize, tw: usize) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(CoreError::Precondition(alloc::string::String::from(
            "mean_text_attention over empty record",
        )));
    }
    let mut acc = vec![0.0; th * tw];
    let mut count = 0usize;
    for layer in layers {
        let (n_z, n_tok) = layer.a_txt.dims2();
        if n_z != layer.h * layer.w {
            bail_shape!("attention rows {n_z} vs {}x{}", layer.h, layer.w);
        }
        let mut grid = vec![0.0; n_z];
        for tok in 0..n_tok {
            for p in 0..n_z {
                grid[p] = layer.a_txt.data()[p * n_tok + tok];
            }
            let up = if (layer.h, layer.w) == (th, tw) {
                grid.clone()
            } else {
                bilinear_resize(&grid, layer.h, layer.w, th, tw)
            };
            for (a, u) in acc.iter_mut().zip(&up) {
                *a += u;
            }
            count += 1;
        }
    }
    let inv = 1.0 / count as f64;
    Ok(Tensor::from_vec(&[th, tw], acc.iter().map(|v| v * inv).collect()))
}

/// Masked pixels whose mean attention is at or below (mean - std) of the
/// masked attention values.
pub fn boundary_indices(
    a_bar: &Tensor,
    m: &BinaryMask,
    stats: StatsMode,
) -> Result<BoundaryIndexSet> {
    let (h, w) = a_bar.dims2();
    if (m.height(), m.width()) != (h, w) {
        bail_shape!("mask {}x{} vs map {h}x{w}", m.height(), m.width());
    }
    let total = m.count_ones();
    if total == 0 {
        bail_mask!("boundary_indices needs a nonempty mask");
    }
    // bit-identical masked values mean sigma = 0 and gamma = mu = v exactly;
    // computing the statistics in floating point would otherwise let rounding
    // dust exclude pixels from a mathematically all-inclusive threshold
    let first = m
        .ones()
        .first()
        .map(|&(i, j)| a_bar.data()[i * w + j])
        .unwrap();
    let constant = m
        .ones()
        .iter()
        .all(|&(i, j)| a_bar.data()[i * w + j] == first);
    if constant && stats == StatsMode::Masked {
        return Ok(BoundaryIndexSet {
            idx: m.ones(),
            h,
            w,
        });
    }
    let denom = match stats {
        StatsMode::Masked => total as f64,
        StatsMode::Global => (h * w) as f64,
    };
    let mut sum = 0.0;
    for p in 0..h * w {
        sum += a_bar.data()[p] * m.data()[p] as f64;
    }
    let mu = sum / denom;
    let mut var = 0.0;
    match stats {
        StatsMode::Masked => {
            for p in 0..h * w {
                if m.data()[p] == 1 {
                    let d = a_bar.data()[p] - mu;
                    var += d * d;
                }
            }
        }
        StatsMode::Global => {
            // literal reading: deviations of the masked-out product over the
            // whole grid
            for p in 0..h * w {
                let d = a_bar.data()[p] * m.data()[p] as f64 - mu;
                var += d * d;
            }
        }
    }
    let sigma = math::sqrt(var / denom);
    let gamma = mu - sigma;
    let mut idx = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if m.get(i, j) == 1 && a_bar.data()[i * w + j] <= gamma {
                idx.push((i, j));
            }
        }
    }
    Ok(BoundaryIndexSet { idx, h, w })
}

/// Keep only the windowed frequency content of each channel: FFT, shift,
/// window, unshift, inverse FFT, real part. A non-symmetric window leaves
/// imaginary residue and is reported as a numeric error.
pub fn lowpass(z: &Tensor, fmask: &FourierMask) -> Result<Tensor> {
    let (c, h, w) = z.dims3();
    if (h, w) != fmask.dims() {
        bail_shape!("latent {h}x{w} vs window {:?}", fmask.dims());
    }
    check_pow2_dims(h, w)?;
    let mut out = Tensor::zeros(&[c, h, w]);
    // the residue bound scales with the input: early sampling steps divide
    // by sqrt(alpha_bar) and legitimately feed magnitudes in the hundreds,
    // where FFT roundoff alone exceeds an absolute 1e-9
    let tol = 1e-9 * z.max_abs().max(1.0);
    for ch in 0..c {
        let plane = &z.data()[ch * h * w..(ch + 1) * h * w];
        let spec = fftshift(&fft2(plane, h, w));
        let mut masked = Spectrum::zeros(h, w);
        for p in 0..h * w {
            if fmask.window()[p] == 1 {
                masked.re[p] = spec.re[p];
                masked.im[p] = spec.im[p];
            }
        }
        let unshifted = fftshift(&masked);
        let (re, im) = ifft2(&unshifted);
        let residue = im.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if residue >= tol {
            return Err(CoreError::Numeric(alloc::format!(
                "lowpass imaginary residue {residue:.3e} (non-symmetric window?)"
            )));
        }
        out.data_mut()[ch * h * w..(ch + 1) * h * w].copy_from_slice(&re);
    }
    Ok(out)
}

/// Mean over the boundary set of the squared channel-wise differences.
/// An empty set yields 0 by convention; callers skip guidance then.
pub fn guidance_value(z0_lp: &Tensor, zhat_lp: &Tensor, idx: &BoundaryIndexSet) -> Result<f64> {
    z0_lp.check_same_shape(zhat_lp, "guidance_value")?;
    if idx.is_empty() {
        return Ok(0.0);
    }
    let (c, h, w) = z0_lp.dims3();
    if (h, w) != (idx.h, idx.w) {
        bail_shape!("index grid {}x{} vs latent {h}x{w}", idx.h, idx.w);
    }
    let mut total = 0.0;
    for &(i, j) in &idx.idx {
        for ch in 0..c {
            let d = zhat_lp.data()[ch * h * w + i * w + j] - z0_lp.data()[ch * h * w + i * w + j];
            total += d * d;
        }
    }
    Ok(total / idx.len() as f64)
}

/// Closed-form gradient of `guidance_value(lowpass(one_step_prediction(z_t)))`
/// with respect to z_t, holding the predicted noise fixed:
///
///   d z0_hat / d z_t = 1/sqrt(alpha_bar_t)
///   d g / d z0_hat   = L^T ( 2/|Idx| * (zhat_lp - z0_lp) restricted to Idx )
///
/// and the low-pass operator L is self-adjoint, so L^T = L.
pub fn guidance_gradient(
    z0_lp: &Tensor,
    zhat_lp: &Tensor,
    idx: &BoundaryIndexSet,
    t: usize,
    s: &NoiseSchedule,
    fmask: &FourierMask,
) -> Result<Tensor> {
    z0_lp.check_same_shape(zhat_lp, "guidance_gradient")?;
    let (c, h, w) = z0_lp.dims3();
    if idx.is_empty() {
        return Ok(Tensor::zeros(&[c, h, w]));
    }
    s.check_t(t)?;
    let mut masked = Tensor::zeros(&[c, h, w]);
    let scale = 2.0 / idx.len() as f64;
    for &(i, j) in &idx.idx {
        for ch in 0..c {
            let p = ch * h * w + i * w + j;
            masked.data_mut()[p] = scale * (zhat_lp.data()[p] - z0_lp.data()[p]);
        }
    }
    let back = lowpass(&masked, fmask)?;
    Ok(back.scale(1.0 / math::sqrt(s.alpha_bar(t))))
}

/// Steer the predicted noise against the guidance gradient:
/// eps - lambda * rho_t * grad.
pub fn guided_epsilon(
    eps_pred: &Tensor,
    grad_g: &Tensor,
    t: usize,
    cfg: &GuidanceConfig,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    eps_pred.check_same_shape(grad_g, "guided_epsilon")?;
    s.check_t(t)?;
    let factor = cfg.lambda * s.rho(t);
    let mut out = eps_pred.clone();
    out.add_scaled_assign(grad_g, -factor);
    Ok(out)
}

/// Cumulative amplitude difference between two images inside a mask:
/// per-radius difference of masked Fourier amplitudes, accumulated from
/// the DC bin outward on the shifted grid. Entry r covers all bins whose
/// integer radius is <= r.
pub fn cad(edited: &Tensor, original: &Tensor, m: &BinaryMask) -> Result<Vec<f64>> {
    edited.check_same_shape(original, "cad")?;
    let (c, h, w) = edited.dims3();
    if (m.height(), m.width()) != (h, w) {
        bail_mask!("cad mask {}x{} vs image {h}x{w}", m.height(), m.width());
    }
    check_pow2_dims(h, w)?;
    let masked_plane = |img: &Tensor, ch: usize| -> Vec<f64> {
        (0..h * w)
            .map(|p| img.data()[ch * h * w + p] * m.data()[p] as f64)
            .collect()
    };
    let max_r = {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let corner = math::hypot(cy.max(h as f64 - 1.0 - cy), cx.max(w as f64 - 1.0 - cx));
        corner as usize
    };
    let mut ring = vec![0.0; max_r + 1];
    for ch in 0..c {
        let se = fftshift(&fft2(&masked_plane(edited, ch), h, w));
        let so = fftshift(&fft2(&masked_plane(original, ch), h, w));
        for i in 0..h {
            for j in 0..w {
                let r = math::hypot(i as f64 - h as f64 / 2.0, j as f64 - w as f64 / 2.0) as usize;
                ring[r.min(max_r)] += se.amplitude(i, j) - so.amplitude(i, j);
            }
        }
    }
    let mut out = ring;
    for r in 1..out.len() {
        out[r] += out[r - 1];
    }
    Ok(out)
}
