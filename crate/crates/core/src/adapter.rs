//! Score-gated dual cross-attention over text and vision tokens.
//!
//! A two-layer MLP predicts a per-pixel text-importance score from the
//! latent tokens and the spatially replicated pooled text token. Text and
//! vision cross-attention share the query projection; the vision attention
//! rows are then attenuated by `(1 - score * mask)` inside the edit mask —
//! no renormalization afterwards — and the two branches are summed and
//! projected back to the latent width.
//!
//! The graph builder is the single implementation; the standalone
//! operations wrap it over a throwaway graph so contract-level callers and
//! the trained denoiser cannot diverge.

use crate::conditioning::{TextCondition, VisionCondition};
use crate::error::{bail_mask, bail_shape, Result};
use crate::graph::{Graph, ParamSet, Var};
use crate::mask::BinaryMask;
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Which axis the score softmax runs over. `Class` treats the two MLP
/// logits per pixel as a binary classifier; `Spatial` normalizes one logit
/// across all pixels instead (kept selectable because the two readings give
/// very different suppression behavior).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreAxis {
    #[default]
    Class,
    Spatial,
}

/// Per-pixel text-importance score in [0, 1] with its spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    values: Vec<f64>,
    h: usize,
    w: usize,
}

impl ScoreMap {
    pub fn new(values: Vec<f64>, h: usize, w: usize) -> Result<ScoreMap> {
        if values.len() != h * w {
            bail_shape!("score length {} vs {h}x{w}", values.len());
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(crate::error::CoreError::Numeric(String::from(
                "score outside [0,1]",
            )));
        }
        Ok(ScoreMap { values, h, w })
    }

    pub fn filled(v: f64, h: usize, w: usize) -> ScoreMap {
        ScoreMap {
            values: alloc::vec![v; h * w],
            h,
            w,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterConfig {
    pub c_z: usize,
    pub c_t: usize,
    pub c_v: usize,
    /// Attention dimension (the 1/sqrt(d) scale).
    pub d: usize,
    pub score_hidden: usize,
    pub score_axis: ScoreAxis,
}

/// Parameter slots of one adapter block. The query projection is shared by
/// the text and vision attention paths.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub w_q: usize,
    pub w_k_txt: usize,
    pub w_v_txt: usize,
    pub w_k_vis: usize,
    pub w_v_vis: usize,
    pub score_w1: usize,
    pub score_b1: usize,
    pub score_w2: usize,
    pub score_b2: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub cfg: AdapterConfig,
}

impl AdapterParams {
    pub fn alloc(
        params: &mut ParamSet,
        prefix: &str,
        cfg: AdapterConfig,
        rng: &mut Rng,
    ) -> AdapterParams {
        let mut mat = |params: &mut ParamSet, name: &str, r: usize, c: usize, std: f64| {
            params.alloc(
                format!("{prefix}.{name}"),
                Tensor::from_vec(&[r, c], (0..r * c).map(|_| rng.normal() * std).collect()),
            )
        };
        let sq = 1.0 / math::sqrt(cfg.c_z as f64);
        let st = 1.0 / math::sqrt(cfg.c_t as f64);
        let sv = 1.0 / math::sqrt(cfg.c_v as f64);
        let sh = 1.0 / math::sqrt((cfg.c_z + cfg.c_t) as f64);
        let w_q = mat(params, "w_q", cfg.c_z, cfg.d, sq);
        let w_k_txt = mat(params, "w_k_txt", cfg.c_t, cfg.d, st);
        let w_v_txt = mat(params, "w_v_txt", cfg.c_t, cfg.d, st);
        let w_k_vis = mat(params, "w_k_vis", cfg.c_v, cfg.d, sv);
        let w_v_vis = mat(params, "w_v_vis", cfg.c_v, cfg.d, sv);
        let score_w1 = mat(params, "score_w1", cfg.c_z + cfg.c_t, cfg.score_hidden, sh);
        let score_b1 = params.alloc(format!("{prefix}.score_b1"), Tensor::zeros(&[cfg.score_hidden]));
        // zero-initialized head: equal logits, score 0.5 everywhere
        let score_w2 = params.alloc(
            format!("{prefix}.score_w2"),
            Tensor::zeros(&[cfg.score_hidden, 2]),
        );
        let score_b2 = params.alloc(format!("{prefix}.score_b2"), Tensor::zeros(&[2]));
        // zero-initialized output projection: the block starts as a no-op
        // inside its residual connection
        let w_out = params.alloc(format!("{prefix}.w_out"), Tensor::zeros(&[cfg.d, cfg.c_z]));
        let b_out = params.alloc(format!("{prefix}.b_out"), Tensor::zeros(&[cfg.c_z]));
        AdapterParams {
            w_q,
            w_k_txt,
            w_v_txt,
            w_k_vis,
            w_v_vis,
            score_w1,
            score_b1,
            score_w2,
            score_b2,
            w_out,
            b_out,
            cfg,
        }
    }
}

/// Graph-side outputs of one adapter block.
pub struct AdapterSignals {
    pub z_s: Var,
    pub a_txt: Var,
    pub a_vis: Var,
    pub a_vis_suppressed: Var,
    pub score: Var,
}

/// Build the adapter forward pass on a graph. `mask_flat` is the edit mask
/// already downsampled to this block's spatial resolution, flattened to
/// n_z entries.
pub fn adapter_graph(
    g: &mut Graph,
    ap: &AdapterParams,
    z: Var,
    txt_tokens: Var,
    pooled: Var,
    vis_tokens: Var,
    mask_flat: &[f64],
) -> AdapterSignals {
    let n_z = g.value(z).dims2().0;
    debug_assert_eq!(mask_flat.len(), n_z);
    let inv_sqrt_d = 1.0 / math::sqrt(ap.cfg.d as f64);

    // per-pixel score from Concat(Z, replicated pooled token)
    let f_s = g.broadcast_row(pooled, n_z);
    let score_in = g.concat_cols(z, f_s);
    let w1 = g.param(ap.score_w1);
    let b1 = g.param(ap.score_b1);
    let h1 = g.matmul(score_in, w1);
    let h1 = g.add_row_bias(h1, b1);
    let h1 = g.silu(h1);
    let w2 = g.param(ap.score_w2);
    let b2 = g.param(ap.score_b2);
    let logits = g.matmul(h1, w2);
    let logits = g.add_row_bias(logits, b2);
    let score = match ap.cfg.score_axis {
        ScoreAxis::Class => {
            let probs = g.softmax_rows(logits);
            g.column(probs, 1)
        }
        ScoreAxis::Spatial => {
            let col = g.column(logits, 1);
            let row = g.reshape(col, &[1, n_z]);
            let sm = g.softmax_rows(row);
            g.reshape(sm, &[n_z])
        }
    };

    // shared query
    let w_q = g.param(ap.w_q);
    let q = g.matmul(z, w_q);

    // text branch
    let w_k_t = g.param(ap.w_k_txt);
    let w_v_t = g.param(ap.w_v_txt);
    let k_txt = g.matmul(txt_tokens, w_k_t);
    let v_txt = g.matmul(txt_tokens, w_v_t);
    let k_txt_t = g.transpose(k_txt);
    let logits_t = g.matmul(q, k_txt_t);
    let logits_t = g.scale(logits_t, inv_sqrt_d);
    let a_txt = g.softmax_rows(logits_t);
    let f_txt = g.matmul(a_txt, v_txt);

    // vision branch with score suppression inside the mask
    let w_k_v = g.param(ap.w_k_vis);
    let w_v_v = g.param(ap.w_v_vis);
    let k_vis = g.matmul(vis_tokens, w_k_v);
    let v_vis = g.matmul(vis_tokens, w_v_v);
    let k_vis_t = g.transpose(k_vis);
    let logits_v = g.matmul(q, k_vis_t);
    let logits_v = g.scale(logits_v, inv_sqrt_d);
    let a_vis = g.softmax_rows(logits_v);
    let mask_c = g.constant(Tensor::from_vec(&[n_z], mask_flat.to_vec()));
    let ones = g.constant(Tensor::filled(&[n_z], 1.0));
    let sm = g.mul(score, mask_c);
    let gate = g.sub(ones, sm);
    let a_vis_sup = g.mul_rows(a_vis, gate);
    let f_vis = g.matmul(a_vis_sup, v_vis);

    // fuse and project back to latent width
    let fused = g.add(f_txt, f_vis);
    let w_out = g.param(ap.w_out);
    let b_out = g.param(ap.b_out);
    let z_s = g.matmul(fused, w_out);
    let z_s = g.add_row_bias(z_s, b_out);

    AdapterSignals {
        z_s,
        a_txt,
        a_vis,
        a_vis_suppressed: a_vis_sup,
        score,
    }
}

fn flat_mask(m: &BinaryMask) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// Standalone score predictor over a latent token matrix and the
/// spatially-replicated pooled text rows.
pub fn predict_score(
    z: &Tensor,
    f_s_txt: &Tensor,
    params: &ParamSet,
    ap: &AdapterParams,
    hw: (usize, usize),
) -> Result<ScoreMap> {
    let (n_z, _) = z.dims2();
    let (n_s, _) = f_s_txt.dims2();
    if n_z != n_s {
        bail_shape!("score inputs disagree on rows: {n_z} vs {n_s}");
    }
    if hw.0 * hw.1 != n_z {
        bail_shape!("score dims {}x{} vs n_z {n_z}", hw.0, hw.1);
    }
    let mut g = Graph::new(params.tensors());
    let zc = g.constant(z.clone());
    // reuse the graph path: pooled is recovered as any row of f_s_txt
    let pooled = g.constant(Tensor::from_vec(
        &[f_s_txt.dims2().1],
        f_s_txt.data()[..f_s_txt.dims2().1].to_vec(),
    ));
    let w1 = g.param(ap.score_w1);
    let b1 = g.param(ap.score_b1);
    let f_s = g.broadcast_row(pooled, n_z);
    let score_in = g.concat_cols(zc, f_s);
    let h1 = g.matmul(score_in, w1);
    let h1 = g.add_row_bias(h1, b1);
    let h1 = g.silu(h1);
    let w2 = g.param(ap.score_w2);
    let b2 = g.param(ap.score_b2);
    let logits = g.matmul(h1, w2);
    let logits = g.add_row_bias(logits, b2);
    let score = match ap.cfg.score_axis {
        ScoreAxis::Class => {
            let probs = g.softmax_rows(logits);
            g.column(probs, 1)
        }
        ScoreAxis::Spatial => {
            let col = g.column(logits, 1);
            let row = g.reshape(col, &[1, n_z]);
            let sm = g.softmax_rows(row);
            g.reshape(sm, &[n_z])
        }
    };
    ScoreMap::new(g.value(score).data().to_vec(), hw.0, hw.1)
}

/// Standalone visual cross-attention: row-stochastic map and value tokens.
pub fn visual_attention(
    z: &Tensor,
    vis: &VisionCondition,
    params: &ParamSet,
    ap: &AdapterParams,
) -> Result<(Tensor, Tensor)> {
    let (_, c_z) = z.dims2();
    if c_z != ap.cfg.c_z {
        bail_shape!("latent width {c_z} vs adapter c_z {}", ap.cfg.c_z);
    }
    if vis.tokens.dims2().1 != ap.cfg.c_v {
        bail_shape!(
            "vision width {} vs adapter c_v {}",
            vis.tokens.dims2().1,
            ap.cfg.c_v
        );
    }
    let mut g = Graph::new(params.tensors());
    let zc = g.constant(z.clone());
    let vt = g.constant(vis.tokens.clone());
    let w_q = g.param(ap.w_q);
    let w_k = g.param(ap.w_k_vis);
    let w_v = g.param(ap.w_v_vis);
    let q = g.matmul(zc, w_q);
    let k = g.matmul(vt, w_k);
    let v = g.matmul(vt, w_v);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / math::sqrt(ap.cfg.d as f64));
    let a = g.softmax_rows(logits);
    Ok((g.value(a).clone(), g.value(v).clone()))
}

/// Row-wise suppression: row i scaled by (1 - score_i * mask_i). Rows are
/// not renormalized.
pub fn suppress_attention(
    a_vis: &Tensor,
    score: &ScoreMap,
    m_down: &BinaryMask,
) -> Result<Tensor> {
    let (n_z, _) = a_vis.dims2();
    if score.len() != n_z {
        bail_shape!("score length {} vs attention rows {n_z}", score.len());
    }
    if m_down.height() * m_down.width() != n_z {
        bail_mask!(
            "mask {}x{} vs attention rows {n_z}",
            m_down.height(),
            m_down.width()
        );
    }
    let mut out = a_vis.clone();
    let cols = a_vis.dims2().1;
    for i in 0..n_z {
        let gate = 1.0 - score.values()[i] * m_down.data()[i] as f64;
        for v in out.data_mut()[i * cols..(i + 1) * cols].iter_mut() {
            *v *= gate;
        }
    }
    Ok(out)
}

/// Full adapter block over plain inputs; returns the fused feature (after
/// the output projection), the text attention map and the score map.
pub fn adapter_forward(
    z: &Tensor,
    txt: &TextCondition,
    vis: &VisionCondition,
    m_down: &BinaryMask,
    params: &ParamSet,
    ap: &AdapterParams,
) -> Result<(Tensor, Tensor, ScoreMap)> {
    let (n_z, _) = z.dims2();
    let (mh, mw) = (m_down.height(), m_down.width());
    if mh * mw != n_z {
        bail_mask!("mask {mh}x{mw} vs n_z {n_z}");
    }
    let mut g = Graph::new(params.tensors());
    let zc = g.constant(z.clone());
    let tt = g.constant(txt.tokens.clone());
    let pooled = g.constant(txt.pooled.clone());
    let vt = g.constant(vis.tokens.clone());
    let sig = adapter_graph(&mut g, ap, zc, tt, pooled, vt, &flat_mask(m_down));
    let score = ScoreMap::new(g.value(sig.score).data().to_vec(), mh, mw)?;
    Ok((
        g.value(sig.z_s).clone(),
        g.value(sig.a_txt).clone(),
        score,
    ))
}
