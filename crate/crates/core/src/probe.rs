//! Small attribute classifier used to judge edit fidelity.
//!
//! The crop under the edit mask's bounding box is resampled to a fixed
//! patch and fed through a two-layer network that predicts the attribute
//! parameter bucket (e.g. eyebrow thickness). It trains only on clean
//! synthetic ground truth and refuses to emit a model whose held-out
//! accuracy is below the floor, so downstream edit scores can be trusted.

use crate::error::{bail_mask, bail_param, CoreError, Result};
use crate::graph::{Graph, ParamSet, Var};
use crate::mask::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub hidden: usize,
    pub classes: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Required held-out accuracy on clean data.
    pub min_accuracy: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            crop_h: 12,
            crop_w: 24,
            hidden: 48,
            classes: 3,
            lr: 5e-3,
            steps: 600,
            batch: 32,
            min_accuracy: 0.95,
        }
    }
}

pub struct ProbeModel {
    pub params: ParamSet,
    pub cfg: ProbeConfig,
    /// Held-out clean accuracy measured at training time.
    pub accuracy: f64,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ProbeModel {
    fn alloc(cfg: ProbeConfig, seed: u64) -> ProbeModel {
        let mut rng = Rng::new(seed);
        let d = cfg.crop_h * cfg.crop_w * 3;
        let mut params = ParamSet::new();
        let s1 = 1.0 / crate::math::sqrt(d as f64);
        let w1 = params.alloc(
            "probe.w1",
            Tensor::from_vec(&[d, cfg.hidden], (0..d * cfg.hidden).map(|_| rng.normal() * s1).collect()),
        );
        let b1 = params.alloc("probe.b1", Tensor::zeros(&[cfg.hidden]));
        let s2 = 1.0 / crate::math::sqrt(cfg.hidden as f64);
        let w2 = params.alloc(
            "probe.w2",
            Tensor::from_vec(
                &[cfg.hidden, cfg.classes],
                (0..cfg.hidden * cfg.classes).map(|_| rng.normal() * s2).collect(),
            ),
        );
        let b2 = params.alloc("probe.b2", Tensor::zeros(&[cfg.classes]));
        ProbeModel {
            params,
            cfg,
            accuracy: 0.0,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Rebuild a probe from serialized parts (checkpoint loading).
    pub fn from_parts(params: ParamSet, cfg: ProbeConfig, accuracy: f64) -> Result<ProbeModel> {
        let w1 = params
            .index_of("probe.w1")
            .ok_or_else(|| CoreError::Param(alloc::format!("missing probe.w1")))?;
        let b1 = params
            .index_of("probe.b1")
            .ok_or_else(|| CoreError::Param(alloc::format!("missing probe.b1")))?;
        let w2 = params
            .index_of("probe.w2")
            .ok_or_else(|| CoreError::Param(alloc::format!("missing probe.w2")))?;
        let b2 = params
            .index_of("probe.b2")
            .ok_or_else(|| CoreError::Param(alloc::format!("missing probe.b2")))?;
        Ok(ProbeModel {
            params,
            cfg,
            accuracy,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Crop the bounding box of the region mask and nearest-resample it to the
/// probe's fixed input patch, flattened to a [1, 3*crop_h*crop_w] row.
pub fn crop_features(image: &Tensor, region: &BinaryMask, cfg: &ProbeConfig) -> Result<Tensor> {
    let (c, h, w) = image.dims3();
    if (region.height(), region.width()) != (h, w) {
        bail_mask!("probe region {}x{} vs image {h}x{w}", region.height(), region.width());
    }
    let Some((i0, j0, i1, j1)) = region.bbox() else {
        bail_mask!("probe region is empty");
    };
    let (bh, bw) = (i1 - i0 + 1, j1 - j0 + 1);
    let d = cfg.crop_h * cfg.crop_w;
    let mut out = Tensor::zeros(&[1, 3 * d]);
    for ch in 0..c.min(3) {
        for i in 0..cfg.crop_h {
            let si = i0 + i * bh / cfg.crop_h;
            for j in 0..cfg.crop_w {
                let sj = j0 + j * bw / cfg.crop_w;
                out.data_mut()[ch * d + i * cfg.crop_w + j] = image.data()[ch * h * w + si * w + sj];
            }
        }
    }
    Ok(out)
}

fn forward(g: &mut Graph, m: &ProbeModel, x: Var) -> Var {
    let w1 = g.param(m.w1);
    let b1 = g.param(m.b1);
    let h = g.matmul(x, w1);
    let h = g.add_row_bias(h, b1);
    let h = g.silu(h);
    let w2 = g.param(m.w2);
    let b2 = g.param(m.b2);
    let h = g.matmul(h, w2);
    g.add_row_bias(h, b2)
}

fn classify(m: &ProbeModel, feats: &Tensor) -> u8 {
    let mut g = Graph::new(m.params.tensors());
    let x = g.constant(feats.clone());
    let logits = forward(&mut g, m, x);
    let row = g.value(logits).data();
    let mut best = 0usize;
    for k in 1..m.cfg.classes {
        if row[k] > row[best] {
            best = k;
        }
    }
    best as u8
}

/// Predicted bucket for the region crop of an image.
pub fn predict(m: &ProbeModel, image: &Tensor, region: &BinaryMask) -> Result<u8> {
    let feats = crop_features(image, region, &m.cfg)?;
    Ok(classify(m, &feats))
}

/// Train on (image, region, bucket) records; every fifth record is held
/// out for the accuracy gate. Refuses to emit a model below the floor.
pub fn train_probe(
    samples: &[(Tensor, BinaryMask, u8)],
    cfg: ProbeConfig,
    seed: u64,
) -> Result<ProbeModel> {
    if samples.len() < 10 {
        bail_param!("probe training needs at least 10 samples, got {}", samples.len());
    }
    let mut model = ProbeModel::alloc(cfg, seed);
    let feats: Vec<(Tensor, u8)> = samples
        .iter()
        .map(|(img, region, bucket)| Ok((crop_features(img, region, &cfg)?, *bucket)))
        .collect::<Result<_>>()?;
    let (train, held): (Vec<_>, Vec<_>) = {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, f) in feats.iter().enumerate() {
            if i % 5 == 4 {
                held.push(f.clone());
            } else {
                train.push(f.clone());
            }
        }
        (train, held)
    };

    let mut opt = crate::pipeline::RmsProp::new(cfg.lr);
    let mut rng = Rng::new(seed ^ 0x9E3779B97F4A7C15);
    for _ in 0..cfg.steps {
        let mut total: Vec<Option<Tensor>> = (0..model.params.len()).map(|_| None).collect();
        for _ in 0..cfg.batch {
            let (x, bucket) = &train[rng.below(train.len() as u64) as usize];
            let mut onehot = Tensor::zeros(&[1, cfg.classes]);
            onehot.data_mut()[*bucket as usize] = 1.0;
            let grads = {
                let mut g = Graph::new(model.params.tensors());
                let xv = g.constant(x.clone());
                let logits = forward(&mut g, &model, xv);
                let tgt = g.constant(onehot);
                let loss = g.mse_loss(logits, tgt);
                g.backward(loss)
            };
            let scale = 1.0 / cfg.batch as f64;
            for (acc, gr) in total.iter_mut().zip(grads) {
                if let Some(gr) = gr {
                    match acc {
                        Some(a) => a.add_scaled_assign(&gr, scale),
                        None => *acc = Some(gr.scale(scale)),
                    }
                }
            }
        }
        opt.step(&mut model.params, &total);
    }

    let correct = held
        .iter()
        .filter(|(x, bucket)| classify(&model, x) == *bucket)
        .count();
    let accuracy = correct as f64 / held.len().max(1) as f64;
    if accuracy < cfg.min_accuracy {
        return Err(CoreError::Precondition(alloc::format!(
            "probe held-out accuracy {accuracy:.3} below required {:.3}",
            cfg.min_accuracy
        )));
    }
    model.accuracy = accuracy;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{attr_mask, dilate};
    use crate::synth::{attr_classes, attribute, generate_face, SyntheticFaceSpec};

    fn eyebrow_samples(n: usize, size: usize) -> Vec<(Tensor, BinaryMask, u8)> {
        (0..n)
            .map(|i| {
                let mut spec = SyntheticFaceSpec::sample(1000 + i as u64, size);
                spec.glasses.on = false;
                spec.eyebrows.thickness_bucket = (i % 3) as u8;
                let (img, seg, _) = generate_face(&spec);
                let mut precise = BinaryMask::filled(size, size, 0);
                for &cl in attr_classes(attribute::EYEBROWS) {
                    precise = precise.union(&attr_mask(&seg, cl).unwrap());
                }
                let coarse = dilate(&precise, 2);
                (img, coarse, spec.eyebrows.thickness_bucket)
            })
            .collect()
    }

    #[test]
    fn probe_learns_eyebrow_thickness() {
        let samples = eyebrow_samples(120, 32);
        let cfg = ProbeConfig {
            steps: 250,
            ..Default::default()
        };
        let probe = train_probe(&samples, cfg, 5).unwrap();
        assert!(probe.accuracy >= 0.95);
        // sanity oracle: training samples classify to their own bucket
        let mut right = 0;
        for (img, region, bucket) in samples.iter().take(30) {
            right += (predict(&probe, img, region).unwrap() == *bucket) as usize;
        }
        assert!(right >= 27, "{right}/30");
    }

    #[test]
    fn probe_refuses_degenerate_corpus() {
        let flat = Tensor::filled(&[3, 32, 32], 0.1);
        let region = BinaryMask::from_fn(32, 32, |i, j| (8..14).contains(&i) && (4..28).contains(&j));
        let samples: Vec<(Tensor, BinaryMask, u8)> = (0..60)
            .map(|i| (flat.clone(), region.clone(), (i % 3) as u8))
            .collect();
        let cfg = ProbeConfig {
            steps: 60,
            ..Default::default()
        };
        assert!(matches!(
            train_probe(&samples, cfg, 7),
            Err(CoreError::Precondition(_))
        ));
    }
}
