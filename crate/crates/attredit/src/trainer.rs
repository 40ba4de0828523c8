//! Training driver: batching, loss logging, optional early stop on the
//! trailing/leading loss ratio.

use anyhow::{bail, Result};
use attredit_core::denoiser::Model;
use attredit_core::pipeline::{train_step, RmsProp, TrainConfig, TrainSample};
use attredit_core::rng::Rng;
use attredit_core::synth::canonical_vocab;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub steps_run: usize,
    /// Mean loss over the first 100 steps.
    pub first100: f64,
    /// Mean loss over the last 100 steps run.
    pub last100: f64,
    pub wall_secs: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Run up to `cfg.steps` optimizer updates. When `early_stop_ratio` is set,
/// training ends as soon as the mean of the last 100 losses falls below
/// ratio * mean of the first 100 (checked every 25 steps from step 200).
/// `snapshot` is called every `snapshot_every` steps with the live model so
/// long runs can persist intermediate checkpoints.
pub fn run_training(
    model: &mut Model,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    early_stop_ratio: Option<f64>,
    snapshot_every: usize,
    mut snapshot: impl FnMut(usize, &Model) -> Result<()>,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        bail!("no training samples");
    }
    let vocab = canonical_vocab();
    let schedule = cfg.schedule()?;
    let mut opt = RmsProp::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut order = rng.permutation(samples.len());
    let mut cursor = 0usize;
    let mut losses = Vec::with_capacity(cfg.steps);
    let start = Instant::now();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = rng.permutation(samples.len());
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let loss = train_step(model, &mut opt, &vocab, &batch, &schedule, cfg, &mut rng)
            .map_err(|e| anyhow::anyhow!("training step {step}: {e}"))?;
        losses.push(loss);
        on_log(step, loss);
        if snapshot_every > 0 && (step + 1) % snapshot_every == 0 && step + 1 < cfg.steps {
            snapshot(step + 1, model)?;
        }

        if let Some(ratio) = early_stop_ratio {
            let n = losses.len();
            if n >= 200 && n % 25 == 0 {
                let head = mean(&losses[..100]);
                let tail = mean(&losses[n - 100..]);
                if tail < ratio * head {
                    break;
                }
            }
        }
    }

    let n = losses.len();
    Ok(TrainOutcome {
        steps_run: n,
        first100: mean(&losses[..n.min(100)]),
        last100: mean(&losses[n.saturating_sub(100)..]),
        wall_secs: start.elapsed().as_secs_f64(),
        losses,
    })
}
