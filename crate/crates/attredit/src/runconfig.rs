//! Run configuration (TOML) and the versioned thresholds file.
//!
//! Every default named on the command line or in the evaluation suites is
//! controlled from these two files; the CLI only overrides what the user
//! passes explicitly.

use anyhow::{bail, Context, Result};
use attredit_core::adapter::ScoreAxis;
use attredit_core::conditioning::EncoderConfig;
use attredit_core::denoiser::DenoiserConfig;
use attredit_core::diffusion::ScheduleKind;
use attredit_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub out: OutSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub corpus: String,
    pub shuffle_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: "data/corpus".into(),
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub groups: usize,
    pub time_dim: usize,
    pub attn_d: usize,
    pub score_hidden: usize,
    pub score_softmax_axis: String,
    pub n_t: usize,
    pub c_t: usize,
    pub c_v: usize,
    pub patch: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelSection {
            image_size: d.image_size,
            channels: d.channels,
            groups: d.groups,
            time_dim: d.time_dim,
            attn_d: d.attn_d,
            score_hidden: d.score_hidden,
            score_softmax_axis: "class".into(),
            n_t: d.encoder.n_t,
            c_t: d.encoder.c_t,
            c_v: d.encoder.c_v,
            patch: d.encoder.patch,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_p: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule: String,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout_p: t.dropout_p,
            clip_norm: t.clip_norm,
            seed: t.seed,
            t_max: t.t_max,
            beta_min: t.beta_min,
            beta_max: t.beta_max,
            schedule: "linear".into(),
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OutSection {
    pub checkpoint: String,
    pub loss_log: String,
}

impl Default for OutSection {
    fn default() -> Self {
        OutSection {
            checkpoint: "checkpoints/reference.ckpt".into(),
            loss_log: "checkpoints/train_loss.tsv".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            out: OutSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let axis = match self.model.score_softmax_axis.as_str() {
            "class" => ScoreAxis::Class,
            "spatial" => ScoreAxis::Spatial,
            other => bail!("score_softmax_axis must be class|spatial, got {other:?}"),
        };
        Ok(DenoiserConfig {
            image_size: self.model.image_size,
            image_channels: 3,
            channels: self.model.channels,
            groups: self.model.groups,
            time_dim: self.model.time_dim,
            attn_d: self.model.attn_d,
            score_hidden: self.model.score_hidden,
            score_axis: axis,
            encoder: EncoderConfig {
                n_t: self.model.n_t,
                c_t: self.model.c_t,
                c_v: self.model.c_v,
                patch: self.model.patch,
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let kind = match self.train.schedule.as_str() {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            other => bail!("schedule must be linear|cosine, got {other:?}"),
        };
        Ok(TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            dropout_p: self.train.dropout_p,
            clip_norm: self.train.clip_norm,
            seed: self.train.seed,
            t_max: self.train.t_max,
            beta_min: self.train.beta_min,
            beta_max: self.train.beta_max,
            kind,
        })
    }
}

/// Pass/fail thresholds for the evaluation suites; one versioned file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub roundtrip_rel: f64,
    pub suppression_tol: f64,
    pub grad_rel: f64,
    pub fft_tol: f64,
    pub preserve_max_abs: f64,
    pub loss_ratio: f64,
    pub probe_accuracy: f64,
    pub probe_control: f64,
    pub probe_clean_accuracy: f64,
    pub edit_region_mean_abs: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            roundtrip_rel: 1e-6,
            suppression_tol: 1e-10,
            grad_rel: 1e-4,
            fft_tol: 1e-8,
            preserve_max_abs: 0.0,
            loss_ratio: 0.5,
            probe_accuracy: 0.8,
            probe_control: 0.5,
            probe_clean_accuracy: 0.95,
            edit_region_mean_abs: 0.05,
        }
    }
}

impl Thresholds {
    pub fn load(path: &Path) -> Result<Thresholds> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading thresholds {}", path.display()))?;
        Ok(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    }
}
