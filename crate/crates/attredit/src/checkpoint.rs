//! Single-file weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "ATEDCKPT"
//! version u32      1
//! hlen    u32      header length in bytes
//! header  hlen     JSON: kind, model config, vocabulary, metadata
//! count   u32      tensor entries
//! entry*           name_len u16, name utf8, ndim u8, dims u32 each
//! data             f32 values per entry, in entry order
//! ```
//!
//! The header carries everything needed to rebuild the module structure;
//! tensors are then matched by name and must cover every parameter. See
//! `docs/checkpoint-format.md`.

use anyhow::{bail, Context, Result};
use attredit_core::adapter::ScoreAxis;
use attredit_core::conditioning::{EncoderConfig, Vocab};
use attredit_core::denoiser::{DenoiserConfig, Model};
use attredit_core::diffusion::{ScheduleKind, ScheduleSpec};
use attredit_core::graph::ParamSet;
use attredit_core::probe::{ProbeConfig, ProbeModel};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ATEDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    vocab: Vec<String>,
    #[serde(default)]
    denoiser: Option<DenoiserHeader>,
    #[serde(default)]
    probe: Option<ProbeHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenoiserHeader {
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    schedule: String,
    image_size: usize,
    image_channels: usize,
    channels: [usize; 3],
    groups: usize,
    time_dim: usize,
    attn_d: usize,
    score_hidden: usize,
    score_axis: String,
    n_t: usize,
    c_t: usize,
    c_v: usize,
    patch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    crop_h: usize,
    crop_w: usize,
    hidden: usize,
    classes: usize,
    accuracy: f64,
}

fn axis_name(a: ScoreAxis) -> &'static str {
    match a {
        ScoreAxis::Class => "class",
        ScoreAxis::Spatial => "spatial",
    }
}

fn axis_from(s: &str) -> Result<ScoreAxis> {
    match s {
        "class" => Ok(ScoreAxis::Class),
        "spatial" => Ok(ScoreAxis::Spatial),
        other => bail!("unknown score axis {other:?}"),
    }
}

fn write_archive(path: &Path, header: &Header, params: &ParamSet) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let hjson = serde_json::to_vec(header)?;
    f.write_all(&(hjson.len() as u32).to_le_bytes())?;
    f.write_all(&hjson)?;
    f.write_all(&(params.len() as u32).to_le_bytes())?;
    for i in 0..params.len() {
        let name = params.name(i).as_bytes();
        f.write_all(&(name.len() as u16).to_le_bytes())?;
        f.write_all(name)?;
        let shape = params.get(i).shape();
        f.write_all(&[shape.len() as u8])?;
        for &d in shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for i in 0..params.len() {
        for &v in params.get(i).data() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct Archive {
    header: Header,
    entries: Vec<(String, Vec<usize>)>,
    data: Vec<Vec<f64>>,
}

fn read_archive(path: &Path) -> Result<Archive> {
    let mut f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    f.read_exact(&mut u32buf)?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson)?;
    let header: Header = serde_json::from_slice(&hjson).context("parsing checkpoint header")?;
    f.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        f.read_exact(&mut u16buf)?;
        let nlen = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; nlen];
        f.read_exact(&mut name)?;
        let mut ndim = [0u8; 1];
        f.read_exact(&mut ndim)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            f.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        entries.push((String::from_utf8(name)?, dims));
    }
    let mut data = Vec::with_capacity(count);
    for (_, dims) in &entries {
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 4];
        f.read_exact(&mut buf)?;
        data.push(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        );
    }
    Ok(Archive {
        header,
        entries,
        data,
    })
}

fn fill_params(params: &mut ParamSet, archive: &Archive) -> Result<()> {
    if archive.entries.len() != params.len() {
        bail!(
            "checkpoint has {} tensors, model expects {}",
            archive.entries.len(),
            params.len()
        );
    }
    for ((name, dims), data) in archive.entries.iter().zip(&archive.data) {
        let idx = params
            .index_of(name)
            .with_context(|| format!("checkpoint tensor {name:?} unknown to the model"))?;
        let t = params.get_mut(idx);
        if t.shape() != dims.as_slice() {
            bail!(
                "checkpoint tensor {name:?} shape {dims:?} vs model {:?}",
                t.shape()
            );
        }
        t.data_mut().copy_from_slice(data);
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model, spec: &ScheduleSpec) -> Result<()> {
    let e = model.cfg.encoder;
    let header = Header {
        kind: "denoiser".into(),
        vocab: attredit_core::synth::canonical_vocab()
            .tokens()
            .to_vec(),
        denoiser: Some(DenoiserHeader {
            t_max: spec.t_max,
            beta_min: spec.beta_min,
            beta_max: spec.beta_max,
            schedule: match spec.kind {
                ScheduleKind::Linear => "linear".into(),
                ScheduleKind::Cosine => "cosine".into(),
            },
            image_size: model.cfg.image_size,
            image_channels: model.cfg.image_channels,
            channels: model.cfg.channels,
            groups: model.cfg.groups,
            time_dim: model.cfg.time_dim,
            attn_d: model.cfg.attn_d,
            score_hidden: model.cfg.score_hidden,
            score_axis: axis_name(model.cfg.score_axis).into(),
            n_t: e.n_t,
            c_t: e.c_t,
            c_v: e.c_v,
            patch: e.patch,
        }),
        probe: None,
    };
    write_archive(path, &header, &model.params)
}

pub fn load_model(path: &Path) -> Result<(Model, ScheduleSpec)> {
    let archive = read_archive(path)?;
    let Some(d) = &archive.header.denoiser else {
        bail!("{} is not a denoiser checkpoint", path.display());
    };
    let spec = ScheduleSpec {
        t_max: d.t_max,
        beta_min: d.beta_min,
        beta_max: d.beta_max,
        kind: match d.schedule.as_str() {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            other => bail!("unknown schedule kind {other:?}"),
        },
    };
    let cfg = DenoiserConfig {
        image_size: d.image_size,
        image_channels: d.image_channels,
        channels: d.channels,
        groups: d.groups,
        time_dim: d.time_dim,
        attn_d: d.attn_d,
        score_hidden: d.score_hidden,
        score_axis: axis_from(&d.score_axis)?,
        encoder: EncoderConfig {
            n_t: d.n_t,
            c_t: d.c_t,
            c_v: d.c_v,
            patch: d.patch,
        },
    };
    let vocab = Vocab::new(archive.header.vocab.clone())
        .map_err(|e| anyhow::anyhow!("checkpoint vocab: {e}"))?;
    let mut model = Model::new(cfg, &vocab, 0);
    fill_params(&mut model.params, &archive)?;
    Ok((model, spec))
}

pub fn save_probe(path: &Path, probe: &ProbeModel) -> Result<()> {
    let header = Header {
        kind: "probe".into(),
        vocab: Vec::new(),
        denoiser: None,
        probe: Some(ProbeHeader {
            crop_h: probe.cfg.crop_h,
            crop_w: probe.cfg.crop_w,
            hidden: probe.cfg.hidden,
            classes: probe.cfg.classes,
            accuracy: probe.accuracy,
        }),
    };
    write_archive(path, &header, &probe.params)
}

pub fn load_probe(path: &Path) -> Result<ProbeModel> {
    let archive = read_archive(path)?;
    let Some(p) = &archive.header.probe else {
        bail!("{} is not a probe checkpoint", path.display());
    };
    let cfg = ProbeConfig {
        crop_h: p.crop_h,
        crop_w: p.crop_w,
        hidden: p.hidden,
        classes: p.classes,
        ..Default::default()
    };
    let mut params = ParamSet::new();
    for ((name, dims), data) in archive.entries.iter().zip(&archive.data) {
        params.alloc(
            name.clone(),
            attredit_core::Tensor::from_vec(dims, data.clone()),
        );
    }
    Ok(ProbeModel::from_parts(params, cfg, p.accuracy)
        .map_err(|e| anyhow::anyhow!("probe checkpoint: {e}"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use attredit_core::synth::canonical_vocab;

    #[test]
    fn model_checkpoint_roundtrip() {
        let cfg = DenoiserConfig::miniature();
        let model = Model::new(cfg, &canonical_vocab(), 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ScheduleSpec {
            t_max: 123,
            ..Default::default()
        };
        save_model(&path, &model, &spec).unwrap();
        let (back, back_spec) = load_model(&path).unwrap();
        assert_eq!(back_spec, spec);
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.params.len(), model.params.len());
        for i in 0..model.params.len() {
            assert_eq!(back.params.name(i), model.params.name(i));
            assert_eq!(back.params.get(i).shape(), model.params.get(i).shape());
            // f32 storage: equality after the same truncation
            for (a, b) in back.params.get(i).data().iter().zip(model.params.get(i).data()) {
                assert_eq!(*a, *b as f32 as f64, "tensor {}", model.params.name(i));
            }
        }
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_model(&path).is_err());
    }
}
