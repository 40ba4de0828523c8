//! Corpus construction and loading.
//!
//! One triple per generated face: the image, one attribute caption and a
//! coarsened version of that attribute's segmentation mask (convex hull,
//! dilation or a jittered blob). The precise mask is stored next to the
//! coarse one with a `_precise` suffix. The manifest is tab-separated,
//! one record per line: image path, mask path, caption, attribute id,
//! split tag; rejected samples are appended as `#reject` comment lines.

use crate::captioner::{CaptionerClient, ParserClient};
use crate::pngio;
use anyhow::{bail, Context, Result};
use attredit_core::conditioning::Caption;
use attredit_core::mask::{attr_mask, bezier_bbox_mask, convex_hull, dilate, BinaryMask};
use attredit_core::pipeline::TrainSample;
use attredit_core::rng::Rng;
use attredit_core::synth::{attr_classes, attribute, generate_face, SyntheticFaceSpec};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAug {
    Hull,
    Dilate,
    Bezier,
    Mixed,
}

impl fmt::Display for MaskAug {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskAug::Hull => "hull",
            MaskAug::Dilate => "dilate",
            MaskAug::Bezier => "bezier",
            MaskAug::Mixed => "mixed",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MaskAug {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hull" => MaskAug::Hull,
            "dilate" => MaskAug::Dilate,
            "bezier" => MaskAug::Bezier,
            "mixed" => MaskAug::Mixed,
            other => bail!("unknown mask augmentation {other:?}"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub mask_aug: MaskAug,
    pub dilate_radius: usize,
    pub bezier_jitter: f64,
    /// Every k-th sample lands in the eval split (k = this value).
    pub eval_every: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            n: 2200,
            seed: 0,
            size: 32,
            mask_aug: MaskAug::Mixed,
            dilate_radius: 2,
            bezier_jitter: 2.0,
            eval_every: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleRecord {
    pub image_path: String,
    pub mask_path: String,
    pub caption: String,
    pub attribute_id: u8,
    pub split: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<TripleRecord>,
    pub rejects: Vec<(usize, String)>,
}

/// Coarsen a precise attribute mask.
pub fn augment_mask(
    precise: &BinaryMask,
    mode: MaskAug,
    cfg: &BuildConfig,
    rng: &mut Rng,
) -> Result<BinaryMask> {
    let mode = match mode {
        MaskAug::Mixed => match rng.below(3) {
            0 => MaskAug::Hull,
            1 => MaskAug::Dilate,
            _ => MaskAug::Bezier,
        },
        m => m,
    };
    Ok(match mode {
        MaskAug::Hull => dilate(&convex_hull(precise)?, 1),
        MaskAug::Dilate => dilate(precise, cfg.dilate_radius),
        MaskAug::Bezier => bezier_bbox_mask(precise, rng, cfg.bezier_jitter)?,
        MaskAug::Mixed => unreachable!(),
    })
}

/// Attribute choice per sample index: eyebrows get half the corpus, the
/// other attributes share the rest; absent attributes fall back to
/// eyebrows, which every face has.
fn wanted_attribute(i: usize) -> u8 {
    const CYCLE: [u8; 8] = [
        attribute::EYEBROWS,
        attribute::EYES,
        attribute::EYEBROWS,
        attribute::MOUTH,
        attribute::EYEBROWS,
        attribute::GLASSES,
        attribute::EYEBROWS,
        attribute::FACIAL_HAIR,
    ];
    CYCLE[i % CYCLE.len()]
}

pub fn build_corpus(
    out_dir: &Path,
    cfg: &BuildConfig,
    captioner: &dyn CaptionerClient,
    parser: &dyn ParserClient,
) -> Result<Manifest> {
    if cfg.n < 1 {
        bail!("corpus size must be >= 1");
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let vocab = attredit_core::synth::canonical_vocab();
    fs::write(out_dir.join("vocab.txt"), vocab.tokens().join("\n") + "\n")?;

    let root = Rng::new(cfg.seed);
    let mut manifest = Manifest::default();
    for i in 0..cfg.n {
        let mut rng = root.fork(i as u64);
        let spec = SyntheticFaceSpec::sample(rng.next_u64(), cfg.size);
        let (image, seg_gt, caps) = generate_face(&spec);

        let step = |manifest: &mut Manifest, i: usize, err: String| {
            manifest.rejects.push((i, err));
        };

        let seg = match parser.parse(&image, &seg_gt) {
            Ok(s) => s,
            Err(e) => {
                step(&mut manifest, i, format!("parser: {e}"));
                continue;
            }
        };

        let wanted = wanted_attribute(i);
        let (attr, caption_gt) = caps
            .iter()
            .find(|(a, _)| *a == wanted)
            .or_else(|| caps.iter().find(|(a, _)| *a == attribute::EYEBROWS))
            .cloned()
            .expect("eyebrows always present");

        let precise = attr_classes(attr)
            .iter()
            .try_fold(BinaryMask::filled(cfg.size, cfg.size, 0), |acc, &class| {
                attr_mask(&seg, class).map(|m| acc.union(&m))
            });
        let precise = match precise {
            Ok(p) => p,
            Err(e) => {
                step(&mut manifest, i, format!("attr_mask: {e}"));
                continue;
            }
        };
        if precise.is_empty() {
            step(&mut manifest, i, format!("attribute {attr} mask empty"));
            continue;
        }
        let coarse = match augment_mask(&precise, cfg.mask_aug, cfg, &mut rng) {
            Ok(m) => m,
            Err(e) => {
                step(&mut manifest, i, format!("augment: {e}"));
                continue;
            }
        };

        let caption = match captioner.caption(&image, &precise, attr, &caption_gt) {
            Ok(c) => c,
            Err(e) => {
                step(&mut manifest, i, format!("captioner: {e}"));
                continue;
            }
        };

        let image_rel = format!("images/img_{i:05}.png");
        let mask_rel = format!("masks/mask_{i:05}.png");
        let precise_rel = format!("masks/mask_{i:05}_precise.png");
        pngio::save_image(&out_dir.join(&image_rel), &image)?;
        pngio::save_mask(&out_dir.join(&mask_rel), &coarse)?;
        pngio::save_mask(&out_dir.join(&precise_rel), &precise)?;

        let split = if cfg.eval_every > 0 && i % cfg.eval_every == cfg.eval_every - 1 {
            "eval"
        } else {
            "train"
        };
        manifest.records.push(TripleRecord {
            image_path: image_rel,
            mask_path: mask_rel,
            caption,
            attribute_id: attr,
            split: split.into(),
        });
    }

    write_manifest(&out_dir.join("manifest.tsv"), &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    for r in &manifest.records {
        if r.caption.contains('\t') || r.caption.contains('\n') {
            bail!("caption contains separator characters: {:?}", r.caption);
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.image_path, r.mask_path, r.caption, r.attribute_id, r.split
        ));
    }
    for (i, err) in &manifest.rejects {
        let flat = err.replace(['\t', '\n'], " ");
        out.push_str(&format!("#reject\t{i}\t{flat}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut manifest = Manifest::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#reject\t") {
            let mut parts = rest.splitn(2, '\t');
            let idx: usize = parts.next().unwrap_or("0").parse().unwrap_or(0);
            manifest
                .rejects
                .push((idx, parts.next().unwrap_or("").to_string()));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            bail!("manifest line {} malformed: {line:?}", lineno + 1);
        }
        manifest.records.push(TripleRecord {
            image_path: parts[0].into(),
            mask_path: parts[1].into(),
            caption: parts[2].into(),
            attribute_id: parts[3]
                .parse()
                .with_context(|| format!("attribute id on line {}", lineno + 1))?,
            split: parts[4].into(),
        });
    }
    Ok(manifest)
}

fn precise_path_of(mask_path: &str) -> String {
    match mask_path.strip_suffix(".png") {
        Some(stem) => format!("{stem}_precise.png"),
        None => format!("{mask_path}_precise"),
    }
}

/// Load training samples for one split (or all splits when None) in
/// manifest order, optionally shuffled by a seed.
pub fn load_corpus(
    manifest_path: &Path,
    split: Option<&str>,
    shuffle_seed: Option<u64>,
) -> Result<Vec<TrainSample>> {
    let manifest = parse_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_default();
    let mut samples = Vec::new();
    for r in &manifest.records {
        if let Some(s) = split {
            if r.split != s {
                continue;
            }
        }
        let label = format!("triple {}", r.image_path);
        let image = pngio::load_image(&dir.join(&r.image_path)).context(label.clone())?;
        let coarse = pngio::load_mask(&dir.join(&r.mask_path)).context(label.clone())?;
        let precise =
            pngio::load_mask(&dir.join(precise_path_of(&r.mask_path))).context(label.clone())?;
        if coarse.is_empty() {
            bail!("{label}: empty mask");
        }
        if image.max_abs() > 1.0 {
            bail!("{label}: image out of range");
        }
        samples.push(TrainSample {
            image,
            caption: Caption::new(r.caption.clone(), r.attribute_id),
            precise_mask: precise,
            coarse_mask: coarse,
        });
    }
    if let Some(seed) = shuffle_seed {
        let mut rng = Rng::new(seed);
        let perm = rng.permutation(samples.len());
        let mut shuffled = Vec::with_capacity(samples.len());
        for &k in &perm {
            shuffled.push(samples[k].clone());
        }
        samples = shuffled;
    }
    Ok(samples)
}

/// Content hash of the manifest file.
pub fn manifest_hash(path: &Path) -> Result<u64> {
    Ok(crate::fnv1a(&fs::read(path)?))
}

/// Read a vocabulary file: one token per line, line index = token id.
pub fn load_vocab(path: &Path) -> Result<attredit_core::conditioning::Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
    attredit_core::conditioning::Vocab::new(tokens)
        .map_err(|e| anyhow::anyhow!("vocab {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{EchoCaptioner, EchoParser, FailingCaptioner};

    fn build_in(dir: &Path, n: usize, seed: u64) -> Manifest {
        let cfg = BuildConfig {
            n,
            seed,
            ..Default::default()
        };
        build_corpus(dir, &cfg, &EchoCaptioner, &EchoParser).unwrap()
    }

    #[test]
    fn single_sample_build() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_in(dir.path(), 1, 9);
        assert_eq!(m.records.len(), 1);
        assert!(m.rejects.is_empty());
        let samples = load_corpus(&dir.path().join("manifest.tsv"), None, None).unwrap();
        assert_eq!(samples.len(), 1);
        assert!(samples[0].precise_mask.is_subset_of(&samples[0].coarse_mask));
        assert!(!samples[0].caption.text.is_empty());
    }

    #[test]
    fn coarse_mask_contains_precise_for_all_modes() {
        for aug in [MaskAug::Hull, MaskAug::Dilate, MaskAug::Bezier, MaskAug::Mixed] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = BuildConfig {
                n: 12,
                seed: 3,
                mask_aug: aug,
                ..Default::default()
            };
            build_corpus(dir.path(), &cfg, &EchoCaptioner, &EchoParser).unwrap();
            let samples = load_corpus(&dir.path().join("manifest.tsv"), None, None).unwrap();
            for s in &samples {
                assert!(
                    s.precise_mask.is_subset_of(&s.coarse_mask),
                    "aug {aug}: precise not inside coarse"
                );
            }
        }
    }

    #[test]
    fn rebuild_with_same_seed_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_in(d1.path(), 30, 77);
        build_in(d2.path(), 30, 77);
        let h1 = manifest_hash(&d1.path().join("manifest.tsv")).unwrap();
        let h2 = manifest_hash(&d2.path().join("manifest.tsv")).unwrap();
        assert_eq!(h1, h2);
        // spot-check binary equality of a few artifacts
        for rel in ["images/img_00000.png", "masks/mask_00007.png", "vocab.txt"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs");
        }
        let d3 = tempfile::tempdir().unwrap();
        build_in(d3.path(), 30, 78);
        assert_ne!(
            manifest_hash(&d3.path().join("manifest.tsv")).unwrap(),
            h1,
            "different seed should change the corpus"
        );
    }

    #[test]
    fn client_failures_land_in_rejects_and_build_continues() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = BuildConfig {
            n: 5,
            seed: 1,
            ..Default::default()
        };
        let m = build_corpus(dir.path(), &cfg, &FailingCaptioner, &EchoParser).unwrap();
        assert_eq!(m.records.len(), 0);
        assert_eq!(m.rejects.len(), 5);
        let parsed = parse_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(parsed.rejects.len(), 5);
        assert!(parsed.rejects[0].1.contains("captioner"));
    }

    #[test]
    fn split_tags_and_shuffle_determinism() {
        let dir = tempfile::tempdir().unwrap();
        build_in(dir.path(), 22, 5);
        let manifest = parse_manifest(&dir.path().join("manifest.tsv")).unwrap();
        let evals = manifest.records.iter().filter(|r| r.split == "eval").count();
        assert_eq!(evals, 2);
        let a = load_corpus(&dir.path().join("manifest.tsv"), Some("train"), Some(4)).unwrap();
        let b = load_corpus(&dir.path().join("manifest.tsv"), Some("train"), Some(4)).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            assert_eq!(x.image, y.image);
        }
        let c = load_corpus(&dir.path().join("manifest.tsv"), Some("train"), Some(5)).unwrap();
        let same_order = a.iter().zip(&c).all(|(x, y)| x.caption == y.caption && x.image == y.image);
        assert!(!same_order, "different shuffle seed should change order");
    }

    #[test]
    fn vocab_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        build_in(dir.path(), 1, 0);
        let vocab = load_vocab(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab, attredit_core::synth::canonical_vocab());
    }

    #[test]
    fn eyebrow_share_is_half() {
        let dir = tempfile::tempdir().unwrap();
        build_in(dir.path(), 40, 2);
        let manifest = parse_manifest(&dir.path().join("manifest.tsv")).unwrap();
        let brows = manifest
            .records
            .iter()
            .filter(|r| r.attribute_id == attribute::EYEBROWS)
            .count();
        assert!(brows >= manifest.records.len() / 2, "{brows}/{}", manifest.records.len());
    }
}
