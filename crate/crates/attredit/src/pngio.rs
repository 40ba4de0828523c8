//! PNG readers/writers for images, binary masks and segmentations.
//!
//! Images are RGB, mapped linearly between [-1, 1] and [0, 255]; the
//! quantization round-trips exactly, which the outside-mask preservation
//! guarantee relies on. Masks are single-channel 0/255 (the reader is
//! tolerant and thresholds at 128); segmentations store raw class ids.

use anyhow::{bail, Context, Result};
use attredit_core::mask::{BinaryMask, SegMask, SEG_CLASSES};
use attredit_core::Tensor;
use image::{GrayImage, ImageReader, RgbImage};
use std::path::Path;

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3();
    if c != 3 {
        bail!("expected 3 channels, got {c}");
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| -> u8 {
                let v = (t.data()[ch * h * w + i * w + j] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            };
            img.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            let p = img.get_pixel(j as u32, i as u32);
            for ch in 0..3 {
                t.data_mut()[ch * h * w + i * w + j] = p.0[ch] as f64 / 127.5 - 1.0;
            }
        }
    }
    Ok(t)
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let (h, w) = (m.height(), m.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, image::Luma([m.get(i, j) * 255]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u8> = img.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
    Ok(BinaryMask::from_raw(h, w, data)?)
}

pub fn save_seg(path: &Path, s: &SegMask) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, image::Luma([s.get(i, j)]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_seg(path: &Path) -> Result<SegMask> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    for &v in img.as_raw() {
        if v >= SEG_CLASSES {
            bail!("segmentation value {v} out of range in {}", path.display());
        }
    }
    Ok(SegMask::from_raw(h, w, img.as_raw().clone())?)
}

/// Grayscale dump of a unit-interval map (0 = black, 1 = white), used for
/// the per-timestep score diagnostics.
pub fn save_unit_gray(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        bail!("gray map length {} vs {h}x{w}", values.len());
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (values[i * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use attredit_core::rng::Rng;

    #[test]
    fn image_quantization_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        // values on the exact quantization lattice
        let mut rng = Rng::new(1);
        let t = Tensor::from_vec(
            &[3, 8, 8],
            (0..192)
                .map(|_| (rng.below(256) as f64) / 127.5 - 1.0)
                .collect(),
        );
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mask_roundtrip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut rng = Rng::new(2);
        let m = BinaryMask::from_fn(16, 16, |_, _| rng.bernoulli(0.4));
        save_mask(&path, &m).unwrap();
        assert_eq!(load_mask(&path).unwrap(), m);
    }

    #[test]
    fn seg_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let mut rng = Rng::new(3);
        let s = SegMask::from_raw(8, 8, (0..64).map(|_| rng.below(19) as u8).collect()).unwrap();
        save_seg(&path, &s).unwrap();
        assert_eq!(load_seg(&path).unwrap(), s);
    }
}
