//! Binary-mask morphology and coarse-mask synthesis.
//!
//! Masks stay strictly {0, 1}. Morphology uses a square structuring element
//! of radius r; out-of-bounds pixels are treated as background, so erosion
//! eats foreground touching the border. Coarse masks for training come from
//! the convex hull, dilation, or a jittered rounded blob fitted around the
//! bounding box.

use crate::error::{bail_mask, bail_param, Result};
use crate::math;
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

pub const SEG_CLASSES: u8 = 19;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn filled(h: usize, w: usize, v: u8) -> BinaryMask {
        assert!(v <= 1);
        BinaryMask {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> BinaryMask {
        let mut data = vec![0u8; h * w];
        for i in 0..h {
            for j in 0..w {
                data[i * w + j] = f(i, j) as u8;
            }
        }
        BinaryMask { h, w, data }
    }

    /// Validate that every value is 0 or 1.
    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Result<BinaryMask> {
        if data.len() != h * w {
            bail_mask!("mask data length {} vs {h}x{w}", data.len());
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            bail_mask!("mask value {v} outside {{0,1}}");
        }
        Ok(BinaryMask { h, w, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[i * self.w + j] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn ones(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if self.data[i * self.w + j] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a | b)
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Inclusive bounding box of set pixels: (i0, j0, i1, j1).
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let ones = self.ones();
        if ones.is_empty() {
            return None;
        }
        let i0 = ones.iter().map(|p| p.0).min().unwrap();
        let i1 = ones.iter().map(|p| p.0).max().unwrap();
        let j0 = ones.iter().map(|p| p.1).min().unwrap();
        let j1 = ones.iter().map(|p| p.1).max().unwrap();
        Some((i0, j0, i1, j1))
    }
}

/// Integer class-id segmentation over the same grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn filled(h: usize, w: usize, class: u8) -> SegMask {
        assert!(class < SEG_CLASSES);
        SegMask {
            h,
            w,
            data: vec![class; h * w],
        }
    }

    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Result<SegMask> {
        if data.len() != h * w {
            bail_mask!("seg data length {} vs {h}x{w}", data.len());
        }
        if let Some(v) = data.iter().find(|&&v| v >= SEG_CLASSES) {
            bail_mask!("seg class id {v} >= {SEG_CLASSES}");
        }
        Ok(SegMask { h, w, data })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, class: u8) {
        debug_assert!(class < SEG_CLASSES);
        self.data[i * self.w + j] = class;
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.data.iter().any(|&v| v == class)
    }
}

/// Pixels of one segmentation class as a binary mask.
pub fn attr_mask(seg: &SegMask, class_id: u8) -> Result<BinaryMask> {
    if class_id >= SEG_CLASSES {
        bail_param!("class_id {class_id} out of range 0..{SEG_CLASSES}");
    }
    Ok(BinaryMask {
        h: seg.h,
        w: seg.w,
        data: seg.data.iter().map(|&v| (v == class_id) as u8).collect(),
    })
}

pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (h, w) = (m.h, m.w);
    let mut out = BinaryMask::filled(h, w, 0);
    let r = r as isize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            'scan: for di in -r..=r {
                for dj in -r..=r {
                    let (si, sj) = (i + di, j + dj);
                    if si >= 0
                        && si < h as isize
                        && sj >= 0
                        && sj < w as isize
                        && m.data[si as usize * w + sj as usize] == 1
                    {
                        out.data[i as usize * w + j as usize] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (h, w) = (m.h, m.w);
    let mut out = BinaryMask::filled(h, w, 0);
    let r = r as isize;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut keep = true;
            'scan: for di in -r..=r {
                for dj in -r..=r {
                    let (si, sj) = (i + di, j + dj);
                    let inside = si >= 0 && si < h as isize && sj >= 0 && sj < w as isize;
                    if !inside || m.data[si as usize * w + sj as usize] == 0 {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            if keep {
                out.data[i as usize * w + j as usize] = 1;
            }
        }
    }
    out
}

#[inline]
fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew monotone chain over integer points; returns CCW hull without
/// repeated first point. Collinear inputs collapse to the two endpoints.
fn hull_points(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    let n = pts.len();
    if n <= 2 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * n);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev() {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Filled convex hull of the set pixels (pixel centers as lattice points;
/// a pixel belongs to the hull iff its center does, boundary inclusive).
pub fn convex_hull(m: &BinaryMask) -> Result<BinaryMask> {
    let ones = m.ones();
    if ones.is_empty() {
        bail_mask!("convex_hull of empty mask");
    }
    let pts: Vec<(i64, i64)> = ones.iter().map(|&(i, j)| (i as i64, j as i64)).collect();
    let hull = hull_points(pts);
    let mut out = BinaryMask::filled(m.h, m.w, 0);

    if hull.len() <= 2 {
        // degenerate: all points collinear; rasterize the segment
        let a = hull[0];
        let b = *hull.last().unwrap();
        for i in 0..m.h {
            for j in 0..m.w {
                let p = (i as i64, j as i64);
                let on = cross(a, b, p) == 0
                    && p.0 >= a.0.min(b.0)
                    && p.0 <= a.0.max(b.0)
                    && p.1 >= a.1.min(b.1)
                    && p.1 <= a.1.max(b.1);
                if on {
                    out.data[i * m.w + j] = 1;
                }
            }
        }
        return Ok(out);
    }

    let (mut i0, mut i1, mut j0, mut j1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for &(i, j) in &hull {
        i0 = i0.min(i);
        i1 = i1.max(i);
        j0 = j0.min(j);
        j1 = j1.max(j);
    }
    for i in i0..=i1 {
        for j in j0..=j1 {
            let p = (i, j);
            let inside = (0..hull.len()).all(|k| {
                let a = hull[k];
                let b = hull[(k + 1) % hull.len()];
                cross(a, b, p) >= 0
            });
            if inside {
                out.data[i as usize * m.w + j as usize] = 1;
            }
        }
    }
    Ok(out)
}

/// Smooth closed blob around the (outward-jittered) bounding box of the
/// mask: the box is padded, its corners replaced by cubic arcs, and the
/// interior filled. Degenerate single-pixel masks fall back to dilation.
pub fn bezier_bbox_mask(m: &BinaryMask, rng: &mut Rng, jitter: f64) -> Result<BinaryMask> {
    let Some((i0, j0, i1, j1)) = m.bbox() else {
        bail_mask!("bezier_bbox_mask of empty mask");
    };
    if m.count_ones() == 1 {
        return Ok(dilate(m, 2));
    }
    let jitter = jitter.max(0.0);
    // outward-only padding per side; the +2 margin keeps the corner arcs
    // clear of the original box
    let pad_t = 2.0 + rng.uniform_in(0.0, jitter);
    let pad_b = 2.0 + rng.uniform_in(0.0, jitter);
    let pad_l = 2.0 + rng.uniform_in(0.0, jitter);
    let pad_r = 2.0 + rng.uniform_in(0.0, jitter);
    let top = i0 as f64 - pad_t;
    let bot = i1 as f64 + pad_b;
    let left = j0 as f64 - pad_l;
    let right = j1 as f64 + pad_r;
    let k = 2.0f64.min((bot - top) / 2.0).min((right - left) / 2.0);
    let kappa = 0.5523;

    // clockwise in (row, col): top edge -> right -> bottom -> left
    let mut poly: Vec<(f64, f64)> = Vec::new();
    let arc = |p0: (f64, f64), c0: (f64, f64), c1: (f64, f64), p1: (f64, f64), poly: &mut Vec<(f64, f64)>| {
        const SAMPLES: usize = 24;
        for s in 0..=SAMPLES {
            let t = s as f64 / SAMPLES as f64;
            let u = 1.0 - t;
            let r = u * u * u * p0.0 + 3.0 * u * u * t * c0.0 + 3.0 * u * t * t * c1.0 + t * t * t * p1.0;
            let c = u * u * u * p0.1 + 3.0 * u * u * t * c0.1 + 3.0 * u * t * t * c1.1 + t * t * t * p1.1;
            poly.push((r, c));
        }
    };
    // top-left corner arc endpoints
    arc(
        (top + k, left),
        (top + k * (1.0 - kappa), left),
        (top, left + k * (1.0 - kappa)),
        (top, left + k),
        &mut poly,
    );
    poly.push((top, right - k));
    arc(
        (top, right - k),
        (top, right - k * (1.0 - kappa)),
        (top + k * (1.0 - kappa), right),
        (top + k, right),
        &mut poly,
    );
    poly.push((bot - k, right));
    arc(
        (bot - k, right),
        (bot - k * (1.0 - kappa), right),
        (bot, right - k * (1.0 - kappa)),
        (bot, right - k),
        &mut poly,
    );
    poly.push((bot, left + k));
    arc(
        (bot, left + k),
        (bot, left + k * (1.0 - kappa)),
        (bot - k * (1.0 - kappa), left),
        (bot - k, left),
        &mut poly,
    );
    poly.push((top + k, left));

    // the blob is convex: inside = never on the left of any CW edge
    let mut out = BinaryMask::filled(m.h, m.w, 0);
    let lo_i = math::floor(top).max(0.0) as usize;
    let hi_i = (math::ceil(bot) as usize).min(m.h.saturating_sub(1));
    let lo_j = math::floor(left).max(0.0) as usize;
    let hi_j = (math::ceil(right) as usize).min(m.w.saturating_sub(1));
    for i in lo_i..=hi_i {
        for j in lo_j..=hi_j {
            let p = (i as f64, j as f64);
            let mut inside = true;
            for win in 0..poly.len() {
                let a = poly[win];
                let b = poly[(win + 1) % poly.len()];
                let cr = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cr > 1e-9 {
                    inside = false;
                    break;
                }
            }
            if inside {
                out.data[i * m.w + j] = 1;
            }
        }
    }
    // the blob must cover the precise mask
    Ok(out.union(m))
}

/// Nearest-neighbor downsampling; output stays strictly binary.
pub fn downsample_mask(m: &BinaryMask, h2: usize, w2: usize) -> Result<BinaryMask> {
    if h2 > m.h || w2 > m.w {
        bail_param!(
            "downsample target {h2}x{w2} larger than source {}x{}",
            m.h,
            m.w
        );
    }
    if h2 == 0 || w2 == 0 {
        bail_param!("downsample target must be nonzero");
    }
    let mut out = BinaryMask::filled(h2, w2, 0);
    for i in 0..h2 {
        let si = i * m.h / h2;
        for j in 0..w2 {
            let sj = j * m.w / w2;
            out.data[i * w2 + j] = m.data[si * m.w + sj];
        }
    }
    Ok(out)
}
