//! Radix-2 FFT for power-of-two grids, enough for the frequency-domain
//! guidance and the amplitude diagnostics. Unnormalized forward transform;
//! the inverse divides by N.

use crate::error::{bail_param, Result};
use crate::math;
use alloc::vec;
use alloc::vec::Vec;

/// Complex 2-D spectrum stored as separate real/imaginary planes (h x w).
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(h: usize, w: usize) -> Spectrum {
        Spectrum {
            h,
            w,
            re: vec![0.0; h * w],
            im: vec![0.0; h * w],
        }
    }

    /// Magnitude at a bin.
    pub fn amplitude(&self, i: usize, j: usize) -> f64 {
        let idx = i * self.w + j;
        math::hypot(self.re[idx], self.im[idx])
    }
}

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

pub fn check_pow2_dims(h: usize, w: usize) -> Result<()> {
    if !is_pow2(h) || !is_pow2(w) {
        bail_param!("spatial dims must be powers of two, got {h}x{w}");
    }
    Ok(())
}

/// In-place iterative radix-2 transform of one line of length n (power of 2).
fn fft_line(re: &mut [f64], im: &mut [f64], invert: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if invert { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * math::PI / len as f64;
        let (wr, wi) = (math::cos(ang), math::sin(ang));
        let mut i = 0;
        while i < n {
            let mut cr = 1.0;
            let mut ci = 0.0;
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
    if invert {
        let inv = 1.0 / n as f64;
        for x in re.iter_mut() {
            *x *= inv;
        }
        for x in im.iter_mut() {
            *x *= inv;
        }
    }
}

fn fft2_inplace(s: &mut Spectrum, invert: bool) {
    let (h, w) = (s.h, s.w);
    for i in 0..h {
        fft_line(&mut s.re[i * w..(i + 1) * w], &mut s.im[i * w..(i + 1) * w], invert);
    }
    let mut cre = vec![0.0; h];
    let mut cim = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            cre[i] = s.re[i * w + j];
            cim[i] = s.im[i * w + j];
        }
        fft_line(&mut cre, &mut cim, invert);
        for i in 0..h {
            s.re[i * w + j] = cre[i];
            s.im[i * w + j] = cim[i];
        }
    }
}

/// Forward 2-D transform of a real plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Spectrum {
    debug_assert!(is_pow2(h) && is_pow2(w));
    debug_assert_eq!(plane.len(), h * w);
    let mut s = Spectrum {
        h,
        w,
        re: plane.to_vec(),
        im: vec![0.0; h * w],
    };
    fft2_inplace(&mut s, false);
    s
}

/// Inverse 2-D transform; returns (real, imaginary) planes.
pub fn ifft2(s: &Spectrum) -> (Vec<f64>, Vec<f64>) {
    let mut t = s.clone();
    fft2_inplace(&mut t, true);
    (t.re, t.im)
}

/// Swap quadrants so the DC bin lands at (h/2, w/2). Self-inverse for the
/// even sizes used here.
pub fn fftshift(s: &Spectrum) -> Spectrum {
    let (h, w) = (s.h, s.w);
    let mut out = Spectrum::zeros(h, w);
    for i in 0..h {
        let si = (i + h / 2) % h;
        for j in 0..w {
            let sj = (j + w / 2) % w;
            out.re[si * w + sj] = s.re[i * w + j];
            out.im[si * w + sj] = s.im[i * w + j];
        }
    }
    out
}
