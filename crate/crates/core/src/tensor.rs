//! Dense row-major f64 tensors and the matmul kernel everything reduces to.
//!
//! The kernel is a 4x8 register-blocked GEMM. For small inner dimensions the
//! B panel is streamed directly; for large ones it is packed into a
//! contiguous scratch tile first, which keeps the panel in L1 across the
//! row tiles. Accumulation order is fixed, so results are bit-reproducible
//! regardless of how callers parallelize at higher levels.

use crate::error::{bail_shape, Result};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interpret as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Interpret as (channels, height, width).
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape to incompatible size"
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_same_shape(&self, other: &Tensor, ctx: &str) -> Result<()> {
        if !self.same_shape(other) {
            bail_shape!("{ctx}: {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(self.same_shape(other), "shape mismatch in binary op");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) {
        assert!(self.same_shape(other), "shape mismatch in add_scaled");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// C = A · B for rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_acc(m, k, n, &self.data, &other.data, &mut out.data);
        out
    }

    /// Rank-2 transpose.
    pub fn transposed(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = Tensor::zeros(&[c, r]);
        transpose_into(&self.data, &mut out.data, r, c);
        out
    }
}

pub fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    // Blocked to keep both sides cache-friendly for the big activation maps.
    const B: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + B).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + B).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn micro_kernel(
    k: usize,
    a: &[f64],
    astride: usize,
    bpanel: &[f64],
    bstride: usize,
    acc: &mut [[f64; NR]; MR],
) {
    for kk in 0..k {
        let bk = &bpanel[kk * bstride..kk * bstride + NR];
        for (r, accr) in acc.iter_mut().enumerate() {
            let av = a[r * astride + kk];
            for (x, &bv) in accr.iter_mut().zip(bk.iter()) {
                *x += av * bv;
            }
        }
    }
}

/// C += A · B with A: m x k, B: k x n, C: m x n, all row-major.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Streaming B directly is fastest while the k x NR panel fits in L1;
    // beyond that the strided panel walk thrashes, so pack it.
    let pack_b = k > 128 || n % NR != 0;
    let mut pack: Vec<f64> = if pack_b { vec![0.0; k * NR] } else { Vec::new() };

    let mut j = 0;
    while j < n {
        let jw = NR.min(n - j);
        if pack_b {
            for kk in 0..k {
                let dst = &mut pack[kk * NR..(kk + 1) * NR];
                dst[..jw].copy_from_slice(&b[kk * n + j..kk * n + j + jw]);
                for x in &mut dst[jw..] {
                    *x = 0.0;
                }
            }
        }
        let mut i = 0;
        while i < m {
            let iw = MR.min(m - i);
            let mut acc = [[0.0f64; NR]; MR];
            if iw == MR {
                if pack_b {
                    micro_kernel(k, &a[i * k..], k, &pack, NR, &mut acc);
                } else {
                    micro_kernel(k, &a[i * k..], k, &b[j..], n, &mut acc);
                }
            } else {
                // ragged row tail: same panel walk, fewer accumulator rows
                for kk in 0..k {
                    let bk = if pack_b {
                        &pack[kk * NR..kk * NR + NR]
                    } else {
                        &b[kk * n + j..kk * n + j + jw]
                    };
                    for (r, accr) in acc.iter_mut().enumerate().take(iw) {
                        let av = a[(i + r) * k + kk];
                        for (x, &bv) in accr.iter_mut().zip(bk.iter()) {
                            *x += av * bv;
                        }
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate().take(iw) {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + jw];
                for (cv, &av) in crow.iter_mut().zip(accr.iter()) {
                    *cv += av;
                }
            }
            i += MR;
        }
        j += NR;
    }
}
