//! Orthonormal type-II DCT and its inverse, separable over tensor axes.
//!
//! The 1-D basis is the orthonormal DCT-II matrix
//! `B[k][i] = s_k * cos(pi * (2i + 1) * k / (2n))` with `s_0 = sqrt(1/n)`
//! and `s_k = sqrt(2/n)` otherwise, so `B * B^T = I` and the adjoint of the
//! forward transform equals its inverse. That makes the gradient of a
//! forward-DCT node exactly an inverse DCT of the upstream gradient, with no
//! normalization bookkeeping.
//!
//! Transforms are implemented as three (or two) axis passes of small dense
//! matrix products; patch sides never exceed a few dozen, where direct
//! multiplication is fast and exact enough.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::tensor::Tensor;

/// Precomputed 1-D orthonormal DCT-II basis for one axis length.
#[derive(Debug)]
pub struct Dct1d {
    n: usize,
    /// Row-major (n x n); `basis[k * n + i]` maps input i to coefficient k.
    basis: Vec<f64>,
}

impl Dct1d {
    pub fn new(n: usize) -> Dct1d {
        assert!(n >= 1);
        let mut basis = vec![0.0; n * n];
        let norm0 = (1.0 / n as f64).sqrt();
        let norm = (2.0 / n as f64).sqrt();
        for k in 0..n {
            let s = if k == 0 { norm0 } else { norm };
            for i in 0..n {
                let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64;
                basis[k * n + i] = s * angle.cos();
            }
        }
        Dct1d { n, basis }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }
}

/// Shareable set of 1-D bases covering the axis lengths of a shape.
/// Immutable after construction; cheap to clone.
#[derive(Clone, Debug)]
pub struct DctPlan {
    by_len: Arc<BTreeMap<usize, Dct1d>>,
}

impl DctPlan {
    /// Plan covering every axis length in `shape`.
    pub fn for_shape(shape: &[usize]) -> DctPlan {
        let mut by_len = BTreeMap::new();
        for &n in shape {
            by_len.entry(n).or_insert_with(|| Dct1d::new(n));
        }
        DctPlan { by_len: Arc::new(by_len) }
    }

    fn get(&self, n: usize) -> &Dct1d {
        self.by_len
            .get(&n)
            .unwrap_or_else(|| panic!("DCT plan has no basis for axis length {n}"))
    }

    pub fn covers(&self, shape: &[usize]) -> bool {
        shape.iter().all(|n| self.by_len.contains_key(n))
    }
}

/// One separable pass along `axis`. `inverse` applies the transposed basis.
fn apply_axis(t: &Tensor, axis: usize, basis: &Dct1d, inverse: bool) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    assert_eq!(n, basis.len(), "axis {axis} length {n} does not match basis");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    let b = basis.basis();

    if inner == 1 {
        // contiguous lines: plain matrix-vector per line
        for o in 0..outer {
            let line = &src[o * n..(o + 1) * n];
            let dst = &mut out[o * n..(o + 1) * n];
            for k in 0..n {
                let mut acc = 0.0;
                if inverse {
                    for (i, &x) in line.iter().enumerate() {
                        acc += b[i * n + k] * x;
                    }
                } else {
                    let row = &b[k * n..(k + 1) * n];
                    for (i, &x) in line.iter().enumerate() {
                        acc += row[i] * x;
                    }
                }
                dst[k] = acc;
            }
        }
    } else {
        // strided lines: accumulate whole inner rows at once
        for o in 0..outer {
            let block = o * n * inner;
            for k in 0..n {
                let dst_start = block + k * inner;
                for i in 0..n {
                    let coef = if inverse { b[i * n + k] } else { b[k * n + i] };
                    if coef == 0.0 {
                        continue;
                    }
                    let src_row = &src[block + i * inner..block + (i + 1) * inner];
                    let dst_row = &mut out[dst_start..dst_start + inner];
                    for (d, &s) in dst_row.iter_mut().zip(src_row) {
                        *d += coef * s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

fn spatial_axes(rank: usize, count: usize) -> std::ops::Range<usize> {
    assert!(rank >= count, "tensor rank {rank} has no {count} trailing spatial axes");
    rank - count..rank
}

/// Forward 3D DCT over the last three axes (per leading channel, if any).
pub fn dct3(t: &Tensor, plan: &DctPlan) -> Tensor {
    let mut out = t.clone();
    for axis in spatial_axes(t.rank(), 3) {
        out = apply_axis(&out, axis, plan.get(out.shape()[axis]), false);
    }
    out
}

/// Inverse 3D DCT over the last three axes.
pub fn idct3(t: &Tensor, plan: &DctPlan) -> Tensor {
    let mut out = t.clone();
    for axis in spatial_axes(t.rank(), 3) {
        out = apply_axis(&out, axis, plan.get(out.shape()[axis]), true);
    }
    out
}

/// Forward 2D DCT applied to each depth slice independently: transforms the
/// (H, W) axes and leaves the trailing depth axis untouched.
pub fn dct2_slices(t: &Tensor, plan: &DctPlan) -> Tensor {
    let r = t.rank();
    assert!(r >= 3);
    let mut out = apply_axis(t, r - 3, plan.get(t.shape()[r - 3]), false);
    out = apply_axis(&out, r - 2, plan.get(t.shape()[r - 2]), false);
    out
}

/// Inverse of `dct2_slices`.
pub fn idct2_slices(t: &Tensor, plan: &DctPlan) -> Tensor {
    let r = t.rank();
    assert!(r >= 3);
    let mut out = apply_axis(t, r - 3, plan.get(t.shape()[r - 3]), true);
    out = apply_axis(&out, r - 2, plan.get(t.shape()[r - 2]), true);
    out
}
