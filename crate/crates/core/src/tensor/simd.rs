//! AVX2 versions of the direct convolution loops for `f32`. Every lane does
//! the same multiply then add as the portable loops in `conv`, in the same
//! order, so the results agree bit for bit.

use std::any::TypeId;
use std::arch::x86_64::*;

use super::Real;

pub(super) fn available() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

pub(super) fn as_f32<T: Real>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: T is f32, checked through TypeId.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) })
}

pub(super) fn as_f32_mut<T: Real>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: T is f32, checked through TypeId.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) })
}

/// Geometry shared by the padded-plane loops.
#[derive(Clone, Copy)]
pub(super) struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    /// `w` rounded up to the tile width.
    pub wt: usize,
    /// Padded plane row length.
    pub wp: usize,
}

impl Geometry {
    fn hp(&self) -> usize {
        self.h + 2 * (self.k / 2)
    }
}

/// Forward pass over `[C × Hp × Wp]` planes with an `F × 8·NV` register tile.
///
/// # Safety
/// The CPU must support AVX2.
#[target_feature(enable = "avx2")]
pub(super) unsafe fn forward<const F: usize, const NV: usize>(planes: &[f32], kern: &[f32], bias: &[f32], g: Geometry, out: &mut [f32]) {
    let Geometry { h, w, c, k, wt, wp } = g;
    let hp = g.hp();
    assert!(wt % (8 * NV) == 0 && wp >= wt + k - 1);
    assert!(planes.len() >= c * hp * wp && kern.len() >= k * k * c * F && bias.len() >= F && out.len() >= h * w * F);
    let mut lanes = [0f32; 8];
    for y in 0..h {
        for x0 in (0..wt).step_by(8 * NV) {
            let mut acc = [[_mm256_setzero_ps(); NV]; F];
            for ch in 0..c {
                for ky in 0..k {
                    // SAFETY: rows stay inside the plane by the asserts above.
                    let row = unsafe { planes.as_ptr().add(ch * hp * wp + (y + ky) * wp + x0) };
                    for kx in 0..k {
                        let mut s = [_mm256_setzero_ps(); NV];
                        for (v, sv) in s.iter_mut().enumerate() {
                            *sv = unsafe { _mm256_loadu_ps(row.add(kx + 8 * v)) };
                        }
                        // SAFETY: within `kern` by the asserts above.
                        let wts = unsafe { kern.as_ptr().add(((ky * k + kx) * c + ch) * F) };
                        for (ff, a) in acc.iter_mut().enumerate() {
                            let wv = unsafe { _mm256_broadcast_ss(&*wts.add(ff)) };
                            for v in 0..NV {
                                a[v] = _mm256_add_ps(a[v], _mm256_mul_ps(wv, s[v]));
                            }
                        }
                    }
                }
            }
            for (ff, a) in acc.iter().enumerate() {
                for (v, &av) in a.iter().enumerate() {
                    unsafe { _mm256_storeu_ps(lanes.as_mut_ptr(), av) };
                    for (j, &l) in lanes.iter().enumerate() {
                        let xx = x0 + 8 * v + j;
                        if xx < w {
                            out[(y * w + xx) * F + ff] = l + bias[ff];
                        }
                    }
                }
            }
        }
    }
}

/// Kernel-gradient sums of `KB` adjacent kernel columns from `kx0`.
#[target_feature(enable = "avx2")]
unsafe fn kernel_grad_block<const F: usize, const KB: usize>(plane: &[f32], gt: &[f32], g: Geometry, ky: usize, kx0: usize) -> [[f32; F]; KB] {
    let Geometry { h, wt, wp, .. } = g;
    assert!(wt % 8 == 0 && plane.len() >= (h - 1 + ky) * wp + kx0 + wt + KB - 1 && gt.len() >= h * wt * F);
    let mut acc = [[_mm256_setzero_ps(); F]; KB];
    for y in 0..h {
        let row = unsafe { plane.as_ptr().add((y + ky) * wp + kx0) };
        let grow = unsafe { gt.as_ptr().add(y * wt * F) };
        for t in 0..wt / 8 {
            let mut gv = [_mm256_setzero_ps(); F];
            for (ff, v) in gv.iter_mut().enumerate() {
                *v = unsafe { _mm256_loadu_ps(grow.add((t * F + ff) * 8)) };
            }
            for (b, ab) in acc.iter_mut().enumerate() {
                let s = unsafe { _mm256_loadu_ps(row.add(t * 8 + b)) };
                for (a, &gs) in ab.iter_mut().zip(&gv) {
                    *a = _mm256_add_ps(*a, _mm256_mul_ps(gs, s));
                }
            }
        }
    }
    let mut sums = [[0f32; F]; KB];
    let mut lanes = [0f32; 8];
    for (sb, ab) in sums.iter_mut().zip(&acc) {
        for (d, &a) in sb.iter_mut().zip(ab) {
            unsafe { _mm256_storeu_ps(lanes.as_mut_ptr(), a) };
            *d = lanes.iter().fold(0.0, |s, &v| s + v);
        }
    }
    sums
}

/// Kernel gradient from padded planes and `[H × Wt/8 × F × 8]` gradient
/// tiles, pairing kernel columns when `F = 4`.
///
/// # Safety
/// The CPU must support AVX2.
#[target_feature(enable = "avx2")]
pub(super) unsafe fn kernel_grad<const F: usize>(planes: &[f32], gt: &[f32], g: Geometry, gk: &mut [f32]) {
    let Geometry { c, k, wp, .. } = g;
    let hp = g.hp();
    assert!(gk.len() >= k * k * c * F);
    for ch in 0..c {
        let plane = &planes[ch * hp * wp..][..hp * wp];
        for ky in 0..k {
            let mut kx = 0;
            if F == 4 {
                while kx + 2 <= k {
                    let sums = unsafe { kernel_grad_block::<F, 2>(plane, gt, g, ky, kx) };
                    for (b, s) in sums.iter().enumerate() {
                        gk[((ky * k + kx + b) * c + ch) * F..][..F].copy_from_slice(s);
                    }
                    kx += 2;
                }
            }
            for kx in kx..k {
                let sums = unsafe { kernel_grad_block::<F, 1>(plane, gt, g, ky, kx) };
                gk[((ky * k + kx) * c + ch) * F..][..F].copy_from_slice(&sums[0]);
            }
        }
    }
}
