//! Spatial primitives over `[H×W×C]` feature maps: same-padded stride-1
//! convolution, 2×2 ceil-mode max pooling and the 1×1 stride-2 transposed
//! convolution used by the decoder.

#[cfg(target_arch = "x86_64")]
use super::simd;
use super::{expect_rank, gemm, Real, Tensor};
use crate::error::{Error, Result};

fn conv_dims<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    expect_rank(input, 3, "conv2d")?;
    expect_rank(kernels, 4, "conv2d")?;
    let (h, w, c) = (input.dim(0), input.dim(1), input.dim(2));
    let (k, k2, kc, f) = (kernels.dim(0), kernels.dim(1), kernels.dim(2), kernels.dim(3));
    if k != k2 || k % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: kernels.shape().to_vec(),
            reason: "conv2d kernels must be square with odd size".into(),
        });
    }
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d (channels)",
            left: input.shape().to_vec(),
            right: kernels.shape().to_vec(),
        });
    }
    if bias.shape() != [f] {
        return Err(Error::ShapeMismatch {
            op: "conv2d (bias)",
            left: kernels.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok((h, w, c, k, f))
}

/// Unrolls every k×k zero-padded window into a row: `[H·W × k·k·C]`, with
/// column index `(ky·k + kx)·C + c` matching the kernel layout.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let row_len = k * k * c;
    let mut cols = vec![T::zero(); h * w * row_len];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..][..row_len];
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let kx_lo = (pad - xx as isize).max(0) as usize;
                let kx_hi = (w as isize - xx as isize + pad).min(k as isize) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                let ix0 = (xx as isize + kx_lo as isize - pad) as usize;
                let span = (kx_hi - kx_lo) * c;
                let src = &x[(iy as usize * w + ix0) * c..][..span];
                row[(ky * k + kx_lo) * c..][..span].copy_from_slice(src);
            }
        }
    }
    cols
}

/// Zero-padded channel planes `[C × (H+2p) × Wp]` where `Wp` leaves room for
/// full tile-wide reads past the right edge.
fn padded_planes<T: Real>(x: &[T], h: usize, w: usize, c: usize, pad: usize, wp: usize) -> Vec<T> {
    let hp = h + 2 * pad;
    let mut planes = vec![T::zero(); c * hp * wp];
    for y in 0..h {
        for xx in 0..w {
            for (ch, &v) in x[(y * w + xx) * c..][..c].iter().enumerate() {
                planes[ch * hp * wp + (y + pad) * wp + xx + pad] = v;
            }
        }
    }
    planes
}

/// `[H×W×F]` → `[H × Wt/TW × F × TW]`, zero-filled past column `W`, so the
/// `F×TW` gradients of one output tile are contiguous.
fn grad_tiles<T: Real, const F: usize, const TW: usize>(g: &[T], h: usize, w: usize, wt: usize) -> Vec<T> {
    let mut tiles = vec![T::zero(); h * wt * F];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * wt + xx / TW * TW) * F + xx % TW;
            for ff in 0..F {
                tiles[base + ff * TW] = g[(y * w + xx) * F + ff];
            }
        }
    }
    tiles
}

/// Direct same-padded convolution for narrow outputs (im2col + GEMM wastes
/// most of its work when `F` is small). Each step keeps an `F×TW` block of
/// outputs in registers.
fn direct_forward<T: Real, const F: usize, const TW: usize>(
    x: &[T],
    kern: &[T],
    bias: &[T],
    (h, w, c, k): (usize, usize, usize, usize),
    allow_simd: bool,
) -> Vec<T> {
    let pad = k / 2;
    let wt = w.div_ceil(TW) * TW;
    let (hp, wp) = (h + 2 * pad, wt + 2 * pad);
    let planes = padded_planes(x, h, w, c, pad, wp);
    let mut out = vec![T::zero(); h * w * F];
    #[cfg(target_arch = "x86_64")]
    if let (true, true, Some(p), Some(kf), Some(bf), Some(o)) = (
        allow_simd,
        simd::available(),
        simd::as_f32(&planes),
        simd::as_f32(kern),
        simd::as_f32(bias),
        simd::as_f32_mut(&mut out),
    ) {
        let g = simd::Geometry { h, w, c, k, wt, wp };
        // SAFETY: AVX2 support was checked by `available`.
        match TW {
            8 => unsafe { simd::forward::<F, 1>(p, kf, bf, g, o) },
            16 => unsafe { simd::forward::<F, 2>(p, kf, bf, g, o) },
            _ => unreachable!("tile width {TW}"),
        }
        return out;
    }
    for y in 0..h {
        for x0 in (0..wt).step_by(TW) {
            let mut acc = [[T::zero(); TW]; F];
            for ch in 0..c {
                let plane = &planes[ch * hp * wp..][..hp * wp];
                for ky in 0..k {
                    let row = &plane[(y + ky) * wp + x0..];
                    for kx in 0..k {
                        let s: &[T; TW] = row[kx..kx + TW].try_into().expect("tile");
                        let wts = &kern[((ky * k + kx) * c + ch) * F..][..F];
                        for (a, &wt) in acc.iter_mut().zip(wts) {
                            for j in 0..TW {
                                a[j] += wt * s[j];
                            }
                        }
                    }
                }
            }
            for j in 0..TW.min(w - x0.min(w)) {
                let px = &mut out[(y * w + x0 + j) * F..][..F];
                for ff in 0..F {
                    px[ff] = acc[ff][j] + bias[ff];
                }
            }
        }
    }
    out
}

/// Kernel gradient of [`direct_forward`].
fn direct_kernel_grad<T: Real, const F: usize, const TW: usize>(
    x: &[T],
    grad: &[T],
    (h, w, c, k): (usize, usize, usize, usize),
    allow_simd: bool,
) -> Vec<T> {
    let pad = k / 2;
    let wt = w.div_ceil(TW) * TW;
    let (hp, wp) = (h + 2 * pad, wt + 2 * pad);
    let planes = padded_planes(x, h, w, c, pad, wp);
    let g = grad_tiles::<T, F, TW>(grad, h, w, wt);
    let mut gk = vec![T::zero(); k * k * c * F];
    #[cfg(target_arch = "x86_64")]
    if let (true, true, 8, Some(p), Some(gf), Some(o)) = (
        allow_simd,
        simd::available(),
        TW,
        simd::as_f32(&planes),
        simd::as_f32(&g),
        simd::as_f32_mut(&mut gk),
    ) {
        // SAFETY: AVX2 support was checked by `available`.
        unsafe { simd::kernel_grad::<F>(p, gf, simd::Geometry { h, w, c, k, wt, wp }, o) };
        return gk;
    }
    for ch in 0..c {
        let plane = &planes[ch * hp * wp..][..hp * wp];
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = [[T::zero(); TW]; F];
                for (y, g_row) in g.chunks_exact(wt * F).enumerate() {
                    let row = &plane[(y + ky) * wp + kx..][..wt];
                    for (s, gt) in row.chunks_exact(TW).zip(g_row.chunks_exact(F * TW)) {
                        for (a, gs) in acc.iter_mut().zip(gt.chunks_exact(TW)) {
                            for j in 0..TW {
                                a[j] += gs[j] * s[j];
                            }
                        }
                    }
                }
                let dst = &mut gk[((ky * k + kx) * c + ch) * F..][..F];
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = a.iter().fold(T::zero(), |s, &v| s + v);
                }
            }
        }
    }
    gk
}

/// Stride-1 cross-correlation with `(k−1)/2` zero padding on each side.
///
/// `input: [H×W×C]`, `kernels: [k×k×C×F]`, `bias: [F]` → `[H×W×F]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c, k, f) = conv_dims(input, kernels, bias)?;
    let (x, kd, bd) = (input.data(), kernels.data(), bias.data());
    // Rows narrower than a tile would be mostly padding.
    let direct = match f {
        4 if k > 1 && w >= 16 => Some(direct_forward::<T, 4, 16>(x, kd, bd, (h, w, c, k), true)),
        4 if k > 1 && w >= 8 => Some(direct_forward::<T, 4, 8>(x, kd, bd, (h, w, c, k), true)),
        8 if k > 1 && w >= 8 => Some(direct_forward::<T, 8, 8>(x, kd, bd, (h, w, c, k), true)),
        _ => None,
    };
    if let Some(y) = direct {
        return Tensor::new(&[h, w, f], y);
    }
    let mut out = Tensor::zeros(&[h, w, f]);
    for row in out.data_mut().chunks_exact_mut(f) {
        row.copy_from_slice(bias.data());
    }
    if k == 1 {
        gemm(h * w, c, f, input.data(), false, kernels.data(), false, T::one(), out.data_mut());
    } else {
        let cols = im2col(input.data(), h, w, c, k);
        gemm(h * w, k * k * c, f, &cols, false, kernels.data(), false, T::one(), out.data_mut());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Adjoint of [`conv2d`]. Pass `need_input_grad = false` for layers whose
/// input is data.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    expect_rank(kernels, 4, "conv2d_backward")?;
    let f = kernels.dim(3);
    let (h, w, c, k, _) = conv_dims(input, kernels, &Tensor::zeros(&[f]))?;
    if grad_out.shape() != [h, w, f] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            left: vec![h, w, f],
            right: grad_out.shape().to_vec(),
        });
    }
    let row_len = k * k * c;
    let mut bias = Tensor::zeros(&[f]);
    for row in grad_out.data().chunks_exact(f) {
        for (b, &g) in bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let (x, gd) = (input.data(), grad_out.data());
    let direct = match f {
        4 if k > 1 && w >= 8 => Some(direct_kernel_grad::<T, 4, 8>(x, gd, (h, w, c, k), true)),
        8 if k > 1 && w >= 8 => Some(direct_kernel_grad::<T, 8, 8>(x, gd, (h, w, c, k), true)),
        _ => None,
    };
    let gk = match direct {
        Some(v) => Tensor::new(kernels.shape(), v)?,
        None => {
            let mut gk = Tensor::zeros(kernels.shape());
            let owned_cols;
            let cols: &[T] = if k == 1 {
                x
            } else {
                owned_cols = im2col(x, h, w, c, k);
                &owned_cols
            };
            gemm(row_len, h * w, f, cols, true, gd, false, T::zero(), gk.data_mut());
            gk
        }
    };
    let input = if !need_input_grad {
        None
    } else if k == 1 {
        let mut gx = Tensor::zeros(&[h, w, c]);
        gemm(h * w, f, c, gd, false, kernels.data(), true, T::zero(), gx.data_mut());
        Some(gx)
    } else {
        // Correlating the output gradient with the spatially flipped,
        // channel-transposed kernel gives the input gradient.
        let flipped = Tensor::from_fn(&[k, k, f, c], |i| {
            let (ky, kx, ff, ch) = (i / (k * f * c), (i / (f * c)) % k, (i / c) % f, i % c);
            kernels.data()[(((k - 1 - ky) * k + (k - 1 - kx)) * c + ch) * f + ff]
        });
        Some(conv2d(grad_out, &flipped, &Tensor::zeros(&[c]))?)
    };
    Ok(Conv2dGrads { input, kernels: gk, bias })
}

/// Output extent of 2-wide, stride-2, ceil-mode pooling.
pub fn pooled_extent(extent: usize) -> usize {
    extent.div_ceil(2)
}

#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input offset that won each output element.
    pub argmax: Vec<usize>,
}

/// 2×2 stride-2 max pooling in ceil mode; edge windows may be truncated.
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<PoolOutput<T>> {
    expect_rank(input, 3, "maxpool2d")?;
    let (h, w, c) = (input.dim(0), input.dim(1), input.dim(2));
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let x = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * c;
            let first = (2 * oy * w + 2 * ox) * c;
            out[base..base + c].copy_from_slice(&x[first..first + c]);
            for (ch, a) in argmax[base..base + c].iter_mut().enumerate() {
                *a = first + ch;
            }
            for dy in 0..2 {
                for dx in 0..2 {
                    let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                    if (dy == 0 && dx == 0) || iy >= h || ix >= w {
                        continue;
                    }
                    let off = (iy * w + ix) * c;
                    for ch in 0..c {
                        if x[off + ch] > out[base + ch] {
                            out[base + ch] = x[off + ch];
                            argmax[base + ch] = off + ch;
                        }
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(&[oh, ow, c], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_backward",
            left: vec![argmax.len()],
            right: grad_out.shape().to_vec(),
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&a, &g) in argmax.iter().zip(grad_out.data()) {
        d[a] += g;
    }
    Ok(gx)
}

fn tconv_dims<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    expect_rank(input, 3, "transposed_conv2d")?;
    expect_rank(kernels, 4, "transposed_conv2d")?;
    if kernels.dim(0) != 1 || kernels.dim(1) != 1 {
        return Err(Error::InvalidShape {
            shape: kernels.shape().to_vec(),
            reason: "transposed_conv2d supports 1×1 kernels only".into(),
        });
    }
    if kernels.dim(2) != input.dim(2) {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2d (channels)",
            left: input.shape().to_vec(),
            right: kernels.shape().to_vec(),
        });
    }
    Ok((input.dim(0), input.dim(1), input.dim(2), kernels.dim(3)))
}

/// 1×1 transposed convolution with stride 2 and one row/column of output
/// padding, so both spatial extents exactly double.
///
/// `out[2i, 2j, f] = Σ_c in[i, j, c]·K[c, f] + b[f]`; every other position
/// holds `b[f]`.
pub fn transposed_conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c, f) = tconv_dims(input, kernels)?;
    if bias.shape() != [f] {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2d (bias)",
            left: kernels.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut proj = vec![T::zero(); h * w * f];
    gemm(h * w, c, f, input.data(), false, kernels.data(), false, T::zero(), &mut proj);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[oh, ow, f]);
    let od = out.data_mut();
    for row in od.chunks_exact_mut(f) {
        row.copy_from_slice(bias.data());
    }
    for i in 0..h {
        for j in 0..w {
            let dst = &mut od[((2 * i) * ow + 2 * j) * f..][..f];
            for (d, &p) in dst.iter_mut().zip(&proj[(i * w + j) * f..][..f]) {
                *d += p;
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (h, w, c, f) = tconv_dims(input, kernels)?;
    let ow = 2 * w;
    if grad_out.shape() != [2 * h, ow, f] {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2d_backward",
            left: vec![2 * h, ow, f],
            right: grad_out.shape().to_vec(),
        });
    }
    let g = grad_out.data();
    let mut bias = Tensor::zeros(&[f]);
    for row in g.chunks_exact(f) {
        for (b, &v) in bias.data_mut().iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut g_even = vec![T::zero(); h * w * f];
    for i in 0..h {
        for j in 0..w {
            g_even[(i * w + j) * f..][..f].copy_from_slice(&g[((2 * i) * ow + 2 * j) * f..][..f]);
        }
    }
    let mut gk = Tensor::zeros(kernels.shape());
    gemm(c, h * w, f, input.data(), true, &g_even, false, T::zero(), gk.data_mut());
    let mut gx = Tensor::zeros(&[h, w, c]);
    gemm(h * w, f, c, &g_even, false, kernels.data(), true, T::zero(), gx.data_mut());
    Ok(Conv2dGrads {
        input: Some(gx),
        kernels: gk,
        bias,
    })
}
