use rand::Rng;

use super::{expect_rank, gemm, Real, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-6;

/// `c = a · b` for `a: [M×K]`, `b: [K×N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), c.data_mut());
    Ok(c)
}

/// Adjoint of [`matmul`]: `(grad_c·bᵀ, aᵀ·grad_c)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_c: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_rank(a, 2, "matmul_backward")?;
    expect_rank(b, 2, "matmul_backward")?;
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    if b.dim(0) != k || grad_c.shape() != [m, n] {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut ga = Tensor::zeros(&[m, k]);
    gemm(m, n, k, grad_c.data(), false, b.data(), true, T::zero(), ga.data_mut());
    let mut gb = Tensor::zeros(&[k, n]);
    gemm(k, m, n, a.data(), true, grad_c.data(), false, T::zero(), gb.data_mut());
    Ok((ga, gb))
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let d = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(d[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                d[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                d[at(j)] /= total;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`softmax`] given its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, grad_y: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if y.shape() != grad_y.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_backward",
            left: y.shape().to_vec(),
            right: grad_y.shape().to_vec(),
        });
    }
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), grad_y.data());
    let out = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Ok(gx)
}

/// Fully connected layer: `x·w + b` with `b` broadcast over rows.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "dense")?;
    expect_rank(w, 2, "dense")?;
    let (n, din) = (x.dim(0), x.dim(1));
    let dout = w.dim(1);
    if w.dim(0) != din {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[n, dout]);
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        for row in y.data_mut().chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, din, dout, x.data(), false, w.data(), false, T::one(), y.data_mut());
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad_y: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (input, weight) = matmul_backward(x, w, grad_y)?;
    let dout = w.dim(1);
    let mut bias = Tensor::zeros(&[dout]);
    for row in grad_y.data().chunks_exact(dout) {
        for (b, &g) in bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(DenseGrads { input, weight, bias })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Adjoint of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_y.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let mut g = grad_y.clone();
    for (gv, &v) in g.data_mut().iter_mut().zip(x.data()) {
        let t = (c * (v + a * v * v * v)).tanh();
        let dinner = c * (T::one() + three * a * v * v);
        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * dinner;
        *gv *= d;
    }
    g
}

#[derive(Debug, Clone)]
pub struct DropoutOutput<T> {
    pub output: Tensor<T>,
    /// Per-element multiplier (`0` or `1/(1−rate)`); `None` in eval mode.
    pub mask: Option<Tensor<T>>,
}

/// Inverted dropout. In eval mode (or with `rate == 0`) this is the identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<DropoutOutput<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(DropoutOutput {
            output: x.clone(),
            mask: None,
        });
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(x.shape(), |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    let mut output = x.clone();
    for (o, &m) in output.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    Ok(DropoutOutput {
        output,
        mask: Some(mask),
    })
}

pub fn dropout_backward<T: Real>(mask: Option<&Tensor<T>>, grad_y: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_y.clone();
    if let Some(mask) = mask {
        for (gv, &m) in g.data_mut().iter_mut().zip(mask.data()) {
            *gv *= m;
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized input before the affine transform.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Row-wise layer normalization over the last axis of `x: [N×D]`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    expect_rank(x, 2, "layer_norm")?;
    let d = x.dim(1);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps {eps} must be > 0")));
    }
    let eps = T::from_f64_lossy(eps);
    let dn = T::from_usize(d).unwrap();
    let mut normalized = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.dim(0));
    for (nrow, yrow) in normalized
        .data_mut()
        .chunks_exact_mut(d)
        .zip(y.data_mut().chunks_exact_mut(d))
    {
        let mean = nrow.iter().copied().sum::<T>() / dn;
        let var = nrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (j, (nv, yv)) in nrow.iter_mut().zip(yrow.iter_mut()).enumerate() {
            *nv = (*nv - mean) * is;
            *yv = *nv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<LayerNormGrads<T>> {
    if cache.normalized.shape() != grad_y.shape() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm_backward",
            left: cache.normalized.shape().to_vec(),
            right: grad_y.shape().to_vec(),
        });
    }
    let d = grad_y.dim(1);
    let dn = T::from_usize(d).unwrap();
    let mut input = Tensor::zeros(grad_y.shape());
    let mut g_gamma = Tensor::zeros(&[d]);
    let mut g_beta = Tensor::zeros(&[d]);
    let rows = cache
        .normalized
        .data()
        .chunks_exact(d)
        .zip(grad_y.data().chunks_exact(d))
        .zip(input.data_mut().chunks_exact_mut(d))
        .zip(&cache.inv_std);
    let mut gxhat = vec![T::zero(); d];
    for (((xhat, gy), gx), &is) in rows {
        for j in 0..d {
            g_gamma.data_mut()[j] += gy[j] * xhat[j];
            g_beta.data_mut()[j] += gy[j];
            gxhat[j] = gy[j] * gamma.data()[j];
        }
        let sum_g: T = gxhat.iter().copied().sum();
        let sum_gx: T = gxhat.iter().zip(xhat).map(|(&g, &x)| g * x).sum();
        for j in 0..d {
            gx[j] = is / dn * (dn * gxhat[j] - sum_g - xhat[j] * sum_gx);
        }
    }
    Ok(LayerNormGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    })
}
