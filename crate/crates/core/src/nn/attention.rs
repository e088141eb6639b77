//! Patch embedding and pre-norm transformer layers.
//!
//! Queries, keys and values all come from one shared layer norm of the token
//! sequence. Each head projects that sequence, applies scaled dot-product
//! attention, and the concatenated heads go through an output projection.

use rand::Rng;

use super::params::{he_uniform, normal_init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    dense, dense_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, softmax,
    softmax_backward, LayerNormCache, Real, Tensor, DEFAULT_LAYER_NORM_EPS,
};

/// How wide each head's Q/K/V projection is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadConvention {
    /// Per-head width `d_k / h`; output projection is `d_k × d_k`.
    SplitDk,
    /// Per-head width `d_k`; output projection is `(h·d_k) × d_k`.
    WholeDk,
}

impl HeadConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadConvention::SplitDk => "split_dk",
            HeadConvention::WholeDk => "whole_dk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "split_dk" => Ok(Self::SplitDk),
            "whole_dk" => Ok(Self::WholeDk),
            other => Err(Error::InvalidConfig(format!("unknown head convention `{other}`"))),
        }
    }
}

/// Denominator of the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScale {
    /// `√(head width)`.
    PerHead,
    /// `√d_k` regardless of the head width.
    Global,
}

impl AttentionScale {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionScale::PerHead => "per_head",
            AttentionScale::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_head" => Ok(Self::PerHead),
            "global" => Ok(Self::Global),
            other => Err(Error::InvalidConfig(format!("unknown attention scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    /// Patch side length `p`.
    pub patch_size: usize,
    /// Token width `d_k`.
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the transformer MLP block (`d_k → hidden → d_k`).
    pub mlp_hidden: usize,
    pub head_convention: HeadConvention,
    pub scale: AttentionScale,
    pub projection_bias: bool,
    pub second_residual: bool,
    /// Layer norm over the tokens after the last transformer layer.
    pub final_norm: bool,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            patch_size: 4,
            model_dim: 16,
            heads: 4,
            layers: 3,
            mlp_hidden: 32,
            head_convention: HeadConvention::SplitDk,
            scale: AttentionScale::PerHead,
            projection_bias: true,
            second_residual: true,
            final_norm: false,
        }
    }
}

impl AttentionSpec {
    pub fn head_dim(&self) -> usize {
        match self.head_convention {
            HeadConvention::SplitDk => self.model_dim / self.heads,
            HeadConvention::WholeDk => self.model_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.model_dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size, d_k, heads and mlp_hidden must be positive: {self:?}"
            )));
        }
        if self.head_convention == HeadConvention::SplitDk && self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide d_k ({})",
                self.heads, self.model_dim
            )));
        }
        Ok(())
    }
}

/// Splits `[H×W×C]` into `p×p` patches, row-major over the patch grid, each
/// flattened row-major: `[N × p·p·C]` with `N = H·W/p²`.
pub fn patchify<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let row = p * p * c;
    let mut out = Tensor::zeros(&[gh * gw, row]);
    let (src, dst) = (x.data(), out.data_mut());
    for py in 0..gh {
        for px in 0..gw {
            let patch = &mut dst[(py * gw + px) * row..][..row];
            for dy in 0..p {
                let from = ((py * p + dy) * w + px * p) * c;
                patch[dy * p * c..][..p * c].copy_from_slice(&src[from..from + p * c]);
            }
        }
    }
    Ok(out)
}

/// Adjoint (and inverse) of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, shape: [usize; 3], p: usize) -> Result<Tensor<T>> {
    let [h, w, c] = shape;
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let row = p * p * c;
    if patches.shape() != [gh * gw, row] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            left: vec![gh * gw, row],
            right: patches.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    let (src, dst) = (patches.data(), out.data_mut());
    for py in 0..gh {
        for px in 0..gw {
            let patch = &src[(py * gw + px) * row..][..row];
            for dy in 0..p {
                let to = ((py * p + dy) * w + px * p) * c;
                dst[to..to + p * c].copy_from_slice(&patch[dy * p * c..][..p * c]);
            }
        }
    }
    Ok(out)
}

fn hwc<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected an [H×W×C] feature map".into(),
        });
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidConfig(format!(
            "patch size {p} does not divide feature map extents {h}×{w}"
        )));
    }
    Ok(())
}

/// Extents after zero-padding each spatial extent up to a multiple of `p`.
pub fn padded_extents(h: usize, w: usize, p: usize) -> (usize, usize) {
    (h.div_ceil(p) * p, w.div_ceil(p) * p)
}

/// Zero-pads the bottom and right edges up to multiples of `p`.
pub fn pad_to_multiple<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    let (ph, pw) = padded_extents(h, w, p);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[ph, pw, c]);
    for y in 0..h {
        out.data_mut()[y * pw * c..][..w * c].copy_from_slice(&x.data()[y * w * c..][..w * c]);
    }
    Ok(out)
}

/// Adjoint of [`pad_to_multiple`]: crops back to `h×w`.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ph, pw, c) = hwc(x)?;
    if h > ph || w > pw {
        return Err(Error::ShapeMismatch {
            op: "crop",
            left: x.shape().to_vec(),
            right: vec![h, w, c],
        });
    }
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        out.data_mut()[y * w * c..][..w * c].copy_from_slice(&x.data()[y * pw * c..][..w * c]);
    }
    Ok(out)
}

/// Learnable γ/β pair for a layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[dim]), true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        layer_norm(x, store.value(self.gamma), store.value(self.beta), DEFAULT_LAYER_NORM_EPS)
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &LayerNormCache<T>,
        grad: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = layer_norm_backward(cache, store.value(self.gamma), grad)?;
        store.accumulate(self.gamma, &g.gamma)?;
        store.accumulate(self.beta, &g.beta)?;
        Ok(g.input)
    }
}

/// Weight and optional bias of one fully connected projection.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), he_uniform(&[din, dout], din, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[dout]), true)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, store.value(self.weight), self.bias.map(|b| store.value(b)))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = dense_backward(x, store.value(self.weight), grad)?;
        store.accumulate(self.weight, &g.weight)?;
        if let Some(b) = self.bias {
            store.accumulate(b, &g.bias)?;
        }
        Ok(g.input)
    }
}

/// `x_i = x_f·W + b + x_pos`.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub projection: Linear,
    pub position: ParamId,
    tokens: usize,
}

impl PatchEmbedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tokens: usize,
        patch_len: usize,
        model_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let projection = Linear::new(store, &format!("{prefix}.projection"), patch_len, model_dim, true, rng)?;
        let position = store.add(
            format!("{prefix}.position"),
            normal_init(&[tokens, model_dim], 0.02, rng),
            true,
        )?;
        Ok(Self {
            projection,
            position,
            tokens,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<Tensor<T>> {
        if patches.rank() != 2 || patches.dim(0) != self.tokens {
            return Err(Error::ShapeMismatch {
                op: "patch embedding (token count vs positional table)",
                left: patches.shape().to_vec(),
                right: store.value(self.position).shape().to_vec(),
            });
        }
        let mut x = self.projection.forward(store, patches)?;
        x.add_assign(store.value(self.position))?;
        Ok(x)
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, patches: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        store.accumulate(self.position, grad)?;
        self.projection.backward(store, patches, grad)
    }
}

fn take_cols<T: Real>(m: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let (n, stride) = (m.dim(0), m.dim(1));
    let mut out = Tensor::zeros(&[n, width]);
    for (r, dst) in out.data_mut().chunks_exact_mut(width).enumerate() {
        dst.copy_from_slice(&m.data()[r * stride + start..][..width]);
    }
    out
}

fn put_cols<T: Real>(m: &mut Tensor<T>, start: usize, block: &Tensor<T>) {
    let stride = m.dim(1);
    let width = block.dim(1);
    for (r, src) in block.data().chunks_exact(width).enumerate() {
        m.data_mut()[r * stride + start..][..width].copy_from_slice(src);
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    head_dim: usize,
    scale: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    concat: Tensor<T>,
    /// Row-stochastic attention matrix `[N×N]` per head.
    pub weights: Vec<Tensor<T>>,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &AttentionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let hd = spec.head_dim();
        let width = spec.heads * hd;
        let bias = spec.projection_bias;
        // Column block j of each fused projection is head j's matrix.
        let query = Linear::new(store, &format!("{prefix}.query"), d, width, bias, rng)?;
        let key = Linear::new(store, &format!("{prefix}.key"), d, width, bias, rng)?;
        let value = Linear::new(store, &format!("{prefix}.value"), d, width, bias, rng)?;
        let output = Linear::new(store, &format!("{prefix}.output"), width, d, bias, rng)?;
        let scale = match spec.scale {
            AttentionScale::PerHead => 1.0 / (hd as f64).sqrt(),
            AttentionScale::Global => 1.0 / (d as f64).sqrt(),
        };
        Ok(Self {
            query,
            key,
            value,
            output,
            heads: spec.heads,
            head_dim: hd,
            scale,
        })
    }

    /// Self-attention over an already-normalized sequence `x: [N×d_k]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let q = self.query.forward(store, x)?;
        // A key bias adds q·b to every score of a row, which the softmax
        // cancels exactly. It is stored but never applied, so its gradient is
        // exactly zero.
        let k = dense(x, store.value(self.key.weight), None)?;
        let v = self.value.forward(store, x)?;
        let n = x.dim(0);
        let hd = self.head_dim;
        let scale = T::from_f64_lossy(self.scale);
        let mut concat = Tensor::zeros(&[n, self.heads * hd]);
        let mut weights = Vec::with_capacity(self.heads);
        for j in 0..self.heads {
            let (qj, kj, vj) = (take_cols(&q, j * hd, hd), take_cols(&k, j * hd, hd), take_cols(&v, j * hd, hd));
            let mut scores = Tensor::zeros(&[n, n]);
            crate::tensor::gemm(n, hd, n, qj.data(), false, kj.data(), true, T::zero(), scores.data_mut());
            scores.data_mut().iter_mut().for_each(|s| *s *= scale);
            let a = softmax(&scores, 1)?;
            let mut hj = Tensor::zeros(&[n, hd]);
            crate::tensor::gemm(n, n, hd, a.data(), false, vj.data(), false, T::zero(), hj.data_mut());
            put_cols(&mut concat, j * hd, &hj);
            weights.push(a);
        }
        let out = self.output.forward(store, &concat)?;
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                concat,
                weights,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &AttentionCache<T>,
        grad: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g_concat = self.output.backward(store, &cache.concat, grad)?;
        let n = cache.input.dim(0);
        let hd = self.head_dim;
        let width = self.heads * hd;
        let scale = T::from_f64_lossy(self.scale);
        let mut gq = Tensor::zeros(&[n, width]);
        let mut gk = Tensor::zeros(&[n, width]);
        let mut gv = Tensor::zeros(&[n, width]);
        for j in 0..self.heads {
            let a = &cache.weights[j];
            let gh = take_cols(&g_concat, j * hd, hd);
            let (qj, kj, vj) = (
                take_cols(&cache.q, j * hd, hd),
                take_cols(&cache.k, j * hd, hd),
                take_cols(&cache.v, j * hd, hd),
            );
            let mut ga = Tensor::zeros(&[n, n]);
            crate::tensor::gemm(n, hd, n, gh.data(), false, vj.data(), true, T::zero(), ga.data_mut());
            let mut gvj = Tensor::zeros(&[n, hd]);
            crate::tensor::gemm(n, n, hd, a.data(), true, gh.data(), false, T::zero(), gvj.data_mut());
            let mut gs = softmax_backward(a, &ga, 1)?;
            gs.data_mut().iter_mut().for_each(|s| *s *= scale);
            let mut gqj = Tensor::zeros(&[n, hd]);
            crate::tensor::gemm(n, n, hd, gs.data(), false, kj.data(), false, T::zero(), gqj.data_mut());
            let mut gkj = Tensor::zeros(&[n, hd]);
            crate::tensor::gemm(n, n, hd, gs.data(), true, qj.data(), false, T::zero(), gkj.data_mut());
            put_cols(&mut gq, j * hd, &gqj);
            put_cols(&mut gk, j * hd, &gkj);
            put_cols(&mut gv, j * hd, &gvj);
        }
        let mut gx = self.query.backward(store, &cache.input, &gq)?;
        let gkw = dense_backward(&cache.input, store.value(self.key.weight), &gk)?;
        store.accumulate(self.key.weight, &gkw.weight)?;
        gx.add_assign(&gkw.input)?;
        gx.add_assign(&self.value.backward(store, &cache.input, &gv)?)?;
        Ok(gx)
    }
}

/// `a = x + MHA(LN₁(x))`, `out = a + MLP(LN₂(a))` (second residual optional).
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: NormParams,
    pub attention: MultiHeadAttention,
    pub norm2: NormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    second_residual: bool,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<T> {
    norm1: LayerNormCache<T>,
    pub attention: AttentionCache<T>,
    norm2: LayerNormCache<T>,
    normed2: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl TransformerLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &AttentionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.model_dim;
        Ok(Self {
            norm1: NormParams::new(store, &format!("{prefix}.norm1"), d)?,
            attention: MultiHeadAttention::new(store, &format!("{prefix}.attn"), spec, rng)?,
            norm2: NormParams::new(store, &format!("{prefix}.norm2"), d)?,
            mlp_in: Linear::new(store, &format!("{prefix}.mlp.dense1"), d, spec.mlp_hidden, true, rng)?,
            mlp_out: Linear::new(store, &format!("{prefix}.mlp.dense2"), spec.mlp_hidden, d, true, rng)?,
            second_residual: spec.second_residual,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, TransformerCache<T>)> {
        let (n1, norm1) = self.norm1.forward(store, x)?;
        let (attn, attention) = self.attention.forward(store, &n1)?;
        let mut a = x.clone();
        a.add_assign(&attn)?;
        let (normed2, norm2) = self.norm2.forward(store, &a)?;
        let hidden_pre = self.mlp_in.forward(store, &normed2)?;
        let hidden = gelu(&hidden_pre);
        let mut out = self.mlp_out.forward(store, &hidden)?;
        if self.second_residual {
            out.add_assign(&a)?;
        }
        Ok((
            out,
            TransformerCache {
                norm1,
                attention,
                norm2,
                normed2,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &TransformerCache<T>,
        grad: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g_hidden = self.mlp_out.backward(store, &cache.hidden, grad)?;
        let g_hidden_pre = gelu_backward(&cache.hidden_pre, &g_hidden);
        let g_normed2 = self.mlp_in.backward(store, &cache.normed2, &g_hidden_pre)?;
        let mut g_a = self.norm2.backward(store, &cache.norm2, &g_normed2)?;
        if self.second_residual {
            g_a.add_assign(grad)?;
        }
        let g_n1 = self.attention.backward(store, &cache.attention, &g_a)?;
        let mut g_x = self.norm1.backward(store, &cache.norm1, &g_n1)?;
        g_x.add_assign(&g_a)?;
        Ok(g_x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn patchify_reference_shapes() {
        let x = Tensor::<f32>::zeros(&[24, 8, 64]);
        assert_eq!(patchify(&x, 4).unwrap().shape(), &[12, 1024]);
        assert_eq!(patchify(&x, 1).unwrap().shape(), &[192, 64]);
        assert!(patchify(&x, 3).is_err());
    }

    #[test]
    fn patchify_index_arithmetic() {
        let x = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(unpatchify(&p, [4, 4, 1], 2).unwrap(), x);
    }

    #[test]
    fn padding_round_trip() {
        let x = Tensor::<f32>::from_fn(&[180, 60, 3], |i| i as f32);
        let padded = pad_to_multiple(&x, 36).unwrap();
        assert_eq!(padded.shape(), &[180, 72, 3]);
        assert_eq!(patchify(&padded, 36).unwrap().shape(), &[10, 36 * 36 * 3]);
        assert_eq!(padded.at(&[5, 65, 1]), 0.0);
        assert_eq!(crop(&padded, 180, 60).unwrap(), x);
    }

    #[test]
    fn embedding_shapes_and_zero_weights() {
        let mut store = ParamStore::<f64>::new();
        let emb = PatchEmbedding::new(&mut store, "embed", 12, 1024, 16, &mut rng()).unwrap();
        assert_eq!(store.total_count(), 16_592);
        let w = emb.projection.weight;
        store.value_mut(w).fill(0.0);
        let x = Tensor::from_fn(&[12, 1024], |i| (i % 7) as f64);
        let out = emb.forward(&store, &x).unwrap();
        assert_eq!(out.shape(), &[12, 16]);
        assert_eq!(&out, store.value(emb.position));
        assert!(emb.forward(&store, &Tensor::zeros(&[11, 1024])).is_err());
    }

    #[test]
    fn attention_output_shape_and_uniform_weights_for_constant_rows() {
        let mut store = ParamStore::<f64>::new();
        let spec = AttentionSpec::default();
        let mha = MultiHeadAttention::new(&mut store, "attn", &spec, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[12, 16], |i| (i % 16) as f64 * 0.1);
        let (out, cache) = mha.forward(&store, &x).unwrap();
        assert_eq!(out.shape(), &[12, 16]);
        assert_eq!(cache.weights.len(), 4);
        for a in &cache.weights {
            for v in a.data() {
                assert!((v - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_head_matches_direct_formula() {
        let spec = AttentionSpec {
            model_dim: 1,
            heads: 1,
            ..AttentionSpec::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", &spec, &mut rng()).unwrap();
        for l in [&mha.query, &mha.key, &mha.value, &mha.output] {
            store.value_mut(l.weight).fill(1.0);
        }
        let x = Tensor::from_f64_slice(&[2, 1], &[1.0, -1.0]).unwrap();
        let (out, cache) = mha.forward(&store, &x).unwrap();
        // scores [[1,-1],[-1,1]] → rows [σ(2), σ(-2)] and [σ(-2), σ(2)].
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let a = &cache.weights[0];
        assert!((a.at(&[0, 0]) - sig(2.0)).abs() < 1e-15);
        assert!((a.at(&[0, 1]) - sig(-2.0)).abs() < 1e-15);
        assert!((a.at(&[1, 1]) - sig(2.0)).abs() < 1e-15);
        let h0 = sig(2.0) - sig(-2.0);
        assert!((out.data()[0] - h0).abs() < 1e-15);
        assert!((out.data()[1] + h0).abs() < 1e-15);
    }

    #[test]
    fn key_bias_cancels_in_the_softmax() {
        let spec = AttentionSpec {
            model_dim: 8,
            heads: 2,
            ..AttentionSpec::default()
        };
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "attn", &spec, &mut rng()).unwrap();
        let x = Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.37).sin());
        let (base, _) = mha.forward(&store, &x).unwrap();
        let kb = mha.key.bias.unwrap();
        *store.value_mut(kb) = Tensor::from_fn(&[8], |i| i as f64 - 3.0);
        // Applying the bias explicitly gives the same output up to rounding.
        let k_biased = dense(&x, store.value(mha.key.weight), Some(store.value(kb))).unwrap();
        let q = dense(&x, store.value(mha.query.weight), mha.query.bias.map(|b| store.value(b))).unwrap();
        let (out, cache) = mha.forward(&store, &x).unwrap();
        assert_eq!(out, base);
        for j in 0..2 {
            let (qj, kj) = (take_cols(&q, j * 4, 4), take_cols(&k_biased, j * 4, 4));
            let mut s = Tensor::zeros(&[5, 5]);
            crate::tensor::gemm(5, 4, 5, qj.data(), false, kj.data(), true, 0.0, s.data_mut());
            s.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            let a = softmax(&s, 1).unwrap();
            for (u, v) in a.data().iter().zip(cache.weights[j].data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        mha.backward(&mut store, &cache, &Tensor::ones(&[5, 8])).unwrap();
        assert!(store.grad(kb).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let spec = AttentionSpec {
            model_dim: 10,
            heads: 4,
            ..AttentionSpec::default()
        };
        let mut store = ParamStore::<f32>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", &spec, &mut rng()).is_err());
        let whole = AttentionSpec {
            head_convention: HeadConvention::WholeDk,
            ..spec
        };
        assert!(MultiHeadAttention::new(&mut store, "b", &whole, &mut rng()).is_ok());
    }

    #[test]
    fn transformer_layer_count_and_residual_identity() {
        let mut store = ParamStore::<f64>::new();
        let layer = TransformerLayer::new(&mut store, "t0", &AttentionSpec::default(), &mut rng()).unwrap();
        // norms 2·32, q/k/v 3·(16·4+4)·4, output 16·16+16, mlp (16·32+32)+(32·16+16)
        assert_eq!(store.total_count(), 64 + 816 + 272 + 544 + 528);
        let x = Tensor::from_fn(&[12, 16], |i| ((i * 31) % 17) as f64 - 8.0);
        let (out, _) = layer.forward(&store, &x).unwrap();
        assert_eq!(out.shape(), &[12, 16]);
        for e in store.entries_mut() {
            if !e.name.contains("norm") {
                e.value.fill(0.0);
            }
        }
        let (out, _) = layer.forward(&store, &x).unwrap();
        assert_eq!(out, x);
    }
}
