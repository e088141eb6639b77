//! Central-difference verification of every primitive adjoint and of the
//! end-to-end model gradient, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::{ConvLayerSpec, EncoderSpec};
use crate::tensor::{
    conv2d, conv2d_backward, dense, dense_backward, dropout, dropout_backward, gelu, gelu_backward,
    grad_check, grad_check_piecewise, layer_norm, layer_norm_backward, matmul, matmul_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, softmax, softmax_backward, transposed_conv2d, transposed_conv2d_backward, Tensor,
    DEFAULT_GRAD_CHECK_EPS, DEFAULT_LAYER_NORM_EPS, PIECEWISE_START_STEP,
};
use crate::train::cross_entropy;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

/// Names accepted by [`check_primitive`], in report order.
pub const PRIMITIVES: [&str; 11] = [
    "matmul",
    "dense",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "dropout",
    "conv2d",
    "maxpool2d",
    "transposed_conv2d",
    "cross_entropy",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so no probe straddles a relu kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(3..=8)
}

/// Checks `Σ r ⊙ op(x)` for a random projection `r`.
fn projected(
    x: &Tensor<f64>,
    out_shape: &[usize],
    op: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    adjoint: impl FnOnce(&Tensor<f64>) -> Result<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let r = uniform(out_shape, -1.0, 1.0, rng);
    let analytic = adjoint(&r)?;
    grad_check(|t| dot(&r, &op(t)), x, &analytic, DEFAULT_GRAD_CHECK_EPS)
}

fn check_once(name: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let worst = |errs: &[f64]| errs.iter().copied().fold(0.0, f64::max);
    match name {
        "matmul" => {
            let (m, k, n) = (extent(rng), extent(rng), extent(rng));
            let a = uniform(&[m, k], -1.0, 1.0, rng);
            let b = uniform(&[k, n], -1.0, 1.0, rng);
            let r = uniform(&[m, n], -1.0, 1.0, rng);
            let (ga, gb) = matmul_backward(&a, &b, &r)?;
            let ea = grad_check(|t| dot(&r, &matmul(t, &b).unwrap()), &a, &ga, DEFAULT_GRAD_CHECK_EPS)?;
            let eb = grad_check(|t| dot(&r, &matmul(&a, t).unwrap()), &b, &gb, DEFAULT_GRAD_CHECK_EPS)?;
            Ok(worst(&[ea, eb]))
        }
        "dense" => {
            let (n, din, dout) = (extent(rng), extent(rng), extent(rng));
            let x = uniform(&[n, din], -1.0, 1.0, rng);
            let w = uniform(&[din, dout], -1.0, 1.0, rng);
            let b = uniform(&[dout], -1.0, 1.0, rng);
            let r = uniform(&[n, dout], -1.0, 1.0, rng);
            let g = dense_backward(&x, &w, &r)?;
            let eps = DEFAULT_GRAD_CHECK_EPS;
            let ex = grad_check(|t| dot(&r, &dense(t, &w, Some(&b)).unwrap()), &x, &g.input, eps)?;
            let ew = grad_check(|t| dot(&r, &dense(&x, t, Some(&b)).unwrap()), &w, &g.weight, eps)?;
            let eb = grad_check(|t| dot(&r, &dense(&x, &w, Some(t)).unwrap()), &b, &g.bias, eps)?;
            Ok(worst(&[ex, ew, eb]))
        }
        "relu" => {
            let shape = [extent(rng), extent(rng)];
            let x = off_zero(&shape, rng);
            projected(&x, &shape, relu, |r| Ok(relu_backward(&x, r)), rng)
        }
        "gelu" => {
            let shape = [extent(rng), extent(rng)];
            let x = uniform(&shape, -3.0, 3.0, rng);
            projected(&x, &shape, gelu, |r| Ok(gelu_backward(&x, r)), rng)
        }
        "softmax" => {
            let shape = [extent(rng), extent(rng)];
            let x = uniform(&shape, -3.0, 3.0, rng);
            let mut errs = Vec::new();
            for axis in 0..2 {
                let y = softmax(&x, axis)?;
                errs.push(projected(
                    &x,
                    &shape,
                    |t| softmax(t, axis).unwrap(),
                    |r| softmax_backward(&y, r, axis),
                    rng,
                )?);
            }
            Ok(worst(&errs))
        }
        "layer_norm" => {
            let (n, d) = (extent(rng), extent(rng));
            let x = uniform(&[n, d], -2.0, 2.0, rng);
            let gamma = uniform(&[d], 0.5, 1.5, rng);
            let beta = uniform(&[d], -0.5, 0.5, rng);
            let r = uniform(&[n, d], -1.0, 1.0, rng);
            let eps_ln = DEFAULT_LAYER_NORM_EPS;
            let (_, cache) = layer_norm(&x, &gamma, &beta, eps_ln)?;
            let g = layer_norm_backward(&cache, &gamma, &r)?;
            let f = |x: &Tensor<f64>, gm: &Tensor<f64>, bt: &Tensor<f64>| dot(&r, &layer_norm(x, gm, bt, eps_ln).unwrap().0);
            let eps = DEFAULT_GRAD_CHECK_EPS;
            let ex = grad_check(|t| f(t, &gamma, &beta), &x, &g.input, eps)?;
            let eg = grad_check(|t| f(&x, t, &beta), &gamma, &g.gamma, eps)?;
            let eb = grad_check(|t| f(&x, &gamma, t), &beta, &g.beta, eps)?;
            Ok(worst(&[ex, eg, eb]))
        }
        "dropout" => {
            // The mask is a function of the seed, so re-seeding on every call
            // makes the op deterministic in `x`.
            let shape = [extent(rng), extent(rng)];
            let x = uniform(&shape, -1.0, 1.0, rng);
            let mask_seed = rng.random::<u64>();
            let apply = |t: &Tensor<f64>| {
                let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
                dropout(t, 0.5, true, &mut mrng).unwrap()
            };
            let mask = apply(&x).mask;
            projected(&x, &shape, |t| apply(t).output, |r| Ok(dropout_backward(mask.as_ref(), r)), rng)
        }
        "conv2d" => {
            // Cycle through every kernel size and through filter counts that
            // hit both the direct and the im2col paths.
            let k = [1, 3, 5, 7][rng.random_range(0..4)];
            let f = [1, 3, 4, 8][rng.random_range(0..4)];
            let (h, w, c) = (extent(rng), extent(rng), rng.random_range(1..=3));
            let x = uniform(&[h, w, c], -1.0, 1.0, rng);
            let kern = uniform(&[k, k, c, f], -1.0, 1.0, rng);
            let b = uniform(&[f], -1.0, 1.0, rng);
            let r = uniform(&[h, w, f], -1.0, 1.0, rng);
            let g = conv2d_backward(&x, &kern, &r, true)?;
            let gx = g.input.ok_or_else(|| Error::InvalidArgument("missing conv2d input gradient".into()))?;
            let eps = DEFAULT_GRAD_CHECK_EPS;
            let ex = grad_check(|t| dot(&r, &conv2d(t, &kern, &b).unwrap()), &x, &gx, eps)?;
            let ek = grad_check(|t| dot(&r, &conv2d(&x, t, &b).unwrap()), &kern, &g.kernels, eps)?;
            let eb = grad_check(|t| dot(&r, &conv2d(&x, &kern, t).unwrap()), &b, &g.bias, eps)?;
            Ok(worst(&[ex, ek, eb]))
        }
        "maxpool2d" => {
            // Odd extents exercise the truncated ceil-mode edge windows.
            let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=3));
            let x = uniform(&[h, w, c], -1.0, 1.0, rng);
            let pooled = maxpool2d(&x)?;
            let out_shape = pooled.output.shape().to_vec();
            projected(
                &x,
                &out_shape,
                |t| maxpool2d(t).unwrap().output,
                |r| maxpool2d_backward(x.shape(), &pooled.argmax, r),
                rng,
            )
        }
        "transposed_conv2d" => {
            let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let (c, f) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let x = uniform(&[h, w, c], -1.0, 1.0, rng);
            let kern = uniform(&[1, 1, c, f], -1.0, 1.0, rng);
            let b = uniform(&[f], -1.0, 1.0, rng);
            let r = uniform(&[2 * h, 2 * w, f], -1.0, 1.0, rng);
            let g = transposed_conv2d_backward(&x, &kern, &r)?;
            let gx = g.input.ok_or_else(|| Error::InvalidArgument("missing transposed_conv2d input gradient".into()))?;
            let eps = DEFAULT_GRAD_CHECK_EPS;
            let ex = grad_check(|t| dot(&r, &transposed_conv2d(t, &kern, &b).unwrap()), &x, &gx, eps)?;
            let ek = grad_check(|t| dot(&r, &transposed_conv2d(&x, t, &b).unwrap()), &kern, &g.kernels, eps)?;
            let eb = grad_check(|t| dot(&r, &transposed_conv2d(&x, &kern, t).unwrap()), &b, &g.bias, eps)?;
            Ok(worst(&[ex, ek, eb]))
        }
        "cross_entropy" => {
            let (b, c) = (extent(rng), extent(rng));
            let x = uniform(&[b, c], -3.0, 3.0, rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            let (_, g) = cross_entropy(&x, &labels)?;
            grad_check(|t| cross_entropy(t, &labels).unwrap().0, &x, &g, DEFAULT_GRAD_CHECK_EPS)
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown primitive `{other}`; expected one of {}",
            PRIMITIVES.join(", ")
        ))),
    }
}

fn check_rng(name: &str, seed: u64) -> ChaCha8Rng {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Worst relative error of primitive `name` over `seeds` random shapes.
pub fn check_primitive(name: &str, seeds: usize) -> Result<CheckResult> {
    let mut max = 0.0f64;
    for seed in 0..seeds as u64 {
        max = max.max(check_once(name, &mut check_rng(name, seed))?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        seeds,
        max_rel_error: max,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

pub fn check_primitives(seeds: usize) -> Result<Vec<CheckResult>> {
    PRIMITIVES.iter().map(|p| check_primitive(p, seeds)).collect()
}

/// The reference architecture shrunk so an exhaustive check is cheap: a
/// 20×8×3 input, the same five encoder kernel sizes with narrower filters,
/// and a two-layer `d_k = 8`, `h = 2` transformer. The encoder's odd
/// intermediate extents keep the ceil-mode edge windows in play.
pub fn end_to_end_config(variant: Variant, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::for_variant(variant).with_seed(seed);
    cfg.input = [20, 8, 3];
    cfg.encoder = EncoderSpec {
        layers: [(7, 4), (5, 4), (3, 4), (3, 8), (3, 8)]
            .into_iter()
            .map(|(kernel, filters)| ConvLayerSpec { kernel, filters })
            .collect(),
    };
    cfg.decoder_filters = 8;
    cfg.attention.model_dim = 8;
    cfg.attention.heads = 2;
    cfg.attention.layers = 2;
    cfg.attention.mlp_hidden = 16;
    cfg.attention.patch_size = match variant {
        Variant::AttentionOnly => 5,
        Variant::EncoderAttention => 1,
        _ => 2,
    };
    cfg.head_widths = vec![16, 8];
    cfg
}

const E2E_BATCH: usize = 2;

fn projected_logits(model: &Model<f64>, images: &[Tensor<f64>], r: &Tensor<f64>, mask_seed: u64) -> f64 {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (logits, _) = model.forward(&refs, true, &mut rng).expect("forward on a validated model");
    dot(r, &logits)
}

/// Checks `Σ r ⊙ logits` of a two-image training-mode batch (fixed dropout
/// mask, random projection `r`) against every parameter and every input
/// pixel. Weights keep their initializer draw; every bias and norm parameter
/// gets `U(−0.1, 0.1)` added so no relu input sits exactly on its kink. A
/// projection rather than the loss keeps the softmax from saturating, which
/// would push gradients below what central differences resolve; the loss
/// adjoint is checked on its own as a primitive.
fn check_end_to_end_once(variant: Variant, seed: u64) -> Result<f64> {
    let cfg = end_to_end_config(variant, seed);
    let mut model: Model<f64> = Model::build(&cfg)?;
    let mut rng = check_rng(variant.as_str(), seed);
    for entry in model.store_mut().entries_mut() {
        if entry.value.rank() == 1 {
            entry.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let images: Vec<Tensor<f64>> = (0..E2E_BATCH).map(|_| uniform(&cfg.input, 0.0, 1.0, &mut rng)).collect();
    let r = uniform(&[E2E_BATCH, cfg.classes], -1.0, 1.0, &mut rng);
    let mask_seed = rng.random::<u64>();

    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let (_, cache) = model.forward(&refs, true, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    model.store_mut().zero_grads();
    let input_grads = model
        .backward(&cache, &r, true)?
        .ok_or_else(|| Error::InvalidArgument("model returned no input gradients".into()))?;

    let step = PIECEWISE_START_STEP;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for i in 0..model.store().len() {
        let entry = &model.store().entries()[i];
        let err = grad_check_piecewise(
            |t| {
                probe.store_mut().entries_mut()[i].value = t.clone();
                projected_logits(&probe, &images, &r, mask_seed)
            },
            &entry.value,
            &entry.grad,
            step,
        )?;
        probe.store_mut().entries_mut()[i].value = entry.value.clone();
        worst = worst.max(err);
    }
    for (b, g) in input_grads.iter().enumerate() {
        let mut batch = images.clone();
        let err = grad_check_piecewise(
            |t| {
                batch[b] = t.clone();
                projected_logits(&model, &batch, &r, mask_seed)
            },
            &images[b],
            g,
            step,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error of the whole-model gradient over `seeds` random
/// parameter draws and inputs.
pub fn check_end_to_end(variant: Variant, seeds: usize) -> Result<CheckResult> {
    let mut max = 0.0f64;
    for seed in 0..seeds as u64 {
        max = max.max(check_end_to_end_once(variant, seed)?);
    }
    Ok(CheckResult {
        name: format!("end_to_end.{}", variant.as_str()),
        seeds,
        max_rel_error: max,
        tolerance: END_TO_END_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_a_few_seeds() {
        for r in check_primitives(3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn unknown_primitive_is_an_error() {
        assert!(check_primitive("fft", 1).is_err());
    }

    #[test]
    fn downscaled_models_build_for_every_variant() {
        for v in Variant::ALL {
            let m: Model<f64> = Model::build(&end_to_end_config(v, 0)).unwrap();
            assert!(m.param_count().0 > 0);
        }
    }
}
