//! Convolutional encoder (five conv → relu → pool stages) and the 1×1
//! transposed-convolution decoder that doubles the feature map twice.

use rand::Rng;

use super::params::{he_uniform, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, pooled_extent, relu, relu_backward,
    transposed_conv2d, transposed_conv2d_backward, Real, Tensor,
};

/// One encoder stage: square kernel size and filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub filters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for EncoderSpec {
    /// Kernel sizes and filter counts of the reference encoder.
    fn default() -> Self {
        let layers = [(7, 4), (5, 8), (3, 16), (3, 32), (3, 64)]
            .into_iter()
            .map(|(kernel, filters)| ConvLayerSpec { kernel, filters })
            .collect();
        Self { layers }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != 5 {
            return Err(Error::InvalidConfig(format!(
                "encoder must have exactly five layers, got {}",
                self.layers.len()
            )));
        }
        for l in &self.layers {
            if l.kernel % 2 == 0 || l.filters == 0 {
                return Err(Error::InvalidConfig(format!(
                    "encoder layer {l:?} needs an odd kernel and at least one filter"
                )));
            }
        }
        Ok(())
    }

    /// Shapes after each conv (before pooling) and the final pooled shape.
    pub fn shape_chain(&self, input: [usize; 3]) -> (Vec<[usize; 3]>, [usize; 3]) {
        let [mut h, mut w, _] = input;
        let mut convs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            convs.push([h, w, l.filters]);
            h = pooled_extent(h);
            w = pooled_extent(w);
        }
        let c = self.layers.last().map_or(input[2], |l| l.filters);
        (convs, [h, w, c])
    }

    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.shape_chain(input).1
    }
}

#[derive(Debug, Clone)]
struct ConvStage {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvEncoder {
    stages: Vec<ConvStage>,
}

#[derive(Debug, Clone)]
struct EncoderStageCache<T> {
    input: Tensor<T>,
    pre_activation: Tensor<T>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    stages: Vec<EncoderStageCache<T>>,
    output_shape: Vec<usize>,
}

impl<T: Real> EncoderCache<T> {
    /// `(conv output, pooled output)` shape per stage.
    pub fn stage_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pooled = self
                    .stages
                    .get(i + 1)
                    .map_or(self.output_shape.clone(), |n| n.input.shape().to_vec());
                (s.pre_activation.shape().to_vec(), pooled)
            })
            .collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.output_shape.clone()
    }
}

impl ConvEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &EncoderSpec,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut c = in_channels;
        let mut stages = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let fan_in = l.kernel * l.kernel * c;
            let kernel = store.add(
                format!("{prefix}.conv{}.kernel", i + 1),
                he_uniform(&[l.kernel, l.kernel, c, l.filters], fan_in, rng),
                true,
            )?;
            let bias = store.add(format!("{prefix}.conv{}.bias", i + 1), Tensor::zeros(&[l.filters]), true)?;
            stages.push(ConvStage { kernel, bias });
            c = l.filters;
        }
        Ok(Self { stages })
    }

    /// `[H×W×C]` → pooled feature map, e.g. 180×60×3 → 6×2×64.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let pre = conv2d(&x, store.value(s.kernel), store.value(s.bias))?;
            let pooled = maxpool2d(&relu(&pre))?;
            caches.push(EncoderStageCache {
                input: x,
                pre_activation: pre,
                argmax: pooled.argmax,
            });
            x = pooled.output;
        }
        let output_shape = x.shape().to_vec();
        Ok((
            x,
            EncoderCache {
                stages: caches,
                output_shape,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient only if
    /// requested.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &EncoderCache<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut g = grad_out.clone();
        for (i, (s, c)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let g_relu = maxpool2d_backward(c.pre_activation.shape(), &c.argmax, &g)?;
            let g_pre = relu_backward(&c.pre_activation, &g_relu);
            let want_input = i > 0 || need_input_grad;
            let grads = conv2d_backward(&c.input, store.value(s.kernel), &g_pre, want_input)?;
            store.accumulate(s.kernel, &grads.kernels)?;
            store.accumulate(s.bias, &grads.bias)?;
            match grads.input {
                Some(gi) => g = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

#[derive(Debug, Clone)]
pub struct ConvDecoder {
    stages: Vec<ConvStage>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
}

impl<T: Real> DecoderCache<T> {
    pub fn stage_shapes(&self) -> Vec<Vec<usize>> {
        self.pre_activations.iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.pre_activations.last().map_or(Vec::new(), |p| p.shape().to_vec())
    }
}

impl ConvDecoder {
    pub const STAGES: usize = 2;

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut c = channels;
        let mut stages = Vec::with_capacity(Self::STAGES);
        for i in 0..Self::STAGES {
            let kernel = store.add(
                format!("{prefix}.tconv{}.kernel", i + 1),
                he_uniform(&[1, 1, c, filters], c, rng),
                true,
            )?;
            let bias = store.add(format!("{prefix}.tconv{}.bias", i + 1), Tensor::zeros(&[filters]), true)?;
            stages.push(ConvStage { kernel, bias });
            c = filters;
        }
        Ok(Self { stages })
    }

    pub fn output_shape(input: [usize; 3], filters: usize) -> [usize; 3] {
        [input[0] * 4, input[1] * 4, filters]
    }

    /// e.g. 6×2×64 → 12×4×64 → 24×8×64.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let mut x = features.clone();
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut pres = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let pre = transposed_conv2d(&x, store.value(s.kernel), store.value(s.bias))?;
            let out = relu(&pre);
            inputs.push(x);
            pres.push(pre);
            x = out;
        }
        Ok((
            x,
            DecoderCache {
                inputs,
                pre_activations: pres,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cache: &DecoderCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for (i, s) in self.stages.iter().enumerate().rev() {
            let g_pre = relu_backward(&cache.pre_activations[i], &g);
            let grads = transposed_conv2d_backward(&cache.inputs[i], store.value(s.kernel), &g_pre)?;
            store.accumulate(s.kernel, &grads.kernels)?;
            store.accumulate(s.bias, &grads.bias)?;
            g = grads.input.expect("transposed conv always yields an input gradient");
        }
        Ok(g)
    }
}
