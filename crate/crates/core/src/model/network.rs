use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{
    crop, pad_to_multiple, padded_extents, patchify, predict, unpatchify, ConvDecoder, ConvEncoder,
    DecoderCache, EncoderCache, HeadCache, MlpHead, NormParams, ParamStore, PatchEmbedding,
    TransformerCache, TransformerLayer,
};
use crate::tensor::{LayerNormCache, Real, Tensor};

/// Named intermediate shapes of one forward pass, in execution order.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone)]
struct AttentionStack {
    /// Extents of the feature map fed to the stack, before any padding.
    input: [usize; 3],
    padded: [usize; 3],
    patch: usize,
    embedding: PatchEmbedding,
    layers: Vec<TransformerLayer>,
    final_norm: Option<NormParams>,
}

#[derive(Debug, Clone)]
struct StackCache<T> {
    patches: Tensor<T>,
    layers: Vec<TransformerCache<T>>,
    final_norm: Option<LayerNormCache<T>>,
}

#[derive(Debug, Clone)]
struct SampleCache<T> {
    encoder: Option<EncoderCache<T>>,
    decoder: Option<DecoderCache<T>>,
    attention: Option<StackCache<T>>,
}

/// Everything the backward pass needs from one batch forward.
#[derive(Debug, Clone)]
pub struct BatchCache<T> {
    samples: Vec<SampleCache<T>>,
    head: HeadCache<T>,
}

impl<T: Real> BatchCache<T> {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    /// Per-head attention matrices of transformer layer `layer` for sample
    /// `sample`; empty for variants without attention.
    pub fn attention_weights(&self, sample: usize, layer: usize) -> &[Tensor<T>] {
        self.samples[sample]
            .attention
            .as_ref()
            .and_then(|a| a.layers.get(layer))
            .map_or(&[], |c| c.attention.weights.as_slice())
    }
}

/// A built network: parameters plus the block structure that reads them.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Option<ConvEncoder>,
    decoder: Option<ConvDecoder>,
    attention: Option<AttentionStack>,
    head: MlpHead,
}

impl<T: Real> Model<T> {
    /// Builds and initializes every block from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut shape = config.input;
        let encoder = if config.variant.has_encoder() {
            let enc = ConvEncoder::new(&mut store, "encoder", &config.encoder, shape[2], &mut rng)?;
            shape = config.encoder.output_shape(shape);
            Some(enc)
        } else {
            None
        };
        let decoder = if config.variant.has_decoder() {
            let dec = ConvDecoder::new(&mut store, "decoder", shape[2], config.decoder_filters, &mut rng)?;
            shape = ConvDecoder::output_shape(shape, config.decoder_filters);
            Some(dec)
        } else {
            None
        };
        let attention = if config.variant.has_attention() {
            let spec = &config.attention;
            let p = spec.patch_size;
            let (ph, pw) = if config.variant == Variant::AttentionOnly {
                padded_extents(shape[0], shape[1], p)
            } else {
                (shape[0], shape[1])
            };
            if ph % p != 0 || pw % p != 0 {
                return Err(Error::InvalidConfig(format!(
                    "patch size {p} does not divide the {}×{} feature map of variant {}",
                    shape[0],
                    shape[1],
                    config.variant.as_str()
                )));
            }
            let tokens = ph * pw / (p * p);
            let patch_len = p * p * shape[2];
            let embedding = PatchEmbedding::new(&mut store, "attention.embed", tokens, patch_len, spec.model_dim, &mut rng)?;
            let layers = (0..spec.layers)
                .map(|i| TransformerLayer::new(&mut store, &format!("attention.layer{i}"), spec, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let final_norm = if spec.final_norm {
                Some(NormParams::new(&mut store, "attention.final_norm", spec.model_dim)?)
            } else {
                None
            };
            let input = shape;
            shape = [tokens, spec.model_dim, 1];
            Some(AttentionStack {
                input,
                padded: [ph, pw, input[2]],
                patch: p,
                embedding,
                layers,
                final_norm,
            })
        } else {
            None
        };
        let feature_dim = shape.iter().product();
        let head = MlpHead::new(
            &mut store,
            "head",
            feature_dim,
            &config.head_widths,
            config.classes,
            config.dropout,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            decoder,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `(total, trainable)` parameter counts.
    pub fn param_count(&self) -> (usize, usize) {
        (self.store.total_count(), self.store.trainable_count())
    }

    /// Length of the flattened vector handed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            attention: self.attention.clone(),
            head: self.head.clone(),
        }
    }

    fn forward_sample(&self, image: &Tensor<T>, mut trace: Option<&mut ShapeTrace>) -> Result<(Tensor<T>, SampleCache<T>)> {
        if image.shape() != self.config.input {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: self.config.input.to_vec(),
                right: image.shape().to_vec(),
            });
        }
        let mut record = |name: &str, shape: &[usize]| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name.to_string(), shape.to_vec()));
            }
        };
        record("input", image.shape());
        let mut x = image.clone();
        let mut cache = SampleCache {
            encoder: None,
            decoder: None,
            attention: None,
        };
        if let Some(enc) = &self.encoder {
            let (out, c) = enc.forward(&self.store, &x)?;
            for (i, (conv, pool)) in c.stage_shapes().into_iter().enumerate() {
                record(&format!("encoder.conv{}", i + 1), &conv);
                record(&format!("encoder.pool{}", i + 1), &pool);
            }
            cache.encoder = Some(c);
            x = out;
        }
        if let Some(dec) = &self.decoder {
            let (out, c) = dec.forward(&self.store, &x)?;
            for (i, s) in c.stage_shapes().into_iter().enumerate() {
                record(&format!("decoder.tconv{}", i + 1), &s);
            }
            cache.decoder = Some(c);
            x = out;
        }
        if let Some(att) = &self.attention {
            if att.padded != att.input {
                x = pad_to_multiple(&x, att.patch)?;
                record("attention.padded", x.shape());
            }
            let patches = patchify(&x, att.patch)?;
            record("attention.patches", patches.shape());
            let mut tokens = att.embedding.forward(&self.store, &patches)?;
            record("attention.embedding", tokens.shape());
            let mut layers = Vec::with_capacity(att.layers.len());
            for (i, l) in att.layers.iter().enumerate() {
                let (out, c) = l.forward(&self.store, &tokens)?;
                record(&format!("attention.layer{i}"), out.shape());
                layers.push(c);
                tokens = out;
            }
            let mut final_norm = None;
            if let Some(norm) = &att.final_norm {
                let (out, c) = norm.forward(&self.store, &tokens)?;
                final_norm = Some(c);
                tokens = out;
            }
            cache.attention = Some(StackCache {
                patches,
                layers,
                final_norm,
            });
            x = tokens;
        }
        let n = x.len();
        record("features", &[n]);
        Ok((x.reshape(&[n])?, cache))
    }

    /// Maps a batch of `[H×W×C]` images to `[B×classes]` logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        images: &[&Tensor<T>],
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, BatchCache<T>)> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.feature_dim();
        let mut features = Tensor::zeros(&[images.len(), d]);
        let mut samples = Vec::with_capacity(images.len());
        for (b, img) in images.iter().enumerate() {
            let (f, c) = self.forward_sample(img, None)?;
            features.data_mut()[b * d..(b + 1) * d].copy_from_slice(f.data());
            samples.push(c);
        }
        let (logits, head) = self.head.forward(&self.store, &features, training, rng)?;
        Ok((logits, BatchCache { samples, head }))
    }

    /// Accumulates parameter gradients for `d loss / d logits`. Returns the
    /// per-image input gradients when requested.
    pub fn backward(
        &mut self,
        cache: &BatchCache<T>,
        grad_logits: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Vec<Tensor<T>>>> {
        let g_features = self.head.backward(&mut self.store, &cache.head, grad_logits)?;
        let d = self.feature_dim();
        let mut input_grads = need_input_grad.then(|| Vec::with_capacity(cache.samples.len()));
        for (b, sc) in cache.samples.iter().enumerate() {
            let g = Tensor::new(&[d], g_features.data()[b * d..(b + 1) * d].to_vec())?;
            let gi = self.backward_sample(sc, g, need_input_grad)?;
            if let (Some(v), Some(gi)) = (input_grads.as_mut(), gi) {
                v.push(gi);
            }
        }
        Ok(input_grads)
    }

    fn backward_sample(&mut self, cache: &SampleCache<T>, grad: Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let mut g = grad;
        if let (Some(att), Some(ac)) = (&self.attention, &cache.attention) {
            let mut gt = g.reshape(&[ac.patches.dim(0), self.config.attention.model_dim])?;
            if let (Some(norm), Some(nc)) = (&att.final_norm, &ac.final_norm) {
                gt = norm.backward(&mut self.store, nc, &gt)?;
            }
            for (l, lc) in att.layers.iter().zip(&ac.layers).rev() {
                gt = l.backward(&mut self.store, lc, &gt)?;
            }
            let g_patches = att.embedding.backward(&mut self.store, &ac.patches, &gt)?;
            g = unpatchify(&g_patches, att.padded, att.patch)?;
            if att.padded != att.input {
                g = crop(&g, att.input[0], att.input[1])?;
            }
        }
        if let (Some(dec), Some(dc)) = (&self.decoder, &cache.decoder) {
            let shape = dc.output_shape();
            g = dec.backward(&mut self.store, dc, &g.reshape(&shape)?)?;
        }
        if let (Some(enc), Some(ec)) = (&self.encoder, &cache.encoder) {
            let shape = ec.output_shape();
            return enc.backward(&mut self.store, ec, &g.reshape(&shape)?, need_input_grad);
        }
        Ok(need_input_grad.then(|| g.reshape(&self.config.input).expect("input-sized gradient")))
    }

    /// Eval-mode class predictions, processed in chunks of `batch`.
    pub fn predict(&self, images: &[&Tensor<T>], batch: usize) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let (logits, _) = self.forward(chunk, false, &mut rng)?;
            out.extend(predict(&logits)?);
        }
        Ok(out)
    }

    /// Runs one eval-mode forward pass and returns every intermediate shape.
    pub fn trace_shapes(&self, image: &Tensor<T>) -> Result<ShapeTrace> {
        let mut trace = Vec::new();
        let (features, _) = self.forward_sample(image, Some(&mut trace))?;
        let n = features.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = self
            .head
            .forward(&self.store, &features.reshape(&[1, n])?, false, &mut rng)?;
        trace.push(("logits".into(), vec![logits.dim(1)]));
        Ok(trace)
    }
}
