//! Fully connected classification head.

use rand::Rng;

use super::attention::Linear;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{argmax, dropout, dropout_backward, relu, relu_backward, Real, Tensor};

/// `dense → relu` per hidden width, dropout after the last hidden layer, then
/// a dense layer to the class logits. Operates on batches `[B×D]`.
#[derive(Debug, Clone)]
pub struct MlpHead {
    hidden: Vec<Linear>,
    classifier: Linear,
    dropout: f64,
    input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
    mask: Option<Tensor<T>>,
    classifier_input: Tensor<T>,
}

impl MlpHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_dim: usize,
        widths: &[usize],
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout rate {dropout} must lie in [0, 1)")));
        }
        if input_dim == 0 || classes == 0 || widths.contains(&0) {
            return Err(Error::InvalidConfig("head widths must be positive".into()));
        }
        let mut hidden = Vec::with_capacity(widths.len());
        let mut d = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(Linear::new(store, &format!("{prefix}.dense{}", i + 1), d, w, true, rng)?);
            d = w;
        }
        let classifier = Linear::new(store, &format!("{prefix}.logits"), d, classes, true, rng)?;
        Ok(Self {
            hidden,
            classifier,
            dropout,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, HeadCache<T>)> {
        if x.rank() != 2 || x.dim(1) != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "mlp head input",
                left: vec![x.dim(0), self.input_dim],
                right: x.shape().to_vec(),
            });
        }
        let mut inputs = Vec::with_capacity(self.hidden.len());
        let mut pres = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for l in &self.hidden {
            let pre = l.forward(store, &h)?;
            inputs.push(h);
            h = relu(&pre);
            pres.push(pre);
        }
        let mut mask = None;
        if !self.hidden.is_empty() {
            let d = dropout(&h, self.dropout, training, rng)?;
            h = d.output;
            mask = d.mask;
        }
        let logits = self.classifier.forward(store, &h)?;
        Ok((
            logits,
            HeadCache {
                inputs,
                pre_activations: pres,
                mask,
                classifier_input: h,
            },
        ))
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, cache: &HeadCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.classifier.backward(store, &cache.classifier_input, grad)?;
        g = dropout_backward(cache.mask.as_ref(), &g);
        for (i, l) in self.hidden.iter().enumerate().rev() {
            let g_pre = relu_backward(&cache.pre_activations[i], &g);
            g = l.backward(store, &cache.inputs[i], &g_pre)?;
        }
        Ok(g)
    }
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    if logits.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: logits.shape().to_vec(),
            reason: "logits must be [batch × classes]".into(),
        });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let c = logits.dim(1);
    Ok(logits.data().chunks_exact(c).map(argmax).collect())
}
