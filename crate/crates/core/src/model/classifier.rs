//! Configurable-depth classifiers.
//!
//! Realized as deep MLPs: `depth` quantized linear layers with ReLU between
//! them. Hidden layers of equal width carry an identity skip connection
//! (`h = relu(W h + b) + h`), which keeps the deeper stacks trainable the way
//! residual networks are; the skip addition stays in float like every other
//! residual. Per-layer quantization effects still compound with depth, which
//! is what the depth sweep is for.

use crate::error::{Error, Result};
use crate::quant::{quantized_linear, LinearWeights, QuantConfig, ScaleRecord};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of quantized linear layers.
    pub depth: usize,
    pub n_classes: usize,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidSpec("classifier depth must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidSpec("zero-width classifier".into()));
        }
        Ok(())
    }

    /// (out_dim, in_dim) of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let last = self.depth - 1;
        match (l, self.depth) {
            (0, 1) => (self.n_classes, self.input_dim),
            (0, _) => (self.hidden_dim, self.input_dim),
            (l, _) if l == last => (self.n_classes, self.hidden_dim),
            _ => (self.hidden_dim, self.hidden_dim),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClsLayer {
    pub w: LinearWeights,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub layers: Vec<ClsLayer>,
}

impl Classifier {
    pub fn init(spec: ClassifierSpec, with_bias: bool, rng: &mut Rng) -> Result<Classifier> {
        spec.validate()?;
        let layers = (0..spec.depth)
            .map(|l| {
                let (out, inp) = spec.layer_dims(l);
                // middle (residual) layers start small so the stream does not
                // blow up with depth at init
                let residual = l > 0 && l + 1 < spec.depth;
                let s = (1.0 / inp as f32).sqrt() * if residual { 0.25 } else { 1.0 };
                let w: Vec<f32> = (0..out * inp).map(|_| rng.uniform(-s, s)).collect();
                ClsLayer {
                    w: LinearWeights::new(w, out, inp),
                    bias: with_bias.then(|| vec![0.0; out]),
                }
            })
            .collect();
        Ok(Classifier { spec, layers })
    }
}

fn add_bias(y: &mut [f32], rows: usize, bias: &Option<Vec<f32>>) {
    if let Some(b) = bias {
        let w = b.len();
        for r in 0..rows {
            for (yi, bi) in y[r * w..(r + 1) * w].iter_mut().zip(b) {
                *yi += bi;
            }
        }
    }
}

/// Batched classifier forward; analogous to the transformer decode step
/// without caches. Returns per-row logits over the classes.
pub fn forward_classifier(
    model: &Classifier,
    x: &Tensor,
    cfg: &QuantConfig,
    mut recorder: Option<&mut Vec<ScaleRecord>>,
) -> Result<Tensor> {
    let rows = x.rows();
    let depth = model.spec.depth;
    let mut h: Tensor = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let (y, rec) = quantized_linear(&h, &layer.w, cfg)?;
        if let (Some(sink), Some(rec)) = (recorder.as_deref_mut(), rec) {
            sink.push(rec);
        }
        let (mut data, shape) = y.into_parts();
        add_bias(&mut data, rows, &layer.bias);
        let last = l + 1 == depth;
        if !last {
            for v in data.iter_mut() {
                *v = v.max(0.0);
            }
            // identity skip for equal-width hidden layers
            if l > 0 {
                for (d, p) in data.iter_mut().zip(h.data()) {
                    *d += p;
                }
            }
        }
        h = Tensor::new(&shape, data)?;
    }
    Ok(h)
}
