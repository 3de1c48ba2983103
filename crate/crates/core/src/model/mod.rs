//! Toy model zoo: a decoder-only transformer for the LLM attacks and
//! configurable-depth classifiers for the classification attacks, plus the
//! tiny trainer that gives the attack model a language prior.
//!
//! Only linear-layer inputs are quantized; layer norm, softmax, and residual
//! additions stay in float, matching W8A8 practice. Weights are immutable
//! once a model leaves the trainer.

pub mod classifier;
pub mod corpus;
pub mod dataset;
pub mod io;
pub mod train;
pub mod transformer;

pub use classifier::{forward_classifier, Classifier, ClassifierSpec};
pub use corpus::{Corpus, TokenId, Vocab};
pub use dataset::BlobDataset;
pub use io::{load_model, save_model, ModelFile};
pub use train::{train_char_lm, train_classifier, TrainReport};
pub use transformer::{forward_lm, KvCache, Transformer, TransformerSpec};

use crate::error::{Error, Result};

/// Layer normalization parameters; applied per row in float.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub(crate) const LN_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn identity(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn apply_row(&self, x: &[f32], out: &mut [f32]) {
        let n = x.len() as f32;
        let mut mean = 0.0f32;
        for &v in x {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0f32;
        for &v in x {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for ((o, &v), (&g, &b)) in out
            .iter_mut()
            .zip(x)
            .zip(self.gamma.iter().zip(&self.beta))
        {
            *o = (v - mean) * rstd * g + b;
        }
    }
}

pub(crate) fn validate_divisible(d_model: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::InvalidSpec(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    Ok(())
}
