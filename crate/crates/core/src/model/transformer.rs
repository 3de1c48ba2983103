//! Decoder-only transformer with incremental KV-cache decoding.
//!
//! Pre-norm GPT layout: learned token + position embeddings, then per block
//! `x += attn(ln1(x))` and `x += mlp(ln2(x))` with a ReLU MLP, a final layer
//! norm, and an untied LM head. Every linear-layer input (the four attention
//! projections, both MLP linears, and the LM head input) goes through
//! [`quantized_linear`] under the session's quantization config; attention
//! itself, layer norm, and residuals stay in float.
//!
//! In a batched decode step each row contributes exactly one new token and
//! attends only to its own cache, so with per-token or no quantization the
//! rows are bit-exactly independent; per-tensor quantization couples them
//! through the shared scale.

use crate::error::{Error, Result};
use crate::model::corpus::{TokenId, Vocab};
use crate::model::{validate_divisible, LayerNorm};
use crate::quant::{quantized_linear, LinearWeights, QuantConfig, ScaleRecord};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec("vocab_size must be >= 2".into()));
        }
        validate_divisible(self.d_model, self.n_heads)?;
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidSpec("empty transformer".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Quantized linear calls in one forward step: q,k,v,o + two MLP linears
    /// per block, plus the LM head.
    pub fn quantized_layer_count(&self) -> usize {
        6 * self.n_layers + 1
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: LinearWeights,
    pub wk: LinearWeights,
    pub wv: LinearWeights,
    pub wo: LinearWeights,
    pub ln2: LayerNorm,
    pub fc1: LinearWeights,
    pub fc2: LinearWeights,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub spec: TransformerSpec,
    /// Token embeddings, row-major [vocab_size, d_model].
    pub wte: Vec<f32>,
    /// Position embeddings, row-major [max_seq_len, d_model].
    pub wpe: Vec<f32>,
    pub blocks: Vec<Block>,
    pub lnf: LayerNorm,
    /// Untied LM head, [vocab_size, d_model].
    pub head: LinearWeights,
    /// Char mapping when the model was trained on a corpus.
    pub vocab: Option<Vocab>,
}

impl Transformer {
    /// Uniform init (bit-portable: no transcendental functions involved).
    pub fn init(spec: TransformerSpec, vocab: Option<Vocab>, rng: &mut Rng) -> Result<Transformer> {
        spec.validate()?;
        if let Some(v) = &vocab {
            if v.size() != spec.vocab_size {
                return Err(Error::InvalidSpec(format!(
                    "vocab size {} != spec vocab_size {}",
                    v.size(),
                    spec.vocab_size
                )));
            }
        }
        let c = spec.d_model;
        let uniform = |rng: &mut Rng, n: usize, s: f32| -> Vec<f32> {
            (0..n).map(|_| rng.uniform(-s, s)).collect()
        };
        let lin = |rng: &mut Rng, out: usize, inp: usize| -> LinearWeights {
            let s = (1.0 / inp as f32).sqrt();
            LinearWeights::new(uniform(rng, out * inp, s), out, inp)
        };
        let wte = uniform(rng, spec.vocab_size * c, 0.1);
        let wpe = uniform(rng, spec.max_seq_len * c, 0.1);
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(c),
                wq: lin(rng, c, c),
                wk: lin(rng, c, c),
                wv: lin(rng, c, c),
                wo: lin(rng, c, c),
                ln2: LayerNorm::identity(c),
                fc1: lin(rng, spec.mlp_dim(), c),
                fc2: lin(rng, c, spec.mlp_dim()),
            })
            .collect();
        let head = lin(rng, spec.vocab_size, c);
        Ok(Transformer {
            spec,
            wte,
            wpe,
            blocks,
            lnf: LayerNorm::identity(c),
            head,
            vocab,
        })
    }
}

// ---------------------------------------------------------------------------
// KV cache
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Per-sequence attention cache: one append-only K/V buffer per layer, all
/// layers always at the same length.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> KvCache {
        KvCache {
            layers: vec![LayerKv::default(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

fn ln_rows(x: &[f32], rows: usize, dim: usize, ln: &LayerNorm) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        ln.apply_row(&x[r * dim..(r + 1) * dim], &mut out[r * dim..(r + 1) * dim]);
    }
    out
}

fn qlin(
    x: &[f32],
    rows: usize,
    w: &LinearWeights,
    cfg: &QuantConfig,
    recorder: &mut Option<&mut Vec<ScaleRecord>>,
) -> Result<Vec<f32>> {
    let t = Tensor::new(&[rows, w.in_dim()], x.to_vec())?;
    let (y, rec) = quantized_linear(&t, w, cfg)?;
    if let (Some(sink), Some(rec)) = (recorder.as_deref_mut(), rec) {
        sink.push(rec);
    }
    let (data, _) = y.into_parts();
    Ok(data)
}

/// One decode step: each batch row contributes exactly one new token against
/// its own cache. Returns per-row logits over the vocabulary.
///
/// All rows share one [`QuantConfig`]; with per-tensor granularity the rows'
/// activations are quantized with shared parameters inside every
/// `quantized_linear` call, which is the cross-batch channel under study.
/// When `recorder` is present, one [`ScaleRecord`] per quantized linear call
/// is appended in execution order.
pub fn forward_lm(
    model: &Transformer,
    tokens: &[TokenId],
    caches: &mut [KvCache],
    cfg: &QuantConfig,
    mut recorder: Option<&mut Vec<ScaleRecord>>,
) -> Result<Vec<Vec<f32>>> {
    let spec = &model.spec;
    let b = tokens.len();
    assert_eq!(b, caches.len(), "one cache per batch row");
    let c = spec.d_model;
    let hs = c / spec.n_heads;
    let scale = 1.0 / (hs as f32).sqrt();

    let mut x = vec![0.0f32; b * c];
    for (r, &tok) in tokens.iter().enumerate() {
        if (tok as usize) >= spec.vocab_size {
            return Err(Error::TokenOutOfRange(tok, spec.vocab_size));
        }
        let pos = caches[r].len;
        if pos >= spec.max_seq_len {
            return Err(Error::CacheFull {
                len: pos,
                max: spec.max_seq_len,
            });
        }
        let te = &model.wte[tok as usize * c..(tok as usize + 1) * c];
        let pe = &model.wpe[pos * c..(pos + 1) * c];
        for i in 0..c {
            x[r * c + i] = te[i] + pe[i];
        }
    }

    for (l, block) in model.blocks.iter().enumerate() {
        let h = ln_rows(&x, b, c, &block.ln1);
        let q = qlin(&h, b, &block.wq, cfg, &mut recorder)?;
        let k = qlin(&h, b, &block.wk, cfg, &mut recorder)?;
        let v = qlin(&h, b, &block.wv, cfg, &mut recorder)?;

        let mut attn = vec![0.0f32; b * c];
        for r in 0..b {
            let kv = &mut caches[r].layers[l];
            kv.k.extend_from_slice(&k[r * c..(r + 1) * c]);
            kv.v.extend_from_slice(&v[r * c..(r + 1) * c]);
            let t_len = caches[r].len + 1;
            let kv = &caches[r].layers[l];
            for head in 0..spec.n_heads {
                let off = head * hs;
                let qh = &q[r * c + off..r * c + off + hs];
                let mut scores = Vec::with_capacity(t_len);
                let mut max = f32::NEG_INFINITY;
                for pos in 0..t_len {
                    let kh = &kv.k[pos * c + off..pos * c + off + hs];
                    let mut dot = 0.0f32;
                    for i in 0..hs {
                        dot += qh[i] * kh[i];
                    }
                    let s = dot * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for s in scores.iter_mut() {
                    *s /= denom;
                }
                let out = &mut attn[r * c + off..r * c + off + hs];
                for (pos, &p) in scores.iter().enumerate() {
                    let vh = &kv.v[pos * c + off..pos * c + off + hs];
                    for i in 0..hs {
                        out[i] += p * vh[i];
                    }
                }
            }
        }

        let proj = qlin(&attn, b, &block.wo, cfg, &mut recorder)?;
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }

        let h2 = ln_rows(&x, b, c, &block.ln2);
        let mut m = qlin(&h2, b, &block.fc1, cfg, &mut recorder)?;
        for v in m.iter_mut() {
            *v = v.max(0.0);
        }
        let m2 = qlin(&m, b, &block.fc2, cfg, &mut recorder)?;
        for (xi, mi) in x.iter_mut().zip(&m2) {
            *xi += mi;
        }
    }

    for cache in caches.iter_mut() {
        cache.len += 1;
    }

    let xf = ln_rows(&x, b, c, &model.lnf);
    let logits = qlin(&xf, b, &model.head, cfg, &mut recorder)?;
    Ok(logits
        .chunks(spec.vocab_size)
        .map(|row| row.to_vec())
        .collect())
}

/// Full-precision logits after feeding `prefix` as a single unbatched
/// sequence; the attack model's language prior.
pub fn lm_logits_for_prefix(model: &Transformer, prefix: &[TokenId]) -> Result<Vec<f32>> {
    assert!(!prefix.is_empty());
    let mut cache = [KvCache::new(model.spec.n_layers)];
    let cfg = QuantConfig::none();
    let mut last = Vec::new();
    for &tok in prefix {
        last = forward_lm(model, &[tok], &mut cache, &cfg, None)?.remove(0);
    }
    Ok(last)
}
