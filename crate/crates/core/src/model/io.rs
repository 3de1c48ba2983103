//! Model persistence.
//!
//! Little-endian binary container: magic `QLK1`, a kind byte, the spec
//! header, then the raw f32 weight arrays in declared order. Loading
//! re-derives the offline-quantized weight forms, so a save/load round trip
//! reproduces forward outputs bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::classifier::{Classifier, ClassifierSpec, ClsLayer};
use crate::model::corpus::Vocab;
use crate::model::transformer::{Block, Transformer, TransformerSpec};
use crate::model::LayerNorm;
use crate::quant::LinearWeights;

const MAGIC: &[u8; 4] = b"QLK1";
const KIND_TRANSFORMER: u8 = 0;
const KIND_CLASSIFIER: u8 = 1;

#[derive(Debug)]
pub enum ModelFile {
    Lm(Transformer),
    Classifier(Classifier),
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.w.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.w.write_all(&v.to_le_bytes())?)
    }
    fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::ModelFormat("truncated file".into()))?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::ModelFormat("truncated file".into()))?;
        Ok(u32::from_le_bytes(b))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.r
            .read_exact(&mut bytes)
            .map_err(|_| Error::ModelFormat("truncated weights".into()))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let file = File::create(path)?;
    let mut w = Writer {
        w: BufWriter::new(file),
    };
    w.w.write_all(MAGIC)?;
    match model {
        ModelFile::Lm(m) => {
            w.u8(KIND_TRANSFORMER)?;
            let s = &m.spec;
            for v in [
                s.vocab_size,
                s.d_model,
                s.n_layers,
                s.n_heads,
                s.max_seq_len,
            ] {
                w.u32(v as u32)?;
            }
            match &m.vocab {
                Some(v) => {
                    w.u8(1)?;
                    w.u32(v.size() as u32)?;
                    for &c in v.chars() {
                        w.u32(c as u32)?;
                    }
                }
                None => w.u8(0)?,
            }
            w.f32s(&m.wte)?;
            w.f32s(&m.wpe)?;
            for b in &m.blocks {
                w.f32s(&b.ln1.gamma)?;
                w.f32s(&b.ln1.beta)?;
                w.f32s(b.wq.weights())?;
                w.f32s(b.wk.weights())?;
                w.f32s(b.wv.weights())?;
                w.f32s(b.wo.weights())?;
                w.f32s(&b.ln2.gamma)?;
                w.f32s(&b.ln2.beta)?;
                w.f32s(b.fc1.weights())?;
                w.f32s(b.fc2.weights())?;
            }
            w.f32s(&m.lnf.gamma)?;
            w.f32s(&m.lnf.beta)?;
            w.f32s(m.head.weights())?;
        }
        ModelFile::Classifier(m) => {
            w.u8(KIND_CLASSIFIER)?;
            let s = &m.spec;
            for v in [s.input_dim, s.hidden_dim, s.depth, s.n_classes] {
                w.u32(v as u32)?;
            }
            let has_bias = m.layers.iter().any(|l| l.bias.is_some());
            w.u8(has_bias as u8)?;
            for l in &m.layers {
                w.f32s(l.w.weights())?;
                if has_bias {
                    let zeros;
                    let b = match &l.bias {
                        Some(b) => b,
                        None => {
                            zeros = vec![0.0; l.w.out_dim()];
                            &zeros
                        }
                    };
                    w.f32s(b)?;
                }
            }
        }
    }
    w.w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let file = File::open(path)?;
    let mut r = Reader {
        r: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.r.read_exact(&mut magic)
        .map_err(|_| Error::ModelFormat("truncated file".into()))?;
    if &magic != MAGIC {
        return Err(Error::ModelFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let kind = r.u8()?;
    let model = match kind {
        KIND_TRANSFORMER => {
            let spec = TransformerSpec {
                vocab_size: r.u32()? as usize,
                d_model: r.u32()? as usize,
                n_layers: r.u32()? as usize,
                n_heads: r.u32()? as usize,
                max_seq_len: r.u32()? as usize,
            };
            spec.validate()?;
            let vocab = if r.u8()? == 1 {
                let n = r.u32()? as usize;
                let chars: Result<Vec<char>> = (0..n)
                    .map(|_| {
                        let cp = r.u32()?;
                        char::from_u32(cp)
                            .ok_or_else(|| Error::ModelFormat(format!("bad codepoint {cp}")))
                    })
                    .collect();
                Some(Vocab::from_chars(chars?))
            } else {
                None
            };
            let c = spec.d_model;
            let wte = r.f32s(spec.vocab_size * c)?;
            let wpe = r.f32s(spec.max_seq_len * c)?;
            let mut blocks = Vec::with_capacity(spec.n_layers);
            for _ in 0..spec.n_layers {
                blocks.push(Block {
                    ln1: LayerNorm {
                        gamma: r.f32s(c)?,
                        beta: r.f32s(c)?,
                    },
                    wq: LinearWeights::new(r.f32s(c * c)?, c, c),
                    wk: LinearWeights::new(r.f32s(c * c)?, c, c),
                    wv: LinearWeights::new(r.f32s(c * c)?, c, c),
                    wo: LinearWeights::new(r.f32s(c * c)?, c, c),
                    ln2: LayerNorm {
                        gamma: r.f32s(c)?,
                        beta: r.f32s(c)?,
                    },
                    fc1: LinearWeights::new(r.f32s(spec.mlp_dim() * c)?, spec.mlp_dim(), c),
                    fc2: LinearWeights::new(r.f32s(c * spec.mlp_dim())?, c, spec.mlp_dim()),
                });
            }
            let lnf = LayerNorm {
                gamma: r.f32s(c)?,
                beta: r.f32s(c)?,
            };
            let head = LinearWeights::new(r.f32s(spec.vocab_size * c)?, spec.vocab_size, c);
            ModelFile::Lm(Transformer {
                spec,
                wte,
                wpe,
                blocks,
                lnf,
                head,
                vocab,
            })
        }
        KIND_CLASSIFIER => {
            let spec = ClassifierSpec {
                input_dim: r.u32()? as usize,
                hidden_dim: r.u32()? as usize,
                depth: r.u32()? as usize,
                n_classes: r.u32()? as usize,
            };
            spec.validate()?;
            let has_bias = r.u8()? == 1;
            let mut layers = Vec::with_capacity(spec.depth);
            for l in 0..spec.depth {
                let (out, inp) = spec.layer_dims(l);
                let w = LinearWeights::new(r.f32s(out * inp)?, out, inp);
                let bias = if has_bias { Some(r.f32s(out)?) } else { None };
                layers.push(ClsLayer { w, bias });
            }
            ModelFile::Classifier(Classifier { spec, layers })
        }
        other => return Err(Error::ModelFormat(format!("unknown model kind {other}"))),
    };
    // reject trailing garbage
    let mut extra = [0u8; 1];
    if r.r.read(&mut extra)? != 0 {
        return Err(Error::ModelFormat("trailing bytes after weights".into()));
    }
    Ok(model)
}
