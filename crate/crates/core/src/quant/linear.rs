//! W8A8 linear layer: offline-quantized weights, dynamically quantized
//! activations.
//!
//! Weights are quantized once, symmetric per output channel (INT8 with
//! `alpha_w = max|w_row| / 127`, or E4M3 with `alpha_w = max|w_row| / 448`),
//! so the activation path is the only dynamic element. The INT8 product is
//! accumulated in exact 32-bit integers; the FP8 product accumulates the
//! grid values in f32, sequentially over the contraction axis. Both make the
//! kernel bit-reproducible.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::quant::{
    compute_params_per_tensor, compute_params_per_token, e4m3_snap, fp8::E4M3_MAX, Granularity,
    NumberFormat, ParamSet, QuantConfig, QuantParams, ScaleRecord,
};
use crate::tensor::Tensor;

/// Symmetric per-output-channel INT8 weights.
#[derive(Debug, Clone)]
pub struct Int8Weights {
    pub codes: Vec<i8>,
    pub scales: Vec<f32>,
}

/// Per-output-channel absmax E4M3 weights (grid values of `w / scale`).
#[derive(Debug, Clone)]
pub struct Fp8Weights {
    pub grid: Vec<f32>,
    pub scales: Vec<f32>,
}

/// Weight matrix of one linear layer, row-major `[out_dim, in_dim]`, with
/// lazily prepared offline-quantized forms.
#[derive(Debug)]
pub struct LinearWeights {
    out_dim: usize,
    in_dim: usize,
    w: Vec<f32>,
    int8: OnceLock<Int8Weights>,
    fp8: OnceLock<Fp8Weights>,
}

impl Clone for LinearWeights {
    fn clone(&self) -> Self {
        LinearWeights::new(self.w.clone(), self.out_dim, self.in_dim)
    }
}

impl LinearWeights {
    pub fn new(w: Vec<f32>, out_dim: usize, in_dim: usize) -> Self {
        assert_eq!(w.len(), out_dim * in_dim);
        LinearWeights {
            out_dim,
            in_dim,
            w,
            int8: OnceLock::new(),
            fp8: OnceLock::new(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.w
    }

    pub fn int8(&self) -> &Int8Weights {
        self.int8.get_or_init(|| {
            let mut codes = Vec::with_capacity(self.w.len());
            let mut scales = Vec::with_capacity(self.out_dim);
            for row in self.w.chunks(self.in_dim) {
                let absmax = row.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                let scale = if absmax == 0.0 { 1.0 } else { absmax / 127.0 };
                scales.push(scale);
                codes.extend(
                    row.iter()
                        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8),
                );
            }
            Int8Weights { codes, scales }
        })
    }

    pub fn fp8(&self) -> &Fp8Weights {
        self.fp8.get_or_init(|| {
            let mut grid = Vec::with_capacity(self.w.len());
            let mut scales = Vec::with_capacity(self.out_dim);
            for row in self.w.chunks(self.in_dim) {
                let absmax = row.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                let scale = if absmax == 0.0 { 1.0 } else { absmax / E4M3_MAX };
                scales.push(scale);
                grid.extend(row.iter().map(|&v| e4m3_snap(v / scale)));
            }
            Fp8Weights { grid, scales }
        })
    }
}

fn check_shapes(x: &Tensor, w: &LinearWeights) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || x.shape()[1] != w.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "linear input {:?} vs weights [{}, {}]",
            x.shape(),
            w.out_dim,
            w.in_dim
        )));
    }
    Ok((x.shape()[0], w.in_dim, w.out_dim))
}

fn int8_row_params(x: &Tensor, granularity: Granularity) -> Vec<QuantParams> {
    match granularity {
        Granularity::PerTensor => {
            let p = compute_params_per_tensor(x);
            vec![p; x.rows()]
        }
        Granularity::PerToken => compute_params_per_token(x),
        Granularity::None => unreachable!(),
    }
}

/// `y = dequant(quant(x) x quant(w)^T)` under the configured granularity and
/// format; the float matmul when granularity is `None`.
///
/// Returns the output activations plus the scale record for the layer (absent
/// on the float path). Per-token outputs depend only on their own row; the
/// per-tensor path couples all rows through the shared parameters.
pub fn quantized_linear(
    x: &Tensor,
    w: &LinearWeights,
    cfg: &QuantConfig,
) -> Result<(Tensor, Option<ScaleRecord>)> {
    let (rows, k, out) = check_shapes(x, w)?;
    if cfg.granularity == Granularity::None {
        let mut y = vec![0.0f32; rows * out];
        for (r, yrow) in y.chunks_mut(out).enumerate() {
            let xrow = x.row(r);
            for (o, yv) in yrow.iter_mut().enumerate() {
                let wrow = &w.w[o * k..(o + 1) * k];
                let mut acc = 0.0f32;
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                *yv = acc;
            }
        }
        return Ok((Tensor::new(&[rows, out], y)?, None));
    }

    let (lo, hi) = {
        let d = x.data();
        let (mut lo, mut hi) = (d[0], d[0]);
        for &v in &d[1..] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    };

    match cfg.format {
        NumberFormat::Int8Asymmetric => {
            let row_params = int8_row_params(x, cfg.granularity);
            let wq = w.int8();
            let mut y = vec![0.0f32; rows * out];
            for (r, yrow) in y.chunks_mut(out).enumerate() {
                let p = &row_params[r];
                let beta = p.zero_point;
                debug_assert!(beta.unsigned_abs() < (1 << 20), "extreme zero point");
                let betaf = beta as f32;
                let codes: Vec<i32> = x
                    .row(r)
                    .iter()
                    .map(|&v| (v / p.scale + betaf).round().clamp(0.0, 255.0) as i32)
                    .collect();
                for (o, yv) in yrow.iter_mut().enumerate() {
                    let wrow = &wq.codes[o * k..(o + 1) * k];
                    let mut acc: i32 = 0;
                    for (&c, &wc) in codes.iter().zip(wrow) {
                        acc += (c - beta) * wc as i32;
                    }
                    *yv = acc as f32 * (p.scale * wq.scales[o]);
                }
            }
            let params = match cfg.granularity {
                Granularity::PerTensor => ParamSet::PerTensor(row_params[0]),
                _ => ParamSet::PerToken(row_params),
            };
            Ok((
                Tensor::new(&[rows, out], y)?,
                Some(ScaleRecord { params, lo, hi }),
            ))
        }
        NumberFormat::Fp8Absmax => {
            let wq = w.fp8();
            let scales: Vec<f32> = match cfg.granularity {
                Granularity::PerTensor => {
                    let absmax = lo.abs().max(hi.abs());
                    let s = if absmax == 0.0 { 1.0 } else { absmax / E4M3_MAX };
                    vec![s; rows]
                }
                Granularity::PerToken => (0..rows)
                    .map(|r| {
                        let absmax = x.row(r).iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                        if absmax == 0.0 {
                            1.0
                        } else {
                            absmax / E4M3_MAX
                        }
                    })
                    .collect(),
                Granularity::None => unreachable!(),
            };
            let mut y = vec![0.0f32; rows * out];
            for (r, yrow) in y.chunks_mut(out).enumerate() {
                let s = scales[r];
                let grid: Vec<f32> = x.row(r).iter().map(|&v| e4m3_snap(v / s)).collect();
                for (o, yv) in yrow.iter_mut().enumerate() {
                    let wrow = &wq.grid[o * k..(o + 1) * k];
                    let mut acc = 0.0f32;
                    for (&g, &wg) in grid.iter().zip(wrow) {
                        acc += g * wg;
                    }
                    *yv = acc * (s * wq.scales[o]);
                }
            }
            let mk = |scale: f32, scope| QuantParams {
                scale,
                zero_point: 0,
                scope,
            };
            let params = match cfg.granularity {
                Granularity::PerTensor => {
                    ParamSet::PerTensor(mk(scales[0], crate::quant::Scope::Global))
                }
                _ => ParamSet::PerToken(
                    scales
                        .iter()
                        .enumerate()
                        .map(|(r, &s)| mk(s, crate::quant::Scope::Row(r)))
                        .collect(),
                ),
            };
            Ok((
                Tensor::new(&[rows, out], y)?,
                Some(ScaleRecord { params, lo, hi }),
            ))
        }
    }
}
