//! Emulated FP8 (E4M3) absmax quantization.
//!
//! E4M3: 1 sign + 4 exponent (bias 7) + 3 mantissa bits, maximum normal 448,
//! subnormal step 2^-9. Values are held as f32 snapped onto that grid, which
//! reproduces the numerics without a hardware FP8 type.

use crate::quant::{Codes, ParamSet, QTensor, QuantParams, Scope};
use crate::tensor::{Axis, Tensor};

pub const E4M3_MAX: f32 = 448.0;
const MIN_NORMAL_EXP: i32 = -6;

/// Snap a finite value to the E4M3 grid with round-to-nearest-even on the
/// mantissa. Magnitudes above 448 saturate to 448.
pub fn e4m3_snap(v: f32) -> f32 {
    if v == 0.0 {
        return 0.0;
    }
    let a = v.abs().min(E4M3_MAX);
    // Binade exponent from the f32 bit pattern; everything below the E4M3
    // normal range shares the subnormal step.
    let e = (((a.to_bits() >> 23) & 0xff) as i32 - 127).max(MIN_NORMAL_EXP);
    let step = 2.0f32.powi(e - 3);
    let snapped = (a / step).round_ties_even() * step;
    snapped.copysign(v)
}

fn scale_for(absmax: f32) -> f32 {
    // Zero tensors take unit scale so codes stay zero.
    if absmax == 0.0 {
        1.0
    } else {
        absmax / E4M3_MAX
    }
}

fn absmax(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
}

/// Absmax FP8 quantization: `scale = max|x| / 448` over the scope, values
/// `x / scale` snapped to the E4M3 grid. Rescaling is the dequantization step.
pub fn quantize_fp8_absmax(x: &Tensor, axis: Axis) -> QTensor {
    assert!(x.numel() > 0, "quantize_fp8_absmax on empty tensor");
    match axis {
        Axis::Global => {
            let scale = scale_for(absmax(x.data()));
            let grid = x.data().iter().map(|&v| e4m3_snap(v / scale)).collect();
            QTensor {
                shape: x.shape().to_vec(),
                codes: Codes::Fp8(grid),
                params: ParamSet::PerTensor(QuantParams {
                    scale,
                    zero_point: 0,
                    scope: Scope::Global,
                }),
            }
        }
        Axis::PerRow => {
            let mut grid = Vec::with_capacity(x.numel());
            let mut params = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let scale = scale_for(absmax(row));
                grid.extend(row.iter().map(|&v| e4m3_snap(v / scale)));
                params.push(QuantParams {
                    scale,
                    zero_point: 0,
                    scope: Scope::Row(r),
                });
            }
            QTensor {
                shape: x.shape().to_vec(),
                codes: Codes::Fp8(grid),
                params: ParamSet::PerToken(params),
            }
        }
    }
}
