//! Dynamic activation quantization kernels.
//!
//! Two number formats are supported:
//!
//! - **INT8 asymmetric**: scale `alpha = (max - min) / 255`, zero point
//!   `beta = -round(min / alpha)`, codes `clip(round(x / alpha + beta), 0, 255)`.
//! - **FP8 absmax**: symmetric scale `max|x| / 448` with values snapped to an
//!   emulated E4M3 grid (see [`fp8`]).
//!
//! The granularity choice is the whole story: *per-tensor* parameters are
//! computed from the min/max of the entire batched activation matrix, so every
//! row's values influence every other row's quantization. *Per-token*
//! parameters are computed per row and keep rows bit-exactly independent.
//!
//! Rounding is to the nearest integer with ties away from zero, everywhere.
//! Degenerate ranges (max == min) take scale 1 and zero point `-round(min)`,
//! which round-trips constant tensors exactly.

pub mod fp8;
pub mod linear;

pub use fp8::{e4m3_snap, quantize_fp8_absmax};
pub use linear::{quantized_linear, LinearWeights};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One (scale, zero-point) pair for the whole batched tensor. Couples
    /// batch rows; the vulnerable configuration.
    PerTensor,
    /// One pair per batch row. Rows stay independent.
    PerToken,
    /// No quantization; the float path.
    None,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::PerTensor => "per-tensor",
            Granularity::PerToken => "per-token",
            Granularity::None => "none",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-tensor" => Ok(Granularity::PerTensor),
            "per-token" => Ok(Granularity::PerToken),
            "none" => Ok(Granularity::None),
            other => Err(Error::InvalidSpec(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumberFormat {
    Int8Asymmetric,
    Fp8Absmax,
}

impl NumberFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            NumberFormat::Int8Asymmetric => "int8-asymmetric",
            NumberFormat::Fp8Absmax => "fp8-absmax",
        }
    }
}

impl std::str::FromStr for NumberFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" | "int8-asymmetric" => Ok(NumberFormat::Int8Asymmetric),
            "fp8" | "fp8-absmax" => Ok(NumberFormat::Fp8Absmax),
            other => Err(Error::InvalidSpec(format!("unknown format {other:?}"))),
        }
    }
}

/// Policy for a zero-width value range (max == min).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DegeneratePolicy {
    /// scale = 1, zero point = -round(min): constants round-trip exactly.
    #[default]
    UnitScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub granularity: Granularity,
    /// Ignored when `granularity` is [`Granularity::None`].
    pub format: NumberFormat,
    pub degenerate_policy: DegeneratePolicy,
}

impl QuantConfig {
    pub fn new(granularity: Granularity, format: NumberFormat) -> Self {
        QuantConfig {
            granularity,
            format,
            degenerate_policy: DegeneratePolicy::UnitScale,
        }
    }

    pub fn none() -> Self {
        Self::new(Granularity::None, NumberFormat::Int8Asymmetric)
    }

    pub fn per_tensor_int8() -> Self {
        Self::new(Granularity::PerTensor, NumberFormat::Int8Asymmetric)
    }

    pub fn per_token_int8() -> Self {
        Self::new(Granularity::PerToken, NumberFormat::Int8Asymmetric)
    }

    pub fn per_tensor_fp8() -> Self {
        Self::new(Granularity::PerTensor, NumberFormat::Fp8Absmax)
    }

    pub fn per_token_fp8() -> Self {
        Self::new(Granularity::PerToken, NumberFormat::Fp8Absmax)
    }
}

// ---------------------------------------------------------------------------
// parameters and quantized tensors
// ---------------------------------------------------------------------------

/// Which slice of the tensor a parameter pair was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Global,
    Row(usize),
}

/// Affine quantization parameters: `x ~ scale * (code - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub scope: Scope,
}

/// Parameter layout attached to a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet {
    PerTensor(QuantParams),
    /// Exactly one pair per batch row, in row order.
    PerToken(Vec<QuantParams>),
}

impl ParamSet {
    /// All scales in record order.
    pub fn scales(&self) -> Vec<f32> {
        match self {
            ParamSet::PerTensor(p) => vec![p.scale],
            ParamSet::PerToken(ps) => ps.iter().map(|p| p.scale).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codes {
    /// Integer codes in [0, 255].
    Int8(Vec<u8>),
    /// E4M3-grid values of `x / scale`; rescaling happens at dequantization.
    Fp8(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Codes,
    pub params: ParamSet,
}

/// Per-layer record captured by the scale recorder during a forward pass:
/// the parameters actually applied, plus the observed pre-quantization range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRecord {
    pub params: ParamSet,
    pub lo: f32,
    pub hi: f32,
}

impl ScaleRecord {
    pub fn range(&self) -> f32 {
        self.hi - self.lo
    }
}

// ---------------------------------------------------------------------------
// INT8 asymmetric kernels
// ---------------------------------------------------------------------------

/// Round to nearest with ties away from zero (`f32::round` semantics), the
/// tie rule used by every kernel in this module.
#[inline]
pub fn round_half_away(v: f32) -> f32 {
    v.round()
}

/// Parameters from an explicit (min, max) range.
///
/// The zero point is computed as `-round(255 * min / (max - min))` rather
/// than through the already-rounded scale; folding the division keeps exact
/// ties (e.g. the range [-1, 1], where `min/alpha` is exactly -127.5) intact.
pub fn params_from_range(lo: f32, hi: f32, scope: Scope, policy: DegeneratePolicy) -> QuantParams {
    debug_assert!(lo <= hi);
    if lo == hi {
        let DegeneratePolicy::UnitScale = policy;
        return QuantParams {
            scale: 1.0,
            zero_point: -round_half_away(lo) as i32,
            scope,
        };
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = -round_half_away(lo * 255.0 / (hi - lo)) as i32;
    QuantParams {
        scale,
        zero_point,
        scope,
    }
}

fn minmax(values: &[f32]) -> (f32, f32) {
    let (mut lo, mut hi) = (values[0], values[0]);
    for &v in &values[1..] {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// One (scale, zero-point) pair from the global min/max of the tensor.
pub fn compute_params_per_tensor(x: &Tensor) -> QuantParams {
    assert!(x.numel() > 0, "compute_params_per_tensor on empty tensor");
    let (lo, hi) = minmax(x.data());
    params_from_range(lo, hi, Scope::Global, DegeneratePolicy::UnitScale)
}

/// One pair per leading-dimension row, each computed from that row alone.
pub fn compute_params_per_token(x: &Tensor) -> Vec<QuantParams> {
    assert!(x.rows() > 0 && x.row_len() > 0);
    (0..x.rows())
        .map(|r| {
            let (lo, hi) = minmax(x.row(r));
            params_from_range(lo, hi, Scope::Row(r), DegeneratePolicy::UnitScale)
        })
        .collect()
}

fn encode_int8(values: &[f32], p: &QuantParams, out: &mut Vec<u8>) {
    let beta = p.zero_point as f32;
    for &v in values {
        let code = round_half_away(v / p.scale + beta).clamp(0.0, 255.0);
        out.push(code as u8);
    }
}

/// INT8 asymmetric quantization of a whole tensor under given parameters.
pub fn quantize(x: &Tensor, p: &QuantParams) -> QTensor {
    let mut codes = Vec::with_capacity(x.numel());
    encode_int8(x.data(), p, &mut codes);
    QTensor {
        shape: x.shape().to_vec(),
        codes: Codes::Int8(codes),
        params: ParamSet::PerTensor(*p),
    }
}

/// Per-token INT8 quantization: each row encoded under its own parameters.
pub fn quantize_per_token(x: &Tensor) -> QTensor {
    let params = compute_params_per_token(x);
    let mut codes = Vec::with_capacity(x.numel());
    for (r, p) in params.iter().enumerate() {
        encode_int8(x.row(r), p, &mut codes);
    }
    QTensor {
        shape: x.shape().to_vec(),
        codes: Codes::Int8(codes),
        params: ParamSet::PerToken(params),
    }
}

/// Inverse map `x_hat = scale * (code - zero_point)` (or `grid * scale` for
/// FP8 codes).
pub fn dequantize(q: &QTensor) -> Result<Tensor> {
    let row_len: usize = q.shape[1..].iter().product::<usize>().max(1);
    let params_for = |i: usize| -> &QuantParams {
        match &q.params {
            ParamSet::PerTensor(p) => p,
            ParamSet::PerToken(ps) => &ps[i / row_len],
        }
    };
    let data: Vec<f32> = match &q.codes {
        Codes::Int8(codes) => codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = params_for(i);
                p.scale * (c as i32 - p.zero_point) as f32
            })
            .collect(),
        Codes::Fp8(grid) => grid
            .iter()
            .enumerate()
            .map(|(i, &g)| g * params_for(i).scale)
            .collect(),
    };
    Tensor::new(&q.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn params_identity_scale() {
        let p = compute_params_per_tensor(&t(&[1, 2], &[0.0, 255.0]));
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn params_symmetric_unit_range() {
        // min/alpha is an exact -127.5 tie; half-away rounding gives -128.
        let p = compute_params_per_tensor(&t(&[1, 2], &[-1.0, 1.0]));
        assert_eq!(p.scale, 2.0 / 255.0);
        assert_eq!(p.zero_point, 128);
    }

    #[test]
    fn params_degenerate_constant() {
        let p = compute_params_per_tensor(&t(&[1, 3], &[3.0, 3.0, 3.0]));
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, -3);
    }

    #[test]
    fn quantize_identity_scale() {
        let x = t(&[1, 2], &[0.0, 255.0]);
        let q = quantize(&x, &compute_params_per_tensor(&x));
        assert_eq!(q.codes, Codes::Int8(vec![0, 255]));
    }

    #[test]
    fn quantize_unit_range_clips_upper() {
        let x = t(&[1, 2], &[-1.0, 1.0]);
        let q = quantize(&x, &compute_params_per_tensor(&x));
        // 1/alpha + 128 = 255.5 rounds to 256 and clips to 255.
        assert_eq!(q.codes, Codes::Int8(vec![1, 255]));
    }

    #[test]
    fn quantize_clips_below_range() {
        let p = QuantParams {
            scale: 1.0,
            zero_point: 0,
            scope: Scope::Global,
        };
        let q = quantize(&t(&[1, 2], &[-500.0, 10.0]), &p);
        assert_eq!(q.codes, Codes::Int8(vec![0, 10]));
    }

    #[test]
    fn round_trip_grid_points() {
        let x = t(&[1, 2], &[0.0, 255.0]);
        let q = quantize(&x, &compute_params_per_tensor(&x));
        assert_eq!(dequantize(&q).unwrap().data(), x.data());
    }

    #[test]
    fn round_trip_constant_exact() {
        let x = t(&[2, 2], &[3.0, 3.0, 3.0, 3.0]);
        let q = quantize(&x, &compute_params_per_tensor(&x));
        assert_eq!(dequantize(&q).unwrap().data(), x.data());
    }

    #[test]
    fn round_trip_error_within_half_step() {
        // Exhaustive over a 1e4-point grid spanning an awkward range.
        let n = 10_000usize;
        let data: Vec<f32> = (0..n)
            .map(|i| -3.7 + 9.3 * (i as f32) / (n as f32 - 1.0))
            .collect();
        let x = Tensor::new(&[1, n], data.clone()).unwrap();
        let p = compute_params_per_tensor(&x);
        let q = quantize(&x, &p);
        let back = dequantize(&q).unwrap();
        let tol = p.scale * 0.5 * (1.0 + 1e-5);
        for (a, b) in data.iter().zip(back.data()) {
            assert!((a - b).abs() <= tol, "error {} exceeds {}", (a - b).abs(), tol);
        }
    }

    #[test]
    fn per_token_single_row_matches_per_tensor() {
        let x = t(&[1, 4], &[-2.0, 0.5, 1.0, 7.0]);
        let per_tensor = compute_params_per_tensor(&x);
        let per_token = compute_params_per_token(&x);
        assert_eq!(per_token.len(), 1);
        assert_eq!(per_token[0].scale, per_tensor.scale);
        assert_eq!(per_token[0].zero_point, per_tensor.zero_point);
    }

    #[test]
    fn per_token_rows_independent_params() {
        let row0: Vec<f32> = (0..=255).map(|v| v as f32).collect();
        let mut data = row0.clone();
        let row1: Vec<f32> = (0..256)
            .map(|i| -1.0 + 2.0 * (i as f32) / 255.0)
            .collect();
        data.extend_from_slice(&row1);
        let x = Tensor::new(&[2, 256], data).unwrap();
        let ps = compute_params_per_token(&x);
        assert_eq!(ps[0].scale, 1.0);
        assert_eq!(ps[0].zero_point, 0);
        assert_eq!(ps[1].scale, 2.0 / 255.0);
        assert_eq!(ps[1].zero_point, 128);
        assert_eq!(ps[1].scope, Scope::Row(1));
    }

    #[test]
    fn per_token_identical_rows_identical_params() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let ps = compute_params_per_token(&x);
        assert_eq!(ps[0].scale, ps[1].scale);
        assert_eq!(ps[0].zero_point, ps[1].zero_point);
    }

    #[test]
    fn scale_monotone_in_range() {
        let narrow = compute_params_per_tensor(&t(&[1, 2], &[-1.0, 1.0]));
        let wide = compute_params_per_tensor(&t(&[1, 2], &[-1.0, 9.0]));
        assert!(wide.scale > narrow.scale);
    }
}
