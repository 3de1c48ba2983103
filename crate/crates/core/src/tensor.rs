//! Minimal dense f32 tensors and the deterministic primitives built on them.
//!
//! Everything is row-major, rank <= 4, and 32-bit: quantization perturbations
//! have to stay visible at realistic magnitudes, so no double-width
//! accumulators are used on the value path. Accumulation order is fixed
//! (sequential over the contraction axis), which makes results bit-identical
//! across runs and thread counts.

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, rejecting NaN/Inf and shape/length disagreement.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Tensor> {
        let width = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension, i.e. the number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<usize>) {
        (self.data, self.shape)
    }
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

/// `a[m,k] x b[k,n]`, accumulated sequentially over `k` per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    parallel::for_each_row(&mut out, n, |i, row| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (kk, &av) in arow.iter().enumerate() {
                acc += av * b.data[kk * n + j];
            }
            *o = acc;
        }
    });
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Global,
    PerRow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MinMax {
    Global(f32, f32),
    PerRow(Vec<(f32, f32)>),
}

/// Exact min/max over the whole tensor or per leading-dimension row.
pub fn reduce_minmax(x: &Tensor, axis: Axis) -> Result<MinMax> {
    if x.data.is_empty() {
        return Err(Error::EmptyTensor);
    }
    match axis {
        Axis::Global => {
            let (mut lo, mut hi) = (x.data[0], x.data[0]);
            for &v in &x.data[1..] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            Ok(MinMax::Global(lo, hi))
        }
        Axis::PerRow => {
            let w = x.row_len();
            if w == 0 {
                return Err(Error::EmptyTensor);
            }
            let pairs = x
                .data
                .chunks(w)
                .map(|row| {
                    let (mut lo, mut hi) = (row[0], row[0]);
                    for &v in &row[1..] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    (lo, hi)
                })
                .collect();
            Ok(MinMax::PerRow(pairs))
        }
    }
}

/// Argmax (ties to the lowest index) and its log probability under a
/// max-stabilized log-softmax.
pub fn log_softmax_top1(logits: &[f32]) -> (usize, f32) {
    assert!(!logits.is_empty(), "log_softmax_top1 on empty logits");
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best];
    let mut denom = 0.0f32;
    for &v in logits {
        denom += (v - max).exp();
    }
    (best, -denom.ln())
}

/// Full stabilized log-softmax (used by priors and diagnostics).
pub fn log_softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f32;
    for &v in logits {
        denom += (v - max).exp();
    }
    let lse = max + denom.ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Euclidean distance; length-1 inputs degrade to an absolute difference.
pub fn l2_distance(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "l2_distance lengths {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut acc = 0.0f32;
    for (a, b) in u.iter().zip(v) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_nan_and_bad_shape() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(Tensor::new(&[3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[2.5, -1.0, 0.5, 4.0]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let z = Tensor::zeros(&[2, 3]);
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&z, &b).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn minmax_hand_cases() {
        let x = t(&[2, 2], &[1.0, 5.0, -2.0, 3.0]);
        assert_eq!(
            reduce_minmax(&x, Axis::Global).unwrap(),
            MinMax::Global(-2.0, 5.0)
        );
        assert_eq!(
            reduce_minmax(&x, Axis::PerRow).unwrap(),
            MinMax::PerRow(vec![(1.0, 5.0), (-2.0, 3.0)])
        );
        let c = t(&[1, 3], &[4.0, 4.0, 4.0]);
        assert_eq!(
            reduce_minmax(&c, Axis::Global).unwrap(),
            MinMax::Global(4.0, 4.0)
        );
    }

    #[test]
    fn minmax_matches_scan_oracle() {
        let mut rng = Rng::new(1234);
        for _ in 0..1000 {
            let rows = 1 + rng.below(6);
            let cols = 1 + rng.below(40);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let x = Tensor::new(&[rows, cols], data.clone()).unwrap();

            // element-by-element scan oracle
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in &data {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            assert_eq!(reduce_minmax(&x, Axis::Global).unwrap(), MinMax::Global(lo, hi));

            let mut per_row = Vec::new();
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                let mut rl = f32::INFINITY;
                let mut rh = f32::NEG_INFINITY;
                for &v in row {
                    if v < rl {
                        rl = v;
                    }
                    if v > rh {
                        rh = v;
                    }
                }
                per_row.push((rl, rh));
            }
            assert_eq!(
                reduce_minmax(&x, Axis::PerRow).unwrap(),
                MinMax::PerRow(per_row)
            );
        }
    }

    #[test]
    fn minmax_empty_tensor() {
        let x = Tensor::zeros(&[0]);
        assert!(matches!(
            reduce_minmax(&x, Axis::Global),
            Err(Error::EmptyTensor)
        ));
    }

    #[test]
    fn top1_symmetric_tie_break() {
        let (id, lp) = log_softmax_top1(&[0.0, 0.0]);
        assert_eq!(id, 0);
        assert!((lp - 0.5f32.ln()).abs() < 1e-7);
    }

    #[test]
    fn top1_closed_form() {
        let (id, lp) = log_softmax_top1(&[10.0, 0.0]);
        assert_eq!(id, 0);
        let expected = -(1.0 + (-10.0f32).exp()).ln();
        assert!((lp - expected).abs() < 1e-7);
    }

    #[test]
    fn top1_saturation() {
        let (id, lp) = log_softmax_top1(&[1000.0, 0.0, 0.0]);
        assert_eq!(id, 0);
        assert!(lp.abs() < 1e-6);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let v: Vec<f32> = (0..1 + rng.below(30)).map(|_| rng.uniform(-8.0, 8.0)).collect();
            let ls = log_softmax(&v);
            let sum: f32 = ls.iter().map(|&x| x.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum = {sum}");
            let (id, lp) = log_softmax_top1(&v);
            assert!(lp <= 0.0);
            assert!((ls[id] - lp).abs() < 1e-5);
        }
    }

    #[test]
    fn l2_hand_cases() {
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[3.0], &[0.0]).unwrap(), 3.0);
        let d = l2_distance(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((d - 2.0f32.sqrt()).abs() < 1e-7);
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }
}
