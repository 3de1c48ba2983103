//! Tiny trainer: plain-float forward/backward passes for the char LM and the
//! classifiers, optimized with Adam. Training never quantizes; quantization
//! is applied post-training at inference time.
//!
//! Backward passes are written by hand for the two fixed architectures.
//! Every output element is produced by exactly one sequential accumulation,
//! so training is bit-deterministic for a given seed regardless of the
//! `parallel` feature or thread count. The only scatter (embedding gradients)
//! stays single-threaded.

use crate::error::{Error, Result};
use crate::model::classifier::{Classifier, ClassifierSpec, ClsLayer};
use crate::model::corpus::Corpus;
use crate::model::dataset::BlobDataset;
use crate::model::transformer::{Block, Transformer, TransformerSpec};
use crate::model::{LayerNorm, LN_EPS};
use crate::parallel::for_each_row;
use crate::quant::LinearWeights;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct TrainReport {
    /// Loss of the final training minibatch.
    pub final_loss: f32,
    /// Mean cross-entropy on the held-out slice.
    pub held_out_loss: f32,
    /// Held-out accuracy (classifiers only).
    pub held_out_accuracy: Option<f32>,
}

const HOLDOUT_FRAC: f32 = 0.1;
const LM_BATCH: usize = 16;
const LM_LR: f32 = 1e-3;
const CLS_BATCH: usize = 32;
const CLS_LR: f32 = 1e-3;

// ---------------------------------------------------------------------------
// shared pieces
// ---------------------------------------------------------------------------

/// y[n,o] = sum_k x[n,k] * w[o,k]
fn linear_fwd(y: &mut [f32], x: &[f32], w: &[f32], n: usize, k: usize, o: usize) {
    debug_assert_eq!(y.len(), n * o);
    for_each_row(y, o, |r, yrow| {
        let xrow = &x[r * k..(r + 1) * k];
        for (j, yv) in yrow.iter_mut().enumerate() {
            let wrow = &w[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            *yv = acc;
        }
    });
}

/// dx[n,k] = sum_o dy[n,o] * w[o,k]
fn linear_bwd_dx(dx: &mut [f32], dy: &[f32], w: &[f32], n: usize, k: usize, o: usize) {
    debug_assert_eq!(dx.len(), n * k);
    for_each_row(dx, k, |r, dxrow| {
        let dyrow = &dy[r * o..(r + 1) * o];
        for (kk, dxv) in dxrow.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (j, dyv) in dyrow.iter().enumerate() {
                acc += dyv * w[j * k + kk];
            }
            *dxv = acc;
        }
    });
}

/// dw[o,k] += sum_n dy[n,o] * x[n,k]
fn linear_bwd_dw(dw: &mut [f32], dy: &[f32], x: &[f32], n: usize, k: usize, o: usize) {
    debug_assert_eq!(dw.len(), o * k);
    for_each_row(dw, k, |j, dwrow| {
        for r in 0..n {
            let dyv = dy[r * o + j];
            if dyv == 0.0 {
                continue;
            }
            let xrow = &x[r * k..(r + 1) * k];
            for (dwv, xv) in dwrow.iter_mut().zip(xrow) {
                *dwv += dyv * xv;
            }
        }
    });
}

fn layernorm_fwd(
    out: &mut [f32],
    mean: &mut [f32],
    rstd: &mut [f32],
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    rows: usize,
    dim: usize,
) {
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mut mu = 0.0f32;
        for &v in xr {
            mu += v;
        }
        mu /= dim as f32;
        let mut var = 0.0f32;
        for &v in xr {
            let d = v - mu;
            var += d * d;
        }
        var /= dim as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let orow = &mut out[r * dim..(r + 1) * dim];
        for i in 0..dim {
            orow[i] = (xr[i] - mu) * rs * gamma[i] + beta[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
    dy: &[f32],
    x: &[f32],
    mean: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    rows: usize,
    dim: usize,
) {
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for i in 0..dim {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = dyr[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        let inv_n = 1.0 / dim as f32;
        let dxr = &mut dx[r * dim..(r + 1) * dim];
        for i in 0..dim {
            let xhat = (xr[i] - mu) * rs;
            let dxhat = dyr[i] * gamma[i];
            dxr[i] += rs * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
}

/// Mean cross-entropy and dlogits (softmax - onehot, scaled by 1/n) in place.
fn softmax_ce(logits: &mut [f32], targets: &[u32], rows: usize, classes: usize) -> f32 {
    let mut loss = 0.0f64;
    let inv = 1.0 / rows as f32;
    for r in 0..rows {
        let row = &mut logits[r * classes..(r + 1) * classes];
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut denom = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        let t = targets[r] as usize;
        loss += -((row[t] / denom).max(f32::MIN_POSITIVE).ln() as f64);
        for v in row.iter_mut() {
            *v /= denom;
        }
        row[t] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    (loss / rows as f64) as f32
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    lr: f32,
}

impl Adam {
    fn new(shapes: &[Vec<f32>], lr: f32) -> Adam {
        Adam {
            m: shapes.iter().map(|s| vec![0.0; s.len()]).collect(),
            v: shapes.iter().map(|s| vec![0.0; s.len()]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>]) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

fn zero_all(grads: &mut [Vec<f32>]) {
    for g in grads {
        g.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// char LM trainer
// ---------------------------------------------------------------------------

// parameter layout: [wte, wpe, blocks x (ln1g ln1b wq wk wv wo ln2g ln2b fc1 fc2), lnfg, lnfb, head]
const PER_BLOCK: usize = 10;

fn lm_param_shapes(spec: &TransformerSpec) -> Vec<usize> {
    let c = spec.d_model;
    let m = spec.mlp_dim();
    let mut shapes = vec![spec.vocab_size * c, spec.max_seq_len * c];
    for _ in 0..spec.n_layers {
        shapes.extend_from_slice(&[c, c, c * c, c * c, c * c, c * c, c, c, m * c, c * m]);
    }
    shapes.extend_from_slice(&[c, c, spec.vocab_size * c]);
    shapes
}

fn lm_init_params(spec: &TransformerSpec, rng: &mut Rng) -> Vec<Vec<f32>> {
    let shapes = lm_param_shapes(spec);
    let mut params: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
    for (i, n) in shapes.iter().enumerate() {
        let t = if i < 2 {
            (0..*n).map(|_| rng.uniform(-0.1, 0.1)).collect()
        } else if is_ln_param(spec, i) {
            // gamma tensors sit at even block offsets, beta at odd ones
            let odd = (i - 2) % 2 == 1;
            vec![if odd { 0.0 } else { 1.0 }; *n]
        } else {
            let fan_in = lm_fan_in(spec, i);
            let s = (1.0 / fan_in as f32).sqrt();
            (0..*n).map(|_| rng.uniform(-s, s)).collect()
        };
        params.push(t);
    }
    params
}

fn is_ln_param(spec: &TransformerSpec, i: usize) -> bool {
    let nb = spec.n_layers * PER_BLOCK;
    if i < 2 {
        return false;
    }
    if i >= 2 + nb {
        return i - 2 - nb < 2; // lnfg, lnfb
    }
    matches!((i - 2) % PER_BLOCK, 0 | 1 | 6 | 7)
}

fn lm_fan_in(spec: &TransformerSpec, i: usize) -> usize {
    let nb = spec.n_layers * PER_BLOCK;
    if i >= 2 + nb {
        return spec.d_model; // head
    }
    match (i - 2) % PER_BLOCK {
        8 => spec.d_model,   // fc1: d -> 4d
        9 => spec.mlp_dim(), // fc2: 4d -> d
        _ => spec.d_model,
    }
}

struct LayerActs {
    ln1: Vec<f32>,
    ln1_mean: Vec<f32>,
    ln1_rstd: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>, // [B,H,T,T] causal attention probabilities
    att: Vec<f32>,
    x1: Vec<f32>, // after attention residual
    ln2: Vec<f32>,
    ln2_mean: Vec<f32>,
    ln2_rstd: Vec<f32>,
    fc1: Vec<f32>, // pre-activation
    relu: Vec<f32>,
    x2: Vec<f32>, // after mlp residual
}

struct LmActs {
    x0: Vec<f32>,
    layers: Vec<LayerActs>,
    lnf: Vec<f32>,
    lnf_mean: Vec<f32>,
    lnf_rstd: Vec<f32>,
    logits: Vec<f32>,
}

impl LmActs {
    fn new(spec: &TransformerSpec, b: usize, t: usize) -> LmActs {
        let c = spec.d_model;
        let m = spec.mlp_dim();
        let n = b * t;
        let mk = |w: usize| vec![0.0f32; n * w];
        LmActs {
            x0: mk(c),
            layers: (0..spec.n_layers)
                .map(|_| LayerActs {
                    ln1: mk(c),
                    ln1_mean: vec![0.0; n],
                    ln1_rstd: vec![0.0; n],
                    q: mk(c),
                    k: mk(c),
                    v: mk(c),
                    probs: vec![0.0; b * spec.n_heads * t * t],
                    att: mk(c),
                    x1: mk(c),
                    ln2: mk(c),
                    ln2_mean: vec![0.0; n],
                    ln2_rstd: vec![0.0; n],
                    fc1: mk(m),
                    relu: mk(m),
                    x2: mk(c),
                })
                .collect(),
            lnf: mk(c),
            lnf_mean: vec![0.0; n],
            lnf_rstd: vec![0.0; n],
            logits: mk(spec.vocab_size),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_fwd(
    att: &mut [f32],
    probs: &mut [f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    b: usize,
    t: usize,
    heads: usize,
    c: usize,
) {
    let hs = c / heads;
    let scale = 1.0 / (hs as f32).sqrt();
    att.fill(0.0);
    for bi in 0..b {
        for h in 0..heads {
            let off = h * hs;
            for ti in 0..t {
                let qrow = &q[(bi * t + ti) * c + off..(bi * t + ti) * c + off + hs];
                let prow_base = ((bi * heads + h) * t + ti) * t;
                let mut max = f32::NEG_INFINITY;
                for tj in 0..=ti {
                    let krow = &k[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    let mut dot = 0.0f32;
                    for i in 0..hs {
                        dot += qrow[i] * krow[i];
                    }
                    let s = dot * scale;
                    probs[prow_base + tj] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0f32;
                for tj in 0..=ti {
                    let e = (probs[prow_base + tj] - max).exp();
                    probs[prow_base + tj] = e;
                    denom += e;
                }
                for tj in 0..=ti {
                    probs[prow_base + tj] /= denom;
                }
                let arow = (bi * t + ti) * c + off;
                for tj in 0..=ti {
                    let p = probs[prow_base + tj];
                    let vrow = &v[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    for i in 0..hs {
                        att[arow + i] += p * vrow[i];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd(
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
    datt: &[f32],
    probs: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    b: usize,
    t: usize,
    heads: usize,
    c: usize,
) {
    let hs = c / heads;
    let scale = 1.0 / (hs as f32).sqrt();
    dq.fill(0.0);
    dk.fill(0.0);
    dv.fill(0.0);
    let mut dp = vec![0.0f32; t];
    let mut ds = vec![0.0f32; t];
    for bi in 0..b {
        for h in 0..heads {
            let off = h * hs;
            for ti in 0..t {
                let prow_base = ((bi * heads + h) * t + ti) * t;
                let darow = &datt[(bi * t + ti) * c + off..(bi * t + ti) * c + off + hs];
                // dv and dp
                let mut dot_pp = 0.0f32;
                for tj in 0..=ti {
                    let vrow = &v[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    let mut acc = 0.0f32;
                    for i in 0..hs {
                        acc += darow[i] * vrow[i];
                    }
                    dp[tj] = acc;
                    dot_pp += probs[prow_base + tj] * acc;
                    let dvrow = &mut dv[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    let p = probs[prow_base + tj];
                    for i in 0..hs {
                        dvrow[i] += p * darow[i];
                    }
                }
                // softmax jacobian
                for tj in 0..=ti {
                    ds[tj] = probs[prow_base + tj] * (dp[tj] - dot_pp);
                }
                // dq, dk
                let qrow = &q[(bi * t + ti) * c + off..(bi * t + ti) * c + off + hs];
                let dqrow_base = (bi * t + ti) * c + off;
                for tj in 0..=ti {
                    let g = ds[tj] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let krow = &k[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    let dkrow = &mut dk[(bi * t + tj) * c + off..(bi * t + tj) * c + off + hs];
                    for i in 0..hs {
                        dkrow[i] += g * qrow[i];
                    }
                    for i in 0..hs {
                        dq[dqrow_base + i] += g * krow[i];
                    }
                }
            }
        }
    }
}

/// Forward over a [B, T] token batch; fills `acts` and returns dlogits-ready
/// logits plus the mean loss.
fn lm_forward(
    params: &[Vec<f32>],
    spec: &TransformerSpec,
    acts: &mut LmActs,
    ix: &[u32],
    targets: &[u32],
    b: usize,
    t: usize,
) -> f32 {
    let c = spec.d_model;
    let m = spec.mlp_dim();
    let n = b * t;
    let nb = spec.n_layers * PER_BLOCK;
    let (wte, wpe) = (&params[0], &params[1]);
    for bi in 0..b {
        for ti in 0..t {
            let tok = ix[bi * t + ti] as usize;
            let dst = &mut acts.x0[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            let te = &wte[tok * c..(tok + 1) * c];
            let pe = &wpe[ti * c..(ti + 1) * c];
            for i in 0..c {
                dst[i] = te[i] + pe[i];
            }
        }
    }
    for l in 0..spec.n_layers {
        let base = 2 + l * PER_BLOCK;
        let (x_prev, layer) = if l == 0 {
            (&acts.x0, &mut acts.layers[0])
        } else {
            let (before, after) = acts.layers.split_at_mut(l);
            (&before[l - 1].x2, &mut after[0])
        };
        layernorm_fwd(
            &mut layer.ln1,
            &mut layer.ln1_mean,
            &mut layer.ln1_rstd,
            x_prev,
            &params[base],
            &params[base + 1],
            n,
            c,
        );
        linear_fwd(&mut layer.q, &layer.ln1, &params[base + 2], n, c, c);
        linear_fwd(&mut layer.k, &layer.ln1, &params[base + 3], n, c, c);
        linear_fwd(&mut layer.v, &layer.ln1, &params[base + 4], n, c, c);
        attention_fwd(
            &mut layer.att,
            &mut layer.probs,
            &layer.q,
            &layer.k,
            &layer.v,
            b,
            t,
            spec.n_heads,
            c,
        );
        linear_fwd(&mut layer.x1, &layer.att, &params[base + 5], n, c, c);
        for i in 0..n * c {
            layer.x1[i] += x_prev[i];
        }
        layernorm_fwd(
            &mut layer.ln2,
            &mut layer.ln2_mean,
            &mut layer.ln2_rstd,
            &layer.x1,
            &params[base + 6],
            &params[base + 7],
            n,
            c,
        );
        linear_fwd(&mut layer.fc1, &layer.ln2, &params[base + 8], n, c, m);
        for i in 0..n * m {
            layer.relu[i] = layer.fc1[i].max(0.0);
        }
        linear_fwd(&mut layer.x2, &layer.relu, &params[base + 9], n, m, c);
        for i in 0..n * c {
            layer.x2[i] += layer.x1[i];
        }
    }
    let x_last = &acts.layers[spec.n_layers - 1].x2;
    layernorm_fwd(
        &mut acts.lnf,
        &mut acts.lnf_mean,
        &mut acts.lnf_rstd,
        x_last,
        &params[2 + nb],
        &params[2 + nb + 1],
        n,
        c,
    );
    linear_fwd(
        &mut acts.logits,
        &acts.lnf,
        &params[2 + nb + 2],
        n,
        c,
        spec.vocab_size,
    );
    softmax_ce(&mut acts.logits, targets, n, spec.vocab_size)
}

fn lm_backward(
    params: &[Vec<f32>],
    grads: &mut [Vec<f32>],
    spec: &TransformerSpec,
    acts: &LmActs,
    ix: &[u32],
    b: usize,
    t: usize,
) {
    let c = spec.d_model;
    let m = spec.mlp_dim();
    let n = b * t;
    let nb = spec.n_layers * PER_BLOCK;
    let dlogits = &acts.logits; // softmax_ce left dlogits in place

    // head and final LN
    let mut dlnf = vec![0.0f32; n * c];
    linear_bwd_dx(&mut dlnf, dlogits, &params[2 + nb + 2], n, c, spec.vocab_size);
    {
        let (g, rest) = grads.split_at_mut(2 + nb + 2);
        let _ = g;
        linear_bwd_dw(&mut rest[0], dlogits, &acts.lnf, n, c, spec.vocab_size);
    }
    let mut dx = vec![0.0f32; n * c];
    {
        let x_last = &acts.layers[spec.n_layers - 1].x2;
        let (ga, gb) = grads.split_at_mut(2 + nb + 1);
        layernorm_bwd(
            &mut dx,
            &mut ga[2 + nb],
            &mut gb[0],
            &dlnf,
            x_last,
            &acts.lnf_mean,
            &acts.lnf_rstd,
            &params[2 + nb],
            n,
            c,
        );
    }

    let mut dq = vec![0.0f32; n * c];
    let mut dk = vec![0.0f32; n * c];
    let mut dv = vec![0.0f32; n * c];
    let mut dtmp_c = vec![0.0f32; n * c];
    let mut dtmp_m = vec![0.0f32; n * m];
    for l in (0..spec.n_layers).rev() {
        let base = 2 + l * PER_BLOCK;
        let layer = &acts.layers[l];
        let x_prev: &[f32] = if l == 0 { &acts.x0 } else { &acts.layers[l - 1].x2 };

        // dx holds d(x2). mlp branch: x2 = x1 + fc2(relu(fc1(ln2(x1))))
        // fc2
        linear_bwd_dx(&mut dtmp_m, &dx, &params[base + 9], n, m, c);
        {
            let (_, rest) = grads.split_at_mut(base + 9);
            linear_bwd_dw(&mut rest[0], &dx, &layer.relu, n, m, c);
        }
        // relu
        for i in 0..n * m {
            if layer.fc1[i] <= 0.0 {
                dtmp_m[i] = 0.0;
            }
        }
        // fc1
        linear_bwd_dx(&mut dtmp_c, &dtmp_m, &params[base + 8], n, c, m);
        {
            let (_, rest) = grads.split_at_mut(base + 8);
            linear_bwd_dw(&mut rest[0], &dtmp_m, &layer.ln2, n, c, m);
        }
        // ln2: adds into dx (the residual pass-through already lives there)
        {
            let (ga, gb) = grads.split_at_mut(base + 7);
            layernorm_bwd(
                &mut dx,
                &mut ga[base + 6],
                &mut gb[0],
                &dtmp_c,
                &layer.x1,
                &layer.ln2_mean,
                &layer.ln2_rstd,
                &params[base + 6],
                n,
                c,
            );
        }

        // attention branch: x1 = x_prev + wo(att)
        linear_bwd_dx(&mut dtmp_c, &dx, &params[base + 5], n, c, c);
        {
            let (_, rest) = grads.split_at_mut(base + 5);
            linear_bwd_dw(&mut rest[0], &dx, &layer.att, n, c, c);
        }
        attention_bwd(
            &mut dq,
            &mut dk,
            &mut dv,
            &dtmp_c,
            &layer.probs,
            &layer.q,
            &layer.k,
            &layer.v,
            b,
            t,
            spec.n_heads,
            c,
        );
        // q,k,v projections: accumulate into dln1
        let mut dln1 = vec![0.0f32; n * c];
        let mut dxpart = vec![0.0f32; n * c];
        for (dyv, widx) in [(&dq, base + 2), (&dk, base + 3), (&dv, base + 4)] {
            linear_bwd_dx(&mut dxpart, dyv, &params[widx], n, c, c);
            for i in 0..n * c {
                dln1[i] += dxpart[i];
            }
            let (_, rest) = grads.split_at_mut(widx);
            linear_bwd_dw(&mut rest[0], dyv, &layer.ln1, n, c, c);
        }
        // ln1: adds into dx (residual pass-through)
        {
            let (ga, gb) = grads.split_at_mut(base + 1);
            layernorm_bwd(
                &mut dx,
                &mut ga[base],
                &mut gb[0],
                &dln1,
                x_prev,
                &layer.ln1_mean,
                &layer.ln1_rstd,
                &params[base],
                n,
                c,
            );
        }
    }

    // embeddings (sequential scatter)
    let (gte, rest) = grads.split_at_mut(1);
    let gpe = &mut rest[0];
    for bi in 0..b {
        for ti in 0..t {
            let tok = ix[bi * t + ti] as usize;
            let src = &dx[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            let te = &mut gte[0][tok * c..(tok + 1) * c];
            for i in 0..c {
                te[i] += src[i];
            }
            let pe = &mut gpe[ti * c..(ti + 1) * c];
            for i in 0..c {
                pe[i] += src[i];
            }
        }
    }
}

fn lm_finalize(params: Vec<Vec<f32>>, spec: TransformerSpec, vocab: Option<crate::model::Vocab>) -> Transformer {
    let c = spec.d_model;
    let m = spec.mlp_dim();
    let mut it = params.into_iter();
    let wte = it.next().unwrap();
    let wpe = it.next().unwrap();
    let mut blocks = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let ln1 = LayerNorm {
            gamma: it.next().unwrap(),
            beta: it.next().unwrap(),
        };
        let wq = LinearWeights::new(it.next().unwrap(), c, c);
        let wk = LinearWeights::new(it.next().unwrap(), c, c);
        let wv = LinearWeights::new(it.next().unwrap(), c, c);
        let wo = LinearWeights::new(it.next().unwrap(), c, c);
        let ln2 = LayerNorm {
            gamma: it.next().unwrap(),
            beta: it.next().unwrap(),
        };
        let fc1 = LinearWeights::new(it.next().unwrap(), m, c);
        let fc2 = LinearWeights::new(it.next().unwrap(), c, m);
        blocks.push(Block {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            fc1,
            fc2,
        });
    }
    let lnf = LayerNorm {
        gamma: it.next().unwrap(),
        beta: it.next().unwrap(),
    };
    let head = LinearWeights::new(it.next().unwrap(), spec.vocab_size, c);
    Transformer {
        spec,
        wte,
        wpe,
        blocks,
        lnf,
        head,
        vocab,
    }
}

fn sample_lm_batch(
    train: &[u32],
    b: usize,
    t: usize,
    rng: &mut Rng,
    ix: &mut Vec<u32>,
    targets: &mut Vec<u32>,
) {
    ix.clear();
    targets.clear();
    for _ in 0..b {
        let pos = rng.below(train.len() - t - 1);
        ix.extend_from_slice(&train[pos..pos + t]);
        targets.extend_from_slice(&train[pos + 1..pos + t + 1]);
    }
}

/// Mean held-out cross-entropy over deterministic windows.
fn lm_eval(params: &[Vec<f32>], spec: &TransformerSpec, holdout: &[u32], t: usize) -> f32 {
    let b = LM_BATCH.min((holdout.len() - 1) / t).max(1);
    let mut acts = LmActs::new(spec, b, t);
    let n_batches = 4usize;
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut ix = Vec::new();
    let mut targets = Vec::new();
    let span = holdout.len() - t - 1;
    for bi in 0..n_batches {
        ix.clear();
        targets.clear();
        for r in 0..b {
            let pos = (bi * b + r) * span / (n_batches * b).max(1) % span.max(1);
            ix.extend_from_slice(&holdout[pos..pos + t]);
            targets.extend_from_slice(&holdout[pos + 1..pos + t + 1]);
        }
        total += lm_forward(params, spec, &mut acts, &ix, &targets, b, t) as f64;
        count += 1;
    }
    (total / count as f64) as f32
}

/// Train a char-level LM on the corpus. Deterministic given the seed stream;
/// aborts with [`Error::TrainingDiverged`] if the loss goes non-finite.
pub fn train_char_lm(
    corpus: &Corpus,
    spec: &TransformerSpec,
    steps: usize,
    rng: &mut Rng,
) -> Result<(Transformer, TrainReport)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidSpec("empty corpus".into()));
    }
    if corpus.vocab.size() != spec.vocab_size {
        return Err(Error::InvalidSpec(format!(
            "corpus vocab {} != spec vocab_size {}",
            corpus.vocab.size(),
            spec.vocab_size
        )));
    }
    let t = spec.max_seq_len;
    let (train, holdout) = corpus.split(HOLDOUT_FRAC);
    if train.len() < t + 2 || holdout.len() < t + 2 {
        return Err(Error::InvalidSpec("corpus too small for seq_len".into()));
    }

    let mut params = lm_init_params(spec, rng);
    let mut grads: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut adam = Adam::new(&params, LM_LR);
    let mut acts = LmActs::new(spec, LM_BATCH, t);
    let mut ix = Vec::new();
    let mut targets = Vec::new();
    let mut final_loss = f32::NAN;

    for step in 0..steps {
        sample_lm_batch(train, LM_BATCH, t, rng, &mut ix, &mut targets);
        let loss = lm_forward(&params, spec, &mut acts, &ix, &targets, LM_BATCH, t);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(step));
        }
        zero_all(&mut grads);
        lm_backward(&params, &mut grads, spec, &acts, &ix, LM_BATCH, t);
        adam.step(&mut params, &grads);
        final_loss = loss;
    }

    let held_out_loss = lm_eval(&params, spec, holdout, t);
    let model = lm_finalize(params, *spec, Some(corpus.vocab.clone()));
    Ok((
        model,
        TrainReport {
            final_loss,
            held_out_loss,
            held_out_accuracy: None,
        },
    ))
}

// ---------------------------------------------------------------------------
// classifier trainer
// ---------------------------------------------------------------------------

struct ClsActs {
    /// Pre-activations per layer.
    z: Vec<Vec<f32>>,
    /// Layer inputs (a[0] = x, a[l] = input to layer l).
    a: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

fn cls_forward(
    w: &[Vec<f32>],
    bias: &[Vec<f32>],
    spec: &ClassifierSpec,
    acts: &mut ClsActs,
    x: &[f32],
    targets: &[u32],
    rows: usize,
) -> f32 {
    let depth = spec.depth;
    acts.a[0].copy_from_slice(x);
    for l in 0..depth {
        let (out, inp) = spec.layer_dims(l);
        let (a_in, z) = (&acts.a[l], &mut acts.z[l]);
        linear_fwd(z, a_in, &w[l], rows, inp, out);
        for r in 0..rows {
            for (zv, bv) in z[r * out..(r + 1) * out].iter_mut().zip(&bias[l]) {
                *zv += bv;
            }
        }
        if l + 1 == depth {
            acts.logits.copy_from_slice(z);
        } else {
            let residual = l > 0;
            let (prev, next) = {
                let (lo, hi) = acts.a.split_at_mut(l + 1);
                (&lo[l], &mut hi[0])
            };
            for i in 0..rows * out {
                let mut v = acts.z[l][i].max(0.0);
                if residual {
                    v += prev[i];
                }
                next[i] = v;
            }
        }
    }
    softmax_ce(&mut acts.logits, targets, rows, spec.n_classes)
}

fn cls_backward(
    w: &[Vec<f32>],
    gw: &mut [Vec<f32>],
    gb: &mut [Vec<f32>],
    spec: &ClassifierSpec,
    acts: &ClsActs,
    rows: usize,
) {
    let depth = spec.depth;
    let mut da: Vec<f32> = Vec::new();
    let mut dz: Vec<f32> = acts.logits.clone(); // dlogits from softmax_ce
    for l in (0..depth).rev() {
        let (out, inp) = spec.layer_dims(l);
        if l + 1 != depth {
            // dz = da . relu'(z); residual contribution handled below
            dz = da.clone();
            for i in 0..rows * out {
                if acts.z[l][i] <= 0.0 {
                    dz[i] = 0.0;
                }
            }
        }
        for r in 0..rows {
            for (gbv, dzv) in gb[l].iter_mut().zip(&dz[r * out..(r + 1) * out]) {
                *gbv += dzv;
            }
        }
        linear_bwd_dw(&mut gw[l], &dz, &acts.a[l], rows, inp, out);
        let mut dprev = vec![0.0f32; rows * inp];
        linear_bwd_dx(&mut dprev, &dz, &w[l], rows, inp, out);
        // identity skip: middle layers pass da through to their input
        if l > 0 && l + 1 != depth {
            for i in 0..rows * inp {
                dprev[i] += da[i];
            }
        }
        da = dprev;
    }
}

/// Train a classifier on the dataset (leading 90% train, trailing 10% eval).
pub fn train_classifier(
    data: &BlobDataset,
    spec: &ClassifierSpec,
    steps: usize,
    rng: &mut Rng,
) -> Result<(Classifier, TrainReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidSpec("empty dataset".into()));
    }
    if data.input_dim != spec.input_dim {
        return Err(Error::InvalidSpec(format!(
            "dataset input_dim {} != spec {}",
            data.input_dim, spec.input_dim
        )));
    }
    let n = data.len();
    let train_n = ((n as f32) * (1.0 - HOLDOUT_FRAC)) as usize;
    let train_n = train_n.clamp(1, n);

    // init mirrors Classifier::init
    let proto = Classifier::init(*spec, true, rng)?;
    let mut w: Vec<Vec<f32>> = proto.layers.iter().map(|l| l.w.weights().to_vec()).collect();
    let mut bias: Vec<Vec<f32>> = proto
        .layers
        .iter()
        .map(|l| l.bias.clone().unwrap())
        .collect();

    let mut all: Vec<Vec<f32>> = w.clone();
    all.extend(bias.clone());
    let mut adam = Adam::new(&all, CLS_LR);

    let rows = CLS_BATCH.min(train_n);
    let mut acts = ClsActs {
        z: (0..spec.depth)
            .map(|l| vec![0.0; rows * spec.layer_dims(l).0])
            .collect(),
        a: (0..spec.depth)
            .map(|l| vec![0.0; rows * spec.layer_dims(l).1])
            .collect(),
        logits: vec![0.0; rows * spec.n_classes],
    };
    let mut gw: Vec<Vec<f32>> = w.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut gb: Vec<Vec<f32>> = bias.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut x = vec![0.0f32; rows * spec.input_dim];
    let mut targets = vec![0u32; rows];
    let mut final_loss = f32::NAN;

    for step in 0..steps {
        for r in 0..rows {
            let idx = rng.below(train_n);
            x[r * spec.input_dim..(r + 1) * spec.input_dim].copy_from_slice(&data.images[idx]);
            targets[r] = data.labels[idx] as u32;
        }
        let loss = cls_forward(&w, &bias, spec, &mut acts, &x, &targets, rows);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(step));
        }
        for g in gw.iter_mut().chain(gb.iter_mut()) {
            g.fill(0.0);
        }
        cls_backward(&w, &mut gw, &mut gb, spec, &acts, rows);
        // adam over (weights ++ biases)
        let mut params: Vec<Vec<f32>> = Vec::with_capacity(w.len() + bias.len());
        params.append(&mut w);
        params.append(&mut bias);
        let mut grads: Vec<Vec<f32>> = Vec::with_capacity(gw.len() + gb.len());
        grads.extend(gw.iter().cloned());
        grads.extend(gb.iter().cloned());
        adam.step(&mut params, &grads);
        bias = params.split_off(spec.depth);
        w = params;
        final_loss = loss;
    }

    // held-out evaluation
    let model = Classifier {
        spec: *spec,
        layers: w
            .into_iter()
            .zip(bias)
            .map(|(wt, b)| {
                let out = b.len();
                let inp = wt.len() / out;
                ClsLayer {
                    w: LinearWeights::new(wt, out, inp),
                    bias: Some(b),
                }
            })
            .collect(),
    };
    let (held_out_loss, held_out_accuracy) = eval_classifier(&model, data, train_n);
    Ok((
        model,
        TrainReport {
            final_loss,
            held_out_loss,
            held_out_accuracy: Some(held_out_accuracy),
        },
    ))
}

fn eval_classifier(model: &Classifier, data: &BlobDataset, from: usize) -> (f32, f32) {
    use crate::model::classifier::forward_classifier;
    use crate::quant::QuantConfig;
    use crate::tensor::Tensor;
    let idxs: Vec<usize> = (from..data.len()).collect();
    if idxs.is_empty() {
        return (f32::NAN, f32::NAN);
    }
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for &i in &idxs {
        let x = Tensor::new(&[1, data.input_dim], data.images[i].clone()).unwrap();
        let y = forward_classifier(model, &x, &QuantConfig::none(), None).unwrap();
        let ls = crate::tensor::log_softmax(y.row(0));
        let t = data.labels[i] as usize;
        loss += -(ls[t] as f64);
        let pred = y
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if pred == t {
            correct += 1;
        }
    }
    (
        (loss / idxs.len() as f64) as f32,
        correct as f32 / idxs.len() as f32,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> TransformerSpec {
        TransformerSpec {
            vocab_size: 0, // filled from corpus
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
        }
    }

    fn tiny_corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. pack my box with five dozen jugs. "
            .repeat(40);
        Corpus::from_text(text)
    }

    #[test]
    fn untrained_loss_near_uniform() {
        let corpus = tiny_corpus();
        let spec = TransformerSpec {
            vocab_size: corpus.vocab.size(),
            ..tiny_spec()
        };
        let (_, report) = train_char_lm(&corpus, &spec, 0, &mut Rng::new(1)).unwrap();
        let uniform = (spec.vocab_size as f32).ln();
        assert!(
            (report.held_out_loss - uniform).abs() < 0.5,
            "loss {} vs ln V {}",
            report.held_out_loss,
            uniform
        );
    }

    #[test]
    fn loss_decreases_with_training() {
        let corpus = tiny_corpus();
        let spec = TransformerSpec {
            vocab_size: corpus.vocab.size(),
            ..tiny_spec()
        };
        let (_, r0) = train_char_lm(&corpus, &spec, 0, &mut Rng::new(2)).unwrap();
        let (_, r1) = train_char_lm(&corpus, &spec, 150, &mut Rng::new(2)).unwrap();
        assert!(
            r1.held_out_loss < r0.held_out_loss - 0.3,
            "no improvement: {} -> {}",
            r0.held_out_loss,
            r1.held_out_loss
        );
    }

    #[test]
    fn same_seed_bit_identical_weights() {
        let corpus = tiny_corpus();
        let spec = TransformerSpec {
            vocab_size: corpus.vocab.size(),
            ..tiny_spec()
        };
        let (m1, _) = train_char_lm(&corpus, &spec, 12, &mut Rng::new(3)).unwrap();
        let (m2, _) = train_char_lm(&corpus, &spec, 12, &mut Rng::new(3)).unwrap();
        assert_eq!(m1.wte, m2.wte);
        assert_eq!(m1.wpe, m2.wpe);
        for (b1, b2) in m1.blocks.iter().zip(&m2.blocks) {
            assert_eq!(b1.wq.weights(), b2.wq.weights());
            assert_eq!(b1.fc2.weights(), b2.fc2.weights());
        }
        assert_eq!(m1.head.weights(), m2.head.weights());
    }

    fn numeric_grad(
        params: &mut [Vec<f32>],
        spec: &TransformerSpec,
        ix: &[u32],
        targets: &[u32],
        b: usize,
        t: usize,
        tensor: usize,
        idx: usize,
    ) -> f32 {
        let h = 1e-2f32;
        let orig = params[tensor][idx];
        let mut acts = LmActs::new(spec, b, t);
        params[tensor][idx] = orig + h;
        let lp = lm_forward(params, spec, &mut acts, ix, targets, b, t);
        params[tensor][idx] = orig - h;
        let lm = lm_forward(params, spec, &mut acts, ix, targets, b, t);
        params[tensor][idx] = orig;
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let spec = TransformerSpec {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 5,
        };
        let mut rng = Rng::new(4);
        let mut params = lm_init_params(&spec, &mut rng);
        let (b, t) = (2usize, 5usize);
        let ix: Vec<u32> = (0..b * t).map(|_| rng.below(13) as u32).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.below(13) as u32).collect();
        let mut acts = LmActs::new(&spec, b, t);
        lm_forward(&params, &spec, &mut acts, &ix, &targets, b, t);
        let mut grads: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        lm_backward(&params, &mut grads, &spec, &acts, &ix, b, t);

        // check the largest-magnitude gradient entry of every tensor
        for tensor in 0..params.len() {
            let (idx, &ga) = grads[tensor]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            if ga.abs() < 1e-4 {
                continue;
            }
            let gn = numeric_grad(&mut params, &spec, &ix, &targets, b, t, tensor, idx);
            let err = (ga - gn).abs();
            assert!(
                err <= 2e-3 + 0.08 * gn.abs(),
                "tensor {tensor} idx {idx}: analytic {ga} vs numeric {gn}"
            );
        }
    }

    #[test]
    fn classifier_trains_to_high_accuracy() {
        let data = BlobDataset::synthetic(30, 16, 4, 0.4, 11);
        let spec = ClassifierSpec {
            input_dim: 16,
            hidden_dim: 24,
            depth: 3,
            n_classes: 4,
        };
        let (_, report) = train_classifier(&data, &spec, 250, &mut Rng::new(5)).unwrap();
        assert!(
            report.held_out_accuracy.unwrap() > 0.9,
            "accuracy {:?}",
            report.held_out_accuracy
        );
    }

    #[test]
    fn deep_classifier_trains_without_divergence() {
        let data = BlobDataset::synthetic(20, 16, 4, 0.4, 12);
        let spec = ClassifierSpec {
            input_dim: 16,
            hidden_dim: 24,
            depth: 18,
            n_classes: 4,
        };
        let (_, report) = train_classifier(&data, &spec, 200, &mut Rng::new(6)).unwrap();
        assert!(report.final_loss.is_finite());
        assert!(report.held_out_accuracy.unwrap() > 0.5);
    }

    fn cls_numeric_grad(
        w: &mut [Vec<f32>],
        bias: &[Vec<f32>],
        spec: &ClassifierSpec,
        x: &[f32],
        targets: &[u32],
        rows: usize,
        layer: usize,
        idx: usize,
    ) -> f32 {
        let h = 1e-2f32;
        let mut acts = ClsActs {
            z: (0..spec.depth)
                .map(|l| vec![0.0; rows * spec.layer_dims(l).0])
                .collect(),
            a: (0..spec.depth)
                .map(|l| vec![0.0; rows * spec.layer_dims(l).1])
                .collect(),
            logits: vec![0.0; rows * spec.n_classes],
        };
        let orig = w[layer][idx];
        w[layer][idx] = orig + h;
        let lp = cls_forward(w, bias, spec, &mut acts, x, targets, rows);
        w[layer][idx] = orig - h;
        let lm = cls_forward(w, bias, spec, &mut acts, x, targets, rows);
        w[layer][idx] = orig;
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let spec = ClassifierSpec {
            input_dim: 6,
            hidden_dim: 8,
            depth: 4,
            n_classes: 3,
        };
        let mut rng = Rng::new(7);
        let proto = Classifier::init(spec, true, &mut rng).unwrap();
        let mut w: Vec<Vec<f32>> = proto.layers.iter().map(|l| l.w.weights().to_vec()).collect();
        let bias: Vec<Vec<f32>> = proto.layers.iter().map(|l| l.bias.clone().unwrap()).collect();
        let rows = 3usize;
        let x: Vec<f32> = (0..rows * 6).map(|_| rng.normal()).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.below(3) as u32).collect();
        let mut acts = ClsActs {
            z: (0..spec.depth)
                .map(|l| vec![0.0; rows * spec.layer_dims(l).0])
                .collect(),
            a: (0..spec.depth)
                .map(|l| vec![0.0; rows * spec.layer_dims(l).1])
                .collect(),
            logits: vec![0.0; rows * spec.n_classes],
        };
        cls_forward(&w, &bias, &spec, &mut acts, &x, &targets, rows);
        let mut gw: Vec<Vec<f32>> = w.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut gb: Vec<Vec<f32>> = bias.iter().map(|t| vec![0.0; t.len()]).collect();
        cls_backward(&w, &mut gw, &mut gb, &spec, &acts, rows);
        for layer in 0..spec.depth {
            let (idx, &ga) = gw[layer]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            if ga.abs() < 1e-4 {
                continue;
            }
            let gn = cls_numeric_grad(&mut w, &bias, &spec, &x, &targets, rows, layer, idx);
            assert!(
                (ga - gn).abs() <= 2e-3 + 0.08 * gn.abs(),
                "layer {layer} idx {idx}: analytic {ga} vs numeric {gn}"
            );
        }
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let corpus = tiny_corpus();
        let spec = TransformerSpec {
            vocab_size: corpus.vocab.size() + 3,
            ..tiny_spec()
        };
        assert!(train_char_lm(&corpus, &spec, 1, &mut Rng::new(8)).is_err());
    }
}
