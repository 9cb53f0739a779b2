//! Shared test support: finite-difference gradient checking and
//! straight-line f64 reference implementations used as oracles.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmatcher::tensor::ops;
use vmatcher::{backward, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted scalarization of a tensor: sum_i w_i * y_i, recorded on the tape
/// so the analytic gradient sees the same weighting as the finite-difference
/// quotient. Plain sums would null the gradient of sum-preserving ops.
pub fn weighted_loss(y: &Tensor, weights: &Tensor) -> Tensor {
    let prod = ops::mul(y, weights).unwrap();
    ops::sum_all(&prod)
}

fn weighted_value(y: &[f32], w: &[f32]) -> f64 {
    y.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central finite-difference check of `forward` against the tape gradient.
///
/// `forward` maps the perturbable inputs to an output tensor; the check
/// scalarizes with fixed random weights and compares d(loss)/d(input)
/// element by element. The relative error uses a symmetric denominator
/// with an absolute floor so near-zero gradients do not blow up the ratio.
pub fn check_grads<F>(inputs: &[Tensor], forward: F, h: f32, tol: f32, seed: u64)
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let mut r = rng(seed ^ 0x5eed);
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.require_grad()).collect();

    let (out_shape, out_numel) = {
        let probe = forward(inputs);
        (probe.shape().to_vec(), probe.numel())
    };
    let wdata: Vec<f32> = (0..out_numel).map(|_| r.gen_range(-1.0..1.0)).collect();
    let weights = Tensor::from_vec(&out_shape, wdata.clone()).unwrap();

    // Analytic gradients.
    {
        let _tape = Tape::begin().unwrap();
        let y = forward(&leaves);
        let loss = weighted_loss(&y, &weights);
        backward(&loss).unwrap();
    }

    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| panic!("input {li} received no gradient"));
        let base = leaf.data().to_vec();
        for ei in 0..base.len() {
            let mut plus = base.clone();
            plus[ei] += h;
            let mut minus = base.clone();
            minus[ei] -= h;
            let eval = |v: Vec<f32>| {
                let mut swapped: Vec<Tensor> = inputs.to_vec();
                swapped[li] = Tensor::from_vec(leaf.shape(), v).unwrap();
                let y = forward(&swapped);
                weighted_value(y.data(), &wdata)
            };
            let fd = ((eval(plus) - eval(minus)) / (2.0 * h as f64)) as f32;
            let a = analytic[ei];
            let denom = a.abs().max(fd.abs()).max(1e-2);
            let rel = (a - fd).abs() / denom;
            assert!(
                rel <= tol,
                "input {li} element {ei}: analytic {a} vs fd {fd} (rel {rel}, tol {tol})"
            );
        }
    }
}

pub fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// Straight-line f64 references (independent of the tensor core)
// ---------------------------------------------------------------------------

pub fn ref_linear(x: &[f64], w: &[f64], b: Option<&[f64]>, m: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * cout];
    for i in 0..m {
        for j in 0..cout {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for p in 0..cin {
                acc += x[i * cin + p] * w[p * cout + j];
            }
            y[i * cout + j] = acc;
        }
    }
    y
}

pub fn ref_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: f64 = exps.iter().sum();
        for c in 0..cols {
            y[r * cols + c] = exps[c] / s;
        }
    }
    y
}

pub fn ref_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, c: usize, eps: f64) -> Vec<f64> {
    let mut y = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            y[r * c + j] = gamma[j] * (row[j] - mean) * is + beta[j];
        }
    }
    y
}

pub fn ref_silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
}

/// Depthwise non-causal conv1d, symmetric zero padding, kernel length k.
pub fn ref_conv1d_depthwise(x: &[f64], w: &[f64], b: &[f64], c: usize, l: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut y = vec![0.0; c * l];
    for ch in 0..c {
        for t in 0..l {
            let mut acc = b[ch];
            for dk in 0..k {
                let src = t as isize + dk as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    acc += w[ch * k + dk] * x[ch * l + src as usize];
                }
            }
            y[ch * l + t] = acc;
        }
    }
    y
}

/// Selective scan reference: per-step ZOH-discretized recurrence in f64.
/// a[c,n], delta/u [l,c], b/cmat [l,n]; B uses the Euler form.
#[allow(clippy::too_many_arguments)]
pub fn ref_selective_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    cmat: &[f64],
    l: usize,
    c: usize,
    n: usize,
) -> Vec<f64> {
    let mut h = vec![0.0; c * n];
    let mut y = vec![0.0; l * c];
    for t in 0..l {
        for ch in 0..c {
            let dt = delta[t * c + ch];
            let ut = u[t * c + ch];
            let mut acc = 0.0;
            for j in 0..n {
                let abar = (dt * a[ch * n + j]).exp();
                h[ch * n + j] = abar * h[ch * n + j] + dt * b[t * n + j] * ut;
                acc += cmat[t * n + j] * h[ch * n + j];
            }
            y[t * c + ch] = acc;
        }
    }
    y
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// f64 re-derivation of the full selective scan from trainable parameters:
/// softplus-projected Δ, linear B/C projections, A = −exp(a_log).
pub fn ref_scan_selective_params(p: &vmatcher::SsmParams, x: &[f64], l: usize, c: usize) -> Vec<f64> {
    let n = p.state_dim;
    let wd = to_f64(&p.w_delta);
    let bd = to_f64(&p.b_delta);
    let wb = to_f64(&p.w_b);
    let wc = to_f64(&p.w_c);
    let al = to_f64(&p.a_log);
    let mut h = vec![0.0f64; c * n];
    let mut y = vec![0.0f64; l * c];
    for t in 0..l {
        let xt = &x[t * c..(t + 1) * c];
        let mut delta = vec![0.0f64; c];
        for j in 0..c {
            let mut acc = bd[j];
            for i in 0..c {
                acc += xt[i] * wd[i * c + j];
            }
            delta[j] = if acc > 30.0 { acc } else { acc.exp().ln_1p() };
        }
        let mut bt = vec![0.0f64; n];
        let mut ct = vec![0.0f64; n];
        for j in 0..n {
            for i in 0..c {
                bt[j] += xt[i] * wb[i * n + j];
                ct[j] += xt[i] * wc[i * n + j];
            }
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..n {
                let a = -al[ch * n + j].exp();
                let abar = (delta[ch] * a).exp();
                h[ch * n + j] = abar * h[ch * n + j] + delta[ch] * bt[j] * xt[ch];
                acc += ct[j] * h[ch * n + j];
            }
            y[t * c + ch] = acc;
        }
    }
    y
}

pub fn assert_close(actual: &[f32], expected: &[f64], tol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length");
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a as f64 - e).abs() <= tol,
            "{what}: element {i}: {a} vs {e}"
        );
    }
}
