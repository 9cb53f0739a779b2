//! State-space machinery: ZOH discretization, recurrent and convolutional
//! scans over diagonal systems, and the input-dependent selective scan used
//! inside MambaVision blocks.
//!
//! The scalar/LTI helpers run in f64 — they double as oracles for the fused
//! f32 selective scan in `tensor::ops`.

use rand::Rng;

use crate::error::{VmError, VmResult};
use crate::tensor::{ops, Tensor};

/// Zero-order-hold discretization of one diagonal entry.
///
/// ā = exp(Δa), b̄ = (Δa)⁻¹(exp(Δa) − 1)·Δb. For |Δa| below 1e-6 the
/// series limit b̄ = Δb·(1 + Δa/2) avoids the 0/0.
pub fn zoh_discretize(delta: f64, a: f64, b: f64) -> VmResult<(f64, f64)> {
    if delta <= 0.0 {
        return Err(VmError::Domain(format!(
            "zoh_discretize requires delta > 0, got {delta}"
        )));
    }
    let da = delta * a;
    let a_bar = da.exp();
    let b_bar = if da.abs() < 1e-6 {
        delta * b * (1.0 + da / 2.0)
    } else {
        (a_bar - 1.0) / da * delta * b
    };
    Ok((a_bar, b_bar))
}

/// A discretized diagonal SSM over a sequence of length `len` with `n`
/// states. Parameters are either shared across steps (LTI) or per-step.
#[derive(Debug, Clone)]
pub struct DiscreteSsm {
    a_bar: Vec<f64>,
    b_bar: Vec<f64>,
    c: Vec<f64>,
    len: usize,
    n: usize,
    time_varying: bool,
}

impl DiscreteSsm {
    /// Time-invariant system: `a_bar`, `b_bar`, `c` hold one value per state.
    pub fn lti(a_bar: Vec<f64>, b_bar: Vec<f64>, c: Vec<f64>, len: usize) -> VmResult<Self> {
        let n = a_bar.len();
        if b_bar.len() != n || c.len() != n || n == 0 {
            return Err(VmError::Contract(
                "lti parameters must share a nonzero state dimension".into(),
            ));
        }
        Ok(DiscreteSsm {
            a_bar,
            b_bar,
            c,
            len,
            n,
            time_varying: false,
        })
    }

    /// Time-varying system: parameters are `[len * n]`, step-major.
    pub fn time_varying(
        a_bar: Vec<f64>,
        b_bar: Vec<f64>,
        c: Vec<f64>,
        len: usize,
        n: usize,
    ) -> VmResult<Self> {
        if a_bar.len() != len * n || b_bar.len() != len * n || c.len() != len * n || n == 0 {
            return Err(VmError::Contract(
                "time-varying parameters must be [len, n]".into(),
            ));
        }
        Ok(DiscreteSsm {
            a_bar,
            b_bar,
            c,
            len,
            n,
            time_varying: true,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn is_time_varying(&self) -> bool {
        self.time_varying
    }

    fn row<'a>(&self, which: &'a [f64], t: usize) -> &'a [f64] {
        if self.time_varying {
            &which[t * self.n..(t + 1) * self.n]
        } else {
            which
        }
    }
}

/// Sequential recurrence h_i = ā_i h_{i-1} + b̄_i x_i, y_i = c_i · h_i,
/// starting from h_0 = 0.
pub fn scan_recurrent(ssm: &DiscreteSsm, x: &[f64]) -> VmResult<Vec<f64>> {
    if x.len() != ssm.len {
        return Err(VmError::Contract(format!(
            "input length {} vs ssm length {}",
            x.len(),
            ssm.len
        )));
    }
    let n = ssm.n;
    let mut h = vec![0.0f64; n];
    let mut y = vec![0.0f64; x.len()];
    for (t, &xt) in x.iter().enumerate() {
        let ab = ssm.row(&ssm.a_bar, t);
        let bb = ssm.row(&ssm.b_bar, t);
        let cc = ssm.row(&ssm.c, t);
        let mut acc = 0.0;
        for j in 0..n {
            h[j] = ab[j] * h[j] + bb[j] * xt;
            acc += cc[j] * h[j];
        }
        y[t] = acc;
    }
    Ok(y)
}

/// Convolutional kernel K̄ = (c·b̄, c·ā·b̄, …, c·ā^(L−1)·b̄); only defined
/// for time-invariant parameters.
pub fn ssm_kernel(ssm: &DiscreteSsm, l: usize) -> VmResult<Vec<f64>> {
    if ssm.time_varying {
        return Err(VmError::Contract(
            "ssm_kernel requires time-invariant parameters; use the selective scan instead".into(),
        ));
    }
    let n = ssm.n;
    let mut pow = vec![1.0f64; n]; // ā^j, starting at j = 0
    let mut k = vec![0.0f64; l];
    for kj in k.iter_mut() {
        let mut acc = 0.0;
        for j in 0..n {
            acc += ssm.c[j] * pow[j] * ssm.b_bar[j];
            // advance after use so entry 0 is c·b̄
        }
        for j in 0..n {
            pow[j] *= ssm.a_bar[j];
        }
        *kj = acc;
    }
    Ok(k)
}

/// Causal convolution y_t = Σ_{j≤t} k_j x_{t−j}.
pub fn conv_causal(x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0f64; x.len()];
    for t in 0..x.len() {
        let mut acc = 0.0;
        for j in 0..=t.min(k.len().saturating_sub(1)) {
            acc += k[j] * x[t - j];
        }
        y[t] = acc;
    }
    y
}

/// Trainable parameters of the input-dependent selective scan.
///
/// The diagonal state matrix is A = −exp(a_log) (strictly negative), B and
/// C are linear projections of the input token, and Δ is a softplus of a
/// biased projection, so Δ > 0 for every input.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub a_log: Tensor,   // [c_inner, n]
    pub w_b: Tensor,     // [c_inner, n]
    pub w_c: Tensor,     // [c_inner, n]
    pub w_delta: Tensor, // [c_inner, c_inner]
    pub b_delta: Tensor, // [c_inner]
    pub state_dim: usize,
}

impl SsmParams {
    /// S4/Mamba-style initialization: a_log = ln(1..=N) per channel, Δ bias
    /// set so the initial step size lands in [1e-3, 1e-1].
    pub fn init(c_inner: usize, n: usize, rng: &mut impl Rng) -> SsmParams {
        let mut a_log = Vec::with_capacity(c_inner * n);
        for _ in 0..c_inner {
            for j in 1..=n {
                a_log.push((j as f32).ln());
            }
        }
        let bound = (1.0 / c_inner as f32).sqrt();
        let mut b_delta = Vec::with_capacity(c_inner);
        for _ in 0..c_inner {
            // softplus(b) = dt  =>  b = ln(e^dt - 1)
            let dt = (rng.gen_range((1e-3f32).ln()..(1e-1f32).ln())).exp();
            b_delta.push((dt.exp() - 1.0).max(1e-10).ln());
        }
        SsmParams {
            a_log: Tensor::from_vec(&[c_inner, n], a_log).unwrap().require_grad(),
            w_b: Tensor::uniform(&[c_inner, n], -bound, bound, rng).require_grad(),
            w_c: Tensor::uniform(&[c_inner, n], -bound, bound, rng).require_grad(),
            w_delta: Tensor::uniform(&[c_inner, c_inner], -bound, bound, rng).require_grad(),
            b_delta: Tensor::from_vec(&[c_inner], b_delta).unwrap().require_grad(),
            state_dim: n,
        }
    }

    pub fn c_inner(&self) -> usize {
        self.b_delta.shape()[0]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.a_log,
            &mut self.w_b,
            &mut self.w_c,
            &mut self.w_delta,
            &mut self.b_delta,
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("a_log", &self.a_log),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("w_delta", &self.w_delta),
            ("b_delta", &self.b_delta),
        ]
    }
}

/// Input-dependent selective scan over a token sequence x[L, c_inner]:
/// Δ_t, B_t, C_t are computed from each token, Ā uses the exact exponential
/// and B̄ the Euler simplification Δ·B.
pub fn scan_selective(params: &SsmParams, x: &Tensor) -> VmResult<Tensor> {
    let delta_pre = ops::linear(x, &params.w_delta, Some(&params.b_delta))?;
    let delta = ops::softplus(&delta_pre);
    let b = ops::linear(x, &params.w_b, None)?;
    let c = ops::linear(x, &params.w_c, None)?;
    let a = ops::neg(&ops::exp(&params.a_log));
    ops::selective_scan(x, &delta, &a, &b, &c)
}
