//! Downsampled self/cross attention with rotary position encoding, and the
//! gated-MLP channel mixer.
//!
//! Attention here is deliberately light: both token grids are bilinearly
//! downsampled before the QKV projections, the attention result is
//! upsampled back and added to the input, and there is no post-attention
//! MLP. Rotary encoding is split across the two grid axes.

use std::sync::Arc;

use rand::Rng;

use crate::error::{VmError, VmResult};
use crate::grid::TokenGrid;
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAtt,
    CrossAtt,
}

/// 2-d rotary tables for token positions: the first half of the channels
/// rotates by row-position angles, the second half by column-position
/// angles; pair i within a half uses theta_i = 10000^(-2i/(D/2)).
pub fn rope_tables(positions: &[(f32, f32)], d: usize) -> (Arc<Vec<f32>>, Arc<Vec<f32>>) {
    let pairs_per_axis = d / 4;
    let mut cos = Vec::with_capacity(positions.len() * d / 2);
    let mut sin = Vec::with_capacity(positions.len() * d / 2);
    let theta =
        |i: usize| -> f64 { 10000f64.powf(-2.0 * i as f64 / (d as f64 / 2.0)) };
    for &(row, col) in positions {
        for i in 0..pairs_per_axis {
            let ang = row as f64 * theta(i);
            cos.push(ang.cos() as f32);
            sin.push(ang.sin() as f32);
        }
        for i in 0..pairs_per_axis {
            let ang = col as f64 * theta(i);
            cos.push(ang.cos() as f32);
            sin.push(ang.sin() as f32);
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

/// Rotary-encode x[L, D] at the given (row, col) positions. D must be a
/// multiple of 4 so each axis gets whole channel pairs.
pub fn rope_encode(x: &Tensor, positions: &[(f32, f32)]) -> VmResult<Tensor> {
    if x.shape().len() != 2 {
        return Err(VmError::Config(format!(
            "rope_encode expects [L, D], got {:?}",
            x.shape()
        )));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    if d % 4 != 0 {
        return Err(VmError::Config(format!(
            "rope_encode needs D divisible by 4, got {d}"
        )));
    }
    if positions.len() != l {
        return Err(VmError::Config(format!(
            "{} positions for {} tokens",
            positions.len(),
            l
        )));
    }
    let (cos, sin) = rope_tables(positions, d);
    ops::rope(x, cos, sin)
}

/// softmax(QK^T/sqrt(d_k))V per head, heads concatenated.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> VmResult<Tensor> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(VmError::Config("attention expects 2-d Q, K, V".into()));
    }
    let c = q.shape()[1];
    if k.shape()[1] != c || v.shape()[1] != c || k.shape()[0] != v.shape()[0] {
        return Err(VmError::Config(format!(
            "attention shapes Q{:?} K{:?} V{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(VmError::Config(format!(
            "channel width {c} not divisible by {heads} heads"
        )));
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    if heads == 1 {
        let logits = ops::scale(&ops::matmul_nt(q, k)?, scale);
        let p = ops::softmax(&logits, 1)?;
        return ops::matmul(&p, v);
    }
    let (lq, lk) = (q.shape()[0], k.shape()[0]);
    let slice_map = |l: usize, h: usize| -> Arc<Vec<i64>> {
        let mut m = Vec::with_capacity(l * dh);
        for t in 0..l {
            for j in 0..dh {
                m.push((t * c + h * dh + j) as i64);
            }
        }
        Arc::new(m)
    };
    let mut out: Option<Tensor> = None;
    for h in 0..heads {
        let qh = ops::remap(q, slice_map(lq, h), &[lq, dh])?;
        let kh = ops::remap(k, slice_map(lk, h), &[lk, dh])?;
        let vh = ops::remap(v, slice_map(lk, h), &[lk, dh])?;
        let logits = ops::scale(&ops::matmul_nt(&qh, &kh)?, scale);
        let p = ops::softmax(&logits, 1)?;
        let oh = ops::matmul(&p, &vh)?;
        out = Some(match out {
            None => oh,
            Some(acc) => ops::concat_last(&acc, &oh)?,
        });
    }
    Ok(out.unwrap())
}

/// Downsampled attention layer: QKV projections (no bias), optional rotary
/// encoding for self-attention, bilinear down/up-sampling around the
/// attention, and a residual add.
#[derive(Debug, Clone)]
pub struct DsAttentionLayer {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub heads: usize,
    pub ds_factor: usize,
    pub mode: AttentionMode,
    pub use_rope: bool,
}

impl DsAttentionLayer {
    pub fn init(
        channels: usize,
        heads: usize,
        ds_factor: usize,
        mode: AttentionMode,
        use_rope: bool,
        rng: &mut impl Rng,
    ) -> VmResult<DsAttentionLayer> {
        if heads == 0 || channels % heads != 0 {
            return Err(VmError::Config(format!(
                "channels {channels} vs heads {heads}"
            )));
        }
        if use_rope && (channels / heads) % 4 != 0 {
            return Err(VmError::Config(format!(
                "rotary encoding needs head_dim divisible by 4, got {}",
                channels / heads
            )));
        }
        if ds_factor == 0 {
            return Err(VmError::Config("ds_factor must be >= 1".into()));
        }
        let bound = (1.0 / channels as f32).sqrt();
        Ok(DsAttentionLayer {
            w_q: Tensor::uniform(&[channels, channels], -bound, bound, rng).require_grad(),
            w_k: Tensor::uniform(&[channels, channels], -bound, bound, rng).require_grad(),
            w_v: Tensor::uniform(&[channels, channels], -bound, bound, rng).require_grad(),
            heads,
            ds_factor,
            mode,
            use_rope,
        })
    }

    /// Update grid `xa` by attending to grid `xb` (== `xa` in self mode).
    pub fn apply(&self, xa: &TokenGrid, xb: &TokenGrid) -> VmResult<TokenGrid> {
        if self.mode == AttentionMode::SelfAtt && xa.t.id() != xb.t.id() {
            return Err(VmError::Contract(
                "self-attention requires xb to be the same grid as xa".into(),
            ));
        }
        let (ha, wa) = (
            (xa.h / self.ds_factor).max(1),
            (xa.w / self.ds_factor).max(1),
        );
        let (hb, wb) = (
            (xb.h / self.ds_factor).max(1),
            (xb.w / self.ds_factor).max(1),
        );
        let a_ds = ops::bilinear_resize_tokens(&xa.t, xa.h, xa.w, ha, wa)?;
        let b_ds = if self.mode == AttentionMode::SelfAtt {
            a_ds.clone()
        } else {
            ops::bilinear_resize_tokens(&xb.t, xb.h, xb.w, hb, wb)?
        };
        let mut q = ops::linear(&a_ds, &self.w_q, None)?;
        let mut k = ops::linear(&b_ds, &self.w_k, None)?;
        let v = ops::linear(&b_ds, &self.w_v, None)?;
        if self.mode == AttentionMode::SelfAtt && self.use_rope {
            let mut pos = Vec::with_capacity(ha * wa);
            for y in 0..ha {
                for x in 0..wa {
                    pos.push((y as f32, x as f32));
                }
            }
            q = rope_encode_heads(&q, &pos, self.heads)?;
            k = rope_encode_heads(&k, &pos, self.heads)?;
        }
        let att = attention(&q, &k, &v, self.heads)?;
        let up = ops::bilinear_resize_tokens(&att, ha, wa, xa.h, xa.w)?;
        let t = ops::add(&xa.t, &up)?;
        TokenGrid::new(xa.h, xa.w, t)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }
}

/// Rotary encoding applied per head slice (each head sees the full 2-d
/// angle spectrum over its own channels).
fn rope_encode_heads(x: &Tensor, positions: &[(f32, f32)], heads: usize) -> VmResult<Tensor> {
    if heads == 1 {
        return rope_encode(x, positions);
    }
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let dh = c / heads;
    let mut out: Option<Tensor> = None;
    for h in 0..heads {
        let mut m = Vec::with_capacity(l * dh);
        for t in 0..l {
            for j in 0..dh {
                m.push((t * c + h * dh + j) as i64);
            }
        }
        let xh = ops::remap(x, Arc::new(m), &[l, dh])?;
        let rh = rope_encode(&xh, positions)?;
        out = Some(match out {
            None => rh,
            Some(acc) => ops::concat_last(&acc, &rh)?,
        });
    }
    Ok(out.unwrap())
}

/// Gated MLP: y = x + W_out(SiLU(Norm(x) W_gate) ⊙ (Norm(x) W_val)).
#[derive(Debug, Clone)]
pub struct GatedMlpLayer {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub w_gate: Tensor,
    pub b_gate: Tensor,
    pub w_val: Tensor,
    pub b_val: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl GatedMlpLayer {
    pub fn init(channels: usize, expansion: usize, rng: &mut impl Rng) -> GatedMlpLayer {
        let ce = channels * expansion;
        let b1 = (1.0 / channels as f32).sqrt();
        let b2 = (1.0 / ce as f32).sqrt();
        GatedMlpLayer {
            norm_gamma: Tensor::full(&[channels], 1.0).require_grad(),
            norm_beta: Tensor::zeros(&[channels]).require_grad(),
            w_gate: Tensor::uniform(&[channels, ce], -b1, b1, rng).require_grad(),
            b_gate: Tensor::uniform(&[ce], -b1, b1, rng).require_grad(),
            w_val: Tensor::uniform(&[channels, ce], -b1, b1, rng).require_grad(),
            b_val: Tensor::uniform(&[ce], -b1, b1, rng).require_grad(),
            w_out: Tensor::uniform(&[ce, channels], -b2, b2, rng).require_grad(),
            b_out: Tensor::uniform(&[channels], -b2, b2, rng).require_grad(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> VmResult<Tensor> {
        let u = ops::layer_norm(x, &self.norm_gamma, &self.norm_beta, 1e-5)?;
        let gate = ops::silu(&ops::linear(&u, &self.w_gate, Some(&self.b_gate))?);
        let val = ops::linear(&u, &self.w_val, Some(&self.b_val))?;
        let mixed = ops::mul(&gate, &val)?;
        let proj = ops::linear(&mixed, &self.w_out, Some(&self.b_out))?;
        ops::add(x, &proj)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.w_gate,
            &mut self.b_gate,
            &mut self.w_val,
            &mut self.b_val,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("norm_gamma", &self.norm_gamma),
            ("norm_beta", &self.norm_beta),
            ("w_gate", &self.w_gate),
            ("b_gate", &self.b_gate),
            ("w_val", &self.w_val),
            ("b_val", &self.b_val),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }
}
