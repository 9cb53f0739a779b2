//! MambaVision token-mixing blocks: a selective-scan branch plus a symmetric
//! convolutional branch, concatenated and projected, wrapped in a pre-norm
//! residual. Variants: column-major scanning (transposed grids) and
//! bidirectional scanning with shared weights.

use rand::Rng;

use crate::error::{VmError, VmResult};
use crate::grid::{flip_map, TokenGrid};
use crate::ssm::{scan_selective, SsmParams};
use crate::tensor::{ops, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    RowMajor,
    ColumnMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uni,
    Bi,
}

/// One MambaVision layer. The two input projections map C -> C/2; their
/// depthwise convolutions run along the scan order and are non-causal.
#[derive(Debug, Clone)]
pub struct MambaVisionLayer {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub w_in_x: Tensor,
    pub b_in_x: Tensor,
    pub w_in_z: Tensor,
    pub b_in_z: Tensor,
    pub conv_x_w: Tensor, // depthwise [C/2, 1, 3]
    pub conv_x_b: Tensor,
    pub conv_z_w: Tensor,
    pub conv_z_b: Tensor,
    pub ssm: SsmParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub scan_mode: ScanMode,
    pub direction: Direction,
}

pub const CONV_KERNEL: usize = 3;

impl MambaVisionLayer {
    pub fn init(
        channels: usize,
        state_dim: usize,
        scan_mode: ScanMode,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> VmResult<MambaVisionLayer> {
        if channels % 2 != 0 {
            return Err(VmError::Config(format!(
                "MambaVision channel width must be even, got {channels}"
            )));
        }
        let half = channels / 2;
        fn lin<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> (Tensor, Tensor) {
            let bound = (1.0 / cin as f32).sqrt();
            (
                Tensor::uniform(&[cin, cout], -bound, bound, rng).require_grad(),
                Tensor::uniform(&[cout], -bound, bound, rng).require_grad(),
            )
        }
        fn conv<R: Rng>(ch: usize, rng: &mut R) -> (Tensor, Tensor) {
            let bound = (1.0 / CONV_KERNEL as f32).sqrt();
            (
                Tensor::uniform(&[ch, 1, CONV_KERNEL], -bound, bound, rng).require_grad(),
                Tensor::uniform(&[ch], -bound, bound, rng).require_grad(),
            )
        }
        let (w_in_x, b_in_x) = lin(channels, half, rng);
        let (w_in_z, b_in_z) = lin(channels, half, rng);
        let (conv_x_w, conv_x_b) = conv(half, rng);
        let (conv_z_w, conv_z_b) = conv(half, rng);
        let (w_out, b_out) = lin(channels, channels, rng);
        Ok(MambaVisionLayer {
            norm_gamma: Tensor::full(&[channels], 1.0).require_grad(),
            norm_beta: Tensor::zeros(&[channels]).require_grad(),
            w_in_x,
            b_in_x,
            w_in_z,
            b_in_z,
            conv_x_w,
            conv_x_b,
            conv_z_w,
            conv_z_b,
            ssm: SsmParams::init(half, state_dim, rng),
            w_out,
            b_out,
            scan_mode,
            direction,
        })
    }

    pub fn channels(&self) -> usize {
        self.norm_gamma.shape()[0]
    }

    /// Depthwise conv along the token axis; tokens arrive as [L, ch] and the
    /// convolution wants [ch, L].
    fn conv_seq(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> VmResult<Tensor> {
        let (l, ch) = (x.shape()[0], x.shape()[1]);
        let as_cl = ops::remap(x, crate::grid::transpose_map(l, ch, 1), &[ch, l])?;
        let conv = ops::conv1d(&as_cl, w, Some(b), CONV_KERNEL / 2, ch)?;
        ops::remap(&conv, crate::grid::transpose_map(ch, l, 1), &[l, ch])
    }

    /// The pre-projection body: Concat(SSM(σ(Conv(Lin_x u))), σ(Conv(Lin_z u))).
    fn core(&self, u: &Tensor) -> VmResult<Tensor> {
        let xb = ops::linear(u, &self.w_in_x, Some(&self.b_in_x))?;
        let xb = self.conv_seq(&xb, &self.conv_x_w, &self.conv_x_b)?;
        let xb = ops::silu(&xb);
        let xb = scan_selective(&self.ssm, &xb)?;
        let zb = ops::linear(u, &self.w_in_z, Some(&self.b_in_z))?;
        let zb = self.conv_seq(&zb, &self.conv_z_w, &self.conv_z_b)?;
        let zb = ops::silu(&zb);
        ops::concat_last(&xb, &zb)
    }

    /// Token-sequence forward: y = x_in + Linear(core(Norm(x_in))), with the
    /// bidirectional variant summing forward and flipped scans before the
    /// output projection.
    pub fn forward_seq(&self, x_in: &Tensor) -> VmResult<Tensor> {
        if x_in.shape().len() != 2 || x_in.shape()[1] != self.channels() {
            return Err(VmError::Config(format!(
                "expected [L, {}], got {:?}",
                self.channels(),
                x_in.shape()
            )));
        }
        let u = ops::layer_norm(x_in, &self.norm_gamma, &self.norm_beta, 1e-5)?;
        let body = match self.direction {
            Direction::Uni => self.core(&u)?,
            Direction::Bi => {
                let (l, c) = (u.shape()[0], u.shape()[1]);
                let flip = flip_map(l, c);
                let y_f = self.core(&u)?;
                let u_rev = ops::remap(&u, flip.clone(), &[l, c])?;
                let y_rev = self.core(&u_rev)?;
                let y_b = ops::remap(&y_rev, flip, &[l, c])?;
                ops::add(&y_f, &y_b)?
            }
        };
        let proj = ops::linear(&body, &self.w_out, Some(&self.b_out))?;
        ops::add(x_in, &proj)
    }

    /// Grid forward. Column-major layers transpose, scan, and transpose back.
    pub fn forward(&self, g: &TokenGrid) -> VmResult<TokenGrid> {
        match self.scan_mode {
            ScanMode::RowMajor => {
                let t = self.forward_seq(&g.t)?;
                TokenGrid::new(g.h, g.w, t)
            }
            ScanMode::ColumnMajor => {
                let gt = g.transpose()?;
                let t = self.forward_seq(&gt.t)?;
                let out = TokenGrid::new(gt.h, gt.w, t)?;
                out.transpose()
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.w_in_x,
            &mut self.b_in_x,
            &mut self.w_in_z,
            &mut self.b_in_z,
            &mut self.conv_x_w,
            &mut self.conv_x_b,
            &mut self.conv_z_w,
            &mut self.conv_z_b,
            &mut self.w_out,
            &mut self.b_out,
        ];
        v.extend(self.ssm.params_mut());
        v
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("norm_gamma", &self.norm_gamma),
            ("norm_beta", &self.norm_beta),
            ("w_in_x", &self.w_in_x),
            ("b_in_x", &self.b_in_x),
            ("w_in_z", &self.w_in_z),
            ("b_in_z", &self.b_in_z),
            ("conv_x_w", &self.conv_x_w),
            ("conv_x_b", &self.conv_x_b),
            ("conv_z_w", &self.conv_z_w),
            ("conv_z_b", &self.conv_z_b),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ];
        v.extend(self.ssm.params());
        v
    }
}
