//! Token-grid plumbing: a 2-d grid of feature tokens stored row-major as
//! [h*w, c], plus the index maps that express transposes, flips and
//! layout changes as pure gathers.

use std::sync::Arc;

use crate::error::{shape_err, VmResult};
use crate::tensor::{ops, Tensor};

/// A feature map flattened to tokens in row-major order.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub t: Tensor, // [h*w, c]
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, t: Tensor) -> VmResult<TokenGrid> {
        if t.shape().len() != 2 || t.shape()[0] != h * w {
            return Err(shape_err(
                "token_grid",
                format!("tensor {:?} vs grid {}x{}", t.shape(), h, w),
            ));
        }
        Ok(TokenGrid { h, w, t })
    }

    pub fn channels(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Swap rows and columns: output grid is (w, h) with column-major
    /// content of the input.
    pub fn transpose(&self) -> VmResult<TokenGrid> {
        let c = self.channels();
        let map = transpose_map(self.h, self.w, c);
        let t = ops::remap(&self.t, map, &[self.w * self.h, c])?;
        TokenGrid::new(self.w, self.h, t)
    }
}

/// out[(x*h + y)*c + ch] = in[(y*w + x)*c + ch]
pub fn transpose_map(h: usize, w: usize, c: usize) -> Arc<Vec<i64>> {
    let mut map = Vec::with_capacity(h * w * c);
    for x in 0..w {
        for y in 0..h {
            for ch in 0..c {
                map.push(((y * w + x) * c + ch) as i64);
            }
        }
    }
    Arc::new(map)
}

/// Sequence reversal of [l, c] tokens.
pub fn flip_map(l: usize, c: usize) -> Arc<Vec<i64>> {
    let mut map = Vec::with_capacity(l * c);
    for t in 0..l {
        for ch in 0..c {
            map.push((((l - 1 - t) * c) + ch) as i64);
        }
    }
    Arc::new(map)
}

/// [c,h,w] plane layout -> [h*w, c] token layout.
pub fn chw_to_tokens_map(c: usize, h: usize, w: usize) -> Arc<Vec<i64>> {
    let hw = h * w;
    let mut map = Vec::with_capacity(hw * c);
    for p in 0..hw {
        for ch in 0..c {
            map.push((ch * hw + p) as i64);
        }
    }
    Arc::new(map)
}

/// [h*w, c] token layout -> [c,h,w] plane layout.
pub fn tokens_to_chw_map(c: usize, h: usize, w: usize) -> Arc<Vec<i64>> {
    let hw = h * w;
    let mut map = Vec::with_capacity(hw * c);
    for ch in 0..c {
        for p in 0..hw {
            map.push((p * c + ch) as i64);
        }
    }
    Arc::new(map)
}

/// Convert a [c,h,w] tensor into a token grid.
pub fn chw_to_grid(x: &Tensor) -> VmResult<TokenGrid> {
    if x.shape().len() != 3 {
        return Err(shape_err("chw_to_grid", format!("{:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = ops::remap(x, chw_to_tokens_map(c, h, w), &[h * w, c])?;
    TokenGrid::new(h, w, t)
}

/// Convert a token grid back into a [c,h,w] tensor.
pub fn grid_to_chw(g: &TokenGrid) -> VmResult<Tensor> {
    let c = g.channels();
    ops::remap(&g.t, tokens_to_chw_map(c, g.h, g.w), &[c, g.h, g.w])
}
