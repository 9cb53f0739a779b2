//! Raw single-threaded f32 kernels behind the tape ops.
//!
//! Loop orders are chosen so the innermost loop runs over contiguous
//! memory and auto-vectorizes. Summation order is fixed, so results are
//! bit-reproducible across runs.

/// c[m,n] += a[m,k] * b[k,n]
pub fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (rows of `b` are the columns of the product)
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] += dot(arow, brow);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Fixed-order lane-parallel dot product.
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    const LANES: usize = 16;
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; LANES];
    let mut xc = x.chunks_exact(LANES);
    let mut yc = y.chunks_exact(LANES);
    for (cx, cy) in (&mut xc).zip(&mut yc) {
        for l in 0..LANES {
            acc[l] += cx[l] * cy[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    for (a, b) in xc.remainder().iter().zip(yc.remainder()) {
        s += a * b;
    }
    s
}

/// axpy: y += alpha * x
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Lower image patches into a `[cin*kh*kw, oh*ow]` matrix (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * oh * ow);
    let ohw = oh * ow;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &mut col[((c * kh + dy) * kw + dx) * ohw..((c * kh + dy) * kw + dx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of `im2col`: col -> image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx_img: &mut [f32],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * oh * ow);
    debug_assert_eq!(dx_img.len(), cin * h * w);
    let ohw = oh * ow;
    for c in 0..cin {
        let plane = &mut dx_img[c * h * w..(c + 1) * h * w];
        for dy in 0..kh {
            for dxk in 0..kw {
                let row = &col[((c * kh + dy) * kw + dxk) * ohw..((c * kh + dy) * kw + dxk + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + dxk) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// One-dimensional bilinear taps under the align-corners=false convention:
/// output center `o` samples input coordinate `(o + 0.5) * in/out - 0.5`,
/// tap indices clamped to the valid range.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0f = src.floor();
            let frac = (src - i0f) as f32;
            let i0 = (i0f as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (i0f as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_nn(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let m = 5;
        let k = 37;
        let n = 4;
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c0 = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut c0);

        // b^T laid out as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut c1);

        // a^T laid out as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_tn(&at, &b, k, m, n, &mut c2);

        for i in 0..m * n {
            assert!((c0[i] - c1[i]).abs() < 1e-4, "nt mismatch at {i}");
            assert!((c0[i] - c2[i]).abs() < 1e-4, "tn mismatch at {i}");
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (cin, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 3, 2, 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<f32> = (0..cin * h * w).map(|i| ((i * 7 % 13) as f32) - 6.0).collect();
        let y: Vec<f32> = (0..cin * kh * kw * oh * ow)
            .map(|i| ((i * 5 % 11) as f32) - 5.0)
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, cin, h, w, kh, kw, stride, pad, oh, ow, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }
}
