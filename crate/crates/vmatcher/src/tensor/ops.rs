//! Differentiable primitive operations.
//!
//! Every function validates shapes, computes the forward value, and — when a
//! tape is active and an input participates in gradient tracking — records a
//! backward closure. Reductions accumulate in f64.

use std::sync::Arc;

use crate::error::{shape_err, VmError, VmResult};
use crate::tensor::{kernels, maybe_record, recording, Tensor};

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let (ida, idb, n) = (a.id(), b.id(), a.numel());
    maybe_record("add", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                kernels::axpy(1.0, dy, store.accum(ida, n));
            }
            if need[1] {
                kernels::axpy(1.0, dy, store.accum(idb, n));
            }
        })
    });
    Ok(out)
}

pub fn sub(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "sub",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let (ida, idb, n) = (a.id(), b.id(), a.numel());
    maybe_record("sub", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                kernels::axpy(1.0, dy, store.accum(ida, n));
            }
            if need[1] {
                kernels::axpy(-1.0, dy, store.accum(idb, n));
            }
        })
    });
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "mul",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let out = Tensor::from_vec(a.shape(), data)?;
    let (ida, idb, n) = (a.id(), b.id(), a.numel());
    let (ad, bd) = (a.data_arc(), b.data_arc());
    maybe_record("mul", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                let g = store.accum(ida, n);
                for i in 0..n {
                    g[i] += dy[i] * bd[i];
                }
            }
            if need[1] {
                let g = store.accum(idb, n);
                for i in 0..n {
                    g[i] += dy[i] * ad[i];
                }
            }
        })
    });
    Ok(out)
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    maybe_record("scale", &[a], &out, |_| {
        Box::new(move |dy, store| {
            kernels::axpy(s, dy, store.accum(ida, n));
        })
    });
    out
}

pub fn neg(a: &Tensor) -> Tensor {
    scale(a, -1.0)
}

pub fn exp(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x.exp()).collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    let yd = out.data_arc();
    maybe_record("exp", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for i in 0..n {
                g[i] += dy[i] * yd[i];
            }
        })
    });
    out
}

/// SiLU: x * sigmoid(x)
pub fn silu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x * sigmoid(x)).collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    let xd = a.data_arc();
    maybe_record("silu", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for i in 0..n {
                let s = sigmoid(xd[i]);
                g[i] += dy[i] * s * (1.0 + xd[i] * (1.0 - s));
            }
        })
    });
    out
}

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x.max(0.0)).collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    let xd = a.data_arc();
    maybe_record("relu", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for i in 0..n {
                if xd[i] > 0.0 {
                    g[i] += dy[i];
                }
            }
        })
    });
    out
}

/// Numerically stable ln(1 + e^x); derivative is sigmoid(x).
pub fn softplus(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a
        .data()
        .iter()
        .map(|&x| {
            if x > 20.0 {
                x
            } else if x < -20.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        })
        .collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    let xd = a.data_arc();
    maybe_record("softplus", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for i in 0..n {
                g[i] += dy[i] * sigmoid(xd[i]);
            }
        })
    });
    out
}

/// ln(max(x, floor)); gradient is 1/x above the floor and 0 at or below it.
pub fn log_clamped(a: &Tensor, floor: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x.max(floor).ln()).collect();
    let out = Tensor::from_vec(a.shape(), data).expect("same shape");
    let (ida, n) = (a.id(), a.numel());
    let xd = a.data_arc();
    maybe_record("log_clamped", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for i in 0..n {
                if xd[i] > floor {
                    g[i] += dy[i] / xd[i];
                }
            }
        })
    });
    out
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().map(|&x| x as f64).sum();
    let out = Tensor::scalar(s as f32);
    let (ida, n) = (a.id(), a.numel());
    maybe_record("sum_all", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, n);
            for v in g.iter_mut() {
                *v += dy[0];
            }
        })
    });
    out
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.numel().max(1);
    let s: f64 = a.data().iter().map(|&x| x as f64).sum();
    let out = Tensor::scalar((s / n as f64) as f32);
    let ida = a.id();
    let inv = 1.0 / n as f32;
    let len = a.numel();
    maybe_record("mean_all", &[a], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(ida, len);
            for v in g.iter_mut() {
                *v += dy[0] * inv;
            }
        })
    });
    out
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// y = x·W + b over the last dimension: x[.., cin], W[cin, cout], b[cout].
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> VmResult<Tensor> {
    if w.shape().len() != 2 {
        return Err(shape_err("linear", format!("W must be 2-d, got {:?}", w.shape())));
    }
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    if x.shape().is_empty() || *x.shape().last().unwrap() != cin {
        return Err(shape_err(
            "linear",
            format!("x {:?} does not end in Cin={}", x.shape(), cin),
        ));
    }
    if let Some(bb) = b {
        if bb.shape() != [cout] {
            return Err(shape_err(
                "linear",
                format!("bias {:?} vs Cout={}", bb.shape(), cout),
            ));
        }
    }
    let m = x.numel() / cin;
    let mut data = vec![0.0f32; m * cout];
    kernels::mm_nn(x.data(), w.data(), m, cin, cout, &mut data);
    if let Some(bb) = b {
        let bd = bb.data();
        for row in data.chunks_exact_mut(cout) {
            for (v, &bv) in row.iter_mut().zip(bd) {
                *v += bv;
            }
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = cout;
    let out = Tensor::from_vec(&out_shape, data)?;

    let (idx, idw) = (x.id(), w.id());
    let idb = b.map(|t| t.id());
    let (xd, wd) = (x.data_arc(), w.data_arc());
    let mut inputs = vec![x, w];
    if let Some(bb) = b {
        inputs.push(bb);
    }
    maybe_record("linear", &inputs, &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                kernels::mm_nt(dy, &wd, m, cout, cin, store.accum(idx, m * cin));
            }
            if need[1] {
                kernels::mm_tn(&xd, dy, m, cin, cout, store.accum(idw, cin * cout));
            }
            if let Some(idb) = idb {
                if need[2] {
                    let g = store.accum(idb, cout);
                    for row in dy.chunks_exact(cout) {
                        for (gv, &d) in g.iter_mut().zip(row) {
                            *gv += d;
                        }
                    }
                }
            }
        })
    });
    Ok(out)
}

/// c[m,n] = a[m,k] · b[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut data = vec![0.0f32; m * n];
    kernels::mm_nn(a.data(), b.data(), m, k, n, &mut data);
    let out = Tensor::from_vec(&[m, n], data)?;
    let (ida, idb) = (a.id(), b.id());
    let (ad, bd) = (a.data_arc(), b.data_arc());
    maybe_record("matmul", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                kernels::mm_nt(dy, &bd, m, n, k, store.accum(ida, m * k));
            }
            if need[1] {
                kernels::mm_tn(&ad, dy, m, k, n, store.accum(idb, k * n));
            }
        })
    });
    Ok(out)
}

/// c[m,n] = a[m,k] · b[n,k]^T — row-by-row dot products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(shape_err(
            "matmul_nt",
            format!("{:?} x {:?}^T", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut data = vec![0.0f32; m * n];
    kernels::mm_nt(a.data(), b.data(), m, k, n, &mut data);
    let out = Tensor::from_vec(&[m, n], data)?;
    let (ida, idb) = (a.id(), b.id());
    let (ad, bd) = (a.data_arc(), b.data_arc());
    maybe_record("matmul_nt", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                // da[i,p] = sum_j dy[i,j] b[j,p]
                kernels::mm_nn(dy, &bd, m, n, k, store.accum(ida, m * k));
            }
            if need[1] {
                // db[j,p] = sum_i dy[i,j] a[i,p]
                kernels::mm_tn(dy, &ad, m, n, k, store.accum(idb, n * k));
            }
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

pub fn reshape(x: &Tensor, shape: &[usize]) -> VmResult<Tensor> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err(
            "reshape",
            format!("{:?} -> {:?}", x.shape(), shape),
        ));
    }
    let out = Tensor::from_vec(shape, x.data().to_vec())?;
    let (idx, n) = (x.id(), x.numel());
    maybe_record("reshape", &[x], &out, |_| {
        Box::new(move |dy, store| {
            kernels::axpy(1.0, dy, store.accum(idx, n));
        })
    });
    Ok(out)
}

/// Pure index gather: out[i] = map[i] < 0 ? 0 : x[map[i]].
///
/// Transposes, flips, token reordering and zero-padded patch extraction are
/// all instances of this with a precomputed index table.
pub fn remap(x: &Tensor, map: Arc<Vec<i64>>, out_shape: &[usize]) -> VmResult<Tensor> {
    if map.len() != out_shape.iter().product::<usize>() {
        return Err(shape_err(
            "remap",
            format!("map len {} vs out shape {:?}", map.len(), out_shape),
        ));
    }
    let xd = x.data();
    let n_in = xd.len() as i64;
    let mut data = Vec::with_capacity(map.len());
    for &i in map.iter() {
        if i >= n_in {
            return Err(shape_err("remap", format!("index {i} out of range {n_in}")));
        }
        data.push(if i < 0 { 0.0 } else { xd[i as usize] });
    }
    let out = Tensor::from_vec(out_shape, data)?;
    let (idx, n) = (x.id(), x.numel());
    let map2 = map.clone();
    maybe_record("remap", &[x], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(idx, n);
            for (o, &i) in map2.iter().enumerate() {
                if i >= 0 {
                    g[i as usize] += dy[o];
                }
            }
        })
    });
    Ok(out)
}

/// Stack row tensors [1, c] (or [c]) into one [k, c] tensor.
pub fn stack_rows(rows: &[Tensor]) -> VmResult<Tensor> {
    if rows.is_empty() {
        return Err(shape_err("stack_rows", "empty input"));
    }
    let c = *rows[0].shape().last().unwrap();
    let mut data = Vec::with_capacity(rows.len() * c);
    for r in rows {
        if r.numel() != c {
            return Err(shape_err(
                "stack_rows",
                format!("row {:?} vs width {}", r.shape(), c),
            ));
        }
        data.extend_from_slice(r.data());
    }
    let out = Tensor::from_vec(&[rows.len(), c], data)?;
    let refs: Vec<&Tensor> = rows.iter().collect();
    let ids: Vec<(u64, usize)> = rows.iter().map(|r| (r.id(), r.numel())).collect();
    maybe_record("stack_rows", &refs, &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            for (i, &(id, n)) in ids.iter().enumerate() {
                if need[i] {
                    kernels::axpy(1.0, &dy[i * n..(i + 1) * n], store.accum(id, n));
                }
            }
        })
    });
    Ok(out)
}

/// Concatenate along the last dimension; leading dimensions must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> VmResult<Tensor> {
    if a.shape().len() != b.shape().len()
        || a.shape().is_empty()
        || a.shape()[..a.shape().len() - 1] != b.shape()[..b.shape().len() - 1]
    {
        return Err(shape_err(
            "concat_last",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let ca = *a.shape().last().unwrap();
    let cb = *b.shape().last().unwrap();
    let rows = a.numel() / ca;
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let out = Tensor::from_vec(&shape, data)?;
    let (ida, idb) = (a.id(), b.id());
    let (na, nb) = (a.numel(), b.numel());
    maybe_record("concat_last", &[a, b], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[0] {
                let g = store.accum(ida, na);
                for r in 0..rows {
                    let src = &dy[r * (ca + cb)..r * (ca + cb) + ca];
                    kernels::axpy(1.0, src, &mut g[r * ca..(r + 1) * ca]);
                }
            }
            if need[1] {
                let g = store.accum(idb, nb);
                for r in 0..rows {
                    let src = &dy[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                    kernels::axpy(1.0, src, &mut g[r * cb..(r + 1) * cb]);
                }
            }
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

/// Softmax along `axis`, computed with max-subtraction. NaN inputs propagate.
pub fn softmax(x: &Tensor, axis: usize) -> VmResult<Tensor> {
    if axis >= x.shape().len() {
        return Err(shape_err(
            "softmax",
            format!("axis {} for shape {:?}", axis, x.shape()),
        ));
    }
    let k = x.shape()[axis];
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let xd = x.data();
    let mut data = vec![0.0f32; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * k * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for j in 0..k {
                mx = mx.max(xd[base + j * inner]);
            }
            let mut sum = 0.0f64;
            for j in 0..k {
                let e = (xd[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for j in 0..k {
                data[base + j * inner] *= inv;
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let (idx, n) = (x.id(), x.numel());
    let yd = out.data_arc();
    maybe_record("softmax", &[x], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(idx, n);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * k * inner + i;
                    let mut dot = 0.0f64;
                    for j in 0..k {
                        let p = base + j * inner;
                        dot += (dy[p] * yd[p]) as f64;
                    }
                    let dot = dot as f32;
                    for j in 0..k {
                        let p = base + j * inner;
                        g[p] += yd[p] * (dy[p] - dot);
                    }
                }
            }
        })
    });
    Ok(out)
}

/// Layer normalization over the last dimension with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> VmResult<Tensor> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "layer_norm",
            format!("gamma/beta {:?}/{:?} vs C={}", gamma.shape(), beta.shape(), c),
        ));
    }
    let rows = x.numel() / c;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0f32; xd.len()];
    let mut xhat = vec![0.0f32; xd.len()];
    let mut invstd = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mean = (row.iter().map(|&v| v as f64).sum::<f64>() / c as f64) as f32;
        let var = (row
            .iter()
            .map(|&v| ((v - mean) as f64) * ((v - mean) as f64))
            .sum::<f64>()
            / c as f64) as f32;
        let is = 1.0 / (var + eps).sqrt();
        invstd[r] = is;
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            xhat[r * c + j] = xh;
            data[r * c + j] = gd[j] * xh + bd[j];
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let (idx, idg, idb, n) = (x.id(), gamma.id(), beta.id(), x.numel());
    let gd2 = gamma.data_arc();
    let xhat = Arc::new(xhat);
    let invstd = Arc::new(invstd);
    maybe_record("layer_norm", &[x, gamma, beta], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            if need[1] {
                let g = store.accum(idg, c);
                for r in 0..rows {
                    for j in 0..c {
                        g[j] += dy[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if need[2] {
                let g = store.accum(idb, c);
                for r in 0..rows {
                    for j in 0..c {
                        g[j] += dy[r * c + j];
                    }
                }
            }
            if need[0] {
                let g = store.accum(idx, n);
                for r in 0..rows {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..c {
                        let dg = (dy[r * c + j] * gd2[j]) as f64;
                        s1 += dg;
                        s2 += dg * xhat[r * c + j] as f64;
                    }
                    let s1 = (s1 / c as f64) as f32;
                    let s2 = (s2 / c as f64) as f32;
                    for j in 0..c {
                        let dg = dy[r * c + j] * gd2[j];
                        g[r * c + j] += invstd[r] * (dg - s1 - xhat[r * c + j] * s2);
                    }
                }
            }
        })
    });
    Ok(out)
}

/// Inference batch normalization with externally supplied statistics:
/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per leading channel.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> VmResult<Tensor> {
    let c = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err("batchnorm", "scalar input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(shape_err(
            "batchnorm",
            format!("channel statistics do not match C={c}"),
        ));
    }
    if var.iter().any(|&v| v < 0.0) {
        return Err(VmError::InvalidStatistics("negative variance".into()));
    }
    let inner = x.numel() / c;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0f32; xd.len()];
    let mut invstd = vec![0.0f32; c];
    for ch in 0..c {
        let is = 1.0 / (var[ch] + eps).sqrt();
        invstd[ch] = is;
        let s = gd[ch] * is;
        let off = bd[ch] - mean[ch] * s;
        let src = &xd[ch * inner..(ch + 1) * inner];
        let dst = &mut data[ch * inner..(ch + 1) * inner];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v * s + off;
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let (idx, idg, idb, n) = (x.id(), gamma.id(), beta.id(), x.numel());
    let xd2 = x.data_arc();
    let gd2 = gamma.data_arc();
    let mean2 = Arc::new(mean.to_vec());
    let invstd2 = Arc::new(invstd);
    maybe_record("batchnorm", &[x, gamma, beta], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            for ch in 0..c {
                let is = invstd2[ch];
                if need[0] {
                    let g = store.accum(idx, n);
                    let s = gd2[ch] * is;
                    for i in ch * inner..(ch + 1) * inner {
                        g[i] += dy[i] * s;
                    }
                }
                if need[1] {
                    let mut acc = 0.0f64;
                    for i in ch * inner..(ch + 1) * inner {
                        acc += (dy[i] * (xd2[i] - mean2[ch]) * is) as f64;
                    }
                    store.accum(idg, c)[ch] += acc as f32;
                }
                if need[2] {
                    let mut acc = 0.0f64;
                    for i in ch * inner..(ch + 1) * inner {
                        acc += dy[i] as f64;
                    }
                    store.accum(idb, c)[ch] += acc as f32;
                }
            }
        })
    });
    Ok(out)
}

/// Training batch normalization: per-channel statistics over the non-channel
/// dimensions. Returns the output plus the batch mean/variance so the caller
/// can update running statistics.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> VmResult<(Tensor, Vec<f32>, Vec<f32>)> {
    let c = *x
        .shape()
        .first()
        .ok_or_else(|| shape_err("batchnorm_train", "scalar input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err("batchnorm_train", "gamma/beta vs channels"));
    }
    let inner = x.numel() / c;
    if inner < 2 {
        return Err(VmError::Contract(
            "batchnorm_train needs at least 2 samples per channel".into(),
        ));
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0f32; xd.len()];
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut xhat = vec![0.0f32; xd.len()];
    let mut invstd = vec![0.0f32; c];
    for ch in 0..c {
        let src = &xd[ch * inner..(ch + 1) * inner];
        let m = (src.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32;
        let v = (src
            .iter()
            .map(|&s| ((s - m) as f64) * ((s - m) as f64))
            .sum::<f64>()
            / inner as f64) as f32;
        mean[ch] = m;
        var[ch] = v;
        let is = 1.0 / (v + eps).sqrt();
        invstd[ch] = is;
        for (i, &s) in src.iter().enumerate() {
            let xh = (s - m) * is;
            xhat[ch * inner + i] = xh;
            data[ch * inner + i] = gd[ch] * xh + bd[ch];
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let (idx, idg, idb, n) = (x.id(), gamma.id(), beta.id(), x.numel());
    let gd2 = gamma.data_arc();
    let xhat = Arc::new(xhat);
    let invstd2 = Arc::new(invstd);
    maybe_record("batchnorm_train", &[x, gamma, beta], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            for ch in 0..c {
                if need[1] {
                    let mut acc = 0.0f64;
                    for i in ch * inner..(ch + 1) * inner {
                        acc += (dy[i] * xhat[i]) as f64;
                    }
                    store.accum(idg, c)[ch] += acc as f32;
                }
                if need[2] {
                    let mut acc = 0.0f64;
                    for i in ch * inner..(ch + 1) * inner {
                        acc += dy[i] as f64;
                    }
                    store.accum(idb, c)[ch] += acc as f32;
                }
                if need[0] {
                    // dx = invstd/N * gamma * (N*dy - sum(dy) - xhat * sum(dy*xhat))
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for i in ch * inner..(ch + 1) * inner {
                        s1 += dy[i] as f64;
                        s2 += (dy[i] * xhat[i]) as f64;
                    }
                    let s1 = (s1 / inner as f64) as f32;
                    let s2 = (s2 / inner as f64) as f32;
                    let scale = gd2[ch] * invstd2[ch];
                    let g = store.accum(idx, n);
                    for i in ch * inner..(ch + 1) * inner {
                        g[i] += scale * (dy[i] - s1 - xhat[i] * s2);
                    }
                }
            }
        })
    });
    Ok((out, mean, var))
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// 2-d cross-correlation with zero padding: x[cin,h,w], w[cout,cin,kh,kw].
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> VmResult<Tensor> {
    if x.shape().len() != 3 || weight.shape().len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("x {:?}, w {:?}", x.shape(), weight.shape()),
        ));
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(shape_err("conv2d", format!("Cin {cin} vs kernel {wcin}")));
    }
    if stride < 1 {
        return Err(VmError::Contract("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("conv2d", "bias vs Cout"));
        }
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let ckk = cin * kh * kw;
    let ohw = oh * ow;
    let mut col = vec![0.0f32; ckk * ohw];
    kernels::im2col(x.data(), cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
    let mut data = vec![0.0f32; cout * ohw];
    kernels::mm_nn(weight.data(), &col, cout, ckk, ohw, &mut data);
    if let Some(b) = bias {
        for (ch, row) in data.chunks_exact_mut(ohw).enumerate() {
            let bv = b.data()[ch];
            for v in row.iter_mut() {
                *v += bv;
            }
        }
    }
    let out = Tensor::from_vec(&[cout, oh, ow], data)?;

    let (idx, idw) = (x.id(), weight.id());
    let idb = bias.map(|t| t.id());
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    maybe_record("conv2d", &inputs, &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            // col is recomputed; keeping it alive across the forward pass
            // would double the activation footprint.
            let mut col = vec![0.0f32; ckk * ohw];
            kernels::im2col(&xd, cin, h, w, kh, kw, stride, pad, oh, ow, &mut col);
            if need[1] {
                kernels::mm_nt(dy, &col, cout, ohw, ckk, store.accum(idw, cout * ckk));
            }
            if need[0] {
                let mut dcol = vec![0.0f32; ckk * ohw];
                kernels::mm_tn(&wd, dy, cout, ckk, ohw, &mut dcol);
                let mut dx = vec![0.0f32; cin * h * w];
                kernels::col2im(&dcol, cin, h, w, kh, kw, stride, pad, oh, ow, &mut dx);
                kernels::axpy(1.0, &dx, store.accum(idx, cin * h * w));
            }
            if let Some(idb) = idb {
                if need[2] {
                    let g = store.accum(idb, cout);
                    for (ch, row) in dy.chunks_exact(ohw).enumerate() {
                        let mut acc = 0.0f64;
                        for &v in row {
                            acc += v as f64;
                        }
                        g[ch] += acc as f32;
                    }
                }
            }
        })
    });
    Ok(out)
}

/// Non-causal 1-d cross-correlation with zero padding and channel groups:
/// x[cin,l], w[cout, cin/groups, k]. With symmetric padding (k odd,
/// pad = k/2) the output length equals the input length.
pub fn conv1d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    pad: usize,
    groups: usize,
) -> VmResult<Tensor> {
    if x.shape().len() != 2 || weight.shape().len() != 3 {
        return Err(shape_err(
            "conv1d",
            format!("x {:?}, w {:?}", x.shape(), weight.shape()),
        ));
    }
    let (cin, l) = (x.shape()[0], x.shape()[1]);
    let (cout, wci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || wci != cin / groups {
        return Err(shape_err(
            "conv1d",
            format!("groups {groups} incompatible with Cin {cin}, Cout {cout}, wci {wci}"),
        ));
    }
    if l + 2 * pad < k {
        return Err(shape_err(
            "conv1d",
            format!("kernel {k} larger than padded input {l} (pad {pad})"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err("conv1d", "bias vs Cout"));
        }
    }
    let lout = l + 2 * pad - k + 1;
    let cig = cin / groups;
    let cog = cout / groups;
    let xd = x.data();
    let wd = weight.data();
    let mut data = vec![0.0f32; cout * lout];
    for g in 0..groups {
        for co in 0..cog {
            let oc = g * cog + co;
            let orow = &mut data[oc * lout..(oc + 1) * lout];
            for ci in 0..cig {
                let icidx = g * cig + ci;
                let xrow = &xd[icidx * l..(icidx + 1) * l];
                let wrow = &wd[(oc * cig + ci) * k..(oc * cig + ci + 1) * k];
                for (t, ov) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (dk, &wv) in wrow.iter().enumerate() {
                        let src = t as isize + dk as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            acc += wv * xrow[src as usize];
                        }
                    }
                    *ov += acc;
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[oc];
                for v in orow.iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[cout, lout], data)?;
    let (idx, idw) = (x.id(), weight.id());
    let idb = bias.map(|t| t.id());
    let (xd2, wd2) = (x.data_arc(), weight.data_arc());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    maybe_record("conv1d", &inputs, &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            for g in 0..groups {
                for co in 0..cog {
                    let oc = g * cog + co;
                    let drow = &dy[oc * lout..(oc + 1) * lout];
                    for ci in 0..cig {
                        let icidx = g * cig + ci;
                        if need[0] {
                            let gx = store.accum(idx, cin * l);
                            for (t, &dv) in drow.iter().enumerate() {
                                for dk in 0..k {
                                    let src = t as isize + dk as isize - pad as isize;
                                    if src >= 0 && (src as usize) < l {
                                        gx[icidx * l + src as usize] +=
                                            dv * wd2[(oc * cig + ci) * k + dk];
                                    }
                                }
                            }
                        }
                        if need[1] {
                            let gw = store.accum(idw, cout * cig * k);
                            for (t, &dv) in drow.iter().enumerate() {
                                for dk in 0..k {
                                    let src = t as isize + dk as isize - pad as isize;
                                    if src >= 0 && (src as usize) < l {
                                        gw[(oc * cig + ci) * k + dk] +=
                                            dv * xd2[icidx * l + src as usize];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(idb) = idb {
                        if need[2] {
                            let mut acc = 0.0f64;
                            for &dv in drow {
                                acc += dv as f64;
                            }
                            store.accum(idb, cout)[oc] += acc as f32;
                        }
                    }
                }
            }
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bilinear resizing
// ---------------------------------------------------------------------------

/// Bilinear resize of x[c,h,w] to [c,oh,ow], align-corners=false.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> VmResult<Tensor> {
    if x.shape().len() != 3 {
        return Err(shape_err("bilinear_resize", format!("{:?}", x.shape())));
    }
    if oh == 0 || ow == 0 {
        return Err(shape_err("bilinear_resize", "zero output extent"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = kernels::bilinear_taps(h, oh);
    let tx = kernels::bilinear_taps(w, ow);
    let xd = x.data();
    let mut data = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let dst = &mut data[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    let out = Tensor::from_vec(&[c, oh, ow], data)?;
    let (idx, n) = (x.id(), x.numel());
    maybe_record("bilinear_resize", &[x], &out, |_| {
        Box::new(move |dy, store| {
            let ty = kernels::bilinear_taps(h, oh);
            let tx = kernels::bilinear_taps(w, ow);
            let g = store.accum(idx, n);
            for ch in 0..c {
                let gp = &mut g[ch * h * w..(ch + 1) * h * w];
                let dyp = &dy[ch * oh * ow..(ch + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let d = dyp[oy * ow + ox];
                        gp[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                        gp[y0 * w + x1] += d * (1.0 - fy) * fx;
                        gp[y1 * w + x0] += d * fy * (1.0 - fx);
                        gp[y1 * w + x1] += d * fy * fx;
                    }
                }
            }
        })
    });
    Ok(out)
}

/// Bilinear resize of a token grid in [h*w, c] layout (channels contiguous
/// per token) to [oh*ow, c]. Same convention as `bilinear_resize`.
pub fn bilinear_resize_tokens(
    x: &Tensor,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> VmResult<Tensor> {
    if x.shape().len() != 2 || x.shape()[0] != h * w {
        return Err(shape_err(
            "bilinear_resize_tokens",
            format!("{:?} vs grid {}x{}", x.shape(), h, w),
        ));
    }
    if oh == 0 || ow == 0 {
        return Err(shape_err("bilinear_resize_tokens", "zero output extent"));
    }
    let c = x.shape()[1];
    let ty = kernels::bilinear_taps(h, oh);
    let tx = kernels::bilinear_taps(w, ow);
    let xd = x.data();
    let mut data = vec![0.0f32; oh * ow * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let dst = &mut data[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let s00 = &xd[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
            let s01 = &xd[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
            let s10 = &xd[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
            let s11 = &xd[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
            for j in 0..c {
                dst[j] = w00 * s00[j] + w01 * s01[j] + w10 * s10[j] + w11 * s11[j];
            }
        }
    }
    let out = Tensor::from_vec(&[oh * ow, c], data)?;
    let (idx, n) = (x.id(), x.numel());
    maybe_record("bilinear_resize_tokens", &[x], &out, |_| {
        Box::new(move |dy, store| {
            let ty = kernels::bilinear_taps(h, oh);
            let tx = kernels::bilinear_taps(w, ow);
            let g = store.accum(idx, n);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let src = &dy[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                    let taps = [
                        ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                        ((y0 * w + x1) * c, (1.0 - fy) * fx),
                        ((y1 * w + x0) * c, fy * (1.0 - fx)),
                        ((y1 * w + x1) * c, fy * fx),
                    ];
                    for (base, wt) in taps {
                        for j in 0..c {
                            g[base + j] += wt * src[j];
                        }
                    }
                }
            }
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rotary encoding
// ---------------------------------------------------------------------------

/// Rotate channel pairs of x[l,d] by per-token angles given as cos/sin
/// tables of shape [l, d/2] (pair-major). Norm-preserving.
pub fn rope(x: &Tensor, cos: Arc<Vec<f32>>, sin: Arc<Vec<f32>>) -> VmResult<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] % 2 != 0 {
        return Err(shape_err("rope", format!("{:?}", x.shape())));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let pairs = d / 2;
    if cos.len() != l * pairs || sin.len() != l * pairs {
        return Err(shape_err(
            "rope",
            format!("table len {} vs {}x{}", cos.len(), l, pairs),
        ));
    }
    let xd = x.data();
    let mut data = vec![0.0f32; l * d];
    for t in 0..l {
        for p in 0..pairs {
            let (c, s) = (cos[t * pairs + p], sin[t * pairs + p]);
            let x0 = xd[t * d + 2 * p];
            let x1 = xd[t * d + 2 * p + 1];
            data[t * d + 2 * p] = c * x0 - s * x1;
            data[t * d + 2 * p + 1] = s * x0 + c * x1;
        }
    }
    let out = Tensor::from_vec(x.shape(), data)?;
    let (idx, n) = (x.id(), x.numel());
    maybe_record("rope", &[x], &out, |_| {
        Box::new(move |dy, store| {
            let g = store.accum(idx, n);
            for t in 0..l {
                for p in 0..pairs {
                    let (c, s) = (cos[t * pairs + p], sin[t * pairs + p]);
                    let d0 = dy[t * d + 2 * p];
                    let d1 = dy[t * d + 2 * p + 1];
                    // inverse rotation
                    g[t * d + 2 * p] += c * d0 + s * d1;
                    g[t * d + 2 * p + 1] += -s * d0 + c * d1;
                }
            }
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

/// Input-dependent SSM recurrence (fused, with a hand-written adjoint).
///
/// Per step t, channel c, state n:
///   abar = exp(delta[t,c] * a[c,n])
///   h[c,n] = abar * h[c,n] + delta[t,c] * b[t,n] * u[t,c]
///   y[t,c] = sum_n cmat[t,n] * h[c,n]
///
/// The state transition uses the exact exponential for Ā and the Euler
/// simplification for B̄ (B̄ = Δ·B).
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    cmat: &Tensor,
) -> VmResult<Tensor> {
    if u.shape().len() != 2 || delta.shape() != u.shape() {
        return Err(shape_err(
            "selective_scan",
            format!("u {:?} vs delta {:?}", u.shape(), delta.shape()),
        ));
    }
    let (l, c) = (u.shape()[0], u.shape()[1]);
    if a.shape().len() != 2 || a.shape()[0] != c {
        return Err(shape_err(
            "selective_scan",
            format!("a {:?} vs C={}", a.shape(), c),
        ));
    }
    let n = a.shape()[1];
    if b.shape() != [l, n] || cmat.shape() != [l, n] {
        return Err(shape_err(
            "selective_scan",
            format!("b {:?} / c {:?} vs [{},{}]", b.shape(), cmat.shape(), l, n),
        ));
    }
    let (ud, dd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), cmat.data());
    let track = recording();
    let mut y = vec![0.0f32; l * c];
    let mut h = vec![0.0f32; c * n];
    // Saved forward state for the adjoint: h after each step, and abar.
    let mut hs: Vec<f32> = if track { vec![0.0; l * c * n] } else { Vec::new() };
    let mut abars: Vec<f32> = if track { vec![0.0; l * c * n] } else { Vec::new() };
    for t in 0..l {
        let bt = &bd[t * n..(t + 1) * n];
        let ct = &cd[t * n..(t + 1) * n];
        for ch in 0..c {
            let dt = dd[t * c + ch];
            let ut = ud[t * c + ch];
            let arow = &ad[ch * n..(ch + 1) * n];
            let hrow = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0f32;
            for j in 0..n {
                let abar = (dt * arow[j]).exp();
                let hv = abar * hrow[j] + dt * bt[j] * ut;
                hrow[j] = hv;
                acc += ct[j] * hv;
                if track {
                    hs[(t * c + ch) * n + j] = hv;
                    abars[(t * c + ch) * n + j] = abar;
                }
            }
            y[t * c + ch] = acc;
        }
    }
    let out = Tensor::from_vec(&[l, c], y)?;
    let (idu, idd, ida, idb, idc) = (u.id(), delta.id(), a.id(), b.id(), cmat.id());
    let (ud2, dd2, ad2, bd2, cd2) = (
        u.data_arc(),
        delta.data_arc(),
        a.data_arc(),
        b.data_arc(),
        cmat.data_arc(),
    );
    let hs = Arc::new(hs);
    let abars = Arc::new(abars);
    maybe_record("selective_scan", &[u, delta, a, b, cmat], &out, |need| {
        let need = need.to_vec();
        Box::new(move |dy, store| {
            let mut dh = vec![0.0f32; c * n];
            let mut du = vec![0.0f32; l * c];
            let mut ddelta = vec![0.0f32; l * c];
            let mut da = vec![0.0f32; c * n];
            let mut db = vec![0.0f32; l * n];
            let mut dc = vec![0.0f32; l * n];
            for t in (0..l).rev() {
                let bt = &bd2[t * n..(t + 1) * n];
                let ct = &cd2[t * n..(t + 1) * n];
                for ch in 0..c {
                    let dt = dd2[t * c + ch];
                    let ut = ud2[t * c + ch];
                    let dyv = dy[t * c + ch];
                    let arow = &ad2[ch * n..(ch + 1) * n];
                    let dhrow = &mut dh[ch * n..(ch + 1) * n];
                    let hrow = &hs[(t * c + ch) * n..(t * c + ch) * n + n];
                    let abrow = &abars[(t * c + ch) * n..(t * c + ch) * n + n];
                    let mut ddt = 0.0f32;
                    let mut duv = 0.0f32;
                    for j in 0..n {
                        // y_t = sum_n c_t h_t
                        let mut dhv = dhrow[j] + dyv * ct[j];
                        dc[t * n + j] += dyv * hrow[j];
                        // h_t = abar h_{t-1} + dt b_t u_t
                        let hprev = if t == 0 {
                            0.0
                        } else {
                            hs[((t - 1) * c + ch) * n + j]
                        };
                        let dabar = dhv * hprev;
                        da[ch * n + j] += dabar * abrow[j] * dt;
                        ddt += dabar * abrow[j] * arow[j] + dhv * bt[j] * ut;
                        db[t * n + j] += dhv * dt * ut;
                        duv += dhv * dt * bt[j];
                        dhv *= abrow[j];
                        dhrow[j] = dhv;
                    }
                    ddelta[t * c + ch] = ddt;
                    du[t * c + ch] = duv;
                }
            }
            if need[0] {
                kernels::axpy(1.0, &du, store.accum(idu, l * c));
            }
            if need[1] {
                kernels::axpy(1.0, &ddelta, store.accum(idd, l * c));
            }
            if need[2] {
                kernels::axpy(1.0, &da, store.accum(ida, c * n));
            }
            if need[3] {
                kernels::axpy(1.0, &db, store.accum(idb, l * n));
            }
            if need[4] {
                kernels::axpy(1.0, &dc, store.accum(idc, l * n));
            }
        })
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_product() {
        // [1,0] * [[2,3],[5,7]] + [1,1] = [3,4]
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 3.0, 5.0, 7.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(matches!(
            linear(&x, &w, None),
            Err(VmError::Shape { .. })
        ));
    }

    #[test]
    fn softmax_basics() {
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        // no overflow at large magnitudes
        let x = Tensor::from_vec(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        // [0, ln 3] -> [0.25, 0.75]
        let x = Tensor::from_vec(&[2], vec![0.0, 3.0f32.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-6);
        assert!((y.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f32).sin() * 40.0).collect())
            .unwrap();
        let y = softmax(&x, 1).unwrap();
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_nan_propagates() {
        let x = Tensor::from_vec(&[2], vec![f32::NAN, 0.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().any(|v| v.is_nan()));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_hand_value() {
        // 4x4 ones, 2x2 ones kernel, stride 2, no pad -> 2x2 of 4
        let x = Tensor::from_vec(&[1, 4, 4], vec![1.0; 16]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 5, 5], vec![1.0; 25]).unwrap();
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[2, 1, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let y = conv1d(&x, &k, None, 1, 2).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv1d_hand_value() {
        // x=[1,2,3], kernel [1,1,1], pad 1 -> [3,6,5]
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let y = conv1d(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_sees_future_positions() {
        // Perturbing x[t+1] changes y[t]: the op is non-causal.
        let x0 = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut v = x0.data().to_vec();
        v[2] += 1.0;
        let x1 = Tensor::from_vec(&[1, 4], v).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3], vec![0.25, 0.5, 0.25]).unwrap();
        let y0 = conv1d(&x0, &k, None, 1, 1).unwrap();
        let y1 = conv1d(&x1, &k, None, 1, 1).unwrap();
        assert_ne!(y0.data()[1], y1.data()[1]);
    }

    #[test]
    fn batchnorm_identity_and_scalar_case() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = batchnorm(&x, &g, &b, &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(y.data(), x.data());

        // x=2, gamma=3, beta=1, mu=1, var=4, eps=0 -> 3*(2-1)/2+1 = 2.5
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let g = Tensor::full(&[1], 3.0);
        let b = Tensor::full(&[1], 1.0);
        let y = batchnorm(&x, &g, &b, &[1.0], &[4.0], 0.0).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_rejects_negative_variance() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            batchnorm(&x, &g, &b, &[0.0], &[-1.0], 0.0),
            Err(VmError::InvalidStatistics(_))
        ));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.0, 4.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let (y, _, _) = batchnorm_train(&x, &g, &b, 0.0).unwrap();
        for ch in 0..2 {
            let row = &y.data()[ch * 4..(ch + 1) * 4];
            let m: f32 = row.iter().sum::<f32>() / 4.0;
            let v: f32 = row.iter().map(|&t| (t - m) * (t - m)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = bilinear_resize(&x, 2, 3).unwrap();
        assert_eq!(y.data(), x.data());

        let c = Tensor::full(&[1, 2, 2], 7.25);
        let y = bilinear_resize(&c, 5, 3).unwrap();
        assert!(y.data().iter().all(|&v| (v - 7.25).abs() < 1e-6));
    }

    #[test]
    fn bilinear_token_layout_matches_chw() {
        let (h, w, c) = (3, 4, 2);
        let chw: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.7).sin()).collect();
        let x_chw = Tensor::from_vec(&[c, h, w], chw.clone()).unwrap();
        let mut hwc = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                hwc[p * c + ch] = chw[ch * h * w + p];
            }
        }
        let x_hwc = Tensor::from_vec(&[h * w, c], hwc).unwrap();
        let y0 = bilinear_resize(&x_chw, 5, 2).unwrap();
        let y1 = bilinear_resize_tokens(&x_hwc, h, w, 5, 2).unwrap();
        for ch in 0..c {
            for p in 0..5 * 2 {
                assert!((y0.data()[ch * 10 + p] - y1.data()[p * c + ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn remap_gathers_and_pads() {
        let x = Tensor::from_vec(&[4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let map = Arc::new(vec![3i64, -1, 0]);
        let y = remap(&x, map, &[3]).unwrap();
        assert_eq!(y.data(), &[40.0, 0.0, 10.0]);
    }

    #[test]
    fn concat_last_roundtrip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let y = concat_last(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn selective_scan_zero_delta_freezes_state() {
        let l = 6;
        let c = 2;
        let n = 3;
        let u = Tensor::from_vec(&[l, c], (0..l * c).map(|i| i as f32).collect()).unwrap();
        let delta = Tensor::zeros(&[l, c]);
        let a = Tensor::full(&[c, n], -1.0);
        let b = Tensor::full(&[l, n], 1.0);
        let cm = Tensor::full(&[l, n], 1.0);
        let y = selective_scan(&u, &delta, &a, &b, &cm).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-4));
    }
}
