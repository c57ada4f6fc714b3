//! Forward ops with hand-derived reverse rules.

use rayon::prelude::*;

use super::{acc_grad, Tensor};
use crate::error::{Error, Result};

fn same_graph(a: &Tensor, b: &Tensor) -> bool {
    std::rc::Rc::ptr_eq(&a.graph().nodes, &b.graph().nodes)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    debug_assert!(same_graph(a, b));
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let out: Vec<f64> = a.value().iter().zip(b.value()).map(|(x, y)| x + y).collect();
    let requires = a.requires_grad() || b.requires_grad();
    let backward = requires.then(|| {
        let (ida, idb) = (a.id(), b.id());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let len = a.numel();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            if ra {
                let da = acc_grad(grads, ida, len);
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if rb {
                let db = acc_grad(grads, idb, len);
                for (d, &gi) in db.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }) as super::BackwardFn
    });
    Ok(a.graph()
        .push_node(a.shape().to_vec(), out, requires, false, backward))
}

/// Elementwise product of same-shape tensors.
pub fn mul_same(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(same_graph(a, b));
    debug_assert_eq!(a.shape(), b.shape());
    let out: Vec<f64> = a.value().iter().zip(b.value()).map(|(x, y)| x * y).collect();
    let requires = a.requires_grad() || b.requires_grad();
    let backward = requires.then(|| {
        let (ida, idb) = (a.id(), b.id());
        let (ra, rb) = (a.requires_grad(), b.requires_grad());
        let (va, vb) = (a.value_rc(), b.value_rc());
        let len = a.numel();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            if ra {
                let da = acc_grad(grads, ida, len);
                for i in 0..len {
                    da[i] += g[i] * vb[i];
                }
            }
            if rb {
                let db = acc_grad(grads, idb, len);
                for i in 0..len {
                    db[i] += g[i] * va[i];
                }
            }
        }) as super::BackwardFn
    });
    a.graph()
        .push_node(a.shape().to_vec(), out, requires, false, backward)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = x.value().iter().map(|v| v * c).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for (d, &gi) in dx.iter_mut().zip(g) {
                *d += c * gi;
            }
        }) as super::BackwardFn
    });
    x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward)
}

/// ReLU with subgradient 0 at the origin.
pub fn relu(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.value().iter().map(|&v| v.max(0.0)).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let vx = x.value_rc();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for i in 0..len {
                if vx[i] > 0.0 {
                    dx[i] += g[i];
                }
            }
        }) as super::BackwardFn
    });
    x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.value().iter().map(|&v| sigmoid_scalar(v)).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let vy = std::rc::Rc::new(out.clone());
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for i in 0..len {
                dx[i] += g[i] * vy[i] * (1.0 - vy[i]);
            }
        }) as super::BackwardFn
    });
    x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward)
}

pub fn exp(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.value().iter().map(|&v| v.exp()).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let vy = std::rc::Rc::new(out.clone());
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for i in 0..len {
                dx[i] += g[i] * vy[i];
            }
        }) as super::BackwardFn
    });
    x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward)
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    if x.value().iter().any(|&v| v <= 0.0) {
        return Err(Error::Numerical("log of a non-positive value".into()));
    }
    let out: Vec<f64> = x.value().iter().map(|&v| v.ln()).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let vx = x.value_rc();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for i in 0..len {
                dx[i] += g[i] / vx[i];
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward))
}

/// `y = W x + b` for `x` of shape `[d_in]` or `[t, d_in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, d_in) = match x.shape() {
        [d] => (1usize, *d),
        [t, d] => (*t, *d),
        other => return Err(Error::shape("linear", format!("input shape {other:?}"))),
    };
    if w.shape().len() != 2 {
        return Err(Error::shape("linear", format!("weight shape {:?}", w.shape())));
    }
    let d_out = w.shape()[0];
    let w_in = w.shape()[1];
    if w_in != d_in || b.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let mut out = vec![0.0f64; rows * d_out];
    for t in 0..rows {
        let xrow = &xv[t * d_in..(t + 1) * d_in];
        let orow = &mut out[t * d_out..(t + 1) * d_out];
        for o in 0..d_out {
            let wrow = &wv[o * d_in..(o + 1) * d_in];
            let mut accv = bv[o];
            for i in 0..d_in {
                accv += wrow[i] * xrow[i];
            }
            orow[o] = accv;
        }
    }
    let out_shape = if x.shape().len() == 1 {
        vec![d_out]
    } else {
        vec![rows, d_out]
    };
    let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
    let backward = requires.then(|| {
        let (idx, idw, idb) = (x.id(), w.id(), b.id());
        let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
        let xv = x.value_rc();
        let wv = w.value_rc();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            if rb {
                let db = acc_grad(grads, idb, d_out);
                for t in 0..rows {
                    for o in 0..d_out {
                        db[o] += g[t * d_out + o];
                    }
                }
            }
            if rw {
                let dw = acc_grad(grads, idw, d_out * d_in);
                for t in 0..rows {
                    let xrow = &xv[t * d_in..(t + 1) * d_in];
                    for o in 0..d_out {
                        let go = g[t * d_out + o];
                        let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
                        for i in 0..d_in {
                            dwrow[i] += go * xrow[i];
                        }
                    }
                }
            }
            if rx {
                let dx = acc_grad(grads, idx, rows * d_in);
                for t in 0..rows {
                    let dxrow = &mut dx[t * d_in..(t + 1) * d_in];
                    for o in 0..d_out {
                        let go = g[t * d_out + o];
                        let wrow = &wv[o * d_in..(o + 1) * d_in];
                        for i in 0..d_in {
                            dxrow[i] += go * wrow[i];
                        }
                    }
                }
            }
        }) as super::BackwardFn
    });
    Ok(x.graph().push_node(out_shape, out, requires, false, backward))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Mean over the listed axes; the reduced axes are removed from the shape.
pub fn mean_pool(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::shape(
                "mean_pool",
                format!("axis {a} out of range for shape {shape:?}"),
            ));
        }
    }
    let mut reduce = vec![false; shape.len()];
    for &a in axes {
        reduce[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduce)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| *s)
        .collect();
    let out_shape = if out_shape.is_empty() {
        vec![1]
    } else {
        out_shape
    };
    let count: usize = shape
        .iter()
        .zip(&reduce)
        .filter(|(_, r)| **r)
        .map(|(s, _)| *s)
        .product();
    let in_strides = row_major_strides(&shape);
    let out_strides = row_major_strides(&out_shape);

    // map every input flat index to its output flat index
    let map_index = {
        let shape = shape.clone();
        let reduce = reduce.clone();
        let in_strides = in_strides.clone();
        let out_strides = out_strides.clone();
        move |flat: usize| -> usize {
            let mut rem = flat;
            let mut out_flat = 0usize;
            let mut kept = 0usize;
            for d in 0..shape.len() {
                let idx = rem / in_strides[d];
                rem %= in_strides[d];
                if !reduce[d] {
                    out_flat += idx * out_strides[kept];
                    kept += 1;
                }
            }
            out_flat
        }
    };

    let out_len: usize = out_shape.iter().product();
    let mut out = vec![0.0f64; out_len];
    for (i, &v) in x.value().iter().enumerate() {
        out[map_index(i)] += v;
    }
    let inv = 1.0 / count as f64;
    for v in out.iter_mut() {
        *v *= inv;
    }

    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let map_index = map_index.clone();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for (i, d) in dx.iter_mut().enumerate() {
                *d += g[map_index(i)] * inv;
            }
        }) as super::BackwardFn
    });
    Ok(x.graph().push_node(out_shape, out, requires, false, backward))
}

pub fn reshape(x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?}", x.shape(), shape),
        ));
    }
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for (d, &gi) in dx.iter_mut().zip(g) {
                *d += gi;
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(shape, x.value().to_vec(), requires, false, backward))
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if perm.len() != shape.len() {
        return Err(Error::shape(
            "permute",
            format!("perm {perm:?} for shape {shape:?}"),
        ));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::shape("permute", format!("invalid perm {perm:?}")));
        }
        seen[p] = true;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(&shape);
    let out_strides = row_major_strides(&out_shape);

    let forward_map = {
        let perm = perm.to_vec();
        let out_shape = out_shape.clone();
        move |out_flat: usize| -> usize {
            let mut rem = out_flat;
            let mut in_flat = 0usize;
            for d in 0..out_shape.len() {
                let idx = rem / out_strides[d];
                rem %= out_strides[d];
                in_flat += idx * in_strides[perm[d]];
            }
            in_flat
        }
    };

    let xv = x.value();
    let out: Vec<f64> = (0..xv.len()).map(|o| xv[forward_map(o)]).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let forward_map = forward_map.clone();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, len);
            for (o, &gi) in g.iter().enumerate() {
                dx[forward_map(o)] += gi;
            }
        }) as super::BackwardFn
    });
    Ok(x.graph().push_node(out_shape, out, requires, false, backward))
}

/// Concatenate 1-D tensors into one vector.
pub fn concat_vecs(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_vecs needs at least one input".into()));
    }
    for p in parts {
        if p.shape().len() != 1 {
            return Err(Error::shape("concat_vecs", format!("{:?}", p.shape())));
        }
    }
    let total: usize = parts.iter().map(|p| p.numel()).sum();
    let mut out = Vec::with_capacity(total);
    for p in parts {
        out.extend_from_slice(p.value());
    }
    let requires = parts.iter().any(|p| p.requires_grad());
    let backward = requires.then(|| {
        let meta: Vec<(usize, usize, bool)> = parts
            .iter()
            .map(|p| (p.id(), p.numel(), p.requires_grad()))
            .collect();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let mut offset = 0usize;
            for &(id, len, req) in &meta {
                if req {
                    let dp = acc_grad(grads, id, len);
                    for i in 0..len {
                        dp[i] += g[offset + i];
                    }
                }
                offset += len;
            }
        }) as super::BackwardFn
    });
    Ok(parts[0]
        .graph()
        .push_node(vec![total], out, requires, false, backward))
}

/// Normalize a vector to unit L2 norm (norm floored at 1e-12).
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(Error::shape("l2_normalize", format!("{:?}", x.shape())));
    }
    let norm = x
        .value()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let out: Vec<f64> = x.value().iter().map(|v| v / norm).collect();
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let len = x.numel();
        let y = std::rc::Rc::new(out.clone());
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dot: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let dx = acc_grad(grads, id, len);
            for i in 0..len {
                dx[i] += (g[i] - y[i] * dot) / norm;
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward))
}

/// Per-row layer normalization over the last axis with learned gain/bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d) = match x.shape() {
        [d] => (1usize, *d),
        [t, d] => (*t, *d),
        other => return Err(Error::shape("layer_norm", format!("{other:?}"))),
    };
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?}, bias {:?}, d {d}", gain.shape(), bias.shape()),
        ));
    }
    const EPS: f64 = 1e-5;
    let xv = x.value();
    let gv = gain.value();
    let bv = bias.value();
    let mut out = vec![0.0f64; rows * d];
    let mut xhat = vec![0.0f64; rows * d];
    let mut inv_std = vec![0.0f64; rows];
    for t in 0..rows {
        let row = &xv[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + EPS).sqrt();
        inv_std[t] = inv;
        for i in 0..d {
            let h = (row[i] - mean) * inv;
            xhat[t * d + i] = h;
            out[t * d + i] = gv[i] * h + bv[i];
        }
    }
    let requires = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    let backward = requires.then(|| {
        let (idx, idg, idb) = (x.id(), gain.id(), bias.id());
        let (rx, rg, rb) = (x.requires_grad(), gain.requires_grad(), bias.requires_grad());
        let gv = gain.value_rc();
        let xhat = std::rc::Rc::new(xhat);
        let inv_std = std::rc::Rc::new(inv_std);
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            if rb {
                let db = acc_grad(grads, idb, d);
                for t in 0..rows {
                    for i in 0..d {
                        db[i] += g[t * d + i];
                    }
                }
            }
            if rg {
                let dgn = acc_grad(grads, idg, d);
                for t in 0..rows {
                    for i in 0..d {
                        dgn[i] += g[t * d + i] * xhat[t * d + i];
                    }
                }
            }
            if rx {
                let dx = acc_grad(grads, idx, rows * d);
                for t in 0..rows {
                    let gh: Vec<f64> = (0..d).map(|i| g[t * d + i] * gv[i]).collect();
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh
                        .iter()
                        .zip(&xhat[t * d..(t + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for i in 0..d {
                        dx[t * d + i] +=
                            inv_std[t] * (gh[i] - mean_gh - xhat[t * d + i] * mean_ghx);
                    }
                }
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(x.shape().to_vec(), out, requires, false, backward))
}

/// Cross-correlation 3D convolution with zero padding and a uniform stride.
/// `x`: [Ci, A, B, D], `w`: [Co, Ci, k, k, k], `b`: [Co].
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [ci, a, bd, d] = match x.shape() {
        [ci, a, b, d] => [*ci, *a, *b, *d],
        other => return Err(Error::shape("conv3d", format!("input {other:?}"))),
    };
    let [co, wci, k0, k1, k2] = match w.shape() {
        [co, wci, k0, k1, k2] => [*co, *wci, *k0, *k1, *k2],
        other => return Err(Error::shape("conv3d", format!("kernel {other:?}"))),
    };
    if wci != ci || k0 != k1 || k1 != k2 {
        return Err(Error::shape(
            "conv3d",
            format!("kernel {:?} does not match input channels {ci}", w.shape()),
        ));
    }
    let k = k0;
    if b.shape() != [co] {
        return Err(Error::shape("conv3d", format!("bias {:?}", b.shape())));
    }
    if stride == 0 {
        return Err(Error::shape("conv3d", "stride must be >= 1".to_string()));
    }
    let out_dim = |n: usize| -> Result<usize> {
        let padded = n + 2 * pad;
        if padded < k {
            return Err(Error::shape(
                "conv3d",
                format!("spatial dim {n} too small for kernel {k} with pad {pad}"),
            ));
        }
        Ok((padded - k) / stride + 1)
    };
    let (oa, ob, od) = (out_dim(a)?, out_dim(bd)?, out_dim(d)?);

    let xv = x.value();
    let wv = w.value();
    let bv = b.value();

    // valid output range for a kernel offset: ix = o*stride + kk - pad in [0, n)
    let ranges = |n: usize, on: usize, kk: usize| -> (usize, usize) {
        let lo = if kk < pad {
            (pad - kk).div_ceil(stride)
        } else {
            0
        };
        let max_i = n + pad;
        if max_i <= kk {
            return (1, 0);
        }
        let hi = ((max_i - kk - 1) / stride).min(on - 1);
        (lo, hi)
    };

    let in_plane = bd * d;
    let in_vol = a * in_plane;
    let out_plane = ob * od;
    let out_vol = oa * out_plane;

    let mut out = vec![0.0f64; co * out_vol];
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(c_out, out_c)| {
            out_c.fill(bv[c_out]);
            for c_in in 0..ci {
                let x_c = &xv[c_in * in_vol..(c_in + 1) * in_vol];
                for ka in 0..k {
                    let (alo, ahi) = ranges(a, oa, ka);
                    for kb in 0..k {
                        let (blo, bhi) = ranges(bd, ob, kb);
                        for kd in 0..k {
                            let (dlo, dhi) = ranges(d, od, kd);
                            if alo > ahi || blo > bhi || dlo > dhi {
                                continue;
                            }
                            let wgt = wv[(((c_out * ci + c_in) * k + ka) * k + kb) * k + kd];
                            if wgt == 0.0 {
                                continue;
                            }
                            for o_a in alo..=ahi {
                                let ia = o_a * stride + ka - pad;
                                for o_b in blo..=bhi {
                                    let ib = o_b * stride + kb - pad;
                                    let in_base = ia * in_plane + ib * d;
                                    let out_base = o_a * out_plane + o_b * od;
                                    for o_d in dlo..=dhi {
                                        let id_ = o_d * stride + kd - pad;
                                        out_c[out_base + o_d] += wgt * x_c[in_base + id_];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    let requires = x.requires_grad() || w.requires_grad() || b.requires_grad();
    let out_shape = vec![co, oa, ob, od];
    let backward = requires.then(|| {
        let (idx, idw, idb) = (x.id(), w.id(), b.id());
        let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
        let xv = x.value_rc();
        let wv = w.value_rc();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let xv: &[f64] = &xv;
            let wv: &[f64] = &wv;
            let ranges = |n: usize, on: usize, kk: usize| -> (usize, usize) {
                let lo = if kk < pad {
                    (pad - kk).div_ceil(stride)
                } else {
                    0
                };
                let max_i = n + pad;
                if max_i <= kk {
                    return (1, 0);
                }
                let hi = ((max_i - kk - 1) / stride).min(on - 1);
                (lo, hi)
            };
            if rb {
                let db = acc_grad(grads, idb, co);
                for c_out in 0..co {
                    db[c_out] += g[c_out * out_vol..(c_out + 1) * out_vol].iter().sum::<f64>();
                }
            }
            if rw {
                let dw = acc_grad(grads, idw, co * ci * k * k * k);
                dw.par_chunks_mut(ci * k * k * k)
                    .enumerate()
                    .for_each(|(c_out, dw_c)| {
                        let g_c = &g[c_out * out_vol..(c_out + 1) * out_vol];
                        for c_in in 0..ci {
                            let x_c = &xv[c_in * in_vol..(c_in + 1) * in_vol];
                            for ka in 0..k {
                                let (alo, ahi) = ranges(a, oa, ka);
                                for kb in 0..k {
                                    let (blo, bhi) = ranges(bd, ob, kb);
                                    for kd in 0..k {
                                        let (dlo, dhi) = ranges(d, od, kd);
                                        if alo > ahi || blo > bhi || dlo > dhi {
                                            continue;
                                        }
                                        let mut accv = 0.0f64;
                                        for o_a in alo..=ahi {
                                            let ia = o_a * stride + ka - pad;
                                            for o_b in blo..=bhi {
                                                let ib = o_b * stride + kb - pad;
                                                for o_d in dlo..=dhi {
                                                    let id_ = o_d * stride + kd - pad;
                                                    accv += g_c
                                                        [o_a * out_plane + o_b * od + o_d]
                                                        * x_c[ia * in_plane + ib * d + id_];
                                                }
                                            }
                                        }
                                        dw_c[((c_in * k + ka) * k + kb) * k + kd] += accv;
                                    }
                                }
                            }
                        }
                    });
            }
            if rx {
                let dx = acc_grad(grads, idx, ci * in_vol);
                dx.par_chunks_mut(in_vol)
                    .enumerate()
                    .for_each(|(c_in, dx_c)| {
                        for c_out in 0..co {
                            let g_c = &g[c_out * out_vol..(c_out + 1) * out_vol];
                            for ka in 0..k {
                                let (alo, ahi) = ranges(a, oa, ka);
                                for kb in 0..k {
                                    let (blo, bhi) = ranges(bd, ob, kb);
                                    for kd in 0..k {
                                        let (dlo, dhi) = ranges(d, od, kd);
                                        if alo > ahi || blo > bhi || dlo > dhi {
                                            continue;
                                        }
                                        let wgt =
                                            wv[(((c_out * ci + c_in) * k + ka) * k + kb) * k + kd];
                                        if wgt == 0.0 {
                                            continue;
                                        }
                                        for o_a in alo..=ahi {
                                            let ia = o_a * stride + ka - pad;
                                            for o_b in blo..=bhi {
                                                let ib = o_b * stride + kb - pad;
                                                for o_d in dlo..=dhi {
                                                    let id_ = o_d * stride + kd - pad;
                                                    dx_c[ia * in_plane + ib * d + id_] += wgt
                                                        * g_c[o_a * out_plane + o_b * od + o_d];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
            }
        }) as super::BackwardFn
    });
    Ok(x.graph().push_node(out_shape, out, requires, false, backward))
}

/// Reorder the rows of a `[T, d]` tensor. `indices` must be a permutation of
/// `0..T`.
pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (rows, d) = match x.shape() {
        [t, d] => (*t, *d),
        other => return Err(Error::shape("gather_rows", format!("{other:?}"))),
    };
    if indices.len() != rows || indices.iter().any(|&i| i >= rows) {
        return Err(Error::shape(
            "gather_rows",
            format!("{} indices for {rows} rows", indices.len()),
        ));
    }
    let xv = x.value();
    let mut out = vec![0.0f64; rows * d];
    for (r, &src) in indices.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&xv[src * d..(src + 1) * d]);
    }
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        let indices = indices.to_vec();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let dx = acc_grad(grads, id, rows * d);
            for (r, &src) in indices.iter().enumerate() {
                for i in 0..d {
                    dx[src * d + i] += g[r * d + i];
                }
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(vec![rows, d], out, requires, false, backward))
}

/// Adaptive average pooling to an exact target grid; also upsamples by
/// repetition when the target is larger than the input.
pub fn adaptive_avg_pool3d(x: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    let [c, a, b, d] = match x.shape() {
        [c, a, b, d] => [*c, *a, *b, *d],
        other => return Err(Error::shape("adaptive_avg_pool3d", format!("{other:?}"))),
    };
    let (ta, tb, td) = target;
    if ta == 0 || tb == 0 || td == 0 {
        return Err(Error::shape(
            "adaptive_avg_pool3d",
            format!("target {target:?}"),
        ));
    }
    let span = |i: usize, n: usize, t: usize| -> (usize, usize) {
        let start = i * n / t;
        let end = ((i + 1) * n).div_ceil(t);
        (start, end.max(start + 1))
    };
    let xv = x.value();
    let in_plane = b * d;
    let in_vol = a * in_plane;
    let out_plane = tb * td;
    let out_vol = ta * out_plane;
    let mut out = vec![0.0f64; c * out_vol];
    for ch in 0..c {
        let x_c = &xv[ch * in_vol..(ch + 1) * in_vol];
        let o_c = &mut out[ch * out_vol..(ch + 1) * out_vol];
        for i_a in 0..ta {
            let (a0, a1) = span(i_a, a, ta);
            for i_b in 0..tb {
                let (b0, b1) = span(i_b, b, tb);
                for i_d in 0..td {
                    let (d0, d1) = span(i_d, d, td);
                    let mut sum = 0.0f64;
                    for ia in a0..a1 {
                        for ib in b0..b1 {
                            for idd in d0..d1 {
                                sum += x_c[ia * in_plane + ib * d + idd];
                            }
                        }
                    }
                    let count = (a1 - a0) * (b1 - b0) * (d1 - d0);
                    o_c[i_a * out_plane + i_b * td + i_d] = sum / count as f64;
                }
            }
        }
    }
    let requires = x.requires_grad();
    let backward = requires.then(|| {
        let id = x.id();
        Box::new(move |g: &[f64], grads: &mut [Option<Vec<f64>>]| {
            let span = |i: usize, n: usize, t: usize| -> (usize, usize) {
                let start = i * n / t;
                let end = ((i + 1) * n).div_ceil(t);
                (start, end.max(start + 1))
            };
            let dx = acc_grad(grads, id, c * in_vol);
            for ch in 0..c {
                let g_c = &g[ch * out_vol..(ch + 1) * out_vol];
                let dx_c = &mut dx[ch * in_vol..(ch + 1) * in_vol];
                for i_a in 0..ta {
                    let (a0, a1) = span(i_a, a, ta);
                    for i_b in 0..tb {
                        let (b0, b1) = span(i_b, b, tb);
                        for i_d in 0..td {
                            let (d0, d1) = span(i_d, d, td);
                            let count = (a1 - a0) * (b1 - b0) * (d1 - d0);
                            let go = g_c[i_a * out_plane + i_b * td + i_d] / count as f64;
                            for ia in a0..a1 {
                                for ib in b0..b1 {
                                    for idd in d0..d1 {
                                        dx_c[ia * in_plane + ib * d + idd] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }) as super::BackwardFn
    });
    Ok(x.graph()
        .push_node(vec![c, ta, tb, td], out, requires, false, backward))
}
