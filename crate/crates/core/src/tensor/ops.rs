//! Differentiable operations. Each records its backward rule on the result.

use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        "add",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                for (d, v) in store.accum(&pa).iter_mut().zip(g) {
                    *d += v;
                }
            }
            if pb.requires_grad() {
                for (d, v) in store.accum(&pb).iter_mut().zip(g) {
                    *d += v;
                }
            }
        }),
    )
}

/// Elementwise difference.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        "sub",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                for (d, v) in store.accum(&pa).iter_mut().zip(g) {
                    *d += v;
                }
            }
            if pb.requires_grad() {
                for (d, v) in store.accum(&pb).iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }),
    )
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                let bd = pb.data();
                let da = store.accum(&pa);
                for i in 0..g.len() {
                    da[i] += g[i] * bd[i];
                }
            }
            if pb.requires_grad() {
                let ad = pa.data();
                let db = store.accum(&pb);
                for i in 0..g.len() {
                    db[i] += g[i] * ad[i];
                }
            }
        }),
    )
}

/// Multiply every element by a constant.
pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::Parameter {
            what: format!("scale factor must be finite, got {c}"),
        });
    }
    let out: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(
        "scale",
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                let da = store.accum(&pa);
                for i in 0..g.len() {
                    da[i] += g[i] * c;
                }
            }
        }),
    )
}

/// Broadcast-add a `[d]` (or `[1, d]`) row vector to every row of `[m, d]`.
pub fn add_row(m: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (rows, cols) = m.dims2("add_row")?;
    let d = row.dim_vector("add_row")?;
    if d != cols {
        return Err(Error::Shape {
            op: "add_row",
            detail: format!("matrix {:?} vs row {:?}", m.shape(), row.shape()),
        });
    }
    let mut out = m.to_vec();
    {
        let rd = row.data();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += rd[c];
            }
        }
    }
    let (pm, pr) = (m.clone(), row.clone());
    Tensor::from_op(
        "add_row",
        m.shape().to_vec(),
        out,
        vec![m.clone(), row.clone()],
        Box::new(move |g, store| {
            if pm.requires_grad() {
                for (d, v) in store.accum(&pm).iter_mut().zip(g) {
                    *d += v;
                }
            }
            if pr.requires_grad() {
                let dr = store.accum(&pr);
                for r in 0..rows {
                    for c in 0..cols {
                        dr[c] += g[r * cols + c];
                    }
                }
            }
        }),
    )
}

/// Stack `count` copies of a row vector into a `[count, d]` matrix.
pub fn repeat_rows(row: &Tensor, count: usize) -> Result<Tensor> {
    let d = row.dim_vector("repeat_rows")?;
    if count == 0 {
        return Err(Error::Contract {
            what: "repeat_rows needs count >= 1".into(),
        });
    }
    let rd = row.to_vec();
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        out.extend_from_slice(&rd);
    }
    let pr = row.clone();
    Tensor::from_op(
        "repeat_rows",
        vec![count, d],
        out,
        vec![row.clone()],
        Box::new(move |g, store| {
            if pr.requires_grad() {
                let dr = store.accum(&pr);
                for r in 0..count {
                    for c in 0..d {
                        dr[c] += g[r * d + c];
                    }
                }
            }
        }),
    )
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    c
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("{:?} x {:?}: inner dimensions differ", a.shape(), b.shape()),
        });
    }
    let out = matmul_raw(&a.data(), &b.data(), m, k, n);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                // d a = g . b^T
                let bd = pb.data();
                let da = store.accum(&pa);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for j in 0..k {
                        let brow = &bd[j * n..(j + 1) * n];
                        let mut s = 0.0;
                        for t in 0..n {
                            s += grow[t] * brow[t];
                        }
                        darow[j] += s;
                    }
                }
            }
            if pb.requires_grad() {
                // d b = a^T . g
                let ad = pa.data();
                let db = store.accum(&pb);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &ad[i * k..(i + 1) * k];
                    for (p, &av) in arow.iter().enumerate() {
                        if av != 0.0 {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
        }),
    )
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    drop(ad);
    let pa = a.clone();
    Tensor::from_op(
        "transpose",
        vec![n, m],
        out,
        vec![a.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                let da = store.accum(&pa);
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }),
    )
}

/// Same data viewed under a new shape with equal element count.
pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.len() {
        return Err(Error::Shape {
            op: "reshape",
            detail: format!("{:?} -> {:?}", a.shape(), shape),
        });
    }
    let pa = a.clone();
    Tensor::from_op(
        "reshape",
        shape,
        a.to_vec(),
        vec![a.clone()],
        Box::new(move |g, store| {
            if pa.requires_grad() {
                for (d, v) in store.accum(&pa).iter_mut().zip(g) {
                    *d += v;
                }
            }
        }),
    )
}

/// Row-wise softmax with temperature, computed with per-row max subtraction.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter {
            what: format!("softmax temperature must be > 0, got {temperature}"),
        });
    }
    let (m, n) = x.dims2("softmax_rows")?;
    if n == 0 {
        return Err(Error::Shape {
            op: "softmax_rows",
            detail: "rows must be non-empty".into(),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &xd[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - max) / temperature).exp();
            out[r * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[r * n + j] /= denom;
        }
    }
    drop(xd);
    let y = out.clone();
    let px = x.clone();
    Tensor::from_op(
        "softmax_rows",
        vec![m, n],
        out,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] += yr[j] * (gr[j] - dot) / temperature;
                    }
                }
            }
        }),
    )
}

/// Elementwise max(0, x); the subgradient at 0 is 0.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let px = x.clone();
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let xd = px.data();
                let dx = store.accum(&px);
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
        }),
    )
}

/// Smooth Gaussian-error activation (tanh form), used in the transformer
/// feed-forward blocks.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let out: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
        .collect();
    let px = x.clone();
    Tensor::from_op(
        "gelu",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let xd = px.data();
                let dx = store.accum(&px);
                for i in 0..g.len() {
                    let v = xd[i];
                    let inner = C * (v + A * v * v * v);
                    let t = inner.tanh();
                    let sech2 = 1.0 - t * t;
                    let d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v);
                    dx[i] += g[i] * d;
                }
            }
        }),
    )
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
    let y = out.clone();
    let px = x.clone();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }),
    )
}

pub(crate) fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of all elements, as a scalar tensor.
pub fn mean(x: &Tensor) -> Result<Tensor> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Contract {
            what: "mean of an empty tensor".into(),
        });
    }
    let m: f64 = x.data().iter().sum::<f64>() / n as f64;
    let px = x.clone();
    Tensor::from_op(
        "mean",
        vec![1],
        vec![m],
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                let c = g[0] / n as f64;
                for d in dx.iter_mut() {
                    *d += c;
                }
            }
        }),
    )
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().sum();
    let px = x.clone();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }),
    )
}

/// Row-wise maximum of a `[m, n]` tensor. Returns the `[m]` max values and
/// the per-row argmax (first index on ties). Gradient flows only to the
/// argmax element of each row.
pub fn row_max(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (m, n) = x.dims2("row_max")?;
    if n == 0 {
        return Err(Error::Shape {
            op: "row_max",
            detail: "rows must be non-empty".into(),
        });
    }
    let xd = x.data();
    let mut vals = vec![0.0; m];
    let mut arg = vec![0usize; m];
    for r in 0..m {
        let row = &xd[r * n..(r + 1) * n];
        let (mut bi, mut bv) = (0usize, row[0]);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = j;
            }
        }
        vals[r] = bv;
        arg[r] = bi;
    }
    drop(xd);
    let arg_cl = arg.clone();
    let px = x.clone();
    let t = Tensor::from_op(
        "row_max",
        vec![m],
        vals,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                for r in 0..m {
                    dx[r * n + arg_cl[r]] += g[r];
                }
            }
        }),
    )?;
    Ok((t, arg))
}

/// Concatenate tensors along `axis` (0 = rows, 1 = columns). Rank-1 inputs
/// concatenate along axis 0 into a longer vector.
pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract {
            what: "concat of zero tensors".into(),
        });
    }
    if parts.iter().all(|t| t.rank() == 1) && axis == 0 {
        let mut out = Vec::new();
        let mut offs = Vec::with_capacity(parts.len());
        for p in parts {
            offs.push((out.len(), p.len()));
            out.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        let total = out.len();
        return Tensor::from_op(
            "concat",
            vec![total],
            out,
            owned,
            Box::new(move |g, store| {
                for (h, (off, len)) in handles.iter().zip(&offs) {
                    if h.requires_grad() {
                        let dh = store.accum(h);
                        for i in 0..*len {
                            dh[i] += g[off + i];
                        }
                    }
                }
            }),
        );
    }
    if axis > 1 {
        return Err(Error::Contract {
            what: format!("concat axis must be 0 or 1, got {axis}"),
        });
    }
    let mut dims = Vec::with_capacity(parts.len());
    for p in parts {
        dims.push(p.dims2("concat")?);
    }
    let fixed = if axis == 0 { dims[0].1 } else { dims[0].0 };
    for (i, d) in dims.iter().enumerate() {
        let other = if axis == 0 { d.1 } else { d.0 };
        if other != fixed {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("part {i} has shape {:?}, incompatible on axis {axis}", parts[i].shape()),
            });
        }
    }
    if axis == 0 {
        let total_rows: usize = dims.iter().map(|d| d.0).sum();
        let cols = fixed;
        let mut out = Vec::with_capacity(total_rows * cols);
        let mut row_offs = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        for (p, d) in parts.iter().zip(&dims) {
            row_offs.push((at, d.0));
            out.extend_from_slice(&p.data());
            at += d.0;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        Tensor::from_op(
            "concat",
            vec![total_rows, cols],
            out,
            owned,
            Box::new(move |g, store| {
                for (h, (row0, rows)) in handles.iter().zip(&row_offs) {
                    if h.requires_grad() {
                        let dh = store.accum(h);
                        let src = &g[row0 * cols..(row0 + rows) * cols];
                        for (d, v) in dh.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }),
        )
    } else {
        let rows = dims[0].0;
        for (i, d) in dims.iter().enumerate() {
            if d.0 != rows {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("part {i} has {} rows, expected {rows}", d.0),
                });
            }
        }
        let total_cols: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![0.0; rows * total_cols];
        let mut col_offs = Vec::with_capacity(parts.len());
        let mut at = 0usize;
        for (p, d) in parts.iter().zip(&dims) {
            let pd = p.data();
            for r in 0..rows {
                out[r * total_cols + at..r * total_cols + at + d.1]
                    .copy_from_slice(&pd[r * d.1..(r + 1) * d.1]);
            }
            col_offs.push((at, d.1));
            at += d.1;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        Tensor::from_op(
            "concat",
            vec![rows, total_cols],
            out,
            owned,
            Box::new(move |g, store| {
                for (h, (col0, cols)) in handles.iter().zip(&col_offs) {
                    if h.requires_grad() {
                        let dh = store.accum(h);
                        for r in 0..rows {
                            for c in 0..*cols {
                                dh[r * cols + c] += g[r * total_cols + col0 + c];
                            }
                        }
                    }
                }
            }),
        )
    }
}

/// Contiguous slice of `len` rows or columns starting at `start`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = x.dims2("narrow")?;
    let bound = if axis == 0 { m } else { n };
    if axis > 1 || start + len > bound || len == 0 {
        return Err(Error::Contract {
            what: format!("narrow(axis={axis}, start={start}, len={len}) on shape {:?}", x.shape()),
        });
    }
    let xd = x.data();
    let (out, shape) = if axis == 0 {
        (xd[start * n..(start + len) * n].to_vec(), vec![len, n])
    } else {
        let mut o = Vec::with_capacity(m * len);
        for r in 0..m {
            o.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        (o, vec![m, len])
    };
    drop(xd);
    let px = x.clone();
    Tensor::from_op(
        "narrow",
        shape,
        out,
        vec![x.clone()],
        Box::new(move |g, store| {
            if px.requires_grad() {
                let dx = store.accum(&px);
                if axis == 0 {
                    for i in 0..g.len() {
                        dx[start * n + i] += g[i];
                    }
                } else {
                    for r in 0..m {
                        for c in 0..len {
                            dx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
        }),
    )
}

/// Single row of a rank-2 tensor as a `[1, n]` tensor.
pub fn row(x: &Tensor, index: usize) -> Result<Tensor> {
    narrow(x, 0, index, 1)
}

/// Per-row affine normalization: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = x.dims2("layer_norm")?;
    if gamma.dim_vector("layer_norm")? != n || beta.dim_vector("layer_norm")? != n {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!(
                "x {:?} with gamma {:?} / beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Parameter {
            what: format!("layer_norm eps must be > 0, got {eps}"),
        });
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; m * n];
    let mut xhat = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for r in 0..m {
        let rowv = &xd[r * n..(r + 1) * n];
        let mu: f64 = rowv.iter().sum::<f64>() / n as f64;
        let var: f64 = rowv.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..n {
            let xh = (rowv[j] - mu) * is;
            xhat[r * n + j] = xh;
            out[r * n + j] = xh * gd[j] + bd[j];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        "layer_norm",
        vec![m, n],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, store| {
            let gd = pg.data();
            if px.requires_grad() {
                let dx = store.accum(&px);
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut sum_gg = 0.0; // mean of g*gamma
                    let mut sum_ggx = 0.0; // mean of g*gamma*xhat
                    for j in 0..n {
                        let t = gr[j] * gd[j];
                        sum_gg += t;
                        sum_ggx += t * xh[j];
                    }
                    sum_gg /= n as f64;
                    sum_ggx /= n as f64;
                    for j in 0..n {
                        dx[r * n + j] += inv_std[r] * (gr[j] * gd[j] - sum_gg - xh[j] * sum_ggx);
                    }
                }
            }
            drop(gd);
            if pg.requires_grad() {
                let dg = store.accum(&pg);
                for r in 0..m {
                    for j in 0..n {
                        dg[j] += g[r * n + j] * xhat[r * n + j];
                    }
                }
            }
            if pb.requires_grad() {
                let db = store.accum(&pb);
                for r in 0..m {
                    for j in 0..n {
                        db[j] += g[r * n + j];
                    }
                }
            }
        }),
    )
}

/// Mean binary cross-entropy from raw logits, in the overflow-safe form
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let n = logits.len();
    if labels.len() != n || n == 0 {
        return Err(Error::Shape {
            op: "bce_with_logits",
            detail: format!("{n} logits vs {} labels", labels.len()),
        });
    }
    if labels.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::Parameter {
            what: "bce labels must lie in [0, 1]".into(),
        });
    }
    let zd = logits.data();
    let mut loss = 0.0;
    for (&z, &y) in zd.iter().zip(labels) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    loss /= n as f64;
    drop(zd);
    let labels_cl = labels.to_vec();
    let pz = logits.clone();
    Tensor::from_op(
        "bce_with_logits",
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g, store| {
            if pz.requires_grad() {
                let zd = pz.data();
                let dz = store.accum(&pz);
                for i in 0..dz.len() {
                    dz[i] += g[0] * (stable_sigmoid(zd[i]) - labels_cl[i]) / n as f64;
                }
            }
        }),
    )
}

/// Weighted categorical cross-entropy from logit rows:
/// `sum_r w_r * (logsumexp(z_r) - z_r[target_r]) / sum_r w_r`.
/// Zero-weight rows contribute nothing (PAD masking).
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<Tensor> {
    let (m, v) = logits.dims2("cross_entropy_rows")?;
    if targets.len() != m || weights.len() != m {
        return Err(Error::Shape {
            op: "cross_entropy_rows",
            detail: format!("{m} rows vs {} targets / {} weights", targets.len(), weights.len()),
        });
    }
    if let Some(t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Contract {
            what: format!("cross-entropy target {t} out of range for {v} classes"),
        });
    }
    let total_w: f64 = weights.iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::Contract {
            what: "cross_entropy_rows needs at least one positive weight".into(),
        });
    }
    let zd = logits.data();
    let mut loss = 0.0;
    for r in 0..m {
        if weights[r] == 0.0 {
            continue;
        }
        let rowv = &zd[r * v..(r + 1) * v];
        let max = rowv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + rowv.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += weights[r] * (lse - rowv[targets[r]]);
    }
    loss /= total_w;
    drop(zd);
    let (targets_cl, weights_cl) = (targets.to_vec(), weights.to_vec());
    let pz = logits.clone();
    Tensor::from_op(
        "cross_entropy_rows",
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g, store| {
            if pz.requires_grad() {
                let zd = pz.data();
                let dz = store.accum(&pz);
                for r in 0..m {
                    let w = weights_cl[r];
                    if w == 0.0 {
                        continue;
                    }
                    let rowv = &zd[r * v..(r + 1) * v];
                    let max = rowv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = rowv.iter().map(|z| (z - max).exp()).sum();
                    let c = g[0] * w / total_w;
                    for j in 0..v {
                        let p = (rowv[j] - max).exp() / denom;
                        let onehot = if j == targets_cl[r] { 1.0 } else { 0.0 };
                        dz[r * v + j] += c * (p - onehot);
                    }
                }
            }
        }),
    )
}

/// Gather rows of `table` by index; the standard embedding lookup. The
/// backward rule scatter-adds into the gathered rows.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = table.dims2("embedding")?;
    if ids.is_empty() {
        return Err(Error::Contract {
            what: "embedding lookup with no indices".into(),
        });
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Contract {
            what: format!("embedding index {bad} out of range for table with {v} rows"),
        });
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    drop(td);
    let ids_cl = ids.to_vec();
    let pt = table.clone();
    Tensor::from_op(
        "embedding",
        vec![ids.len(), d],
        out,
        vec![table.clone()],
        Box::new(move |g, store| {
            if pt.requires_grad() {
                let dt = store.accum(&pt);
                for (r, &i) in ids_cl.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += g[r * d + c];
                    }
                }
            }
        }),
    )
}

/// Cosine of each row of `m` against the vector `v`, as a `[rows]` tensor.
/// Every row and `v` must have nonzero norm.
pub fn cosine_rows(m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (rows, d) = m.dims2("cosine_rows")?;
    let dv = v.dim_vector("cosine_rows")?;
    if dv != d {
        return Err(Error::Shape {
            op: "cosine_rows",
            detail: format!("{:?} vs {:?}", m.shape(), v.shape()),
        });
    }
    let md = m.data();
    let vd = v.data();
    let vnorm = vd.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vnorm == 0.0 {
        return Err(Error::Degenerate {
            what: "cosine against a zero-norm vector".into(),
        });
    }
    let mut out = vec![0.0; rows];
    let mut row_norms = vec![0.0; rows];
    for r in 0..rows {
        let rowv = &md[r * d..(r + 1) * d];
        let norm = rowv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate {
                what: format!("cosine of zero-norm row {r}"),
            });
        }
        let dot: f64 = rowv.iter().zip(vd.iter()).map(|(a, b)| a * b).sum();
        out[r] = dot / (norm * vnorm);
        row_norms[r] = norm;
    }
    drop(md);
    drop(vd);
    let sims = out.clone();
    let (pm, pv) = (m.clone(), v.clone());
    Tensor::from_op(
        "cosine_rows",
        vec![rows],
        out,
        vec![m.clone(), v.clone()],
        Box::new(move |g, store| {
            let md = pm.data();
            let vd = pv.data();
            if pm.requires_grad() {
                let dm = store.accum(&pm);
                for r in 0..rows {
                    let rn = row_norms[r];
                    let s = sims[r];
                    for c in 0..d {
                        let u = md[r * d + c];
                        dm[r * d + c] += g[r] * (vd[c] / (rn * vnorm) - s * u / (rn * rn));
                    }
                }
            }
            drop(md);
            if pv.requires_grad() {
                let md = pm.data();
                let dv_acc = store.accum(&pv);
                for r in 0..rows {
                    let rn = row_norms[r];
                    let s = sims[r];
                    for c in 0..d {
                        dv_acc[c] += g[r] * (md[r * d + c] / (rn * vnorm) - s * vd[c] / (vnorm * vnorm));
                    }
                }
            }
        }),
    )
}

/// Cosine similarity of two vectors as a scalar tensor. The value lies in
/// [-1, 1]; zero-norm operands are rejected.
pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = u.dim_vector("cosine_similarity")?;
    let u2 = reshape(u, vec![1, d])?;
    let sims = cosine_rows(&u2, v)?;
    reshape(&sims, vec![1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        // [1,2] . [3;4] = 11
        let a = t(vec![1, 2], vec![1.0, 2.0]);
        let b = t(vec![2, 1], vec![3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(vec![2, 3]);
        let b = t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matmul(&z, &b).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        match matmul(&a, &b) {
            Err(Error::Shape { detail, .. }) => {
                assert!(detail.contains("[2, 3]") && detail.contains("[2, 2]"), "{detail}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let x = Tensor::zeros(vec![1, 4]);
        let y = softmax_rows(&x, 1.0).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logit_row() {
        let x = t(vec![1, 2], vec![1.0, 0.0]);
        let y = softmax_rows(&x, 1.0).unwrap().to_vec();
        let e = std::f64::consts::E;
        assert!((y[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((y[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((y[0] - 0.7311).abs() < 1e-4);
        assert!((y[1] - 0.2689).abs() < 1e-4);
    }

    fn entropy(p: &[f64]) -> f64 {
        p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
    }

    #[test]
    fn softmax_entropy_drops_with_temperature() {
        let x = t(vec![1, 2], vec![1.0, 0.0]);
        let warm = entropy(&softmax_rows(&x, 1.0).unwrap().to_vec());
        let cold = entropy(&softmax_rows(&x, 0.1).unwrap().to_vec());
        assert!(cold < warm);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::zeros(vec![1, 2]);
        assert!(matches!(softmax_rows(&x, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(softmax_rows(&x, -1.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_unit_interval() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| next()).collect();
            let x = t(vec![3, 4], data);
            let y = softmax_rows(&x, 0.7).unwrap().to_vec();
            for r in 0..3 {
                let s: f64 = y[r * 4..(r + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn relu_definition_and_flat_gradient() {
        let x = Tensor::param(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0]);
        sum(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_identity_on_positive_input() {
        let x = t(vec![3], vec![0.5, 1.0, 7.0]);
        assert_eq!(relu(&x).unwrap().to_vec(), vec![0.5, 1.0, 7.0]);
    }

    #[test]
    fn cosine_identity_orthogonal_and_hand_case() {
        let u = t(vec![2], vec![3.0, 4.0]);
        assert!((cosine_similarity(&u, &u).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        let a = t(vec![2], vec![1.0, 0.0]);
        let b = t(vec![2], vec![0.0, 5.0]);
        assert!(cosine_similarity(&a, &b).unwrap().item().unwrap().abs() < 1e-15);
        let c = t(vec![2], vec![1.0, 1.0]);
        let want = 1.0 / 2.0f64.sqrt();
        assert!((cosine_similarity(&a, &c).unwrap().item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cosine_scale_invariance() {
        let u = t(vec![3], vec![0.3, -1.2, 0.7]);
        let v = t(vec![3], vec![1.1, 0.4, -0.2]);
        let base = cosine_similarity(&u, &v).unwrap().item().unwrap();
        for (a, b) in [(2.0, 3.0), (0.5, 7.0), (1e3, 1e-3)] {
            let ua = scale(&u, a).unwrap();
            let vb = scale(&v, b).unwrap();
            let s = cosine_similarity(&ua, &vb).unwrap().item().unwrap();
            assert!((s - base).abs() < 1e-12);
            let sym = cosine_similarity(&vb, &ua).unwrap().item().unwrap();
            assert!((sym - s).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = Tensor::zeros(vec![2]);
        let v = t(vec![2], vec![1.0, 0.0]);
        assert!(matches!(cosine_similarity(&z, &v), Err(Error::Degenerate { .. })));
        assert!(matches!(cosine_similarity(&v, &z), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn row_max_routes_gradient_to_argmax() {
        let x = Tensor::param(vec![2, 3], vec![1.0, 5.0, 2.0, 7.0, 0.0, 7.0]).unwrap();
        let (y, arg) = row_max(&x).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 7.0]);
        assert_eq!(arg, vec![1, 0], "ties resolve to the first index");
        sum(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![1, 2], vec![5.0, 6.0]);
        let c = concat(0, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(narrow(&c, 0, 2, 1).unwrap().to_vec(), vec![5.0, 6.0]);
        let d = concat(1, &[&a, &a]).unwrap();
        assert_eq!(d.shape(), &[2, 4]);
        assert_eq!(narrow(&d, 1, 2, 2).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let table = Tensor::param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        sum(&e).unwrap().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(embedding(&table, &[3]).is_err());
    }

    #[test]
    fn bce_zero_logit_is_ln_two() {
        let z = Tensor::zeros(vec![2]);
        let l = bce_with_logits(&z, &[1.0, 0.0]).unwrap().item().unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let z = Tensor::zeros(vec![2, 7]);
        let l = cross_entropy_rows(&z, &[3, 0], &[1.0, 1.0]).unwrap().item().unwrap();
        assert!((l - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_weight_rows_contribute_nothing() {
        let z = t(vec![2, 3], vec![9.0, -4.0, 2.0, 0.0, 0.0, 0.0]);
        let l = cross_entropy_rows(&z, &[0, 1], &[0.0, 1.0]).unwrap().item().unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let x = t(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = t(vec![4], vec![1.0; 4]);
        let beta = Tensor::zeros(vec![4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap().to_vec();
        let mu: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mu.abs() < 1e-12);
        assert!(y[3] > y[0]);
    }
}
