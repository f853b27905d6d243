use super::{BackwardCtx, Tape, Tensor};
use crate::error::{Error, Result};

/// C[m×n] = A[m×k]·B[k×n] (+ beta·C), with arbitrary row/column strides on A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided index ranges
    // (checked by the shape validation at every call site) and `c` holds m×n
    // contiguous row-major values that do not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_rows(op: &'static str, idx: &[usize], rows: usize) -> Result<()> {
    if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
        return Err(Error::Index {
            op,
            index: bad,
            size: rows,
        });
    }
    Ok(())
}

impl Tape {
    /// Plain 2-D matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        self.matmul_unchecked(a, b, vec![a.shape()[0], b.shape()[1]])
    }

    /// `x[..., k] · w[k×n]`, flattening all leading axes of `x`.
    pub fn linear(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        if x.rank() == 0 || w.rank() != 2 || x.cols() != w.shape()[0] {
            return Err(Error::Shape {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = w.shape()[1];
        self.matmul_unchecked(x, w, shape)
    }

    fn matmul_unchecked(&self, a: &Tensor, b: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        Ok(self.record("matmul", &[a, b], out, shape, || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    // g[m×n] · bᵀ[n×k]
                    gemm(
                        m,
                        n,
                        k,
                        ctx.grad,
                        (n as isize, 1),
                        b.data(),
                        (1, n as isize),
                        &mut ga,
                        0.0,
                    );
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    // aᵀ[k×m] · g[m×n]
                    gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        (1, k as isize),
                        ctx.grad,
                        (n as isize, 1),
                        &mut gb,
                        0.0,
                    );
                    gb
                });
                vec![ga, gb]
            })
        }))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self.record("add", &[a, b], out, a.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.to_vec()),
                ]
            })
        }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Ok(self.record("sub", &[a, b], out, a.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.iter().map(|g| -g).collect()),
                ]
            })
        }))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.record("mul", &[a, b], out, a.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                    ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            })
        }))
    }

    pub fn scale(&self, x: &Tensor, c: f32) -> Tensor {
        let out = x.data().iter().map(|v| v * c).collect();
        self.record("scale", &[x], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad.iter().map(|g| g * c).collect())]
            })
        })
    }

    pub fn add_scalar(&self, x: &Tensor, c: f32) -> Tensor {
        let out = x.data().iter().map(|v| v + c).collect();
        self.record("add_scalar", &[x], out, x.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())])
        })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let out: Vec<f32> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let saved = out.clone();
        self.record("sigmoid", &[x], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(&saved)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                )]
            })
        })
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let out = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.record("relu", &[x], out, x.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            })
        })
    }

    /// x·sigmoid(x).
    pub fn silu(&self, x: &Tensor) -> Tensor {
        let out = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        self.record("silu", &[x], out, x.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect(),
                )]
            })
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Tensor) -> Tensor {
        let out = x.data().iter().map(|&v| gelu(v).0).collect();
        self.record("gelu", &[x], out, x.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0].data();
                vec![Some(ctx.grad.iter().zip(x).map(|(g, &v)| g * gelu(v).1).collect())]
            })
        })
    }

    /// Divides each row of a matrix by its sum.
    pub fn normalize_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, d) = (x.rows(), x.cols());
        let sums: Vec<f32> = (0..rows).map(|r| x.row(r).iter().sum()).collect();
        if sums.contains(&0.0) {
            return Err(Error::State("normalize_rows: row sums to zero".into()));
        }
        let mut out = x.to_vec();
        for (r, s) in sums.iter().enumerate() {
            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v /= s);
        }
        let saved = out.clone();
        Ok(self.record("normalize_rows", &[x], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    let (gr, yr) = (&ctx.grad[r * d..(r + 1) * d], &saved[r * d..(r + 1) * d]);
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        g[r * d + j] = (gr[j] - dot) / sums[r];
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let total: f32 = x.data().iter().sum();
        let n = x.numel();
        self.record("sum_all", &[x], vec![total], Vec::new(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])])
        })
    }

    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let n = x.numel().max(1);
        let s = self.sum_all(x);
        self.scale(&s, 1.0 / n as f32)
    }

    /// Mean along one axis; the axis is removed from the output shape.
    pub fn mean(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::Index {
                op: "mean",
                index: axis,
                size: x.rank(),
            });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.record("mean", &[x], out, shape, || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            g[base + i] = ctx.grad[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                size: x.rank(),
            });
        }
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = src[(o * n + j) * inner + i];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    out[(o * n + j) * inner + i] = buf[j];
                }
            }
        }
        let saved = out.clone();
        Ok(self.record("softmax", &[x], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; saved.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f32 = (0..n).map(|j| saved[idx(j)] * ctx.grad[idx(j)]).sum();
                        for j in 0..n {
                            g[idx(j)] = saved[idx(j)] * (ctx.grad[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// RMS normalization over the last axis, scaled by `weight`.
    pub fn rmsnorm(&self, x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
        let d = x.cols();
        if weight.numel() != d {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: x.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let (src, w) = (x.data(), weight.data());
        let mut out = vec![0.0; src.len()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let s = 1.0 / (ms + eps).sqrt();
            inv[r] = s;
            for (o, (v, wv)) in out[r * d..(r + 1) * d].iter_mut().zip(row.iter().zip(w)) {
                *o = v * s * wv;
            }
        }
        Ok(self.record("rmsnorm", &[x, weight], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut gx = ctx.needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; d]);
                for r in 0..rows {
                    let s = inv[r];
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &ctx.grad[r * d..(r + 1) * d];
                    if let Some(gw) = gw.as_mut() {
                        for j in 0..d {
                            gw[j] += gr[j] * xr[j] * s;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // d(xhat)=g·w ; dx = s·(d(xhat) − xhat·mean(d(xhat)·xhat))
                        let dot: f32 =
                            (0..d).map(|j| gr[j] * w[j] * xr[j] * s).sum::<f32>() / d as f32;
                        for j in 0..d {
                            gx[r * d + j] = s * (gr[j] * w[j] - xr[j] * s * dot);
                        }
                    }
                }
                vec![gx, gw]
            })
        }))
    }

    /// Rows of `weight[V×d]` selected by `ids`.
    pub fn embedding(&self, weight: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if weight.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: weight.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (weight.shape()[0], weight.shape()[1]);
        check_rows("embedding", ids, vocab)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(weight.row(id));
        }
        let ids = ids.to_vec();
        let shape = vec![ids.len(), d];
        Ok(self.record("embedding", &[weight], out, shape, || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += ctx.grad[r * d + j];
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &[Option<usize>]) -> Result<Tensor> {
        let (rows, vocab) = (logits.rows(), logits.cols());
        if logits.rank() != 2 || targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for t in targets.iter().flatten() {
            if *t >= vocab {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: *t,
                    size: vocab,
                });
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Data("cross_entropy: no non-padding targets".into()));
        }
        let src = logits.data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(&src[r * vocab..(r + 1) * vocab]);
            let lse = log_softmax_stats(p);
            if let Some(t) = targets[r] {
                total += (lse - src[r * vocab + t]) as f64;
            }
            for v in p.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = (total / count as f64) as f32;
        let targets = targets.to_vec();
        Ok(self.record("cross_entropy", &[logits], vec![loss], Vec::new(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let scale = ctx.grad[0] / count as f32;
                let mut g = probs;
                for (r, t) in targets.iter().enumerate() {
                    let row = &mut g[r * vocab..(r + 1) * vocab];
                    match t {
                        Some(t) => {
                            row[*t] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= scale);
                        }
                        None => row.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Rotary position embedding applied per head on rows of `x[T×d]`.
    pub fn rope(&self, x: &Tensor, positions: &[usize], n_heads: usize) -> Result<Tensor> {
        let d = x.cols();
        if positions.len() != x.rows() || n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2)
        {
            return Err(Error::Shape {
                op: "rope",
                lhs: x.shape().to_vec(),
                rhs: vec![positions.len(), n_heads],
            });
        }
        let hd = d / n_heads;
        let out = rope_rotate(x.data(), positions, n_heads, hd, false);
        let positions = positions.to_vec();
        Ok(self.record("rope", &[x], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(rope_rotate(ctx.grad, &positions, n_heads, hd, true))]
            })
        }))
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.record("reshape", &[x], x.to_vec(), shape.to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())])
        }))
    }

    /// Selected rows of a matrix (leading axes flattened).
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, d) = (x.rows(), x.cols());
        check_rows("gather_rows", idx, rows)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            out.extend_from_slice(x.row(r));
        }
        let idx = idx.to_vec();
        let shape = vec![idx.len(), d];
        Ok(self.record("gather_rows", &[x], out, shape, || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; rows * d];
                for (j, &r) in idx.iter().enumerate() {
                    for c in 0..d {
                        g[r * d + c] += ctx.grad[j * d + c];
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `values`.
    pub fn scatter_rows(&self, base: &Tensor, idx: &[usize], values: &Tensor) -> Result<Tensor> {
        self.row_update("scatter_rows", base, idx, values, false)
    }

    /// Copy of `base` with the rows of `values` added into rows `idx`.
    pub fn index_add(&self, base: &Tensor, idx: &[usize], values: &Tensor) -> Result<Tensor> {
        self.row_update("index_add", base, idx, values, true)
    }

    fn row_update(
        &self,
        op: &'static str,
        base: &Tensor,
        idx: &[usize],
        values: &Tensor,
        accumulate: bool,
    ) -> Result<Tensor> {
        let (rows, d) = (base.rows(), base.cols());
        if values.cols() != d || values.rows() != idx.len() {
            return Err(Error::Shape {
                op,
                lhs: base.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        check_rows(op, idx, rows)?;
        let mut out = base.to_vec();
        for (j, &r) in idx.iter().enumerate() {
            let dst = &mut out[r * d..(r + 1) * d];
            let src = values.row(j);
            if accumulate {
                dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
            } else {
                dst.copy_from_slice(src);
            }
        }
        let idx = idx.to_vec();
        Ok(self.record(op, &[base, values], out, base.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g_base = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.to_vec();
                    if !accumulate {
                        for &r in &idx {
                            g[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    g
                });
                let g_values = ctx.needs[1].then(|| {
                    let mut g = Vec::with_capacity(idx.len() * d);
                    for &r in &idx {
                        g.extend_from_slice(&ctx.grad[r * d..(r + 1) * d]);
                    }
                    g
                });
                vec![g_base, g_values]
            })
        }))
    }

    /// Multiplies row `r` of `x` by `s[r]`.
    pub fn row_scale(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (rows, d) = (x.rows(), x.cols());
        if s.numel() != rows {
            return Err(Error::Shape {
                op: "row_scale",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut out = x.to_vec();
        for (r, sv) in s.data().iter().enumerate() {
            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= sv);
        }
        Ok(self.record("row_scale", &[x, s], out, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs[0].then(|| {
                    let mut g = ctx.grad.to_vec();
                    for (r, sv) in s.iter().enumerate() {
                        g[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= sv);
                    }
                    g
                });
                let gs = ctx.needs[1].then(|| {
                    (0..rows)
                        .map(|r| {
                            (0..d)
                                .map(|j| ctx.grad[r * d + j] * x[r * d + j])
                                .sum::<f32>()
                        })
                        .collect()
                });
                vec![gx, gs]
            })
        }))
    }

    /// Flat vector of `x[r, c]` for each `(r, c)` pair of a matrix.
    pub fn gather_elements(&self, x: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let (rows, cols) = (x.rows(), x.cols());
        for &(r, c) in pairs {
            if r >= rows || c >= cols {
                return Err(Error::Index {
                    op: "gather_elements",
                    index: r * cols + c,
                    size: rows * cols,
                });
            }
        }
        let out = pairs.iter().map(|&(r, c)| x.data()[r * cols + c]).collect();
        let pairs = pairs.to_vec();
        let n = pairs.len();
        Ok(self.record("gather_elements", &[x], out, vec![n], || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; rows * cols];
                for (j, &(r, c)) in pairs.iter().enumerate() {
                    g[r * cols + c] += ctx.grad[j];
                }
                vec![Some(g)]
            })
        }))
    }

    /// Binarizes scores at `threshold` (score ≥ threshold → 1). The backward
    /// pass is the straight-through identity.
    pub fn ste_threshold(&self, scores: &Tensor, threshold: f32) -> Tensor {
        let out = scores
            .data()
            .iter()
            .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
            .collect();
        self.record("ste_threshold", &[scores], out, scores.shape().to_vec(), || {
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())])
        })
    }

    /// Masked residual `y = m ⊙ (out − x) + x`, where `out = x + F(x)` is the
    /// dense sublayer result and row `r` reads `m[r / group]`.
    ///
    /// With `hard` set the mask is binary and the forward is an exact row
    /// select, so `m = 1` reproduces `out` bit for bit and `m = 0` returns `x`.
    pub fn gate_residual(
        &self,
        out: &Tensor,
        x: &Tensor,
        m: &Tensor,
        group: usize,
        hard: bool,
    ) -> Result<Tensor> {
        same_shape("gate_residual", out, x)?;
        let (rows, d) = (x.rows(), x.cols());
        if group == 0 || m.numel() * group != rows {
            return Err(Error::Shape {
                op: "gate_residual",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let (o, xs, mv) = (out.data(), x.data(), m.data());
        let mut y = vec![0.0; o.len()];
        for r in 0..rows {
            let mr = mv[r / group];
            let (dst, orow, xrow) = (
                &mut y[r * d..(r + 1) * d],
                &o[r * d..(r + 1) * d],
                &xs[r * d..(r + 1) * d],
            );
            if hard {
                debug_assert!(mr == 0.0 || mr == 1.0);
                dst.copy_from_slice(if mr >= 0.5 { orow } else { xrow });
            } else {
                for j in 0..d {
                    dst[j] = mr * (orow[j] - xrow[j]) + xrow[j];
                }
            }
        }
        Ok(self.record("gate_residual", &[out, x, m], y, x.shape().to_vec(), || {
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (o, xs, mv) = (
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.inputs[2].data(),
                );
                let g = ctx.grad;
                let g_out = ctx.needs[0].then(|| {
                    (0..rows * d).map(|i| g[i] * mv[(i / d) / group]).collect()
                });
                let g_x = ctx.needs[1].then(|| {
                    (0..rows * d)
                        .map(|i| g[i] * (1.0 - mv[(i / d) / group]))
                        .collect()
                });
                let g_m = ctx.needs[2].then(|| {
                    let mut gm = vec![0.0; mv.len()];
                    for r in 0..rows {
                        let s: f32 = (r * d..(r + 1) * d).map(|i| g[i] * (o[i] - xs[i])).sum();
                        gm[r / group] += s;
                    }
                    gm
                });
                vec![g_out, g_x, g_m]
            })
        }))
    }
}

/// GELU value and derivative.
fn gelu(v: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6;
    let u = C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * v * v);
    (0.5 * v * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
}

/// log-sum-exp of a row.
fn log_softmax_stats(v: &[f32]) -> f32 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

const ROPE_BASE: f32 = 10_000.0;

fn rope_rotate(src: &[f32], positions: &[usize], n_heads: usize, hd: usize, inverse: bool) -> Vec<f32> {
    let d = n_heads * hd;
    let half = hd / 2;
    let mut out = vec![0.0; src.len()];
    let inv_freq: Vec<f32> = (0..half)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f32) / hd as f32))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        for (i, f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (pos as f32 * f).sin_cos();
            let sin = if inverse { -sin } else { sin };
            for h in 0..n_heads {
                let a = r * d + h * hd + i;
                let b = a + half;
                let (x1, x2) = (src[a], src[b]);
                out[a] = x1 * cos - x2 * sin;
                out[b] = x1 * sin + x2 * cos;
            }
        }
    }
    out
}
