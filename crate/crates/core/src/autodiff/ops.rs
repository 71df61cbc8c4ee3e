//! Differentiable tensor operations.
//!
//! Broadcasting is limited to adding a vector over the last axis
//! ([`Tensor::add_bias`]) and scalar scaling. Everything else requires
//! identical shapes.

use rand::Rng;

use super::{BackwardArgs, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied before taking logarithms in [`Tensor::nll`].
pub const PROB_FLOOR: f64 = 1e-12;

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::usage(format!(
            "{op} expects a rank-2 tensor, got shape {other:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(op, x.shape().to_vec(), out, &[x], move |a: &BackwardArgs<'_>| {
        let xs = a.inputs[0].data();
        let g = a
            .grad
            .iter()
            .zip(xs.iter().zip(a.output))
            .map(|(g, (&x, &y))| g * df(x, y))
            .collect();
        vec![Some(g)]
    })
}

/// `C[m,n] += A[m,k] * B[k,n]`, plain i-k-j loop.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in row.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

impl Tensor {
    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data(), &rhs.data(), &mut out, m, k, n);
        Ok(Tensor::from_op("matmul", vec![m, n], out, &[self, rhs], move |a| {
            let g = a.grad;
            let lhs = a.inputs[0].data();
            let rhs = a.inputs[1].data();
            // dA = dZ * B^T
            let da = a.inputs[0].requires_grad().then(|| {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &rhs[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                da
            });
            // dB = A^T * dZ
            let db = a.inputs[1].requires_grad().then(|| {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = lhs[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let out = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op("transpose", vec![c, r], out, &[self], move |a| {
            vec![Some(transpose_raw(a.grad, c, r))]
        }))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "add")?;
        let out = self.data().iter().zip(rhs.data().iter()).map(|(x, y)| x + y).collect();
        Ok(Tensor::from_op("add", self.shape().to_vec(), out, &[self, rhs], |a| {
            vec![Some(a.grad.to_vec()), Some(a.grad.to_vec())]
        }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "sub")?;
        let out = self.data().iter().zip(rhs.data().iter()).map(|(x, y)| x - y).collect();
        Ok(Tensor::from_op("sub", self.shape().to_vec(), out, &[self, rhs], |a| {
            vec![Some(a.grad.to_vec()), Some(a.grad.iter().map(|g| -g).collect())]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape(self, rhs, "mul")?;
        let out = self.data().iter().zip(rhs.data().iter()).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op("mul", self.shape().to_vec(), out, &[self, rhs], |a| {
            let x = a.inputs[0].data();
            let y = a.inputs[1].data();
            let gx = a.grad.iter().zip(y.iter()).map(|(g, y)| g * y).collect();
            let gy = a.grad.iter().zip(x.iter()).map(|(g, x)| g * x).collect();
            vec![Some(gx), Some(gy)]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, "scale", |x| c * x, move |_, _| c)
    }

    /// Adds `bias[n]` to every last-axis slice of `self[..., n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim(self);
        if bias.shape() != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(b.iter()).for_each(|(x, b)| *x += b);
            }
        }
        Ok(Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            out,
            &[self, bias],
            move |a| {
                let mut gb = vec![0.0; n];
                for row in a.grad.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
                vec![Some(a.grad.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        unary(
            self,
            "gelu",
            |x| 0.5 * x * (1.0 + libm::erf(x * INV_SQRT2)),
            move |x, _| 0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * inv_sqrt_2pi * (-0.5 * x * x).exp(),
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Softmax over the last axis, stabilised by subtracting the slice maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let n = last_dim(self);
        let data = self.data();
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax input contains {bad}")));
        }
        let mut out = vec![0.0; data.len()];
        for (src, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        drop(data);
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            &[self],
            move |a| {
                let mut gx = vec![0.0; a.grad.len()];
                for ((g, y), dx) in a.grad.chunks(n).zip(a.output.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dx.iter_mut().zip(g).zip(y) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Normalises each last-axis slice to zero mean and unit (biased) variance,
    /// then applies `gamma * x_hat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = last_dim(self);
        if d < 2 {
            return Err(Error::usage("layer_norm needs a last dimension of at least 2"));
        }
        for p in [gamma, beta] {
            if p.shape() != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let x = self.data();
        let rows = x.len() / d;
        let mut x_hat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in x.chunks(d).zip(x_hat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        drop(x);
        let out = {
            let g = gamma.data();
            let b = beta.data();
            x_hat
                .chunks(d)
                .flat_map(|row| row.iter().zip(g.iter().zip(b.iter())).map(|(x, (g, b))| g * x + b))
                .collect()
        };
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            move |a| {
                let g = a.inputs[1].data();
                let mut dx = vec![0.0; a.grad.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let dy = &a.grad[r * d..(r + 1) * d];
                    let xh = &x_hat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = dy[j] * g[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dgamma[j] += dy[j] * xh[j];
                        dbeta[j] += dy[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = dy[j] * g[j];
                        dx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![s], &[self], move |a| {
            vec![Some(vec![a.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", Vec::new(), vec![s], &[self], move |a| {
            vec![Some(vec![a.grad[0] / n as f64; n])]
        })
    }

    /// Column means of a `[n,d]` matrix.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (n, d) = dims2(self, "mean_rows")?;
        let mut out = vec![0.0; d];
        for row in self.data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(Tensor::from_op("mean_rows", vec![d], out, &[self], move |a| {
            let g: Vec<f64> = a.grad.iter().map(|g| g / n as f64).collect();
            vec![Some(g.iter().copied().cycle().take(n * d).collect())]
        }))
    }

    /// Rows `start..end` of a `[n,d]` matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::usage(format!("row range {start}..{end} invalid for {n} rows")));
        }
        let out = self.data()[start * d..end * d].to_vec();
        Ok(Tensor::from_op(
            "slice_rows",
            vec![end - start, d],
            out,
            &[self],
            move |a| {
                let mut g = vec![0.0; n * d];
                g[start * d..end * d].copy_from_slice(a.grad);
                vec![Some(g)]
            },
        ))
    }

    /// Columns `start..end` of a `[n,d]` matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "slice_cols")?;
        if start >= end || end > d {
            return Err(Error::usage(format!(
                "column range {start}..{end} invalid for {d} columns"
            )));
        }
        let w = end - start;
        let out = self
            .data()
            .chunks(d)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Ok(Tensor::from_op("slice_cols", vec![n, w], out, &[self], move |a| {
            let mut g = vec![0.0; n * d];
            for (r, src) in a.grad.chunks(w).enumerate() {
                g[r * d + start..r * d + end].copy_from_slice(src);
            }
            vec![Some(g)]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            |a| vec![Some(a.grad.to_vec())],
        ))
    }

    /// Sliding windows of `width` consecutive rows, each flattened:
    /// `[n,d]` to `[n-width+1, width*d]`, row `i` holding rows `i..i+width`.
    pub fn unfold_windows(&self, width: usize) -> Result<Tensor> {
        let (n, d) = dims2(self, "unfold_windows")?;
        if width == 0 || n < width {
            return Err(Error::usage(format!(
                "window width {width} does not fit a sequence of length {n}"
            )));
        }
        let m = n - width + 1;
        let src = self.data();
        let mut out = Vec::with_capacity(m * width * d);
        for i in 0..m {
            out.extend_from_slice(&src[i * d..(i + width) * d]);
        }
        drop(src);
        Ok(Tensor::from_op(
            "unfold_windows",
            vec![m, width * d],
            out,
            &[self],
            move |a| {
                let mut g = vec![0.0; n * d];
                let w = width * d;
                for i in 0..m {
                    g[i * d..i * d + w]
                        .iter_mut()
                        .zip(&a.grad[i * w..(i + 1) * w])
                        .for_each(|(acc, v)| *acc += v);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Column-wise maximum of `[m,f]`, giving `[f]`. The gradient is routed to
    /// the first row attaining each maximum.
    pub fn max_rows(&self) -> Result<Tensor> {
        let (m, f) = dims2(self, "max_rows")?;
        let data = self.data();
        let mut argmax = vec![0usize; f];
        let mut out = data[..f].to_vec();
        for r in 1..m {
            for c in 0..f {
                let v = data[r * f + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        drop(data);
        Ok(Tensor::from_op("max_rows", vec![f], out, &[self], move |a| {
            let mut g = vec![0.0; m * f];
            for (c, &r) in argmax.iter().enumerate() {
                g[r * f + c] = a.grad[c];
            }
            vec![Some(g)]
        }))
    }

    /// Maximum element of a vector as a scalar; gradient flows to the first argmax.
    pub fn max_over_time(&self) -> Result<Tensor> {
        if self.ndim() != 1 {
            return Err(Error::usage(format!(
                "max_over_time expects a vector, got shape {:?}",
                self.shape()
            )));
        }
        let data = self.data();
        let (idx, max) =
            data.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, v)| if v > best.1 { (i, v) } else { best },
            );
        let n = data.len();
        drop(data);
        Ok(Tensor::from_op(
            "max_over_time",
            Vec::new(),
            vec![max],
            &[self],
            move |a| {
                let mut g = vec![0.0; n];
                g[idx] = a.grad[0];
                vec![Some(g)]
            },
        ))
    }

    /// Row lookup: `table[v,d]` indexed by `ids` gives `[ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = dims2(self, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::usage("gather_rows needs at least one id"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::data(format!("row id {bad} out of range for table of {v} rows")));
        }
        let src = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        drop(src);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![ids.len(), d],
            out,
            &[self],
            move |a| {
                let mut g = vec![0.0; v * d];
                for (k, &i) in ids.iter().enumerate() {
                    g[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&a.grad[k * d..(k + 1) * d])
                        .for_each(|(acc, x)| *acc += x);
                }
                vec![Some(g)]
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            out,
            &[self],
            move |a| vec![Some(a.grad.iter().zip(&mask).map(|(g, m)| g * m).collect())],
        ))
    }

    /// Negative log-likelihood `-ln(max(p[label], PROB_FLOOR))` of a probability vector.
    pub fn nll(&self, label: usize) -> Result<Tensor> {
        if self.ndim() != 1 || label >= self.numel() {
            return Err(Error::usage(format!(
                "label {label} invalid for probabilities of shape {:?}",
                self.shape()
            )));
        }
        let p = self.data()[label];
        let clamped = p.max(PROB_FLOOR);
        let n = self.numel();
        Ok(Tensor::from_op(
            "nll",
            Vec::new(),
            vec![-clamped.ln()],
            &[self],
            move |a| {
                let mut g = vec![0.0; n];
                if p > PROB_FLOOR {
                    g[label] = -a.grad[0] / p;
                }
                vec![Some(g)]
            },
        ))
    }
}

fn transpose_raw(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Concatenates `[n, d_i]` matrices along columns.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat_cols needs at least one tensor"))?;
    let (n, _) = dims2(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, w) = dims2(p, "concat_cols")?;
        if r != n {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(w);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; n * total];
    let mut offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for (r, row) in p.data().chunks(w).enumerate() {
            out[r * total + offset..r * total + offset + w].copy_from_slice(row);
        }
        offset += w;
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::from_op("concat_cols", vec![n, total], out, &refs, move |a| {
        let mut grads = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &w in &widths {
            let g = a
                .grad
                .chunks(total)
                .flat_map(|row| row[offset..offset + w].iter().copied())
                .collect();
            grads.push(Some(g));
            offset += w;
        }
        grads
    }))
}

/// Flattens and concatenates tensors into one vector.
pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::usage("concat needs at least one tensor"));
    }
    let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
    let mut out = Vec::with_capacity(sizes.iter().sum());
    for p in parts {
        out.extend_from_slice(&p.data());
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let total = out.len();
    Ok(Tensor::from_op("concat", vec![total], out, &refs, move |a| {
        let mut grads = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &s in &sizes {
            grads.push(Some(a.grad[offset..offset + s].to_vec()));
            offset += s;
        }
        grads
    }))
}

/// Sum of several scalars (or equally shaped tensors).
pub fn add_all(parts: &[Tensor]) -> Result<Tensor> {
    let mut iter = parts.iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| Error::usage("add_all needs at least one tensor"))?
        .clone();
    for p in iter {
        acc = acc.add(p)?;
    }
    Ok(acc)
}
