//! Tensor operations and their gradients.
//!
//! Shapes are row-major. The matmul kernels are written so the inner loops
//! run over contiguous slices and auto-vectorise; everything on the training
//! hot path funnels into `mm_nn` / `mm_nt` / `mm_tn`.

use super::{c, Element, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
///
/// Four output rows per sweep of `b`, so each row of `b` is loaded once per
/// four rows of `a`.
pub(crate) fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);

    let mut blocks = out.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for p in 0..k {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            let brow = &b[p * n..(p + 1) * n];
            for ((((o0, o1), o2), o3), &bv) in r0
                .iter_mut()
                .zip(r1.iter_mut())
                .zip(r2.iter_mut())
                .zip(r3.iter_mut())
                .zip(brow)
            {
                *o0 += x0 * bv;
                *o1 += x1 * bv;
                *o2 += x2 * bv;
                *o3 += x3 * bv;
            }
        }
        i += 4;
    }
    for (ri, row) in blocks.into_remainder().chunks_mut(n).enumerate() {
        let arow = &a[(i + ri) * k..(i + ri + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
pub(crate) fn mm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);

    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a^T @ d` with `a: [m,k]`, `d: [m,n]`, `out: [k,n]`.
pub(crate) fn mm_tn<T: Element>(a: &[T], d: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(out.len(), k * n);

    // Rank-one updates fused four at a time so each output row is swept once
    // per four rows of `a`/`d`.
    let mut i = 0;
    while i + 4 <= m {
        let d0 = &d[i * n..(i + 1) * n];
        let d1 = &d[(i + 1) * n..(i + 2) * n];
        let d2 = &d[(i + 2) * n..(i + 3) * n];
        let d3 = &d[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let x0 = a[i * k + p];
            let x1 = a[(i + 1) * k + p];
            let x2 = a[(i + 2) * k + p];
            let x3 = a[(i + 3) * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for ((((o, &v0), &v1), &v2), &v3) in
                orow.iter_mut().zip(d0).zip(d1).zip(d2).zip(d3)
            {
                *o += x0 * v0 + x1 * v1 + x2 * v2 + x3 * v3;
            }
        }
        i += 4;
    }
    while i < m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &v) in orow.iter_mut().zip(drow) {
                *o += x * v;
            }
        }
        i += 1;
    }
}

/// Dot product with a fixed split into independent partial sums (keeps the
/// FMA chain out of the latency path; summation order is deterministic).
pub(crate) fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 32;
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let mut tail = T::zero();
    for (xv, yv) in xc.remainder().iter().zip(yc.remainder()) {
        tail += *xv * *yv;
    }
    for (xa, ya) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xa[l] * ya[l];
        }
    }
    let mut total = tail;
    for a in acc {
        total += a;
    }
    total
}

/// In-place, numerically stable softmax of one lane.
pub(crate) fn softmax_lane<T: Element>(lane: &mut [T]) {
    let mut max = lane[0];
    for &x in lane.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in lane.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in lane.iter_mut() {
        *x *= inv;
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn dims2<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidInput {
            op,
            msg: format!("expected a 2-d tensor, got shape {other:?}"),
        }),
    }
}

/// Rows/cols view of a tensor normalised over its last dimension: a 1-d
/// tensor is treated as a single row.
fn rows_cols<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [d] => Ok((1, *d)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidInput {
            op,
            msg: format!("expected a 1-d or 2-d tensor, got shape {other:?}"),
        }),
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

impl<T: Element> Tensor<T> {
    /// Matrix product of `[m,k] @ [k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = dims2(self, "matmul")?;
        let (kb, n) = dims2(rhs, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let k = ka;
        let mut data = vec![T::zero(); m * n];
        mm_nn(self.data(), rhs.data(), m, k, n, &mut data);

        let track = self.requires_grad() || rhs.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let a = &node.parents()[0];
                let b = &node.parents()[1];
                if a.requires_grad() {
                    let mut da = vec![T::zero(); m * k];
                    mm_nt(&grad, b.data(), m, n, k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); k * n];
                    mm_tn(a.data(), &grad, m, k, n, &mut db);
                    b.accumulate_grad(&db);
                }
            }) as _
        });
        Tensor::from_op(
            "matmul",
            data,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            backward,
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let track = self.requires_grad() || rhs.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                for parent in node.parents() {
                    if parent.requires_grad() {
                        parent.accumulate_grad(&grad);
                    }
                }
            }) as _
        });
        Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            backward,
        )
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, rhs)?;
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let track = self.requires_grad() || rhs.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let a = &node.parents()[0];
                let b = &node.parents()[1];
                if a.requires_grad() {
                    let da: Vec<T> = grad.iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<T> = grad.iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                    b.accumulate_grad(&db);
                }
            }) as _
        });
        Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            backward,
        )
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x * factor).collect();
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let da: Vec<T> = grad.iter().map(|&g| g * factor).collect();
                node.parents()[0].accumulate_grad(&da);
            }) as _
        });
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        )
    }

    /// Add a `[n]` vector to every row of a `[r,n]` tensor.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, n) = rows_cols(self, "add_row")?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        let track = self.requires_grad() || bias.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let x = &node.parents()[0];
                let b = &node.parents()[1];
                if x.requires_grad() {
                    x.accumulate_grad(&grad);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); n];
                    for row in grad.chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    b.accumulate_grad(&db);
                }
                let _ = rows;
            }) as _
        });
        Tensor::from_op(
            "add_row",
            data,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            backward,
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c2) = dims2(self, "transpose")?;
        let src = self.data();
        let mut data = vec![T::zero(); r * c2];
        for i in 0..r {
            for j in 0..c2 {
                data[j * r + i] = src[i * c2 + j];
            }
        }
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let mut da = vec![T::zero(); r * c2];
                for j in 0..c2 {
                    for i in 0..r {
                        da[i * c2 + j] = grad[j * r + i];
                    }
                }
                node.parents()[0].accumulate_grad(&da);
            }) as _
        });
        Tensor::from_op(
            "transpose",
            data,
            vec![c2, r],
            vec![self.clone()],
            backward,
        )
    }

    /// Same data, different shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidInput {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} elements) into {:?}",
                    self.shape(),
                    self.numel(),
                    shape
                ),
            });
        }
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                node.parents()[0].accumulate_grad(&node.grad_or_zeros());
            }) as _
        });
        Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            backward,
        )
    }

    /// Rows `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (r, n) = dims2(self, "slice_rows")?;
        if start + len > r {
            return Err(Error::InvalidInput {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of bounds for {r} rows", start + len),
            });
        }
        let data = self.data()[start * n..(start + len) * n].to_vec();
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let mut da = vec![T::zero(); r * n];
                da[start * n..(start + len) * n].copy_from_slice(&grad);
                node.parents()[0].accumulate_grad(&da);
            }) as _
        });
        Tensor::from_op(
            "slice_rows",
            data,
            vec![len, n],
            vec![self.clone()],
            backward,
        )
    }

    /// Stack 2-d tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::InvalidInput {
                op: "concat_rows",
                msg: "no tensors to concatenate".into(),
            });
        }
        let (_, n) = dims2(&parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for part in parts {
            let (r, nc) = dims2(part, "concat_rows")?;
            if nc != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: part.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(part.data());
        }
        let track = parts.iter().any(|p| p.requires_grad());
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let mut offset = 0;
                for parent in node.parents() {
                    let len = parent.numel();
                    if parent.requires_grad() {
                        parent.accumulate_grad(&grad[offset..offset + len]);
                    }
                    offset += len;
                }
            }) as _
        });
        Tensor::from_op("concat_rows", data, vec![rows, n], parts.to_vec(), backward)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let mut total = T::zero();
        for &x in self.data() {
            total += x;
        }
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let g = node.grad_or_zeros()[0];
                let parent = &node.parents()[0];
                let da = vec![g; parent.numel()];
                parent.accumulate_grad(&da);
            }) as _
        });
        Tensor::from_op("sum", vec![total], vec![1], vec![self.clone()], backward)
    }

    /// Per-row normalisation to zero mean / unit variance over the last
    /// dimension, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let (rows, d) = rows_cols(self, "layer_norm")?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: if gamma.shape() != [d] {
                    gamma.shape().to_vec()
                } else {
                    beta.shape().to_vec()
                },
            });
        }
        if eps <= 0.0 {
            return Err(Error::InvalidInput {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let eps = c::<T>(eps);
        let inv_d = T::one() / c::<T>(d as f64);

        let mut data = vec![T::zero(); rows * d];
        // Normalised values and inverse stds are needed by the backward pass.
        let mut normalised = vec![T::zero(); rows * d];
        let mut inv_stds = vec![T::zero(); rows];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in x {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in x {
                let diff = v - mean;
                var += diff * diff;
            }
            var *= inv_d;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds[r] = inv_std;
            let norm_row = &mut normalised[r * d..(r + 1) * d];
            let out_row = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                let xh = (x[j] - mean) * inv_std;
                norm_row[j] = xh;
                out_row[j] = gamma.data()[j] * xh + beta.data()[j];
            }
        }

        let track = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let x = &node.parents()[0];
                let g = &node.parents()[1];
                let b = &node.parents()[2];
                if g.requires_grad() {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        let grow = &grad[r * d..(r + 1) * d];
                        let nrow = &normalised[r * d..(r + 1) * d];
                        for j in 0..d {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                    g.accumulate_grad(&dg);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        let grow = &grad[r * d..(r + 1) * d];
                        for j in 0..d {
                            db[j] += grow[j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
                if x.requires_grad() {
                    let gamma_data = g.data();
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let grow = &grad[r * d..(r + 1) * d];
                        let nrow = &normalised[r * d..(r + 1) * d];
                        // dxhat = gamma * dy; dx = (dxhat - mean(dxhat)
                        //        - xhat * mean(dxhat * xhat)) * inv_std
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gamma_data[j] * grow[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * nrow[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        let dxrow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = gamma_data[j] * grow[j];
                            dxrow[j] = (dxh - mean_dxh - nrow[j] * mean_dxh_xh) * inv_stds[r];
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }) as _
        });
        Tensor::from_op(
            "layer_norm",
            data,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            backward,
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidInput {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();

        let mut data = self.data().to_vec();
        let mut buf = vec![T::zero(); lane];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = data[base + l * inner];
                }
                softmax_lane(&mut buf);
                for (l, &b) in buf.iter().enumerate() {
                    data[base + l * inner] = b;
                }
            }
        }

        let probs = data.clone();
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let mut dx = vec![T::zero(); probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut weighted = T::zero();
                        for l in 0..lane {
                            let idx = base + l * inner;
                            weighted += grad[idx] * probs[idx];
                        }
                        for l in 0..lane {
                            let idx = base + l * inner;
                            dx[idx] = probs[idx] * (grad[idx] - weighted);
                        }
                    }
                }
                node.parents()[0].accumulate_grad(&dx);
            }) as _
        });
        Tensor::from_op("softmax", data, shape, vec![self.clone()], backward)
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| gelu_scalar(x)).collect();
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let parent = &node.parents()[0];
                let dx: Vec<T> = parent
                    .data()
                    .iter()
                    .zip(&grad)
                    .map(|(&x, &g)| g * gelu_grad_scalar(x))
                    .collect();
                parent.accumulate_grad(&dx);
            }) as _
        });
        Tensor::from_op(
            "gelu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            backward,
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of `[b,C]`
    /// logits. Labels are 0-based class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (b, classes) = rows_cols(self, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::InvalidInput {
                op: "cross_entropy",
                msg: format!("{b} logit rows but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {classes} classes"),
            });
        }

        let mut probs = self.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let mut max = row[0];
            for &x in row.iter() {
                if x > max {
                    max = x;
                }
            }
            // loss_i = logsumexp(row) - row[label], with the max factored out.
            let centred_label = row[label] - max;
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            total += sum.ln() - centred_label;
            let inv = T::one() / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let inv_b = T::one() / c::<T>(b as f64);
        let loss = total * inv_b;

        let labels_owned = labels.to_vec();
        let backward = self.requires_grad().then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let g = node.grad_or_zeros()[0];
                let scale = g * inv_b;
                let mut dx = probs.clone();
                for (row, &label) in dx.chunks_mut(classes).zip(&labels_owned) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                node.parents()[0].accumulate_grad(&dx);
            }) as _
        });
        Tensor::from_op(
            "cross_entropy",
            vec![loss],
            vec![1],
            vec![self.clone()],
            backward,
        )
    }

    /// Multi-head self-attention core over one token sequence.
    ///
    /// `q`, `k`, `v` are `[tokens, d]` with `d` divisible by `n_heads`;
    /// returns the concatenated per-head `softmax(q kᵀ / √d_head) v`.
    pub fn multi_head_attention(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        n_heads: usize,
    ) -> Result<Tensor<T>> {
        let (t, d) = dims2(q, "multi_head_attention")?;
        same_shape("multi_head_attention", q, k)?;
        same_shape("multi_head_attention", q, v)?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidInput {
                op: "multi_head_attention",
                msg: format!("d_model {d} not divisible by {n_heads} heads"),
            });
        }
        let dh = d / n_heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();

        let mut out = vec![T::zero(); t * d];
        // Attention probabilities, kept for the backward pass.
        let mut probs = vec![T::zero(); n_heads * t * t];
        let mut qh = vec![T::zero(); t * dh];
        let mut kh = vec![T::zero(); t * dh];
        let mut vh = vec![T::zero(); t * dh];
        let mut oh = vec![T::zero(); t * dh];
        for h in 0..n_heads {
            gather_head(q.data(), t, d, h, dh, &mut qh);
            gather_head(k.data(), t, d, h, dh, &mut kh);
            gather_head(v.data(), t, d, h, dh, &mut vh);
            let scores = &mut probs[h * t * t..(h + 1) * t * t];
            mm_nt(&qh, &kh, t, dh, t, scores);
            for row in scores.chunks_mut(t) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_lane(row);
            }
            oh.iter_mut().for_each(|x| *x = T::zero());
            mm_nn(scores, &vh, t, t, dh, &mut oh);
            scatter_head(&oh, t, d, h, dh, &mut out);
        }

        let track = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let backward = track.then(|| {
            Box::new(move |node: &super::Inner<T>| {
                let grad = node.grad_or_zeros();
                let q = &node.parents()[0];
                let k = &node.parents()[1];
                let v = &node.parents()[2];
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                let mut qh = vec![T::zero(); t * dh];
                let mut kh = vec![T::zero(); t * dh];
                let mut vh = vec![T::zero(); t * dh];
                let mut doh = vec![T::zero(); t * dh];
                let mut dvh = vec![T::zero(); t * dh];
                let mut dqh = vec![T::zero(); t * dh];
                let mut dkh = vec![T::zero(); t * dh];
                let mut dp = vec![T::zero(); t * t];
                for h in 0..n_heads {
                    gather_head(q.data(), t, d, h, dh, &mut qh);
                    gather_head(k.data(), t, d, h, dh, &mut kh);
                    gather_head(v.data(), t, d, h, dh, &mut vh);
                    gather_head(&grad, t, d, h, dh, &mut doh);
                    let p = &probs[h * t * t..(h + 1) * t * t];

                    dvh.iter_mut().for_each(|x| *x = T::zero());
                    mm_tn(p, &doh, t, t, dh, &mut dvh);
                    scatter_head(&dvh, t, d, h, dh, &mut dv);

                    dp.iter_mut().for_each(|x| *x = T::zero());
                    mm_nt(&doh, &vh, t, dh, t, &mut dp);
                    // Softmax backward per row, then the 1/sqrt(dh) factor.
                    for (dprow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let mut weighted = T::zero();
                        for (dpv, &pv) in dprow.iter().zip(prow) {
                            weighted += *dpv * pv;
                        }
                        for (dpv, &pv) in dprow.iter_mut().zip(prow) {
                            *dpv = pv * (*dpv - weighted) * scale;
                        }
                    }
                    dqh.iter_mut().for_each(|x| *x = T::zero());
                    mm_nn(&dp, &kh, t, t, dh, &mut dqh);
                    scatter_head(&dqh, t, d, h, dh, &mut dq);

                    dkh.iter_mut().for_each(|x| *x = T::zero());
                    mm_tn(&dp, &qh, t, t, dh, &mut dkh);
                    scatter_head(&dkh, t, d, h, dh, &mut dk);
                }
                if q.requires_grad() {
                    q.accumulate_grad(&dq);
                }
                if k.requires_grad() {
                    k.accumulate_grad(&dk);
                }
                if v.requires_grad() {
                    v.accumulate_grad(&dv);
                }
            }) as _
        });
        Tensor::from_op(
            "multi_head_attention",
            out,
            vec![t, d],
            vec![q.clone(), k.clone(), v.clone()],
            backward,
        )
    }

    /// Index of the largest element; ties break toward the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_val = self.data()[0];
        for (i, &x) in self.data().iter().enumerate().skip(1) {
            if x > best_val {
                best = i;
                best_val = x;
            }
        }
        best
    }
}

fn gather_head<T: Element>(src: &[T], t: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for i in 0..t {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn scatter_head<T: Element>(src: &[T], t: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for i in 0..t {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn gelu_scalar<T: Element>(x: T) -> T {
    let half = c::<T>(0.5);
    let sqrt_2_over_pi = c::<T>(0.797_884_560_802_865_4);
    let coeff = c::<T>(0.044_715);
    let u = sqrt_2_over_pi * (x + coeff * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let half = c::<T>(0.5);
    let sqrt_2_over_pi = c::<T>(0.797_884_560_802_865_4);
    let coeff = c::<T>(0.044_715);
    let three = c::<T>(3.0);
    let u = sqrt_2_over_pi * (x + coeff * x * x * x);
    let t = u.tanh();
    let du = sqrt_2_over_pi * (T::one() + three * coeff * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
