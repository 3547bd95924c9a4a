//! Tensor operations and their local gradient rules.

use std::rc::Rc;

use super::{numel, BackwardFn, Scalar, Tensor, LN_EPS};
use crate::error::{Error, Result};

/// GELU, tanh approximation.
pub(crate) fn gelu_val(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: Scalar = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_560_802_865_4;
    const A: Scalar = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn softmax_into(row: &[Scalar], out: &mut [Scalar]) {
    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tensor {
    fn ew_binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        fwd: fn(Scalar, Scalar) -> Scalar,
        dfa: fn(Scalar, Scalar) -> Scalar,
        dfb: fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Tensor> {
        self.check_same_tape(rhs, op)?;
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = Rc::clone(&self.values);
        let b = Rc::clone(&rhs.values);
        let out: Vec<Scalar> = a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect();
        let (aid, bid, len) = (self.id, rhs.id, self.numel());
        let back: BackwardFn = {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |g, grads| {
                {
                    let ga = grads.acc(aid, len);
                    for i in 0..len {
                        ga[i] += g[i] * dfa(a[i], b[i]);
                    }
                }
                let gb = grads.acc(bid, len);
                for i in 0..len {
                    gb[i] += g[i] * dfb(a[i], b[i]);
                }
            })
        };
        Ok(self
            .tape
            .push_node(Rc::new(out), self.shape.clone(), Some(back)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ew_binary(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ew_binary(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ew_binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ew_binary(
            rhs,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    fn ew_unary<F, D>(&self, fwd: F, df: D) -> Tensor
    where
        F: Fn(Scalar) -> Scalar,
        D: Fn(Scalar, Scalar) -> Scalar + 'static,
    {
        let x = Rc::clone(&self.values);
        let out = Rc::new(x.iter().map(|&v| fwd(v)).collect::<Vec<_>>());
        let (id, len) = (self.id, self.numel());
        let back: BackwardFn = {
            let x = Rc::clone(&x);
            let y = Rc::clone(&out);
            Box::new(move |g, grads| {
                let gx = grads.acc(id, len);
                for i in 0..len {
                    gx[i] += g[i] * df(x[i], y[i]);
                }
            })
        };
        self.tape.push_node(out, self.shape.clone(), Some(back))
    }

    pub fn exp(&self) -> Tensor {
        self.ew_unary(Scalar::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.ew_unary(Scalar::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.ew_unary(Scalar::sqrt, |_, y| 1.0 / (2.0 * y))
    }

    pub fn gelu(&self) -> Tensor {
        self.ew_unary(gelu_val, |x, _| gelu_grad(x))
    }

    /// `max(x, c)` elementwise; subgradient 0 at and below the threshold.
    pub fn clamp_min(&self, c: Scalar) -> Tensor {
        self.ew_unary(
            move |x| x.max(c),
            move |x, _| if x > c { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(&self, c: Scalar) -> Tensor {
        self.ew_unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: Scalar) -> Tensor {
        self.ew_unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// `[n, d] + [d]`, the row-broadcast affine case (bias add).
    pub fn add_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        self.rowvec_binary(v, "add_rowvec", false)
    }

    /// `[n, d] * [d]` row-broadcast (gain scaling).
    pub fn mul_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        self.rowvec_binary(v, "mul_rowvec", true)
    }

    fn rowvec_binary(&self, v: &Tensor, op: &'static str, is_mul: bool) -> Result<Tensor> {
        self.check_same_tape(v, op)?;
        let d = *self.shape.last().ok_or_else(|| {
            Error::contract(format!("{op}: zero-dimensional lhs"))
        })?;
        if v.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let n = self.numel() / d;
        let x = Rc::clone(&self.values);
        let w = Rc::clone(&v.values);
        let mut out = Vec::with_capacity(self.numel());
        for r in 0..n {
            for j in 0..d {
                let xv = x[r * d + j];
                out.push(if is_mul { xv * w[j] } else { xv + w[j] });
            }
        }
        let (xid, vid, len) = (self.id, v.id, self.numel());
        let back: BackwardFn = Box::new(move |g, grads| {
            {
                let gx = grads.acc(xid, len);
                if is_mul {
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += g[r * d + j] * w[j];
                        }
                    }
                } else {
                    for i in 0..len {
                        gx[i] += g[i];
                    }
                }
            }
            let gv = grads.acc(vid, d);
            for r in 0..n {
                for j in 0..d {
                    let gij = g[r * d + j];
                    gv[j] += if is_mul { gij * x[r * d + j] } else { gij };
                }
            }
        });
        Ok(self
            .tape
            .push_node(Rc::new(out), self.shape.clone(), Some(back)))
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    ///
    /// Gradients: `dA = dC * B^T`, `dB = A^T * dC`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.check_same_tape(rhs, "matmul")?;
        let (&[m, k], &[k2, n]) = (&self.shape[..], &rhs.shape[..]) else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let a = Rc::clone(&self.values);
        let b = Rc::clone(&rhs.values);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let (aid, bid) = (self.id, rhs.id);
        let back: BackwardFn = {
            let a = Rc::clone(&a);
            let b = Rc::clone(&b);
            Box::new(move |g, grads| {
                {
                    // dA[i, kk] = sum_j g[i, j] * B[kk, j]
                    let ga = grads.acc(aid, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &b[kk * n..(kk + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                // dB[kk, j] = sum_i A[i, kk] * g[i, j]
                let gb = grads.acc(bid, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            gbrow[j] += av * grow[j];
                        }
                    }
                }
            })
        };
        Ok(self.tape.push_node(Rc::new(out), vec![m, n], Some(back)))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[m, n] = &self.shape[..] else {
            return Err(Error::contract(format!(
                "transpose expects 2-D, got {:?}",
                self.shape
            )));
        };
        let x = Rc::clone(&self.values);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let (id, len) = (self.id, self.numel());
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, len);
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] += g[j * m + i];
                }
            }
        });
        Ok(self.tape.push_node(Rc::new(out), vec![n, m], Some(back)))
    }

    /// Softmax along `axis`, which must be the trailing axis. Stabilized by
    /// max subtraction, so arbitrarily shifted inputs do not overflow.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis + 1 != self.ndim() {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for shape {:?} (trailing axis only)",
                self.shape
            )));
        }
        if self.values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let d = self.shape[axis];
        let rows = self.numel() / d;
        let x = Rc::clone(&self.values);
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            softmax_into(&x[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        let out = Rc::new(out);
        let (id, len) = (self.id, self.numel());
        let back: BackwardFn = {
            let s = Rc::clone(&out);
            Box::new(move |g, grads| {
                let gx = grads.acc(id, len);
                for r in 0..rows {
                    let srow = &s[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let dot: Scalar = srow.iter().zip(grow).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..d {
                        gx[r * d + j] += srow[j] * (grow[j] - dot);
                    }
                }
            })
        };
        Ok(self.tape.push_node(out, self.shape.clone(), Some(back)))
    }

    /// Layer normalization over the trailing axis with affine transform:
    /// zero mean, unit variance per slice, then `gain * y + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_same_tape(gain, "layer_norm")?;
        self.check_same_tape(bias, "layer_norm")?;
        let d = *self
            .shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm: zero-dimensional input"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = Rc::clone(&self.values);
        let gv = Rc::clone(&gain.values);
        let bv = Rc::clone(&bias.values);
        let mut out = vec![0.0; self.numel()];
        let mut yhat = vec![0.0; self.numel()];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu: Scalar = row.iter().sum::<Scalar>() / d as Scalar;
            let var: Scalar = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<Scalar>() / d as Scalar;
            let iv = 1.0 / (var + LN_EPS).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let y = (row[j] - mu) * iv;
                yhat[r * d + j] = y;
                out[r * d + j] = gv[j] * y + bv[j];
            }
        }
        let yhat = Rc::new(yhat);
        let inv = Rc::new(inv);
        let (xid, gid, bid, len) = (self.id, gain.id, bias.id, self.numel());
        let back: BackwardFn = {
            let yhat = Rc::clone(&yhat);
            let inv = Rc::clone(&inv);
            let gv = Rc::clone(&gv);
            Box::new(move |g, grads| {
                {
                    let gx = grads.acc(xid, len);
                    for r in 0..rows {
                        let yrow = &yhat[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut mp = 0.0;
                        let mut mpy = 0.0;
                        for j in 0..d {
                            let p = grow[j] * gv[j];
                            mp += p;
                            mpy += p * yrow[j];
                        }
                        mp /= d as Scalar;
                        mpy /= d as Scalar;
                        for j in 0..d {
                            let p = grow[j] * gv[j];
                            gx[r * d + j] += inv[r] * (p - mp - yrow[j] * mpy);
                        }
                    }
                }
                {
                    let gg = grads.acc(gid, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * yhat[r * d + j];
                        }
                    }
                }
                let gb = grads.acc(bid, d);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            })
        };
        Ok(self
            .tape
            .push_node(Rc::new(out), self.shape.clone(), Some(back)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits. Gradient per row is `(softmax - onehot) / n`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let &[n, v] = &self.shape[..] else {
            return Err(Error::contract(format!(
                "cross_entropy expects [batch, vocab] logits, got {:?}",
                self.shape
            )));
        };
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: v,
                });
            }
        }
        let x = Rc::clone(&self.values);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<Scalar>().ln();
            loss += lse - row[t];
        }
        loss /= n as Scalar;
        let id = self.id;
        let targets = targets.to_vec();
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, n * v);
            let scale = g[0] / n as Scalar;
            let mut s = vec![0.0; v];
            for (r, &t) in targets.iter().enumerate() {
                softmax_into(&x[r * v..(r + 1) * v], &mut s);
                for j in 0..v {
                    gx[r * v + j] += scale * (s[j] - if j == t { 1.0 } else { 0.0 });
                }
            }
        });
        Ok(self.tape.push_node(Rc::new(vec![loss]), vec![1], Some(back)))
    }

    /// Selects rows of a `[n, d]` tensor; duplicates allowed. Gradient
    /// scatter-adds back into the source rows (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let &[n, d] = &self.shape[..] else {
            return Err(Error::contract(format!(
                "gather_rows expects 2-D, got {:?}",
                self.shape
            )));
        };
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows index",
                    index: i,
                    bound: n,
                });
            }
        }
        let x = Rc::clone(&self.values);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let id = self.id;
        let idx = indices.to_vec();
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, n * d);
            for (r, &i) in idx.iter().enumerate() {
                let grow = &g[r * d..(r + 1) * d];
                let xrow = &mut gx[i * d..(i + 1) * d];
                for j in 0..d {
                    xrow[j] += grow[j];
                }
            }
        });
        Ok(self
            .tape
            .push_node(Rc::new(out), vec![indices.len(), d], Some(back)))
    }

    /// Contiguous column slice `[n, d] -> [n, len]` starting at `start`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let &[n, d] = &self.shape[..] else {
            return Err(Error::contract(format!(
                "slice_cols expects 2-D, got {:?}",
                self.shape
            )));
        };
        if start + len > d {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols range",
                index: start + len,
                bound: d,
            });
        }
        let x = Rc::clone(&self.values);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * d + start..r * d + start + len]);
        }
        let id = self.id;
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, n * d);
            for r in 0..n {
                for j in 0..len {
                    gx[r * d + start + j] += g[r * len + j];
                }
            }
        });
        Ok(self.tape.push_node(Rc::new(out), vec![n, len], Some(back)))
    }

    /// Vertical stack of 2-D tensors with a common column count.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        Self::concat(parts, true)
    }

    /// Horizontal stack of 2-D tensors with a common row count.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        Self::concat(parts, false)
    }

    fn concat(parts: &[Tensor], by_rows: bool) -> Result<Tensor> {
        let op = if by_rows { "concat_rows" } else { "concat_cols" };
        let first = parts
            .first()
            .ok_or_else(|| Error::contract(format!("{op}: empty input")))?;
        let &[_, d0] = &first.shape[..] else {
            return Err(Error::contract(format!("{op} expects 2-D parts")));
        };
        let n0 = first.shape[0];
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_same_tape(p, op)?;
            let &[n, d] = &p.shape[..] else {
                return Err(Error::contract(format!("{op} expects 2-D parts")));
            };
            if by_rows && d != d0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n0, d0],
                    rhs: vec![n, d],
                });
            }
            if !by_rows && n != n0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n0, d0],
                    rhs: vec![n, d],
                });
            }
            sizes.push(if by_rows { n } else { d });
        }
        let total: usize = sizes.iter().sum();
        let (rows, cols) = if by_rows { (total, d0) } else { (n0, total) };
        let mut out = Vec::with_capacity(rows * cols);
        if by_rows {
            for p in parts {
                out.extend_from_slice(p.values());
            }
        } else {
            for r in 0..n0 {
                for p in parts {
                    let d = p.shape[1];
                    out.extend_from_slice(&p.values()[r * d..(r + 1) * d]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let back: BackwardFn = {
            let sizes = sizes.clone();
            Box::new(move |g, grads| {
                if by_rows {
                    let mut row0 = 0;
                    for (pi, &n) in sizes.iter().enumerate() {
                        let gp = grads.acc(ids[pi], lens[pi]);
                        for i in 0..n * cols {
                            gp[i] += g[row0 * cols + i];
                        }
                        row0 += n;
                    }
                } else {
                    let mut col0 = 0;
                    for (pi, &d) in sizes.iter().enumerate() {
                        let gp = grads.acc(ids[pi], lens[pi]);
                        for r in 0..rows {
                            for j in 0..d {
                                gp[r * d + j] += g[r * cols + col0 + j];
                            }
                        }
                        col0 += d;
                    }
                }
            })
        };
        Ok(first
            .tape
            .push_node(Rc::new(out), vec![rows, cols], Some(back)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        let total: Scalar = self.values.iter().sum();
        let (id, len) = (self.id, self.numel());
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, len);
            for v in gx.iter_mut() {
                *v += g[0];
            }
        });
        Ok(self
            .tape
            .push_node(Rc::new(vec![total]), vec![1], Some(back)))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::contract("mean_all of an empty tensor"));
        }
        self.sum_all()?.mul_scalar(1.0 / n as Scalar).pipe_ok()
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape,
            });
        }
        let (id, len) = (self.id, self.numel());
        let back: BackwardFn = Box::new(move |g, grads| {
            let gx = grads.acc(id, len);
            for i in 0..len {
                gx[i] += g[i];
            }
        });
        Ok(self
            .tape
            .push_node(Rc::clone(&self.values), shape, Some(back)))
    }

    fn pipe_ok(self) -> Result<Tensor> {
        Ok(self)
    }
}
