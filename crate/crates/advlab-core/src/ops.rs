//! Forward primitives and their reverse-mode rules.

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, ensure_finite, numel, reduce_to_shape, strides_of, zip_broadcast, Tensor,
};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// out(m,n) += a(m,k) @ b(k,n)
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

/// out(m,k) += a(m,n) @ b(k,n)^T
fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            *o += acc;
        }
    }
}

/// out(k,n) += a(m,k)^T @ b(m,n)
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

/// Splits `shape` at `axis` into (outer, mid, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

/// Saved state for the reverse pass of one primitive application.
pub(crate) enum BackOp {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Div { a: Tensor, b: Tensor },
    ScalarMul { a: Tensor, c: f64 },
    MatMul { a: Tensor, b: Tensor },
    Gelu { a: Tensor },
    Relu { a: Tensor },
    Exp { a: Tensor },
    Log { a: Tensor },
    Sum { a: Tensor, axis: Option<usize> },
    Mean { a: Tensor, axis: Option<usize> },
    Reshape { a: Tensor },
    Transpose { a: Tensor, d0: usize, d1: usize },
    Slice { a: Tensor, axis: usize, start: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    Embedding { table: Tensor, ids: Vec<usize> },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { a: Tensor, axis: usize },
    L2Normalize { a: Tensor, axis: usize, inv_norm: Vec<f64> },
    Clamp { a: Tensor, lo: f64, hi: f64 },
}

impl BackOp {
    /// idx-th parent tensor, used by the topological traversal.
    pub(crate) fn parent(&self, idx: usize) -> Option<Tensor> {
        use BackOp::*;
        match self {
            Add { a, b } | Sub { a, b } | Mul { a, b } | Div { a, b } | MatMul { a, b } => {
                [a, b].get(idx).map(|t| (*t).clone())
            }
            ScalarMul { a, .. } | Gelu { a } | Relu { a } | Exp { a } | Log { a }
            | Sum { a, .. } | Mean { a, .. } | Reshape { a } | Transpose { a, .. }
            | Slice { a, .. } | Softmax { a, .. } | L2Normalize { a, .. } | Clamp { a, .. } => {
                (idx == 0).then(|| a.clone())
            }
            Concat { parts, .. } => parts.get(idx).cloned(),
            Embedding { table, .. } => (idx == 0).then(|| table.clone()),
            LayerNorm { x, gamma, beta, .. } => match idx {
                0 => Some(x.clone()),
                1 => Some(gamma.clone()),
                2 => Some(beta.clone()),
                _ => None,
            },
        }
    }

    /// Gradient contributions (parent, d out / d parent · out_grad).
    pub(crate) fn apply(
        &self,
        out_shape: &[usize],
        out_data: &[f64],
        g: &[f64],
    ) -> Result<Vec<(Tensor, Vec<f64>)>> {
        use BackOp::*;
        Ok(match self {
            Add { a, b } => {
                let (sa, sb) = (a.shape(), b.shape());
                vec![
                    (a.clone(), reduce_to_shape(g, out_shape, &sa)),
                    (b.clone(), reduce_to_shape(g, out_shape, &sb)),
                ]
            }
            Sub { a, b } => {
                let (sa, sb) = (a.shape(), b.shape());
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![
                    (a.clone(), reduce_to_shape(g, out_shape, &sa)),
                    (b.clone(), reduce_to_shape(&neg, out_shape, &sb)),
                ]
            }
            Mul { a, b } => {
                let (sa, sb) = (a.shape(), b.shape());
                let (da_full, db_full) = {
                    let ai = a.inner.borrow();
                    let bi = b.inner.borrow();
                    (
                        zip_broadcast(g, out_shape, &bi.data, &sb, out_shape, |x, y| x * y),
                        zip_broadcast(g, out_shape, &ai.data, &sa, out_shape, |x, y| x * y),
                    )
                };
                vec![
                    (a.clone(), reduce_to_shape(&da_full, out_shape, &sa)),
                    (b.clone(), reduce_to_shape(&db_full, out_shape, &sb)),
                ]
            }
            Div { a, b } => {
                let (sa, sb) = (a.shape(), b.shape());
                let (da_full, db_full) = {
                    let bi = b.inner.borrow();
                    let da = zip_broadcast(g, out_shape, &bi.data, &sb, out_shape, |x, y| x / y);
                    // d/db (a/b) = -a/b^2 = -out/b
                    let gy: Vec<f64> = g.iter().zip(out_data).map(|(&x, &y)| x * y).collect();
                    let db = zip_broadcast(&gy, out_shape, &bi.data, &sb, out_shape, |x, y| -x / y);
                    (da, db)
                };
                vec![
                    (a.clone(), reduce_to_shape(&da_full, out_shape, &sa)),
                    (b.clone(), reduce_to_shape(&db_full, out_shape, &sb)),
                ]
            }
            ScalarMul { a, c } => {
                vec![(a.clone(), g.iter().map(|v| v * c).collect())]
            }
            MatMul { a, b } => {
                let (sa, sb) = (a.shape(), b.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let ai = a.inner.borrow();
                let bi = b.inner.borrow();
                let mut da = vec![0.0; ai.data.len()];
                let mut db = vec![0.0; bi.data.len()];
                if sb.len() == 2 {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ai.data[t * m * k..(t + 1) * m * k];
                        gemm_nt(gt, &bi.data, m, n, k, &mut da[t * m * k..(t + 1) * m * k]);
                        gemm_tn(at, gt, m, k, n, &mut db);
                    }
                } else {
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ai.data[t * m * k..(t + 1) * m * k];
                        let bt = &bi.data[t * k * n..(t + 1) * k * n];
                        gemm_nt(gt, bt, m, n, k, &mut da[t * m * k..(t + 1) * m * k]);
                        gemm_tn(at, gt, m, k, n, &mut db[t * k * n..(t + 1) * k * n]);
                    }
                }
                drop(ai);
                drop(bi);
                vec![(a.clone(), da), (b.clone(), db)]
            }
            Gelu { a } => {
                let ai = a.inner.borrow();
                let da = g.iter().zip(&ai.data).map(|(&gi, &x)| gi * gelu_bwd(x)).collect();
                drop(ai);
                vec![(a.clone(), da)]
            }
            Relu { a } => {
                let ai = a.inner.borrow();
                let da = g
                    .iter()
                    .zip(&ai.data)
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                drop(ai);
                vec![(a.clone(), da)]
            }
            Exp { a } => {
                vec![(a.clone(), g.iter().zip(out_data).map(|(&gi, &y)| gi * y).collect())]
            }
            Log { a } => {
                let ai = a.inner.borrow();
                let da = g.iter().zip(&ai.data).map(|(&gi, &x)| gi / x).collect();
                drop(ai);
                vec![(a.clone(), da)]
            }
            Sum { a, axis } => {
                let sa = a.shape();
                let da = match axis {
                    None => vec![g[0]; numel(&sa)],
                    Some(ax) => {
                        let (outer, mid, inner) = axis_split(&sa, *ax);
                        let mut da = vec![0.0; numel(&sa)];
                        for o in 0..outer {
                            for m_ in 0..mid {
                                for i in 0..inner {
                                    da[(o * mid + m_) * inner + i] = g[o * inner + i];
                                }
                            }
                        }
                        da
                    }
                };
                vec![(a.clone(), da)]
            }
            Mean { a, axis } => {
                let sa = a.shape();
                let da = match axis {
                    None => {
                        let n = numel(&sa) as f64;
                        vec![g[0] / n; numel(&sa)]
                    }
                    Some(ax) => {
                        let (outer, mid, inner) = axis_split(&sa, *ax);
                        let inv = 1.0 / mid as f64;
                        let mut da = vec![0.0; numel(&sa)];
                        for o in 0..outer {
                            for m_ in 0..mid {
                                for i in 0..inner {
                                    da[(o * mid + m_) * inner + i] = g[o * inner + i] * inv;
                                }
                            }
                        }
                        da
                    }
                };
                vec![(a.clone(), da)]
            }
            Reshape { a } => vec![(a.clone(), g.to_vec())],
            Transpose { a, d0, d1 } => {
                // Transposing the gradient with the same dim swap maps it back.
                let mut back_shape = out_shape.to_vec();
                back_shape.swap(*d0, *d1);
                let da = transpose_copy(g, out_shape, *d0, *d1);
                debug_assert_eq!(numel(&back_shape), da.len());
                vec![(a.clone(), da)]
            }
            Slice { a, axis, start } => {
                let sa = a.shape();
                let (outer, mid, inner) = axis_split(&sa, *axis);
                let len = out_shape[*axis];
                let mut da = vec![0.0; numel(&sa)];
                for o in 0..outer {
                    for m_ in 0..len {
                        let src = (o * len + m_) * inner;
                        let dst = (o * mid + (start + m_)) * inner;
                        da[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                vec![(a.clone(), da)]
            }
            Concat { parts, axis } => {
                let (outer, out_mid, inner) = axis_split(out_shape, *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0usize;
                for p in parts {
                    let sp = p.shape();
                    let mid = sp[*axis];
                    let mut dp = vec![0.0; numel(&sp)];
                    for o in 0..outer {
                        for m_ in 0..mid {
                            let src = (o * out_mid + offset + m_) * inner;
                            let dst = (o * mid + m_) * inner;
                            dp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    offset += mid;
                    res.push((p.clone(), dp));
                }
                res
            }
            Embedding { table, ids } => {
                let st = table.shape();
                let w = st[1];
                let mut dt = vec![0.0; numel(&st)];
                for (j, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * w..(id + 1) * w];
                    let src = &g[j * w..(j + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(table.clone(), dt)]
            }
            LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let sx = x.shape();
                let w = *sx.last().unwrap();
                let rows = numel(&sx) / w;
                let gi = gamma.inner.borrow();
                let mut dx = vec![0.0; numel(&sx)];
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                for r in 0..rows {
                    let go = &g[r * w..(r + 1) * w];
                    let xh = &xhat[r * w..(r + 1) * w];
                    let istd = inv_std[r];
                    // dxhat = g * gamma; dx via the two projection terms.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..w {
                        let dxh = go[j] * gi.data[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[j];
                        dgamma[j] += go[j] * xh[j];
                        dbeta[j] += go[j];
                    }
                    let inv_w = 1.0 / w as f64;
                    for j in 0..w {
                        let dxh = go[j] * gi.data[j];
                        dx[r * w + j] =
                            istd * (dxh - inv_w * sum_dxhat - xh[j] * inv_w * sum_dxhat_xhat);
                    }
                }
                drop(gi);
                vec![(x.clone(), dx), (gamma.clone(), dgamma), (beta.clone(), dbeta)]
            }
            Softmax { a, axis } => {
                let (outer, mid, inner) = axis_split(out_shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for m_ in 0..mid {
                            let idx = (o * mid + m_) * inner + i;
                            dot += g[idx] * out_data[idx];
                        }
                        for m_ in 0..mid {
                            let idx = (o * mid + m_) * inner + i;
                            da[idx] = out_data[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![(a.clone(), da)]
            }
            L2Normalize { a, axis, inv_norm } => {
                let (outer, mid, inner) = axis_split(out_shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for m_ in 0..mid {
                            let idx = (o * mid + m_) * inner + i;
                            dot += g[idx] * out_data[idx];
                        }
                        let inv = inv_norm[o * inner + i];
                        for m_ in 0..mid {
                            let idx = (o * mid + m_) * inner + i;
                            da[idx] = (g[idx] - out_data[idx] * dot) * inv;
                        }
                    }
                }
                vec![(a.clone(), da)]
            }
            Clamp { a, lo, hi } => {
                let ai = a.inner.borrow();
                let da = g
                    .iter()
                    .zip(&ai.data)
                    .map(|(&gi, &x)| if x >= *lo && x <= *hi { gi } else { 0.0 })
                    .collect();
                drop(ai);
                vec![(a.clone(), da)]
            }
        })
    }

}

fn transpose_copy(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> Vec<f64> {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let nd = shape.len();
    let n = numel(shape);
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        // Destination index swaps the two coordinates.
        let mut dst = 0usize;
        for d in 0..nd {
            let coord = if d == d0 {
                idx[d1]
            } else if d == d1 {
                idx[d0]
            } else {
                idx[d]
            };
            dst += coord * out_strides[d];
        }
        out[dst] = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += in_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            src -= in_strides[d] * shape[d];
        }
    }
    out
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Tensor, Tensor) -> BackOp,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shapes(name, &sa, &sb)?;
        let data = {
            let ai = self.inner.borrow();
            let bi = other.inner.borrow();
            zip_broadcast(&ai.data, &sa, &bi.data, &sb, &out_shape, f)
        };
        ensure_finite(name, &data)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(Tensor::from_op(data, out_shape, req, op(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |a, b| BackOp::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |a, b| BackOp::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| BackOp::Mul { a, b })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |a, b| BackOp::Div { a, b })
    }

    pub fn scalar_mul(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.inner.borrow().data.iter().map(|v| v * c).collect();
        ensure_finite("scalar-mul", &data)?;
        Ok(Tensor::from_op(
            data,
            self.shape(),
            self.requires_grad(),
            BackOp::ScalarMul { a: self.clone(), c },
        ))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.add(&Tensor::scalar(c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scalar_mul(-1.0)
    }

    /// Matrix product. Either both operands share identical leading batch
    /// dimensions, or the right-hand side is a plain 2-D matrix applied to
    /// every leading slice of the left.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        if sb.len() != 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; batch * m * n];
        {
            let ai = self.inner.borrow();
            let bi = other.inner.borrow();
            for t in 0..batch {
                let at = &ai.data[t * m * k..(t + 1) * m * k];
                let bt = if sb.len() == 2 {
                    &bi.data[..]
                } else {
                    &bi.data[t * k * n..(t + 1) * k * n]
                };
                gemm(at, bt, m, k, n, &mut data[t * m * n..(t + 1) * m * n]);
            }
        }
        ensure_finite("matmul", &data)?;
        let req = self.requires_grad() || other.requires_grad();
        Ok(Tensor::from_op(data, out_shape, req, BackOp::MatMul { a: self.clone(), b: other.clone() }))
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(Tensor) -> BackOp,
    ) -> Result<Tensor> {
        let data: Vec<f64> = self.inner.borrow().data.iter().map(|&v| f(v)).collect();
        ensure_finite(name, &data)?;
        Ok(Tensor::from_op(data, self.shape(), self.requires_grad(), op(self.clone())))
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.unary("gelu", gelu_fwd, |a| BackOp::Gelu { a })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |v| v.max(0.0), |a| BackOp::Relu { a })
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |a| BackOp::Exp { a })
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", f64::ln, |a| BackOp::Log { a })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        self.unary("clamp", |v| v.clamp(lo, hi), |a| BackOp::Clamp { a, lo, hi })
    }

    /// Sum over one axis (shape loses that axis) or over everything (scalar).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        let sa = self.shape();
        match axis {
            None => {
                let total: f64 = self.inner.borrow().data.iter().sum();
                ensure_finite("sum", &[total])?;
                Ok(Tensor::from_op(vec![total], vec![1], self.requires_grad(), BackOp::Sum { a: self.clone(), axis: None }))
            }
            Some(ax) => {
                if ax >= sa.len() {
                    return Err(Error::InvalidArgument(format!("sum axis {ax} out of range for {sa:?}")));
                }
                let (outer, mid, inner) = axis_split(&sa, ax);
                let mut out = vec![0.0; outer * inner];
                {
                    let ai = self.inner.borrow();
                    for o in 0..outer {
                        for m_ in 0..mid {
                            let base = (o * mid + m_) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += ai.data[base + i];
                            }
                        }
                    }
                }
                ensure_finite("sum", &out)?;
                let mut out_shape = sa.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Ok(Tensor::from_op(out, out_shape, self.requires_grad(), BackOp::Sum { a: self.clone(), axis: Some(ax) }))
            }
        }
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        let sa = self.shape();
        match axis {
            None => {
                let n = numel(&sa) as f64;
                let total: f64 = self.inner.borrow().data.iter().sum();
                let v = total / n;
                ensure_finite("mean", &[v])?;
                Ok(Tensor::from_op(vec![v], vec![1], self.requires_grad(), BackOp::Mean { a: self.clone(), axis: None }))
            }
            Some(ax) => {
                if ax >= sa.len() {
                    return Err(Error::InvalidArgument(format!("mean axis {ax} out of range for {sa:?}")));
                }
                let (outer, mid, inner) = axis_split(&sa, ax);
                let inv = 1.0 / mid as f64;
                let mut out = vec![0.0; outer * inner];
                {
                    let ai = self.inner.borrow();
                    for o in 0..outer {
                        for m_ in 0..mid {
                            let base = (o * mid + m_) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += ai.data[base + i];
                            }
                        }
                    }
                }
                for v in &mut out {
                    *v *= inv;
                }
                ensure_finite("mean", &out)?;
                let mut out_shape = sa.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Ok(Tensor::from_op(out, out_shape, self.requires_grad(), BackOp::Mean { a: self.clone(), axis: Some(ax) }))
            }
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(), rhs: shape.to_vec() });
        }
        Ok(Tensor::from_op(self.data(), shape.to_vec(), self.requires_grad(), BackOp::Reshape { a: self.clone() }))
    }

    /// Swaps two dimensions (with data movement).
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Tensor> {
        let sa = self.shape();
        if d0 >= sa.len() || d1 >= sa.len() {
            return Err(Error::InvalidArgument(format!("transpose dims ({d0},{d1}) out of range for {sa:?}")));
        }
        if d0 == d1 {
            return self.reshape(&sa);
        }
        let data = transpose_copy(&self.inner.borrow().data, &sa, d0, d1);
        let mut out_shape = sa;
        out_shape.swap(d0, d1);
        Ok(Tensor::from_op(data, out_shape, self.requires_grad(), BackOp::Transpose { a: self.clone(), d0, d1 }))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let sa = self.shape();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice axis={axis} start={start} len={len} out of range for {sa:?}"
            )));
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let mut data = vec![0.0; outer * len * inner];
        {
            let ai = self.inner.borrow();
            for o in 0..outer {
                for m_ in 0..len {
                    let src = (o * mid + start + m_) * inner;
                    let dst = (o * len + m_) * inner;
                    data[dst..dst + inner].copy_from_slice(&ai.data[src..src + inner]);
                }
            }
        }
        let mut out_shape = sa;
        out_shape[axis] = len;
        Ok(Tensor::from_op(data, out_shape, self.requires_grad(), BackOp::Slice { a: self.clone(), axis, start }))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let s0 = parts[0].shape();
        if axis >= s0.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range for {s0:?}")));
        }
        let mut total_mid = 0usize;
        for p in parts {
            let sp = p.shape();
            if sp.len() != s0.len()
                || sp.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d])
            {
                return Err(Error::ShapeMismatch { op: "concat", lhs: s0.clone(), rhs: sp });
            }
            total_mid += sp[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = total_mid;
        let (outer, out_mid, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for p in parts {
            let sp = p.shape();
            let mid = sp[axis];
            let pi = p.inner.borrow();
            for o in 0..outer {
                for m_ in 0..mid {
                    let src = (o * mid + m_) * inner;
                    let dst = (o * out_mid + offset + m_) * inner;
                    data[dst..dst + inner].copy_from_slice(&pi.data[src..src + inner]);
                }
            }
            offset += mid;
        }
        let req = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::from_op(data, out_shape, req, BackOp::Concat { parts: parts.to_vec(), axis }))
    }

    /// Row gather: out[j] = table[ids[j]], result shape id_shape + [width].
    pub fn lookup(table: &Tensor, ids: &[usize], id_shape: &[usize]) -> Result<Tensor> {
        let st = table.shape();
        if st.len() != 2 {
            return Err(Error::InvalidArgument(format!("lookup table must be 2-D, got {st:?}")));
        }
        if numel(id_shape) != ids.len() {
            return Err(Error::LengthMismatch { what: "lookup ids".into() });
        }
        let (v, w) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * w);
        {
            let ti = table.inner.borrow();
            for &id in ids {
                if id >= v {
                    return Err(Error::OutOfVocab { id: id as u16, vocab_size: v });
                }
                data.extend_from_slice(&ti.data[id * w..(id + 1) * w]);
            }
        }
        let mut out_shape = id_shape.to_vec();
        out_shape.push(w);
        Ok(Tensor::from_op(data, out_shape, table.requires_grad(), BackOp::Embedding { table: table.clone(), ids: ids.to_vec() }))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// the affine pair. `gamma` and `beta` must be 1-D of the last extent.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let sx = self.shape();
        let w = *sx.last().ok_or_else(|| Error::InvalidArgument("layer-norm on 0-d tensor".into()))?;
        if gamma.shape() != vec![w] || beta.shape() != vec![w] {
            return Err(Error::ShapeMismatch { op: "layer-norm", lhs: sx.clone(), rhs: gamma.shape() });
        }
        let rows = numel(&sx) / w;
        let mut data = vec![0.0; numel(&sx)];
        let mut xhat = vec![0.0; numel(&sx)];
        let mut inv_std = vec![0.0; rows];
        {
            let xi = self.inner.borrow();
            let gi = gamma.inner.borrow();
            let bi = beta.inner.borrow();
            for r in 0..rows {
                let row = &xi.data[r * w..(r + 1) * w];
                let mean: f64 = row.iter().sum::<f64>() / w as f64;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..w {
                    let xh = (row[j] - mean) * istd;
                    xhat[r * w + j] = xh;
                    data[r * w + j] = gi.data[j] * xh + bi.data[j];
                }
            }
        }
        ensure_finite("layer-norm", &data)?;
        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::from_op(
            data,
            sx,
            req,
            BackOp::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let sa = self.shape();
        if axis >= sa.len() {
            return Err(Error::InvalidArgument(format!("softmax axis {axis} out of range for {sa:?}")));
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let mut data = vec![0.0; numel(&sa)];
        {
            let ai = self.inner.borrow();
            for o in 0..outer {
                for i in 0..inner {
                    let mut mx = f64::NEG_INFINITY;
                    for m_ in 0..mid {
                        mx = mx.max(ai.data[(o * mid + m_) * inner + i]);
                    }
                    let mut denom = 0.0;
                    for m_ in 0..mid {
                        let idx = (o * mid + m_) * inner + i;
                        let e = (ai.data[idx] - mx).exp();
                        data[idx] = e;
                        denom += e;
                    }
                    for m_ in 0..mid {
                        data[(o * mid + m_) * inner + i] /= denom;
                    }
                }
            }
        }
        ensure_finite("softmax", &data)?;
        Ok(Tensor::from_op(data, sa, self.requires_grad(), BackOp::Softmax { a: self.clone(), axis }))
    }

    /// Scales slices along `axis` to unit Euclidean norm. Zero-norm slices
    /// are an error rather than a silent NaN.
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor> {
        let sa = self.shape();
        if axis >= sa.len() {
            return Err(Error::InvalidArgument(format!("l2-normalize axis {axis} out of range for {sa:?}")));
        }
        let (outer, mid, inner) = axis_split(&sa, axis);
        let mut data = vec![0.0; numel(&sa)];
        let mut inv_norm = vec![0.0; outer * inner];
        {
            let ai = self.inner.borrow();
            for o in 0..outer {
                for i in 0..inner {
                    let mut sq = 0.0;
                    for m_ in 0..mid {
                        let v = ai.data[(o * mid + m_) * inner + i];
                        sq += v * v;
                    }
                    if sq == 0.0 {
                        return Err(Error::NonFinite { op: "l2-normalize (zero slice)".into() });
                    }
                    let inv = 1.0 / sq.sqrt();
                    inv_norm[o * inner + i] = inv;
                    for m_ in 0..mid {
                        let idx = (o * mid + m_) * inner + i;
                        data[idx] = ai.data[idx] * inv;
                    }
                }
            }
        }
        ensure_finite("l2-normalize", &data)?;
        Ok(Tensor::from_op(data, sa, self.requires_grad(), BackOp::L2Normalize { a: self.clone(), axis, inv_norm }))
    }
}

/// Identifier + attributes for one primitive, the dispatch surface used by
/// the gradient-check sweep.
#[derive(Debug, Clone)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    Gelu,
    Relu,
    Exp,
    Log,
    Mean(Option<usize>),
    Sum(Option<usize>),
    Reshape(Vec<usize>),
    Transpose(usize, usize),
    Slice { axis: usize, start: usize, len: usize },
    Concat(usize),
    EmbeddingLookup,
    LayerNorm { eps: f64 },
    Softmax(usize),
    L2Normalize(usize),
    Clamp { lo: f64, hi: f64 },
}

fn arity_err(p: &Primitive, n: usize) -> Error {
    Error::InvalidArgument(format!("{p:?} does not accept {n} inputs"))
}

/// Applies one primitive to positional inputs. Embedding lookup takes the
/// table first and a tensor of integral ids second.
pub fn forward_primitive(p: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    use Primitive::*;
    match (p, inputs) {
        (MatMul, [a, b]) => a.matmul(b),
        (Add, [a, b]) => a.add(b),
        (Sub, [a, b]) => a.sub(b),
        (Mul, [a, b]) => a.mul(b),
        (Div, [a, b]) => a.div(b),
        (ScalarMul(c), [a]) => a.scalar_mul(*c),
        (Gelu, [a]) => a.gelu(),
        (Relu, [a]) => a.relu(),
        (Exp, [a]) => a.exp(),
        (Log, [a]) => a.log(),
        (Mean(ax), [a]) => a.mean(*ax),
        (Sum(ax), [a]) => a.sum(*ax),
        (Reshape(shape), [a]) => a.reshape(shape),
        (Transpose(d0, d1), [a]) => a.transpose(*d0, *d1),
        (Slice { axis, start, len }, [a]) => a.slice(*axis, *start, *len),
        (Concat(axis), parts) if !parts.is_empty() => {
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            Tensor::concat(&owned, *axis)
        }
        (EmbeddingLookup, [table, ids]) => {
            let id_shape = ids.shape();
            let idv: Result<Vec<usize>> = ids
                .data()
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 || v < 0.0 {
                        Err(Error::InvalidArgument(format!("non-integral id {v}")))
                    } else {
                        Ok(v as usize)
                    }
                })
                .collect();
            Tensor::lookup(table, &idv?, &id_shape)
        }
        (LayerNorm { eps }, [x, gamma, beta]) => x.layer_norm(gamma, beta, *eps),
        (Softmax(axis), [a]) => a.softmax(*axis),
        (L2Normalize(axis), [a]) => a.l2_normalize(*axis),
        (Clamp { lo, hi }, [a]) => a.clamp(*lo, *hi),
        (p, inputs) => Err(arity_err(p, inputs.len())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(a.matmul(&i).unwrap().data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let b = t(&[1.0, 1.0, 0.0, 2.0], &[2, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        // First batch: [[1,2],[3,4]] @ [[1,1],[0,2]] = [[1,5],[3,11]]
        assert_eq!(&c.data()[..4], &[1.0, 5.0, 3.0, 11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = t(&[0.0; 6], &[2, 3]);
        let b = t(&[0.0; 4], &[2, 2]);
        match a.matmul(&b) {
            Err(crate::error::Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let x = t(&[0.0, 0.0], &[2]);
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), vec![0.5, 0.5]);
        let z = t(&[0.3, -1.2, 2.0, 0.7, 0.7, 0.7], &[2, 3]).softmax(1).unwrap();
        for row in z.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l2_normalize_345() {
        let x = t(&[3.0, 4.0], &[2]);
        let y = x.l2_normalize(0).unwrap();
        let d = y.data();
        assert!((d[0] - 0.6).abs() < 1e-15);
        assert!((d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn transpose_round_trip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.transpose(0, 1).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.data(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = y.transpose(0, 1).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn slice_concat_inverse() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 2).unwrap();
        let back = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn embedding_lookup_grad_scatters() {
        let table = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let out = Tensor::lookup(&table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(out.data(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        out.sum(None).unwrap().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
        let gamma = t(&[1.0, 1.0, 1.0, 1.0], &[4]);
        let beta = t(&[0.0; 4], &[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        let d = y.data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn broadcast_add_bias_grad_reduces() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::param(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum(None).unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = t(&[1000.0], &[1]);
        assert!(matches!(x.exp(), Err(crate::error::Error::NonFinite { .. })));
        let z = t(&[0.0], &[1]);
        assert!(z.log().is_err());
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let x = Tensor::param(vec![-2.0, 0.5, 2.0], &[3]).unwrap();
        let y = x.clamp(-1.0, 1.0).unwrap();
        assert_eq!(y.data(), vec![-1.0, 0.5, 1.0]);
        y.sum(None).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mean_axis_and_sum_axis() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum(Some(0)).unwrap().data(), vec![5.0, 7.0, 9.0]);
        assert_eq!(x.mean(Some(1)).unwrap().data(), vec![2.0, 5.0]);
    }

    #[test]
    fn forward_primitive_dispatch_covers_lookup() {
        let table = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let ids = t(&[1.0, 0.0], &[2]);
        let out = forward_primitive(&Primitive::EmbeddingLookup, &[&table, &ids]).unwrap();
        assert_eq!(out.data(), vec![3.0, 4.0, 1.0, 2.0]);
    }
}
