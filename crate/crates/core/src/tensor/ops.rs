//! Differentiable tensor operations.
//!
//! Broadcasting is deliberately narrow: identical shapes, a scalar `[1]`
//! against anything, or a row `[c]` / `[1, c]` against `[n, c]`.

use super::{BackOp, Parameter, Real, Tensor};
use crate::error::{Error, Result};

// ── kernels ──────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] · b[k,n]
fn mm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
fn mm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn mm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Operand {
    Full,
    Row { cols: usize },
    Scalar,
}

impl Operand {
    fn index(self, i: usize) -> usize {
        match self {
            Operand::Full => i,
            Operand::Row { cols } => i % cols,
            Operand::Scalar => 0,
        }
    }

    fn reduce<T: Real>(self, grad: &[T], cols: usize) -> Vec<T> {
        match self {
            Operand::Full => grad.to_vec(),
            Operand::Row { .. } => {
                let mut out = vec![T::zero(); cols];
                for (i, &g) in grad.iter().enumerate() {
                    out[i % cols] = out[i % cols] + g;
                }
                out
            }
            Operand::Scalar => vec![grad.iter().copied().sum()],
        }
    }
}

fn is_row_of(shape: &[usize], cols: usize) -> bool {
    shape == [cols] || shape == [1, cols]
}

fn broadcast_plan(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Operand, Operand)> {
    if a == b {
        return Ok((a.to_vec(), Operand::Full, Operand::Full));
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(b) == 1 {
        return Ok((a.to_vec(), Operand::Full, Operand::Scalar));
    }
    if numel(a) == 1 {
        return Ok((b.to_vec(), Operand::Scalar, Operand::Full));
    }
    if a.len() == 2 && is_row_of(b, a[1]) {
        return Ok((a.to_vec(), Operand::Full, Operand::Row { cols: a[1] }));
    }
    if b.len() == 2 && is_row_of(a, b[1]) {
        return Ok((b.to_vec(), Operand::Row { cols: b[1] }, Operand::Full));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<T: Real> Tensor<T> {
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::InvalidArgument(format!(
                "{op} expects a 2-d tensor, got shape {other:?}"
            ))),
        }
    }

    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        fwd: impl Fn(T, T) -> T,
        // (a, b, d_out) -> (da, db)
        bwd: impl Fn(T, T, T) -> (T, T) + Send + Sync + 'static,
    ) -> Result<Tensor<T>> {
        let (out_shape, ka, kb) = broadcast_plan(op, self.shape(), other.shape())?;
        let numel: usize = out_shape.iter().product();
        let (a, b) = (self.data(), other.data());
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(fwd(a[ka.index(i)], b[kb.index(i)]));
        }
        let (pa, pb) = (self.clone(), other.clone());
        let (a_cols, b_cols) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            out_shape,
            data,
            BackOp {
                parents: vec![self.clone(), other.clone()],
                backward: Box::new(move |_out, d_out| {
                    let (av, bv) = (pa.data(), pb.data());
                    let mut da = vec![T::zero(); d_out.len()];
                    let mut db = vec![T::zero(); d_out.len()];
                    for (i, &g) in d_out.iter().enumerate() {
                        let (ga, gb) = bwd(av[ka.index(i)], bv[kb.index(i)], g);
                        da[i] = ga;
                        db[i] = gb;
                    }
                    vec![Some(ka.reduce(&da, a_cols)), Some(kb.reduce(&db, b_cols))]
                }),
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    fn unary(
        &self,
        fwd: impl Fn(T) -> T,
        // (x, y, d_out) -> dx
        bwd: impl Fn(T, T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| fwd(v)).collect();
        let parent = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |out, d_out| {
                    let x = parent.data();
                    let dx = d_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| bwd(x[i], out[i], g))
                        .collect();
                    vec![Some(dx)]
                }),
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        // Stable in both tails: never exponentiates a positive argument.
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, y, g| g * y * (T::one() - y),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _, g| -g)
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        self.unary(move |x| x * factor, move |_, _, g| g * factor)
    }

    pub fn add_scalar(&self, offset: T) -> Tensor<T> {
        self.unary(move |x| x + offset, |_, _, g| g)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _, g| {
                if x > lo && x < hi {
                    g
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); m * n];
        mm_acc(self.data(), other.data(), &mut data, m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            BackOp {
                parents: vec![self.clone(), other.clone()],
                backward: Box::new(move |_, d_out| {
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    let mut da = vec![T::zero(); m * k];
                    mm_nt_acc(d_out, pb.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); k * n];
                    mm_tn_acc(pa.data(), d_out, &mut db, m, k, n);
                    vec![Some(da), Some(db)]
                }),
            },
        ))
    }

    /// `self · otherᵀ` for `self: [m,k]`, `other: [n,k]`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); m * n];
        mm_nt_acc(self.data(), other.data(), &mut data, m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            BackOp {
                parents: vec![self.clone(), other.clone()],
                backward: Box::new(move |_, d_out| {
                    // C = A·Bᵀ: dA = dC · B ; dB = dCᵀ · A
                    let mut da = vec![T::zero(); m * k];
                    mm_acc(d_out, pb.data(), &mut da, m, n, k);
                    let mut db = vec![T::zero(); n * k];
                    mm_tn_acc(d_out, pa.data(), &mut db, m, n, k);
                    vec![Some(da), Some(db)]
                }),
            },
        ))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("softmax_rows")?;
        let x = self.data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |out, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let d = &d_out[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                        let row = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            row[c] = y[c] * (d[c] - dot);
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Divide each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&self, eps: T) -> Result<Tensor<T>> {
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("l2_normalize_rows: eps must be > 0".into()));
        }
        let (rows, cols) = self.dims2("l2_normalize_rows")?;
        let x = self.data();
        let mut data = vec![T::zero(); rows * cols];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            norms[r] = denom;
            for c in 0..cols {
                data[r * cols + c] = row[c] / denom;
            }
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |out, d_out| {
                    let x = parent.data();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let y = &out[r * cols..(r + 1) * cols];
                        let d = &d_out[r * cols..(r + 1) * cols];
                        let slot = &mut dx[r * cols..(r + 1) * cols];
                        if norm > eps {
                            let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                            for c in 0..cols {
                                slot[c] = (d[c] - y[c] * dot) / norm;
                            }
                        } else {
                            // Below the floor the map is plain division by eps.
                            let denom = norms[r];
                            for c in 0..cols {
                                slot[c] = d[c] / denom;
                            }
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Concatenate 2-d tensors along the last dimension.
    pub fn concat_last_dim(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_last_dim: no tensors".into()));
        }
        let (rows, _) = parts[0].dims2("concat_last_dim")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_last_dim")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_last_dim",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (p, &c) in parts.iter().zip(&widths) {
            let src = p.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let widths_b = widths.clone();
        Ok(Tensor::from_op(
            vec![rows, total],
            data,
            BackOp {
                parents: parts.iter().map(|&p| p.clone()).collect(),
                backward: Box::new(move |_, d_out| {
                    let mut grads = Vec::with_capacity(widths_b.len());
                    let mut offset = 0;
                    for &c in &widths_b {
                        let mut g = vec![T::zero(); rows * c];
                        for r in 0..rows {
                            g[r * c..(r + 1) * c].copy_from_slice(
                                &d_out[r * total + offset..r * total + offset + c],
                            );
                        }
                        grads.push(Some(g));
                        offset += c;
                    }
                    grads
                }),
            },
        ))
    }

    /// Channel-wise max over one axis of a 2-d tensor. Keeps the axis with
    /// extent 1. Ties route the gradient to the lowest index.
    pub fn max_over_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("max_over_axis")?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "max_over_axis: axis {axis} out of range for 2-d tensor"
            )));
        }
        let x = self.data();
        let (out_shape, out_len) = if axis == 0 {
            (vec![1, cols], cols)
        } else {
            (vec![rows, 1], rows)
        };
        let mut data = vec![T::neg_infinity(); out_len];
        let mut arg = vec![0usize; out_len];
        for r in 0..rows {
            for c in 0..cols {
                let v = x[r * cols + c];
                let slot = if axis == 0 { c } else { r };
                if v > data[slot] {
                    data[slot] = v;
                    arg[slot] = r * cols + c;
                }
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (slot, &g) in d_out.iter().enumerate() {
                        dx[arg[slot]] = dx[arg[slot]] + g;
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Mean over one axis of a 2-d tensor, keeping the axis with extent 1.
    pub fn mean_over_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("mean_over_axis")?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "mean_over_axis: axis {axis} out of range for 2-d tensor"
            )));
        }
        let x = self.data();
        let (out_shape, out_len, count) = if axis == 0 {
            (vec![1, cols], cols, rows)
        } else {
            (vec![rows, 1], rows, cols)
        };
        let inv = T::one() / T::from_f64(count as f64);
        let mut data = vec![T::zero(); out_len];
        for r in 0..rows {
            for c in 0..cols {
                let slot = if axis == 0 { c } else { r };
                data[slot] = data[slot] + x[r * cols + c] * inv;
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let slot = if axis == 0 { c } else { r };
                            dx[r * cols + c] = d_out[slot] * inv;
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let numel = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| vec![Some(vec![d_out[0]; numel])]),
            },
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let numel = self.numel();
        let inv = T::one() / T::from_f64(numel as f64);
        self.sum_all().scale(inv)
    }

    /// Select rows of a 2-d tensor; gradient scatter-adds back.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: index {bad} out of range ({rows} rows)"
            )));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] = dx[i * cols + c] + d_out[k * cols + c];
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Channel-wise max over row groups. Empty groups produce zero rows.
    pub fn group_max_rows(&self, groups: &[Vec<usize>]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("group_max_rows")?;
        let x = self.data();
        let m = groups.len();
        let mut data = vec![T::zero(); m * cols];
        // usize::MAX marks "no source" (empty group).
        let mut arg = vec![usize::MAX; m * cols];
        for (g, members) in groups.iter().enumerate() {
            if let Some(&bad) = members.iter().find(|&&i| i >= rows) {
                return Err(Error::InvalidArgument(format!(
                    "group_max_rows: index {bad} out of range ({rows} rows)"
                )));
            }
            for c in 0..cols {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for &i in members {
                    let v = x[i * cols + c];
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                if best_i != usize::MAX {
                    data[g * cols + c] = best;
                    arg[g * cols + c] = best_i * cols + c;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (slot, &g) in d_out.iter().enumerate() {
                        let a = arg[slot];
                        if a != usize::MAX {
                            dx[a] = dx[a] + g;
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Arithmetic mean over row groups. Empty groups produce zero rows.
    pub fn group_mean_rows(&self, groups: &[Vec<usize>]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("group_mean_rows")?;
        let x = self.data();
        let m = groups.len();
        let mut data = vec![T::zero(); m * cols];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if let Some(&bad) = members.iter().find(|&&i| i >= rows) {
                return Err(Error::InvalidArgument(format!(
                    "group_mean_rows: index {bad} out of range ({rows} rows)"
                )));
            }
            let inv = T::one() / T::from_f64(members.len() as f64);
            for &i in members {
                for c in 0..cols {
                    data[g * cols + c] = data[g * cols + c] + x[i * cols + c] * inv;
                }
            }
        }
        let groups_b = groups.to_vec();
        Ok(Tensor::from_op(
            vec![m, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (g, members) in groups_b.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = T::one() / T::from_f64(members.len() as f64);
                        for &i in members {
                            for c in 0..cols {
                                dx[i * cols + c] = dx[i * cols + c] + d_out[g * cols + c] * inv;
                            }
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Fixed linear combinations of rows: `out_g = Σ w · row_i`. Covers
    /// bilinear resampling and any sparse mixing with constant weights.
    pub fn linear_combine_rows(&self, combos: &[Vec<(usize, T)>]) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("linear_combine_rows")?;
        let x = self.data();
        let m = combos.len();
        let mut data = vec![T::zero(); m * cols];
        for (g, terms) in combos.iter().enumerate() {
            for &(i, w) in terms {
                if i >= rows {
                    return Err(Error::InvalidArgument(format!(
                        "linear_combine_rows: index {i} out of range ({rows} rows)"
                    )));
                }
                for c in 0..cols {
                    data[g * cols + c] = data[g * cols + c] + x[i * cols + c] * w;
                }
            }
        }
        let combos_b = combos.to_vec();
        Ok(Tensor::from_op(
            vec![m, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (g, terms) in combos_b.iter().enumerate() {
                        for &(i, w) in terms {
                            for c in 0..cols {
                                dx[i * cols + c] = dx[i * cols + c] + d_out[g * cols + c] * w;
                            }
                        }
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    /// Place rows of `self` at `positions` of an otherwise zero
    /// `[out_rows, cols]` tensor. Positions must be distinct.
    pub fn scatter_rows(&self, positions: &[usize], out_rows: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2("scatter_rows")?;
        if positions.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "scatter_rows: {} positions for {} rows",
                positions.len(),
                rows
            )));
        }
        let mut data = vec![T::zero(); out_rows * cols];
        let mut seen = vec![false; out_rows];
        let x = self.data();
        for (r, &p) in positions.iter().enumerate() {
            if p >= out_rows {
                return Err(Error::InvalidArgument(format!(
                    "scatter_rows: position {p} out of range ({out_rows} rows)"
                )));
            }
            if seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "scatter_rows: duplicate position {p}"
                )));
            }
            seen[p] = true;
            data[p * cols..(p + 1) * cols].copy_from_slice(&x[r * cols..(r + 1) * cols]);
        }
        let pos = positions.to_vec();
        Ok(Tensor::from_op(
            vec![out_rows, cols],
            data,
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let mut dx = vec![T::zero(); rows * cols];
                    for (r, &p) in pos.iter().enumerate() {
                        dx[r * cols..(r + 1) * cols]
                            .copy_from_slice(&d_out[p * cols..(p + 1) * cols]);
                    }
                    vec![Some(dx)]
                }),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| vec![Some(d_out.to_vec())]),
            },
        ))
    }

    /// Affine map on the trailing dimension: `x · w + b`.
    pub fn linear(&self, w: &Parameter<T>, b: Option<&Parameter<T>>) -> Result<Tensor<T>> {
        let y = self.matmul(&w.tensor)?;
        match b {
            Some(b) => y.add(&b.tensor),
            None => Ok(y),
        }
    }

    /// Mean binary cross-entropy from logits, computed in log-sum-exp form.
    pub fn bce_with_logits(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if let Some(&bad) = target
            .data()
            .iter()
            .find(|&&t| t != T::zero() && t != T::one())
        {
            return Err(Error::Validation(format!(
                "bce_with_logits: target {bad} not in {{0,1}}"
            )));
        }
        let n = self.numel();
        let inv = T::one() / T::from_f64(n as f64);
        let z = self.data();
        let y = target.data();
        let mut total = T::zero();
        for i in 0..n {
            // max(z,0) - z·y + ln(1 + e^{-|z|})
            let zi = z[i];
            let pos = zi.max(T::zero());
            total = total + pos - zi * y[i] + (T::one() + (-zi.abs()).exp()).ln();
        }
        let logits = self.clone();
        let tgt = target.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![total * inv],
            BackOp {
                parents: vec![self.clone()],
                backward: Box::new(move |_, d_out| {
                    let g = d_out[0] * inv;
                    let z = logits.data();
                    let y = tgt.data();
                    let dz = (0..n)
                        .map(|i| {
                            let s = if z[i] >= T::zero() {
                                T::one() / (T::one() + (-z[i]).exp())
                            } else {
                                let e = z[i].exp();
                                e / (T::one() + e)
                            };
                            g * (s - y[i])
                        })
                        .collect();
                    vec![Some(dz)]
                }),
            },
        ))
    }

    /// Mean squared error over the elements of unmasked rows. With a mask
    /// the divisor is `cols · max(active rows, 1)`; an all-zero mask logs a
    /// warning and yields zero (with zero gradients flowing to `self`).
    pub fn mse_masked(&self, target: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        if self.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_masked",
                lhs: self.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (rows, cols) = self.dims2("mse_masked")?;
        let row_mask: Vec<bool> = match mask {
            None => vec![true; rows],
            Some(m) => {
                if m.numel() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "mse_masked",
                        lhs: self.shape().to_vec(),
                        rhs: m.shape().to_vec(),
                    });
                }
                let mut out = Vec::with_capacity(rows);
                for &v in m.data() {
                    if v == T::one() {
                        out.push(true);
                    } else if v == T::zero() {
                        out.push(false);
                    } else {
                        return Err(Error::Validation(format!(
                            "mse_masked: mask value {v} not in {{0,1}}"
                        )));
                    }
                }
                out
            }
        };
        let active = row_mask.iter().filter(|&&m| m).count();
        if active == 0 {
            log::warn!("mse_masked: all rows masked out, returning 0");
            return Ok(self.sum_all().scale(T::zero()));
        }
        let inv = T::one() / T::from_f64((active * cols) as f64);
        let p = self.data();
        let t = target.data();
        let mut total = T::zero();
        for r in 0..rows {
            if !row_mask[r] {
                continue;
            }
            for c in 0..cols {
                let d = p[r * cols + c] - t[r * cols + c];
                total = total + d * d;
            }
        }
        let pred = self.clone();
        let tgt = target.clone();
        let mask_b = row_mask.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![total * inv],
            BackOp {
                parents: vec![self.clone(), target.clone()],
                backward: Box::new(move |_, d_out| {
                    let g = d_out[0] * inv;
                    let two = T::from_f64(2.0);
                    let p = pred.data();
                    let t = tgt.data();
                    let mut dp = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        if !mask_b[r] {
                            continue;
                        }
                        for c in 0..cols {
                            dp[r * cols + c] = two * g * (p[r * cols + c] - t[r * cols + c]);
                        }
                    }
                    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
                    vec![Some(dp), Some(dt)]
                }),
            },
        ))
    }

    /// 2-d convolution on an `[h, w, c_in]` tensor with kernel
    /// `[c_out, c_in, kh, kw]`, zero padding and the given stride.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (h, w, c_in) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d expects [h, w, c] input, got {other:?}"
                )))
            }
        };
        let (c_out, wc_in, kh, kw) = match weight.shape() {
            [o, i, kh, kw] => (*o, *i, *kh, *kw),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "conv2d expects [c_out, c_in, kh, kw] weight, got {other:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument(
                "conv2d: kernel larger than padded input".into(),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x = self.data();
        let k = weight.data();
        let mut data = vec![T::zero(); oh * ow * c_out];
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..c_out {
                    let mut acc = match bias {
                        Some(b) => b.data()[o],
                        None => T::zero(),
                    };
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            let in_base = (y as usize * w + xx as usize) * c_in;
                            let k_base = ((o * c_in) * kh + ky) * kw + kx;
                            for c in 0..c_in {
                                acc = acc + x[in_base + c] * k[k_base + c * kh * kw];
                            }
                        }
                    }
                    data[(oy * ow + ox) * c_out + o] = acc;
                }
            }
        }
        let input = self.clone();
        let wt = weight.clone();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            vec![oh, ow, c_out],
            data,
            BackOp {
                parents,
                backward: Box::new(move |_, d_out| {
                    let x = input.data();
                    let k = wt.data();
                    let mut dx = vec![T::zero(); h * w * c_in];
                    let mut dk = vec![T::zero(); c_out * c_in * kh * kw];
                    let mut db = vec![T::zero(); c_out];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for o in 0..c_out {
                                let g = d_out[(oy * ow + ox) * c_out + o];
                                if g == T::zero() {
                                    continue;
                                }
                                db[o] = db[o] + g;
                                for ky in 0..kh {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    if y < 0 || y as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xx = (ox * stride + kx) as isize - pad as isize;
                                        if xx < 0 || xx as usize >= w {
                                            continue;
                                        }
                                        let in_base = (y as usize * w + xx as usize) * c_in;
                                        let k_base = ((o * c_in) * kh + ky) * kw + kx;
                                        for c in 0..c_in {
                                            let koff = k_base + c * kh * kw;
                                            dx[in_base + c] = dx[in_base + c] + g * k[koff];
                                            dk[koff] = dk[koff] + g * x[in_base + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let mut grads = vec![Some(dx), Some(dk)];
                    if has_bias {
                        grads.push(Some(db));
                    }
                    grads
                }),
            },
        ))
    }
}
