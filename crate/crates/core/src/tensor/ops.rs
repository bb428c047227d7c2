//! Forward operations and their backward rules.
//!
//! Conventions: tensors are row-major; "rows" is the leading dimension.
//! Feature maps are stored as `[cells, channels]` with cell index
//! `y * width + x`, which is also the token order of patch grids.

use super::Tensor;
use crate::error::{Error, Result};

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{op} received a non-finite input")));
    }
    Ok(())
}

impl Tensor {
    fn dim2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape("add", other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape("sub", other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|x| -x).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape("mul", other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                vec![
                    Some(g.iter().zip(b.iter()).map(|(gi, bi)| gi * bi).collect()),
                    Some(g.iter().zip(a.iter()).map(|(gi, ai)| gi * ai).collect()),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape("div", other)?;
        let data = {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(x, y)| x / y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                let da: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, bi)| gi / bi).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                    .collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ── Elementwise with constants ──────────────────────────────────

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|x| x * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let y = node.data.borrow();
                vec![Some(g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).collect())]
            }),
        )
    }

    /// GELU, tanh approximation (the derivative below differentiates the
    /// approximation itself, so finite-difference checks agree exactly).
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parents[0].data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, &xi)| {
                        let inner = K * (xi + A * xi * xi * xi);
                        let t = inner.tanh();
                        let dinner = K * (1.0 + 3.0 * A * xi * xi);
                        gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner)
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    // ── Broadcasting ────────────────────────────────────────────────

    /// Adds a length-`n` vector to every row of an `[m, n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dim2("add_bias")?;
        if bias.shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let data = {
            let (a, b) = (self.data(), bias.data());
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(a[i * n + j] + b[j]);
                }
            }
            out
        };
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g| {
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2("matmul")?;
        let (k2, n) = other.dim2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let brow = &b[kk * n..(kk + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        da[i * k + kk] = s;
                    }
                }
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = a[i * k + kk];
                        let brow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            brow[j] += aik * grow[j];
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// `[m, k] x [n, k]^T -> [m, n]` (dot products of rows).
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2("matmul_nt")?;
        let (n, k2) = other.dim2("matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += arow[kk] * brow[kk];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = node.parents[0].data();
                let b = node.parents[1].data();
                // dA = g . B
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let darow = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let brow = &b[j * k..(j + 1) * k];
                        for kk in 0..k {
                            darow[kk] += gij * brow[kk];
                        }
                    }
                }
                // dB = g^T . A
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let dbrow = &mut db[j * k..(j + 1) * k];
                        for kk in 0..k {
                            dbrow[kk] += gij * arow[kk];
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ── Structural ──────────────────────────────────────────────────

    /// Reinterprets the buffer under a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Stacks tensors along the leading axis. Parts must agree on row
    /// length; zero-row parts are fine (empty memory blocks).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::Contract("concat_rows needs at least one part".into())
        })?;
        let row_len = first.row_len();
        let one_d = first.shape().len() == 1;
        let mut total = 0usize;
        for p in parts {
            if p.row_len() != row_len || (p.shape().len() == 1) != one_d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.rows();
        }
        let mut data = Vec::with_capacity(total * row_len);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let shape = if one_d {
            vec![total]
        } else {
            vec![total, row_len]
        };
        Ok(Tensor::from_op(
            shape,
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |_, g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&sz| {
                        let piece = g[offset..offset + sz].to_vec();
                        offset += sz;
                        Some(piece)
                    })
                    .collect()
            }),
        ))
    }

    /// Concatenates `[m, n_i]` tensors along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            Error::Contract("concat_cols needs at least one part".into())
        })?;
        let (m, _) = first.dim2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (mi, ni) = p.dim2("concat_cols")?;
            if mi != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(ni);
            total += ni;
        }
        let mut data = Vec::with_capacity(m * total);
        {
            let borrowed: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for i in 0..m {
                for (p, &w) in borrowed.iter().zip(&widths) {
                    data.extend_from_slice(&p[i * w..(i + 1) * w]);
                }
            }
        }
        let widths_bw = widths.clone();
        Ok(Tensor::from_op(
            vec![m, total],
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |_, g| {
                let mut grads: Vec<Vec<f64>> =
                    widths_bw.iter().map(|&w| vec![0.0; m * w]).collect();
                for i in 0..m {
                    let mut col = 0;
                    for (buf, &w) in grads.iter_mut().zip(&widths_bw) {
                        buf[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + col..i * total + col + w]);
                        col += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Contiguous column slice `[m, n] -> [m, len]` starting at `start`.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = self.dim2("narrow_cols")?;
        if start + len > n {
            return Err(Error::Shape {
                op: "narrow_cols",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = {
            let a = self.data();
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&a[i * n + start..i * n + start + len]);
            }
            out
        };
        Ok(Tensor::from_op(
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Row gather; duplicate indices accumulate on backward.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.rows();
        let width = self.row_len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let one_d = self.shape().len() == 1;
        let data = {
            let a = self.data();
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                out.extend_from_slice(&a[i * width..(i + 1) * width]);
            }
            out
        };
        let idx = indices.to_vec();
        let shape = if one_d {
            vec![indices.len()]
        } else {
            vec![indices.len(), width]
        };
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; rows * width];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..width {
                        da[i * width + j] += g[r * width + j];
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Picks one element per row: `out[i] = a[i, idx[i]]`.
    pub fn select_per_row(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dim2("select_per_row")?;
        if indices.len() != m {
            return Err(Error::Shape {
                op: "select_per_row",
                lhs: vec![m, n],
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::Contract(format!(
                "select_per_row column {bad} out of range for {n} columns"
            )));
        }
        let data = {
            let a = self.data();
            indices
                .iter()
                .enumerate()
                .map(|(i, &j)| a[i * n + j])
                .collect()
        };
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![m],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; m * n];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * n + j] += g[i];
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Extracts column `j` as a length-`m` vector.
    pub fn select_col(&self, j: usize) -> Result<Tensor> {
        let (m, n) = self.dim2("select_col")?;
        if j >= n {
            return Err(Error::Shape {
                op: "select_col",
                lhs: vec![m, n],
                rhs: vec![j],
            });
        }
        let data = {
            let a = self.data();
            (0..m).map(|i| a[i * n + j]).collect()
        };
        Ok(Tensor::from_op(
            vec![m],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + j] = g[i];
                }
                vec![Some(da)]
            }),
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Columnwise maximum of an `[m, n]` tensor -> `[n]`. The subgradient
    /// routes to the first maximizing row.
    pub fn col_max(&self) -> Result<Tensor> {
        let (m, n) = self.dim2("col_max")?;
        if m == 0 {
            return Err(Error::Contract("col_max over zero rows".into()));
        }
        let (vals, argmax) = {
            let a = self.data();
            let mut vals = vec![f64::NEG_INFINITY; n];
            let mut argmax = vec![0usize; n];
            for i in 0..m {
                for j in 0..n {
                    let v = a[i * n + j];
                    if v > vals[j] {
                        vals[j] = v;
                        argmax[j] = i;
                    }
                }
            }
            (vals, argmax)
        };
        Ok(Tensor::from_op(
            vec![n],
            vals,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; m * n];
                for (j, &i) in argmax.iter().enumerate() {
                    da[i * n + j] = g[j];
                }
                vec![Some(da)]
            }),
        ))
    }

    // ── Normalizations ──────────────────────────────────────────────

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dim2("softmax_rows")?;
        check_finite("softmax_rows", &self.data())?;
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[i * n..(i + 1) * n];
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    denom += e;
                }
                for o in orow.iter_mut() {
                    *o /= denom;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data.borrow();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let rho: f64 = yrow.iter().zip(grow.iter()).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        dx[i * n + j] = yrow[j] * (grow[j] - rho);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise log-softmax (numerically stable cross-entropy substrate).
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dim2("log_softmax_rows")?;
        check_finite("log_softmax_rows", &self.data())?;
        let mut out = vec![0.0; m * n];
        {
            let a = self.data();
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
                for j in 0..n {
                    out[i * n + j] = row[j] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.data.borrow();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = grow[j] - yrow[j].exp() * gsum;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Softmax over each row with a per-key multiplicative gate:
    /// `y[i,j] = gate[j] exp(s[i,j]) / sum_k gate[k] exp(s[i,k])`.
    ///
    /// A hard 0/1 gate reproduces exactly the softmax over the kept subset,
    /// so gated attention and row-gathered attention agree bit-for-bit on
    /// the kept keys; a soft gate stays differentiable for straight-through
    /// training. Gradients flow into both the scores and the gate.
    pub fn masked_softmax_rows(&self, gate: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dim2("masked_softmax_rows")?;
        if gate.shape() != [n] {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: self.shape().to_vec(),
                rhs: gate.shape().to_vec(),
            });
        }
        check_finite("masked_softmax_rows", &self.data())?;
        check_finite("masked_softmax_rows", &gate.data())?;
        if gate.data().iter().all(|&g| g <= 0.0) {
            return Err(Error::Contract(
                "masked_softmax_rows: every key is gated out".into(),
            ));
        }
        let mut out = vec![0.0; m * n];
        // Unnormalized shares exp(s - c) / D, needed for the gate gradient.
        let mut shares = vec![0.0; m * n];
        {
            let a = self.data();
            let gv = gate.data();
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                // Stabilize against the max over *active* keys only.
                let mx = row
                    .iter()
                    .zip(gv.iter())
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(x, _)| *x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    shares[i * n + j] = e;
                    denom += gv[j] * e;
                }
                for j in 0..n {
                    out[i * n + j] = gv[j] * shares[i * n + j] / denom;
                    shares[i * n + j] /= denom;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), gate.clone()],
            Box::new(move |node, g| {
                let y = node.data.borrow();
                let mut ds = vec![0.0; m * n];
                let mut dgate = vec![0.0; n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let urow = &shares[i * n..(i + 1) * n];
                    let rho: f64 = yrow.iter().zip(grow.iter()).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        ds[i * n + j] = yrow[j] * (grow[j] - rho);
                        dgate[j] += urow[j] * (grow[j] - rho);
                    }
                }
                vec![Some(ds), Some(dgate)]
            }),
        ))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dim2("layer_norm")?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        {
            let a = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for i in 0..m {
                let row = &a[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std[i] = s;
                for j in 0..n {
                    let h = (row[j] - mean) * s;
                    xhat[i * n + j] = h;
                    out[i * n + j] = gm[j] * h + bt[j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let gm = node.parents[1].data();
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let hrow = &xhat[i * n..(i + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = grow[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hrow[j];
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gm[j];
                        dx[i * n + j] = inv_std[i] * (dh - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    // ── Spatial rearrangement ───────────────────────────────────────

    /// Rearranges a `[channels, h, w]` raster into non-overlapping `p`×`p`
    /// patch rows: `[patches, channels*p*p]`, patches in row-major grid
    /// order, each row laid out channel-major. A convolution with stride =
    /// kernel = `p` is then a single matrix product against flattened
    /// kernels.
    pub fn im2col_patches(&self, p: usize) -> Result<Tensor> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Shape {
                    op: "im2col_patches",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Geometry(format!(
                "raster {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = gh * gw;
        let width = c * p * p;
        let mut out = vec![0.0; patches * width];
        {
            let a = self.data();
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = gy * gw + gx;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                let src = ci * h * w + (gy * p + py) * w + (gx * p + px);
                                let dst = row * width + (ci * p + py) * p + px;
                                out[dst] = a[src];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![patches, width],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; c * h * w];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = gy * gw + gx;
                        for ci in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let src = ci * h * w + (gy * p + py) * w + (gx * p + px);
                                    let dst = row * width + (ci * p + py) * p + px;
                                    da[src] = g[dst];
                                }
                            }
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Doubles the spatial resolution of a `[h*w, channels]` feature map by
    /// nearest-neighbour copying.
    pub fn upsample_nearest_2x(&self, h: usize, w: usize) -> Result<Tensor> {
        let (cells, ch) = self.dim2("upsample_nearest_2x")?;
        if cells != h * w {
            return Err(Error::Geometry(format!(
                "upsample_nearest_2x: {cells} cells but grid is {h}x{w}"
            )));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; oh * ow * ch];
        {
            let a = self.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((oy / 2) * w + ox / 2) * ch;
                    let dst = (oy * ow + ox) * ch;
                    out[dst..dst + ch].copy_from_slice(&a[src..src + ch]);
                }
            }
        }
        Ok(Tensor::from_op(
            vec![oh * ow, ch],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; h * w * ch];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src = ((oy / 2) * w + ox / 2) * ch;
                        let dst = (oy * ow + ox) * ch;
                        for k in 0..ch {
                            da[src + k] += g[dst + k];
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }

    /// Bilinear upsampling of a `[h*w, channels]` feature map by an integer
    /// factor, sampling at half-pixel centers with edge clamping.
    pub fn upsample_bilinear(&self, h: usize, w: usize, factor: usize) -> Result<Tensor> {
        let (cells, ch) = self.dim2("upsample_bilinear")?;
        if cells != h * w {
            return Err(Error::Geometry(format!(
                "upsample_bilinear: {cells} cells but grid is {h}x{w}"
            )));
        }
        if factor == 0 {
            return Err(Error::Domain("upsample factor must be positive".into()));
        }
        let taps_y = bilinear_taps(h, factor);
        let taps_x = bilinear_taps(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * ch];
        {
            let a = self.data();
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let dst = (oy * ow + ox) * ch;
                    let s00 = (y0 * w + x0) * ch;
                    let s01 = (y0 * w + x1) * ch;
                    let s10 = (y1 * w + x0) * ch;
                    let s11 = (y1 * w + x1) * ch;
                    for k in 0..ch {
                        let top = (1.0 - wx) * a[s00 + k] + wx * a[s01 + k];
                        let bot = (1.0 - wx) * a[s10 + k] + wx * a[s11 + k];
                        out[dst + k] = (1.0 - wy) * top + wy * bot;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![oh * ow, ch],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut da = vec![0.0; h * w * ch];
                for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                        let dst = (oy * ow + ox) * ch;
                        let s00 = (y0 * w + x0) * ch;
                        let s01 = (y0 * w + x1) * ch;
                        let s10 = (y1 * w + x0) * ch;
                        let s11 = (y1 * w + x1) * ch;
                        for k in 0..ch {
                            let gv = g[dst + k];
                            da[s00 + k] += gv * (1.0 - wy) * (1.0 - wx);
                            da[s01 + k] += gv * (1.0 - wy) * wx;
                            da[s10 + k] += gv * wy * (1.0 - wx);
                            da[s11 + k] += gv * wy * wx;
                        }
                    }
                }
                vec![Some(da)]
            }),
        ))
    }
}

/// Per-output-row interpolation taps: (low index, high index, high weight).
fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Non-overlapping convolution: `p`×`p` kernels applied with stride `p` to a
/// `[c_in, h, w]` raster, producing `[h*w/p^2, c_out]` patch tokens. The
/// kernel tensor is stored flattened as `[c_out, c_in*p*p]`.
pub fn patch_conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, p: usize) -> Result<Tensor> {
    let cols = x.im2col_patches(p)?;
    cols.matmul_nt(kernel)?.add_bias(bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: Vec<f64>) -> Tensor {
        Tensor::constant(&shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t2([2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t2([2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2([1, 2], vec![1.0, 2.0]);
        let b = t2([2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t2([2, 3], vec![0.0; 6]);
        let b = t2([2, 3], vec![0.0; 6]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x = t2([1, 3], vec![0.0, 0.0, 0.0]);
        let y = x.softmax_rows().unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_saturated_row() {
        let x = t2([1, 3], vec![1000.0, 0.0, 0.0]);
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12 && y[2].abs() < 1e-12);
    }

    #[test]
    fn softmax_frozen_reference_row() {
        // softmax([1, 2, 3]) evaluated with 50-digit arithmetic.
        let expect = [
            0.09003057317038046,
            0.24472847105479767,
            0.66524095577482184,
        ];
        let y = t2([1, 3], vec![1.0, 2.0, 3.0])
            .softmax_rows()
            .unwrap()
            .to_vec();
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = t2([1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(x.softmax_rows(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_matches_subset_softmax() {
        let s = t2([2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 0.5, -0.2, 0.0]);
        let gate = Tensor::constant(&[4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let y = s.masked_softmax_rows(&gate).unwrap().to_vec();
        // Column 1 is gated out entirely.
        assert_eq!(y[1], 0.0);
        assert_eq!(y[5], 0.0);
        // Remaining entries match a softmax over the kept columns.
        let kept = t2([2, 3], vec![0.3, 2.0, 0.1, 1.0, -0.2, 0.0]);
        let z = kept.softmax_rows().unwrap().to_vec();
        for (row, zrow) in [(0usize, 0usize), (1, 1)] {
            assert!((y[row * 4] - z[zrow * 3]).abs() < 1e-15);
            assert!((y[row * 4 + 2] - z[zrow * 3 + 1]).abs() < 1e-15);
            assert!((y[row * 4 + 3] - z[zrow * 3 + 2]).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_all_gated_out_is_error() {
        let s = t2([1, 2], vec![0.0, 1.0]);
        let gate = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            s.masked_softmax_rows(&gate),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn patch_conv_counts_ones() {
        // All-ones 1x4x4 input, all-ones 1x1x2x2 kernel, stride 2 -> 2x2 of 4s.
        let x = Tensor::constant(&[1, 4, 4], vec![1.0; 16]).unwrap();
        let k = t2([1, 4], vec![1.0; 4]);
        let b = Tensor::constant(&[1], vec![0.0]).unwrap();
        let y = patch_conv2d(&x, &k, &b, 2).unwrap();
        assert_eq!(y.shape(), &[4, 1]);
        assert_eq!(y.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn patch_conv_zero_kernel() {
        let x = Tensor::constant(&[2, 4, 4], (0..32).map(|i| i as f64).collect()).unwrap();
        let k = t2([3, 8], vec![0.0; 24]);
        let b = Tensor::constant(&[3], vec![0.0; 3]).unwrap();
        let y = patch_conv2d(&x, &k, &b, 2).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 12]);
    }

    #[test]
    fn patch_conv_rejects_indivisible_geometry() {
        let x = Tensor::constant(&[1, 5, 4], vec![0.0; 20]).unwrap();
        let k = t2([1, 4], vec![1.0; 4]);
        let b = Tensor::constant(&[1], vec![0.0]).unwrap();
        assert!(matches!(
            patch_conv2d(&x, &k, &b, 2),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn upsample_nearest_copies_quads() {
        let x = t2([4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.upsample_nearest_2x(2, 2).unwrap();
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_bilinear_preserves_constants() {
        let x = t2([4, 2], vec![5.0, -1.0, 5.0, -1.0, 5.0, -1.0, 5.0, -1.0]);
        let y = x.upsample_bilinear(2, 2, 4).unwrap();
        assert_eq!(y.shape(), &[64, 2]);
        for (i, v) in y.to_vec().iter().enumerate() {
            let expect = if i % 2 == 0 { 5.0 } else { -1.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_rows_handles_empty_parts() {
        let a = t2([0, 3], vec![]);
        let b = t2([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), b.to_vec());
    }

    #[test]
    fn gather_and_select() {
        let a = t2([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = a.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
        let s = a.select_per_row(&[1, 0, 1]).unwrap();
        assert_eq!(s.to_vec(), vec![2.0, 3.0, 6.0]);
        let c = a.select_col(0).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 5.0]);
    }
}
