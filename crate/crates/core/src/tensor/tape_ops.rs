//! Forward ops and their vector-Jacobian products.
//!
//! Everything operates on row-major matrices. 1-D tensors are treated as a
//! single row where a 2-D view is needed. All ops validate shapes and reject
//! non-finite outputs.

use super::tape::{Tape, VarId};
use super::Tensor;
use crate::error::{Error, Result};

// ── raw matmul kernels ───────────────────────────────────────────────

/// a[m×k] * b[k×n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m×k] * bᵀ with b stored [n×k]
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ * b with a stored [k×m], b stored [k×n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn rbf(d: f64, ell: f64) -> f64 {
    (-d * d / (2.0 * ell * ell)).exp()
}

impl Tape {
    fn value_of(&self, id: VarId) -> Tensor {
        self.value(id)
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<VarId> {
        let (va, vb) = (self.value_of(a), self.value_of(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out: Vec<f64> =
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let (da, db) = (va.clone(), vb.clone());
        self.push(
            op,
            value,
            vec![a, b],
            Box::new(move |g| {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let (dx, dy) = df(da.data()[i], db.data()[i], g[i]);
                    ga[i] = dx;
                    gb[i] = dy;
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    fn unary(
        &self,
        op: &'static str,
        a: VarId,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<VarId> {
        let va = self.value_of(a);
        let out: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), out.clone())?;
        let saved_in = va;
        let saved_out = out;
        self.push(
            op,
            value,
            vec![a],
            Box::new(move |g| {
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| df(saved_in.data()[i], saved_out[i], g[i]))
                    .collect();
                vec![Some(ga)]
            }),
        )
    }

    pub fn add(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, |x, y, g| (g / y, -g * x / (y * y)))
    }

    pub fn neg(&self, a: VarId) -> Result<VarId> {
        self.unary("neg", a, |x| -x, |_, _, g| -g)
    }

    pub fn scale(&self, a: VarId, c: f64) -> Result<VarId> {
        self.unary("scale", a, move |x| c * x, move |_, _, g| c * g)
    }

    pub fn add_scalar(&self, a: VarId, c: f64) -> Result<VarId> {
        self.unary("add_scalar", a, move |x| x + c, |_, _, g| g)
    }

    pub fn relu(&self, a: VarId) -> Result<VarId> {
        self.unary("relu", a, |x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&self, a: VarId) -> Result<VarId> {
        self.unary(
            "softplus",
            a,
            |x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() },
            |x, _, g| g / (1.0 + (-x).exp()),
        )
    }

    pub fn exp(&self, a: VarId) -> Result<VarId> {
        self.unary("exp", a, f64::exp, |_, y, g| g * y)
    }

    pub fn ln(&self, a: VarId) -> Result<VarId> {
        self.unary("ln", a, f64::ln, |x, _, g| g / x)
    }

    /// Broadcast-add a length-`cols` vector to every row.
    pub fn add_row(&self, a: VarId, v: VarId) -> Result<VarId> {
        self.row_broadcast("add_row", a, v, |x, y| x + y, |_, _, g| (g, g))
    }

    /// Broadcast-multiply every row by a length-`cols` vector.
    pub fn mul_row(&self, a: VarId, v: VarId) -> Result<VarId> {
        self.row_broadcast("mul_row", a, v, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Broadcast-add a length-`rows` vector down the columns.
    pub fn add_col(&self, a: VarId, v: VarId) -> Result<VarId> {
        self.col_broadcast("add_col", a, v, |x, y| x + y, |_, _, g| (g, g))
    }

    /// Broadcast-multiply row r by v[r].
    pub fn mul_col(&self, a: VarId, v: VarId) -> Result<VarId> {
        self.col_broadcast("mul_col", a, v, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: VarId,
        v: VarId,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<VarId> {
        let (va, vv) = (self.value_of(a), self.value_of(v));
        let (r, c) = (va.rows(), va.cols());
        if vv.numel() != c {
            return Err(Error::shape(op, format!("vector len {} vs {} cols", vv.numel(), c)));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(va.data()[i * c + j], vv.data()[j]);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(
            op,
            value,
            vec![a, v],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let (dx, dy) = df(va.data()[i * c + j], vv.data()[j], g[i * c + j]);
                        ga[i * c + j] = dx;
                        gv[j] += dy;
                    }
                }
                vec![Some(ga), Some(gv)]
            }),
        )
    }

    fn col_broadcast(
        &self,
        op: &'static str,
        a: VarId,
        v: VarId,
        f: impl Fn(f64, f64) -> f64,
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<VarId> {
        let (va, vv) = (self.value_of(a), self.value_of(v));
        let (r, c) = (va.rows(), va.cols());
        if vv.numel() != r {
            return Err(Error::shape(op, format!("vector len {} vs {} rows", vv.numel(), r)));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = f(va.data()[i * c + j], vv.data()[i]);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(
            op,
            value,
            vec![a, v],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                let mut gv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        let (dx, dy) = df(va.data()[i * c + j], vv.data()[i], g[i * c + j]);
                        ga[i * c + j] = dx;
                        gv[i] += dy;
                    }
                }
                vec![Some(ga), Some(gv)]
            }),
        )
    }

    pub fn matmul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value_of(a), self.value_of(b));
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {}x{} vs {}x{}", m, k, k2, n),
            ));
        }
        let out = matmul_nn(va.data(), vb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.push(
            "matmul",
            value,
            vec![a, b],
            Box::new(move |g| {
                let ga = matmul_nt(g, vb.data(), m, n, k);
                let gb = matmul_tn(va.data(), g, k, m, n);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn transpose(&self, a: VarId) -> Result<VarId> {
        let va = self.value_of(a);
        let (r, c) = (va.rows(), va.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        self.push(
            "transpose",
            value,
            vec![a],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    pub fn reshape(&self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value_of(a).reshaped(shape)?;
        self.push("reshape", value, vec![a], Box::new(move |g| vec![Some(g.to_vec())]))
    }

    pub fn concat_cols(&self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.value_of(p)).collect();
        let r = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        if vals.iter().any(|v| v.rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (v, &w) in vals.iter().zip(&widths) {
            for i in 0..r {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::matrix(r, total, out)?;
        self.push(
            "concat_cols",
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    let mut part = vec![0.0; r * w];
                    for i in 0..r {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    grads.push(Some(part));
                    off += w;
                }
                grads
            }),
        )
    }

    pub fn slice_cols(&self, a: VarId, c0: usize, c1: usize) -> Result<VarId> {
        let va = self.value_of(a);
        let (r, c) = (va.rows(), va.cols());
        if c1 > c || c0 >= c1 {
            return Err(Error::shape("slice_cols", format!("range {}..{} of {}", c0, c1, c)));
        }
        let w = c1 - c0;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&va.data()[i * c + c0..i * c + c1]);
        }
        let value = Tensor::matrix(r, w, out)?;
        self.push(
            "slice_cols",
            value,
            vec![a],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(ga)]
            }),
        )
    }

    pub fn sum_all(&self, a: VarId) -> Result<VarId> {
        let va = self.value_of(a);
        let n = va.numel();
        let s: f64 = va.data().iter().sum();
        self.push(
            "sum_all",
            Tensor::scalar(s),
            vec![a],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self, a: VarId) -> Result<VarId> {
        let va = self.value_of(a);
        let n = va.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s: f64 = va.data().iter().sum::<f64>() / n as f64;
        self.push(
            "mean_all",
            Tensor::scalar(s),
            vec![a],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Row-wise softmax; each output row sums to 1.
    pub fn softmax_rows(&self, a: VarId) -> Result<VarId> {
        let va = self.value_of(a);
        let (r, c) = (va.rows(), va.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &va.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for j in 0..c {
                out[i * c + j] /= s;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out.clone())?;
        let y = out;
        self.push(
            "softmax_rows",
            value,
            vec![a],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gy = &g[i * c..(i + 1) * c];
                    let yi = &y[i * c..(i + 1) * c];
                    let dot: f64 = gy.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yi[j] * (gy[j] - dot);
                    }
                }
                vec![Some(ga)]
            }),
        )
    }

    /// Row-wise layer normalisation with a learnable affine transform.
    pub fn layer_norm_rows(&self, a: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        const EPS: f64 = 1e-12;
        let (va, vg, vb) = (self.value_of(a), self.value_of(gamma), self.value_of(beta));
        let (r, c) = (va.rows(), va.cols());
        if vg.numel() != c || vb.numel() != c {
            return Err(Error::shape("layer_norm", "gamma/beta length must equal cols"));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &va.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * istd;
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            vec![a, gamma, beta],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..r {
                    let gi = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        ggamma[j] += gi[j] * xh[j];
                        gbeta[j] += gi[j];
                        let dxh = gi[j] * vg.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = gi[j] * vg.data()[j];
                        ga[i * c + j] =
                            inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                vec![Some(ga), Some(ggamma), Some(gbeta)]
            }),
        )
    }

    /// 1-D cross-correlation with zero "same" padding, stride 1.
    /// signal [C_in × L], kernel [C_out × C_in × K] with K odd.
    pub fn conv1d(&self, signal: VarId, kernel: VarId) -> Result<VarId> {
        let (vx, vk) = (self.value_of(signal), self.value_of(kernel));
        let xs = vx.shape().to_vec();
        let ks = vk.shape().to_vec();
        if xs.len() != 2 || ks.len() != 3 {
            return Err(Error::shape("conv1d", "signal must be 2-D, kernel 3-D"));
        }
        let (c_in, l) = (xs[0], xs[1]);
        let (c_out, k_cin, kk) = (ks[0], ks[1], ks[2]);
        if k_cin != c_in {
            return Err(Error::shape("conv1d", "kernel C_in mismatch"));
        }
        if kk % 2 == 0 {
            return Err(Error::shape("conv1d", "kernel size must be odd"));
        }
        let pad = (kk - 1) / 2;
        let mut out = vec![0.0; c_out * l];
        for co in 0..c_out {
            let orow = &mut out[co * l..(co + 1) * l];
            for ci in 0..c_in {
                let xrow = &vx.data()[ci * l..(ci + 1) * l];
                for j in 0..kk {
                    let kv = vk.data()[(co * c_in + ci) * kk + j];
                    if kv == 0.0 {
                        continue;
                    }
                    // out[i] += kv * x[i + j - pad]
                    let (i0, i1) = conv_range(l, j, pad);
                    let off = j as isize - pad as isize;
                    for i in i0..i1 {
                        orow[i] += kv * xrow[(i as isize + off) as usize];
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, l], out)?;
        self.push(
            "conv1d",
            value,
            vec![signal, kernel],
            Box::new(move |g| {
                let mut gx = vec![0.0; c_in * l];
                let mut gk = vec![0.0; c_out * c_in * kk];
                for co in 0..c_out {
                    let grow = &g[co * l..(co + 1) * l];
                    for ci in 0..c_in {
                        let xrow = &vx.data()[ci * l..(ci + 1) * l];
                        let gxrow = &mut gx[ci * l..(ci + 1) * l];
                        for j in 0..kk {
                            let kv = vk.data()[(co * c_in + ci) * kk + j];
                            let (i0, i1) = conv_range(l, j, pad);
                            let off = j as isize - pad as isize;
                            let mut acc = 0.0;
                            for i in i0..i1 {
                                let t = (i as isize + off) as usize;
                                acc += grow[i] * xrow[t];
                                gxrow[t] += grow[i] * kv;
                            }
                            gk[(co * c_in + ci) * kk + j] = acc;
                        }
                    }
                }
                vec![Some(gx), Some(gk)]
            }),
        )
    }

    /// Materialise a reflection-symmetric kernel from its half: the half
    /// stores taps at offsets 0..=(K-1)/2 from the centre, and the full kernel
    /// satisfies k[i] == k[-i] exactly.
    pub fn reflect_kernel(&self, half: VarId) -> Result<VarId> {
        let vh = self.value_of(half);
        let hs = vh.shape().to_vec();
        if hs.len() != 3 {
            return Err(Error::shape("reflect_kernel", "half kernel must be 3-D"));
        }
        let (c_out, c_in, kh) = (hs[0], hs[1], hs[2]);
        let kk = 2 * kh - 1;
        let center = kh - 1;
        let mut out = vec![0.0; c_out * c_in * kk];
        for ch in 0..c_out * c_in {
            for j in 0..kh {
                let v = vh.data()[ch * kh + j];
                out[ch * kk + center + j] = v;
                out[ch * kk + center - j] = v;
            }
        }
        let value = Tensor::new(vec![c_out, c_in, kk], out)?;
        self.push(
            "reflect_kernel",
            value,
            vec![half],
            Box::new(move |g| {
                let mut gh = vec![0.0; c_out * c_in * kh];
                for ch in 0..c_out * c_in {
                    gh[ch * kh] = g[ch * kk + center];
                    for j in 1..kh {
                        gh[ch * kh + j] = g[ch * kk + center + j] + g[ch * kk + center - j];
                    }
                }
                vec![Some(gh)]
            }),
        )
    }

    /// SetConv data channels on a grid: row 0 is the density channel
    /// sum_n psi(grid_t - x_n), row 1 is sum_n y_n psi(grid_t - x_n).
    /// Differentiable in the RBF lengthscale only (a positive scalar var).
    pub fn setconv_raw(
        &self,
        lengthscale: VarId,
        grid: &[f64],
        xs: &[f64],
        ys: &[f64],
    ) -> Result<VarId> {
        if xs.len() != ys.len() {
            return Err(Error::shape("setconv", "xs/ys length mismatch"));
        }
        let ell = self.value_of(lengthscale).data()[0];
        let t = grid.len();
        let n = xs.len();
        let mut out = vec![0.0; 2 * t];
        let mut psi = vec![0.0; t * n];
        let mut d2 = vec![0.0; t * n];
        for ti in 0..t {
            for ni in 0..n {
                let d = grid[ti] - xs[ni];
                let w = rbf(d, ell);
                psi[ti * n + ni] = w;
                d2[ti * n + ni] = d * d;
                out[ti] += w;
                out[t + ti] += ys[ni] * w;
            }
        }
        let value = Tensor::matrix(2, t, out)?;
        let ys_saved = ys.to_vec();
        self.push(
            "setconv",
            value,
            vec![lengthscale],
            Box::new(move |g| {
                let mut gell = 0.0;
                let inv_l3 = 1.0 / (ell * ell * ell);
                for ti in 0..t {
                    for ni in 0..n {
                        let dpsi = psi[ti * n + ni] * d2[ti * n + ni] * inv_l3;
                        gell += (g[ti] + g[t + ti] * ys_saved[ni]) * dpsi;
                    }
                }
                vec![Some(vec![gell])]
            }),
        )
    }

    /// Normalise value channels by the density channel (row 0). Grid points
    /// with zero density get a zero value channel, signalling "no data".
    /// The division is regularised as val / (dens + eps): at grid points far
    /// from every context point the density underflows towards zero, and a
    /// bare 1/dens (and its 1/dens^2 gradient) overflows to infinity.
    pub fn density_normalize(&self, h: VarId) -> Result<VarId> {
        const DENSITY_EPS: f64 = 1e-8;
        let vh = self.value_of(h);
        let (r, c) = (vh.rows(), vh.cols());
        if r < 2 {
            return Err(Error::shape("density_normalize", "need density + value rows"));
        }
        let mut out = vh.to_vec();
        for t in 0..c {
            let dens = vh.data()[t] + DENSITY_EPS;
            for ch in 1..r {
                out[ch * c + t] = vh.data()[ch * c + t] / dens;
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        self.push(
            "density_normalize",
            value,
            vec![h],
            Box::new(move |g| {
                let mut gh = vec![0.0; r * c];
                for t in 0..c {
                    let dens = vh.data()[t] + DENSITY_EPS;
                    gh[t] = g[t];
                    for ch in 1..r {
                        let val = vh.data()[ch * c + t];
                        gh[ch * c + t] = g[ch * c + t] / dens;
                        gh[t] -= g[ch * c + t] * val / (dens * dens);
                    }
                }
                vec![Some(gh)]
            }),
        )
    }

    /// Smooth grid channels back to target positions with per-group RBF
    /// lengthscales: out[m, c] = sum_t f[c, t] psi_g(x_m - grid_t), where
    /// channel c belongs to lengthscale group g = c / (C / G).
    pub fn kernel_smooth(
        &self,
        f: VarId,
        lengthscales: VarId,
        grid: &[f64],
        targets: &[f64],
    ) -> Result<VarId> {
        let (vf, vl) = (self.value_of(f), self.value_of(lengthscales));
        let (c, t) = (vf.rows(), vf.cols());
        let groups = vl.numel();
        if t != grid.len() {
            return Err(Error::shape("kernel_smooth", "grid length mismatch"));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("kernel_smooth", "channels must divide into groups"));
        }
        let per_group = c / groups;
        let m = targets.len();
        // Cache per-group weights and squared distances for the backward pass.
        let mut w = vec![0.0; groups * m * t];
        let mut d2 = vec![0.0; m * t];
        for mi in 0..m {
            for ti in 0..t {
                let d = targets[mi] - grid[ti];
                d2[mi * t + ti] = d * d;
            }
        }
        for g in 0..groups {
            let ell = vl.data()[g];
            for i in 0..m * t {
                w[g * m * t + i] = (-d2[i] / (2.0 * ell * ell)).exp();
            }
        }
        let mut out = vec![0.0; m * c];
        for ci in 0..c {
            let g = ci / per_group;
            let frow = &vf.data()[ci * t..(ci + 1) * t];
            for mi in 0..m {
                let wrow = &w[g * m * t + mi * t..g * m * t + (mi + 1) * t];
                out[mi * c + ci] = frow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        let value = Tensor::matrix(m, c, out)?;
        self.push(
            "kernel_smooth",
            value,
            vec![f, lengthscales],
            Box::new(move |gout| {
                let mut gf = vec![0.0; c * t];
                let mut gl = vec![0.0; groups];
                for ci in 0..c {
                    let g = ci / per_group;
                    let ell = vl.data()[g];
                    let inv_l3 = 1.0 / (ell * ell * ell);
                    let frow = &vf.data()[ci * t..(ci + 1) * t];
                    let gfrow = &mut gf[ci * t..(ci + 1) * t];
                    for mi in 0..m {
                        let go = gout[mi * c + ci];
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &w[g * m * t + mi * t..g * m * t + (mi + 1) * t];
                        let drow = &d2[mi * t..(mi + 1) * t];
                        for ti in 0..t {
                            gfrow[ti] += go * wrow[ti];
                            gl[g] += go * frow[ti] * wrow[ti] * drow[ti] * inv_l3;
                        }
                    }
                }
                vec![Some(gf), Some(gl)]
            }),
        )
    }
}

/// Output index range [i0, i1) for which i + j - pad lands inside [0, l).
fn conv_range(l: usize, j: usize, pad: usize) -> (usize, usize) {
    let off = j as isize - pad as isize;
    let i0 = if off < 0 { (-off) as usize } else { 0 };
    let i1 = if off > 0 { l - off as usize } else { l };
    (i0.min(l), i1.min(l))
}
