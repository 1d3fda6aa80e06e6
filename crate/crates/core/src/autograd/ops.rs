use std::sync::Arc;

use super::Var;
use crate::tensor::{col2im_add, gemm, im2col, transpose_into, Tensor};

const LN_EPS: f64 = 1e-5;

fn same_len(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(
        a.len(),
        b.len(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl<'t> Var<'t> {
    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_len(&a, &b, "add");
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.op(&[*self, other], Tensor::new(a.shape(), out), move |g, gs| {
            gs.accumulate(ia, g.data());
            gs.accumulate(ib, g.data());
        })
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_len(&a, &b, "sub");
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.op(&[*self, other], Tensor::new(a.shape(), out), move |g, gs| {
            gs.accumulate(ia, g.data());
            if let Some(s) = gs.slot(ib) {
                for (d, v) in s.iter_mut().zip(g.data()) {
                    *d -= v;
                }
            }
        })
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_len(&a, &b, "mul");
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ia, ib) = (self.id, other.id);
        self.tape.op(&[*self, other], Tensor::new(a.shape(), out), move |g, gs| {
            if let Some(s) = gs.slot(ia) {
                for ((d, gv), bv) in s.iter_mut().zip(g.data()).zip(b.data()) {
                    *d += gv * bv;
                }
            }
            if let Some(s) = gs.slot(ib) {
                for ((d, gv), av) in s.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += gv * av;
                }
            }
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        self.tape.op(&[*self], a.map(|v| v * s), move |g, gs| {
            if let Some(d) = gs.slot(ia) {
                for (d, gv) in d.iter_mut().zip(g.data()) {
                    *d += gv * s;
                }
            }
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        self.tape.op(&[*self], a.map(|v| v + s), move |g, gs| {
            gs.accumulate(ia, g.data());
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        let out = a.map(|v| v.max(0.0));
        self.tape.op(&[*self], out, move |g, gs| {
            if let Some(d) = gs.slot(ia) {
                for ((d, gv), x) in d.iter_mut().zip(g.data()).zip(a.data()) {
                    if *x > 0.0 {
                        *d += gv;
                    }
                }
            }
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        let out = Arc::new(a.map(sigmoid));
        let o = out.clone();
        self.tape.op(&[*self], (*out).clone(), move |g, gs| {
            if let Some(d) = gs.slot(ia) {
                for ((d, gv), s) in d.iter_mut().zip(g.data()).zip(o.data()) {
                    *d += gv * s * (1.0 - s);
                }
            }
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        let out = (*a).clone().reshaped(shape);
        self.tape.op(&[*self], out, move |g, gs| gs.accumulate(ia, g.data()))
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let ia = self.id;
        self.tape.op(&[*self], Tensor::scalar(a.sum()), move |g, gs| {
            let gv = g.item();
            if let Some(d) = gs.slot(ia) {
                for d in d.iter_mut() {
                    *d += gv;
                }
            }
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[r, n] + b[r]` broadcast along each row (per-channel bias for
    /// channel-major maps).
    pub fn add_channel_bias(&self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let (r, n) = (x.rows(), x.cols());
        assert_eq!(b.len(), r, "channel bias length {} vs {} rows", b.len(), r);
        let mut out = x.data().to_vec();
        for (row, bv) in out.chunks_mut(n).zip(b.data()) {
            for v in row {
                *v += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.tape.op(&[*self, bias], Tensor::new(x.shape(), out), move |g, gs| {
            gs.accumulate(ix, g.data());
            if let Some(d) = gs.slot(ib) {
                for (d, row) in d.iter_mut().zip(g.data().chunks(n)) {
                    *d += row.iter().sum::<f64>();
                }
            }
        })
    }

    /// `[n, d] + b[d]` broadcast down each column (bias for token-major rows).
    pub fn add_row_bias(&self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let d = x.cols();
        assert_eq!(b.len(), d, "row bias length {} vs {} cols", b.len(), d);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.tape.op(&[*self, bias], Tensor::new(x.shape(), out), move |g, gs| {
            gs.accumulate(ix, g.data());
            if let Some(s) = gs.slot(ib) {
                for row in g.data().chunks(d) {
                    for (sv, gv) in s.iter_mut().zip(row) {
                        *sv += gv;
                    }
                }
            }
        })
    }

    /// `op(self) @ op(other)` on the 2-D views of both operands.
    pub fn matmul_t(&self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = (a.rows(), a.cols());
        let (br, bc) = (b.rows(), b.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), ta, b.data(), tb, 0.0, &mut out);
        let (ia, ib) = (self.id, other.id);
        self.tape.op(&[*self, other], Tensor::new(&[m, n], out), move |g, gs| {
            // C = A' B' ; dA' = G B'^T ; dB' = A'^T G
            if let Some(d) = gs.slot(ia) {
                if ta {
                    // A is [k, m]: dA = B' G^T
                    gemm(k, n, m, 1.0, b.data(), tb, g.data(), true, 1.0, d);
                } else {
                    gemm(m, n, k, 1.0, g.data(), false, b.data(), !tb, 1.0, d);
                }
            }
            if let Some(d) = gs.slot(ib) {
                if tb {
                    // B is [n, k]: dB = G^T A'
                    gemm(n, m, k, 1.0, g.data(), true, a.data(), ta, 1.0, d);
                } else {
                    gemm(k, m, n, 1.0, a.data(), !ta, g.data(), false, 1.0, d);
                }
            }
        })
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// Stride-1, zero-padded `k x k` convolution of a `[ci, h, w]` map with
    /// weights `[co, ci*k*k]`. Output is `[co, h, w]`.
    pub fn conv2d(&self, weight: Var<'t>, k: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [c, h, w], got {xs:?}");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let co = w.rows();
        assert_eq!(w.cols(), ci * k * k, "conv2d weight {:?} for {ci} input channels", w.shape());
        let hw = h * wd;
        let out = if k == 1 {
            let mut out = vec![0.0; co * hw];
            gemm(co, ci, hw, 1.0, w.data(), false, x.data(), false, 0.0, &mut out);
            out
        } else {
            let mut cols = vec![0.0; ci * k * k * hw];
            im2col(x.data(), ci, h, wd, k, &mut cols);
            let mut out = vec![0.0; co * hw];
            gemm(co, ci * k * k, hw, 1.0, w.data(), false, &cols, false, 0.0, &mut out);
            out
        };
        let (ix, iw) = (self.id, weight.id);
        self.tape.op(&[*self, weight], Tensor::new(&[co, h, wd], out), move |g, gs| {
            let kk = ci * k * k;
            let cols = if k == 1 {
                None
            } else if gs.wants(iw) {
                let mut cols = vec![0.0; kk * hw];
                im2col(x.data(), ci, h, wd, k, &mut cols);
                Some(cols)
            } else {
                None
            };
            if let Some(d) = gs.slot(iw) {
                let src = cols.as_deref().unwrap_or(x.data());
                gemm(co, hw, kk, 1.0, g.data(), false, src, true, 1.0, d);
            }
            if gs.wants(ix) {
                if k == 1 {
                    let d = gs.slot(ix).unwrap();
                    gemm(ci, co, hw, 1.0, w.data(), true, g.data(), false, 1.0, d);
                } else {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(kk, co, hw, 1.0, w.data(), true, g.data(), false, 0.0, &mut dcols);
                    let d = gs.slot(ix).unwrap();
                    col2im_add(&dcols, ci, h, wd, k, d);
                }
            }
        })
    }

    /// Layer normalisation with affine parameters. `over_rows` normalises
    /// each column across rows (channel-major `[c, n]`); otherwise each row
    /// across columns (token-major `[n, c]`).
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, over_rows: bool) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        // Normalised axis has `len` elements at `stride`; there are `groups`
        // of them separated by `gstride`.
        let (len, stride, groups, gstride) = if over_rows { (r, c, c, 1) } else { (c, 1, r, c) };
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.len(), len);
        assert_eq!(bt.len(), len);
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; xd.len()];
        for gi in 0..groups {
            let base = gi * gstride;
            let mean = (0..len).map(|i| xd[base + i * stride]).sum::<f64>() / len as f64;
            let var = (0..len)
                .map(|i| (xd[base + i * stride] - mean).powi(2))
                .sum::<f64>()
                / len as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[gi] = is;
            for i in 0..len {
                let idx = base + i * stride;
                let xh = (xd[idx] - mean) * is;
                xhat[idx] = xh;
                out[idx] = xh * gm.data()[i] + bt.data()[i];
            }
        }
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        self.tape.op(&[*self, gamma, beta], Tensor::new(x.shape(), out), move |g, gs| {
            let gd = g.data();
            if let Some(d) = gs.slot(ig) {
                for gi in 0..groups {
                    let base = gi * gstride;
                    for (i, dv) in d.iter_mut().enumerate() {
                        let idx = base + i * stride;
                        *dv += gd[idx] * xhat[idx];
                    }
                }
            }
            if let Some(d) = gs.slot(ib) {
                for gi in 0..groups {
                    let base = gi * gstride;
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += gd[base + i * stride];
                    }
                }
            }
            if let Some(d) = gs.slot(ix) {
                let n = len as f64;
                for (gi, is) in inv_std.iter().enumerate() {
                    let base = gi * gstride;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..len {
                        let idx = base + i * stride;
                        let dxh = gd[idx] * gm.data()[i];
                        s1 += dxh;
                        s2 += dxh * xhat[idx];
                    }
                    for i in 0..len {
                        let idx = base + i * stride;
                        let dxh = gd[idx] * gm.data()[i];
                        d[idx] += is / n * (n * dxh - s1 - xhat[idx] * s2);
                    }
                }
            }
        })
    }

    /// Softmax over contiguous blocks of `k` rows within every column of a
    /// `[g*k, n]` matrix.
    pub fn softmax_row_groups(&self, k: usize) -> Var<'t> {
        let x = self.value();
        let (r, n) = (x.rows(), x.cols());
        assert_eq!(r % k, 0, "rows {r} not divisible by group {k}");
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for gi in 0..r / k {
            for col in 0..n {
                let idx = |i: usize| (gi * k + i) * n + col;
                let mx = (0..k).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..k {
                    let e = (xd[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..k {
                    out[idx(i)] /= z;
                }
            }
        }
        let ix = self.id;
        let o = Arc::new(Tensor::new(x.shape(), out));
        let oc = o.clone();
        self.tape.op(&[*self], (*o).clone(), move |g, gs| {
            let (od, gd) = (oc.data(), g.data());
            if let Some(d) = gs.slot(ix) {
                for gi in 0..r / k {
                    for col in 0..n {
                        let idx = |i: usize| (gi * k + i) * n + col;
                        let dot: f64 = (0..k).map(|i| od[idx(i)] * gd[idx(i)]).sum();
                        for i in 0..k {
                            d[idx(i)] += od[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
            }
        })
    }

    /// Softmax along each row.
    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ix = self.id;
        let o = Arc::new(Tensor::new(x.shape(), out));
        let oc = o.clone();
        self.tape.op(&[*self], (*o).clone(), move |g, gs| {
            if let Some(d) = gs.slot(ix) {
                for ((drow, orow), grow) in d.chunks_mut(c).zip(oc.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = orow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((dv, ov), gv) in drow.iter_mut().zip(orow).zip(grow) {
                        *dv += ov * (gv - dot);
                    }
                }
            }
        })
    }

    /// 2-D transpose of a `[r, c]` view.
    pub fn t(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let ix = self.id;
        self.tape.op(&[*self], x.transposed(), move |g, gs| {
            if let Some(d) = gs.slot(ix) {
                let mut tmp = vec![0.0; r * c];
                transpose_into(g.data(), c, r, &mut tmp);
                for (dv, tv) in d.iter_mut().zip(&tmp) {
                    *dv += tv;
                }
            }
        })
    }

    /// Rows `start..start+len` of the 2-D view; trailing shape preserved.
    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        assert!(start + len <= x.rows());
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let out = x.data()[start * c..(start + len) * c].to_vec();
        let ix = self.id;
        self.tape.op(&[*self], Tensor::new(&shape, out), move |g, gs| {
            if let Some(d) = gs.slot(ix) {
                for (dv, gv) in d[start * c..(start + len) * c].iter_mut().zip(g.data()) {
                    *dv += gv;
                }
            }
        })
    }

    /// Columns `start..start+len` of a `[r, c]` view.
    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for row in x.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ix = self.id;
        self.tape.op(&[*self], Tensor::new(&[r, len], out), move |g, gs| {
            if let Some(d) = gs.slot(ix) {
                for (drow, grow) in d.chunks_mut(c).zip(g.data().chunks(len)) {
                    for (dv, gv) in drow[start..start + len].iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
            }
        })
    }

    /// Gathers rows of the 2-D view by index (indices may repeat).
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let ix = self.id;
        let idx = idx.to_vec();
        self.tape.op(&[*self], Tensor::new(&shape, out), move |g, gs| {
            if let Some(d) = gs.slot(ix) {
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *dv += gv;
                    }
                }
            }
        })
    }
}

/// Stacks 2-D views along rows; trailing shape taken from the first part.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let c = vals[0].cols();
    let mut rows = 0;
    let mut out = Vec::new();
    for v in &vals {
        assert_eq!(v.cols(), c, "concat_rows column mismatch");
        rows += v.rows();
        out.extend_from_slice(v.data());
    }
    let mut shape = vals[0].shape().to_vec();
    if shape.is_empty() {
        shape.push(rows);
    } else {
        shape[0] = rows;
    }
    let ids: Vec<(usize, usize)> = parts.iter().zip(&vals).map(|(p, v)| (p.id, v.len())).collect();
    tape.op(parts, Tensor::new(&shape, out), move |g, gs| {
        let mut off = 0;
        for &(id, n) in &ids {
            gs.accumulate(id, &g.data()[off..off + n]);
            off += n;
        }
    })
}

/// Concatenates `[r, c_i]` views along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let r = vals[0].rows();
    let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; r * total];
    let mut off = 0;
    for (v, &w) in vals.iter().zip(&widths) {
        assert_eq!(v.rows(), r, "concat_cols row mismatch");
        for i in 0..r {
            out[i * total + off..i * total + off + w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.op(parts, Tensor::new(&[r, total], out), move |g, gs| {
        let mut off = 0;
        for (&id, &w) in ids.iter().zip(&widths) {
            if let Some(d) = gs.slot(id) {
                for i in 0..r {
                    for (dv, gv) in d[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g.data()[i * total + off..i * total + off + w])
                    {
                        *dv += gv;
                    }
                }
            }
            off += w;
        }
    })
}

/// Sum of a list of scalars (or equally shaped values).
pub fn sum_all<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = acc.add(*p);
    }
    acc
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
