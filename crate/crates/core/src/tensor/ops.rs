//! Differentiable operations. Each op validates shapes, computes the forward
//! values, and (when an operand is recorded) pushes a node whose closure
//! scatters the output gradient back to its parents.

use std::rc::Rc;

use super::{common_tape, BoundNode, NodeId, Tape, Tensor};
use crate::error::{Error, Result};

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tape {
    fn op_node(&self, len: usize, backward: super::BackwardFn) -> BoundNode {
        let id = self.push(len, false, Some(backward));
        BoundNode {
            tape: self.clone(),
            id,
        }
    }
}

fn parent(t: &Tensor) -> Option<NodeId> {
    t.bound().map(|b| b.id)
}

impl Tensor {
    fn same_shape_binary(
        &self,
        rhs: &Tensor,
        op: &str,
        fwd: impl Fn(f64, f64) -> f64,
        // (grad_out, a, b, y) -> (da, db)
        vjp: impl Fn(f64, f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            )));
        }
        let out: Vec<f64> = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(&a, &b)| fwd(a, b))
            .collect();
        let node = match common_tape(&[self, rhs])? {
            None => None,
            Some(tape) => {
                let (pa, pb) = (parent(self), parent(rhs));
                let (va, vb) = (self.values.clone(), rhs.values.clone());
                let vy = Rc::new(out.clone());
                let len = out.len();
                Some(tape.op_node(
                    len,
                    Box::new(move |g, buf| {
                        if let Some(p) = pa {
                            let slot = buf.slot(p, len);
                            for i in 0..len {
                                slot[i] += vjp(g[i], va[i], vb[i], vy[i]).0;
                            }
                        }
                        if let Some(p) = pb {
                            let slot = buf.slot(p, len);
                            for i in 0..len {
                                slot[i] += vjp(g[i], va[i], vb[i], vy[i]).1;
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(self.shape.clone(), out, node))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "add", |a, b| a + b, |g, _, _, _| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "sub", |a, b| a - b, |g, _, _, _| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape_binary(rhs, "mul", |a, b| a * b, |g, a, b, _| (g * b, g * a))
    }

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // (grad_out, x, y) -> dx
        vjp: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| fwd(x)).collect();
        let node = self.bound().map(|b| {
            let p = b.id;
            let vx = self.values.clone();
            let vy = Rc::new(out.clone());
            let len = out.len();
            b.tape.op_node(
                len,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, len);
                    for i in 0..len {
                        slot[i] += vjp(g[i], vx[i], vy[i]);
                    }
                }),
            )
        });
        Tensor::with_node(self.shape.clone(), out, node)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, move |g, _, _| c * g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |g, _, _| g)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |g, _, y| g * y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|x| x.ln(), |g, x, _| g / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|x| x.sqrt(), |g, _, y| g / (2.0 * y))
    }

    /// y = x for x >= 0, slope * x otherwise. The derivative at exactly zero
    /// is taken on the negative branch (slope).
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        debug_assert!(slope > 0.0 && slope < 1.0);
        if let Some(b) = self.bound() {
            if b.tape.tracks_kinks() {
                for &x in self.values() {
                    b.tape.record_kink((x > 0.0) as u32);
                }
            }
        }
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |g, x, _| if x > 0.0 { g } else { slope * g },
        )
    }

    /// Standard matrix product of [m, p] by [p, n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let a = self.values();
        let bv = rhs.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &a[i * p..(i + 1) * p];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &bv[kk * n..(kk + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        let node = match common_tape(&[self, rhs])? {
            None => None,
            Some(tape) => {
                let (pa, pb) = (parent(self), parent(rhs));
                let (va, vb) = (self.values.clone(), rhs.values.clone());
                Some(tape.op_node(
                    m * n,
                    Box::new(move |g, buf| {
                        if let Some(p_id) = pa {
                            let da = buf.slot(p_id, m * p);
                            for i in 0..m {
                                let g_row = &g[i * n..(i + 1) * n];
                                let da_row = &mut da[i * p..(i + 1) * p];
                                for kk in 0..p {
                                    let b_row = &vb[kk * n..(kk + 1) * n];
                                    let mut acc = 0.0;
                                    for (gj, bj) in g_row.iter().zip(b_row) {
                                        acc += gj * bj;
                                    }
                                    da_row[kk] += acc;
                                }
                            }
                        }
                        if let Some(p_id) = pb {
                            let db = buf.slot(p_id, p * n);
                            for i in 0..m {
                                let g_row = &g[i * n..(i + 1) * n];
                                let a_row = &va[i * p..(i + 1) * p];
                                for (kk, &aik) in a_row.iter().enumerate() {
                                    let db_row = &mut db[kk * n..(kk + 1) * n];
                                    for (d, gj) in db_row.iter_mut().zip(g_row) {
                                        *d += aik * gj;
                                    }
                                }
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(vec![m, n], out, node))
    }

    /// Fused pair of matrix products sharing one output buffer:
    /// x1 [R, p1] * w1 [p1, n] + x2 [R, p2] * w2 [p2, n] (+ bias [n]).
    pub fn linear2(
        x1: &Tensor,
        w1: &Tensor,
        x2: &Tensor,
        w2: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (s1, sw1, s2, sw2) = (x1.shape(), w1.shape(), x2.shape(), w2.shape());
        if s1.len() != 2
            || sw1.len() != 2
            || s2.len() != 2
            || sw2.len() != 2
            || s1[1] != sw1[0]
            || s2[1] != sw2[0]
            || s1[0] != s2[0]
            || sw1[1] != sw2[1]
        {
            return Err(Error::dim(format!(
                "linear2: incompatible shapes {s1:?}*{sw1:?} + {s2:?}*{sw2:?}"
            )));
        }
        let (m, p1, p2, n) = (s1[0], s1[1], s2[1], sw1[1]);
        if let Some(b) = bias {
            if b.shape() != [n] {
                return Err(Error::dim(format!(
                    "linear2: bias {:?} does not match width {n}",
                    b.shape()
                )));
            }
        }
        let (v1, vw1, v2, vw2) = (x1.values(), w1.values(), x2.values(), w2.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            if let Some(b) = bias {
                out_row.copy_from_slice(b.values());
            }
            for (kk, &aik) in v1[i * p1..(i + 1) * p1].iter().enumerate() {
                let w_row = &vw1[kk * n..(kk + 1) * n];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += aik * wv;
                }
            }
            for (kk, &aik) in v2[i * p2..(i + 1) * p2].iter().enumerate() {
                let w_row = &vw2[kk * n..(kk + 1) * n];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += aik * wv;
                }
            }
        }
        let mut operands = vec![x1, w1, x2, w2];
        if let Some(b) = bias {
            operands.push(b);
        }
        let node = match common_tape(&operands)? {
            None => None,
            Some(tape) => {
                let parents = [
                    parent(x1),
                    parent(w1),
                    parent(x2),
                    parent(w2),
                    bias.and_then(parent),
                ];
                let (v1, vw1, v2, vw2) = (
                    x1.values.clone(),
                    w1.values.clone(),
                    x2.values.clone(),
                    w2.values.clone(),
                );
                Some(tape.op_node(
                    m * n,
                    Box::new(move |g, buf| {
                        for (slot_id, (x, w, p_in)) in
                            [(&v1, &vw1, p1), (&v2, &vw2, p2)].iter().enumerate()
                        {
                            if let Some(px) = parents[slot_id * 2] {
                                let dx = buf.slot(px, m * p_in);
                                for i in 0..m {
                                    let g_row = &g[i * n..(i + 1) * n];
                                    let dx_row = &mut dx[i * p_in..(i + 1) * p_in];
                                    for kk in 0..*p_in {
                                        let w_row = &w[kk * n..(kk + 1) * n];
                                        let mut acc = 0.0;
                                        for (gj, wj) in g_row.iter().zip(w_row) {
                                            acc += gj * wj;
                                        }
                                        dx_row[kk] += acc;
                                    }
                                }
                            }
                            if let Some(pw) = parents[slot_id * 2 + 1] {
                                let dw = buf.slot(pw, p_in * n);
                                for i in 0..m {
                                    let g_row = &g[i * n..(i + 1) * n];
                                    let x_row = &x[i * p_in..(i + 1) * p_in];
                                    for (kk, &xik) in x_row.iter().enumerate() {
                                        let dw_row = &mut dw[kk * n..(kk + 1) * n];
                                        for (d, gj) in dw_row.iter_mut().zip(g_row) {
                                            *d += xik * gj;
                                        }
                                    }
                                }
                            }
                        }
                        if let Some(pb) = parents[4] {
                            let db = buf.slot(pb, n);
                            for g_row in g.chunks_exact(n) {
                                for (d, gj) in db.iter_mut().zip(g_row) {
                                    *d += gj;
                                }
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(vec![m, n], out, node))
    }

    /// Fused edge-pair encoding over the rows of an [N, W] matrix: for index
    /// row r with entries [c, j1, j2, ...] (the center first), the output row
    /// r holds k blocks [x[c], x[j] - x[c]] of width 2W each, i.e. shape
    /// [R, k, 2W].
    pub fn gather_pairs(&self, idx: &[Vec<usize>]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "gather_pairs: expected matrix, got {s:?}"
            )));
        }
        let (n_rows, w) = (s[0], s[1]);
        if idx.is_empty() {
            return Err(Error::dim("gather_pairs: empty index matrix".to_string()));
        }
        let k = idx[0].len();
        if k == 0 {
            return Err(Error::dim("gather_pairs: empty index row".to_string()));
        }
        let mut flat = Vec::with_capacity(idx.len() * k);
        for row in idx {
            if row.len() != k {
                return Err(Error::dim(format!(
                    "gather_pairs: ragged index rows ({} vs {k})",
                    row.len()
                )));
            }
            for &j in row {
                if j >= n_rows {
                    return Err(Error::Index {
                        index: j,
                        len: n_rows,
                    });
                }
                flat.push(j);
            }
        }
        let r = idx.len();
        let x = self.values();
        let mut out = vec![0.0; r * k * 2 * w];
        for (ri, row) in idx.iter().enumerate() {
            let center = &x[row[0] * w..(row[0] + 1) * w];
            for (ji, &j) in row.iter().enumerate() {
                let nb = &x[j * w..(j + 1) * w];
                let base = (ri * k + ji) * 2 * w;
                out[base..base + w].copy_from_slice(center);
                let diff = &mut out[base + w..base + 2 * w];
                for ((d, &nv), &cv) in diff.iter_mut().zip(nb).zip(center) {
                    *d = nv - cv;
                }
            }
        }
        let node = self.bound().map(|b| {
            let p = b.id;
            let flat = std::rc::Rc::new(flat);
            b.tape.op_node(
                r * k * 2 * w,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, n_rows * w);
                    for (e, &j) in flat.iter().enumerate() {
                        let center_idx = flat[(e / k) * k];
                        let base = e * 2 * w;
                        let g_center = &g[base..base + w];
                        let g_diff = &g[base + w..base + 2 * w];
                        // center receives the direct part minus the diff part
                        for a in 0..w {
                            slot[center_idx * w + a] += g_center[a] - g_diff[a];
                            slot[j * w + a] += g_diff[a];
                        }
                    }
                }),
            )
        });
        Ok(Tensor::with_node(vec![r, k, 2 * w], out, node))
    }

    /// Contiguous slice along the first axis: rows [start, start + count).
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() || start + count > s[0] || count == 0 {
            return Err(Error::dim(format!(
                "slice_rows: rows [{start}, {}) out of {:?}",
                start + count,
                s
            )));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.values()[start * inner..(start + count) * inner].to_vec();
        let mut shape = s.to_vec();
        shape[0] = count;
        let node = self.bound().map(|b| {
            let p = b.id;
            let full = self.len();
            b.tape.op_node(
                count * inner,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, full);
                    for (sv, gv) in slot[start * inner..(start + count) * inner]
                        .iter_mut()
                        .zip(g)
                    {
                        *sv += gv;
                    }
                }),
            )
        });
        Ok(Tensor::with_node(shape, out, node))
    }

    /// Standardize the rows of [B, D] with the batch moments per column,
    /// returning (x_hat, mean, biased variance). The gradient flows through
    /// the moments.
    pub fn normalize_rows(&self, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "normalize_rows: expected [B, D], got {s:?}"
            )));
        }
        let (b_n, d) = (s[0], s[1]);
        let x = self.values();
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= b_n as f64;
        }
        let mut var = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let t = v - m;
                *vv += t * t;
            }
        }
        for v in var.iter_mut() {
            *v /= b_n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; b_n * d];
        for (orow, xrow) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
            for (((o, &v), &m), &is) in orow.iter_mut().zip(xrow).zip(&mean).zip(&inv_std) {
                *o = (v - m) * is;
            }
        }
        let node = self.bound().map(|bd| {
            let p = bd.id;
            let xhat = Rc::new(out.clone());
            let inv_std = inv_std.clone();
            bd.tape.op_node(
                b_n * d,
                Box::new(move |g, buf| {
                    // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
                    let mut g_mean = vec![0.0; d];
                    let mut gx_mean = vec![0.0; d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for (((gm, gxm), &gv), &hv) in
                            g_mean.iter_mut().zip(gx_mean.iter_mut()).zip(grow).zip(hrow)
                        {
                            *gm += gv;
                            *gxm += gv * hv;
                        }
                    }
                    let inv_b = 1.0 / b_n as f64;
                    for v in g_mean.iter_mut() {
                        *v *= inv_b;
                    }
                    for v in gx_mean.iter_mut() {
                        *v *= inv_b;
                    }
                    let slot = buf.slot(p, b_n * d);
                    for ((srow, grow), hrow) in slot
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                    {
                        for ((((sv, &gv), &hv), (&gm, &gxm)), &is) in srow
                            .iter_mut()
                            .zip(grow)
                            .zip(hrow)
                            .zip(g_mean.iter().zip(&gx_mean))
                            .zip(&inv_std)
                        {
                            *sv += is * (gv - gm - hv * gxm);
                        }
                    }
                }),
            )
        });
        Ok((Tensor::with_node(vec![b_n, d], out, node), mean, var))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        let rank = parts[0].shape().len();
        check_axis(parts[0].shape(), axis)?;
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::dim(format!(
                    "concat: rank mismatch {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            for (d, (&e0, &e)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && e0 != e {
                    return Err(Error::dim(format!(
                        "concat: shapes {:?} and {:?} differ off axis {axis}",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let e = p.shape()[axis];
            let src = p.values();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * e * inner;
                out[dst_base..dst_base + e * inner]
                    .copy_from_slice(&src[src_base..src_base + e * inner]);
            }
            offset += e;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let node = match common_tape(&refs)? {
            None => None,
            Some(tape) => {
                let meta: Vec<(Option<NodeId>, usize, usize)> = {
                    let mut off = 0;
                    parts
                        .iter()
                        .map(|p| {
                            let e = p.shape()[axis];
                            let item = (parent(p), off, e);
                            off += e;
                            item
                        })
                        .collect()
                };
                let len = out.len();
                Some(tape.op_node(
                    len,
                    Box::new(move |g, buf| {
                        for &(pid, off, e) in &meta {
                            let Some(pid) = pid else { continue };
                            let slot = buf.slot(pid, outer * e * inner);
                            for o in 0..outer {
                                let src_base = (o * axis_total + off) * inner;
                                let dst_base = o * e * inner;
                                for i in 0..e * inner {
                                    slot[dst_base + i] += g[src_base + i];
                                }
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(shape, out, node))
    }

    /// Row lookup: self is [N, D], `idx` holds R rows of k indices into
    /// [0, N); the result is [R, k, D]. Gradients scatter-add into self.
    pub fn gather_rows(&self, idx: &[Vec<usize>]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("gather_rows: expected matrix, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows: empty index matrix".to_string()));
        }
        let k = idx[0].len();
        if k == 0 {
            return Err(Error::dim("gather_rows: empty index row".to_string()));
        }
        let mut flat = Vec::with_capacity(idx.len() * k);
        for row in idx {
            if row.len() != k {
                return Err(Error::dim(format!(
                    "gather_rows: ragged index rows ({} vs {k})",
                    row.len()
                )));
            }
            for &j in row {
                if j >= n {
                    return Err(Error::Index { index: j, len: n });
                }
                flat.push(j);
            }
        }
        let r = idx.len();
        let x = self.values();
        let mut out = vec![0.0; r * k * d];
        for (slot, &j) in flat.iter().enumerate() {
            out[slot * d..(slot + 1) * d].copy_from_slice(&x[j * d..(j + 1) * d]);
        }
        let node = self.bound().map(|b| {
            let p = b.id;
            let flat = flat.clone();
            b.tape.op_node(
                r * k * d,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, n * d);
                    for (s_i, &j) in flat.iter().enumerate() {
                        let g_row = &g[s_i * d..(s_i + 1) * d];
                        let dst = &mut slot[j * d..(j + 1) * d];
                        for (o, gi) in dst.iter_mut().zip(g_row) {
                            *o += gi;
                        }
                    }
                }),
            )
        });
        Ok(Tensor::with_node(vec![r, k, d], out, node))
    }

    /// Channel-wise max over `axis`, returning values and argmax offsets
    /// along the reduced axis. Ties resolve to the first index; the gradient
    /// routes only to the winning entries.
    pub fn reduce_max_axis(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        check_axis(self.shape(), axis)?;
        let (outer, red, inner) = axis_split(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * red * inner + i];
                let mut best_j = 0usize;
                for j in 1..red {
                    let v = x[(o * red + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        if let Some(b) = self.bound() {
            if b.tape.tracks_kinks() {
                for &a in &arg {
                    b.tape.record_kink(a as u32);
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        let node = self.bound().map(|b| {
            let p = b.id;
            let arg = arg.clone();
            let in_len = x.len();
            b.tape.op_node(
                outer * inner,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, in_len);
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = arg[o * inner + i];
                            slot[(o * red + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }),
            )
        });
        Ok((Tensor::with_node(shape, out, node), arg))
    }

    /// Per-edge contraction: kernel [N, k, M, C] with geometry [N, k, C]
    /// gives [N, k, M], out[i][j][m] = sum_c kernel[i][j][m][c] * geom[i][j][c].
    pub fn edge_inner_product(kernel: &Tensor, geometry: &Tensor) -> Result<Tensor> {
        let (ks, gs) = (kernel.shape(), geometry.shape());
        if ks.len() != 4 || gs.len() != 3 || ks[0] != gs[0] || ks[1] != gs[1] || ks[3] != gs[2] {
            return Err(Error::dim(format!(
                "edge_inner_product: kernel {ks:?} does not match geometry {gs:?}"
            )));
        }
        let (n, k, m, c) = (ks[0], ks[1], ks[2], ks[3]);
        let edges = n * k;
        let kv = kernel.values();
        let gv = geometry.values();
        let mut out = vec![0.0; edges * m];
        for e in 0..edges {
            let geo = &gv[e * c..(e + 1) * c];
            let out_e = &mut out[e * m..(e + 1) * m];
            for (mi, o) in out_e.iter_mut().enumerate() {
                let ker = &kv[(e * m + mi) * c..(e * m + mi + 1) * c];
                let mut acc = 0.0;
                for (a, b) in ker.iter().zip(geo) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        let node = match common_tape(&[kernel, geometry])? {
            None => None,
            Some(tape) => {
                let (pk, pg) = (parent(kernel), parent(geometry));
                let (kv, gv) = (kernel.values.clone(), geometry.values.clone());
                Some(tape.op_node(
                    edges * m,
                    Box::new(move |g, buf| {
                        if let Some(p) = pk {
                            let dk = buf.slot(p, edges * m * c);
                            for e in 0..edges {
                                let geo = &gv[e * c..(e + 1) * c];
                                for mi in 0..m {
                                    let go = g[e * m + mi];
                                    let dst = &mut dk[(e * m + mi) * c..(e * m + mi + 1) * c];
                                    for (d, b) in dst.iter_mut().zip(geo) {
                                        *d += go * b;
                                    }
                                }
                            }
                        }
                        if let Some(p) = pg {
                            let dg = buf.slot(p, edges * c);
                            for e in 0..edges {
                                let dst = &mut dg[e * c..(e + 1) * c];
                                for mi in 0..m {
                                    let go = g[e * m + mi];
                                    let ker = &kv[(e * m + mi) * c..(e * m + mi + 1) * c];
                                    for (d, a) in dst.iter_mut().zip(ker) {
                                        *d += go * a;
                                    }
                                }
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(vec![n, k, m], out, node))
    }

    /// Max-subtracted softmax over `axis`; slices sum to one.
    pub fn softmax(&self, axis: usize) -> Tensor {
        check_axis(self.shape(), axis).expect("softmax axis");
        let (outer, red, inner) = axis_split(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * red + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..red {
                    m = m.max(x[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..red {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..red {
                    out[at(j)] /= z;
                }
            }
        }
        let node = self.bound().map(|b| {
            let p = b.id;
            let y = Rc::new(out.clone());
            let len = out.len();
            b.tape.op_node(
                len,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, len);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * red + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..red {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..red {
                                slot[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }),
            )
        });
        Tensor::with_node(self.shape.clone(), out, node)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} has {} values, target {:?} wants {}",
                self.shape(),
                self.len(),
                shape,
                expect
            )));
        }
        let node = self.bound().map(|b| {
            let p = b.id;
            let len = self.len();
            b.tape.op_node(
                len,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, len);
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }),
            )
        });
        // row-major data is unchanged; share the buffer
        Ok(Tensor::with_shared(shape.to_vec(), self.values.clone(), node))
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let node = self.bound().map(|b| {
            let p = b.id;
            let len = self.len();
            b.tape.op_node(
                1,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, len);
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }),
            )
        });
        Tensor::with_node(vec![], vec![total], node)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reduce_sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis)?;
        let (outer, red, inner) = axis_split(self.shape(), axis);
        let x = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..red {
                let base = (o * red + j) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        let node = self.bound().map(|b| {
            let p = b.id;
            let in_len = x.len();
            b.tape.op_node(
                outer * inner,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, in_len);
                    for o in 0..outer {
                        for j in 0..red {
                            let base = (o * red + j) * inner;
                            for i in 0..inner {
                                slot[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }),
            )
        });
        Ok(Tensor::with_node(shape, out, node))
    }

    pub fn reduce_mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(self.shape(), axis)?;
        let red = self.shape()[axis] as f64;
        Ok(self.reduce_sum_axis(axis)?.scale(1.0 / red))
    }

    fn row_broadcast(
        &self,
        row: &Tensor,
        op: &str,
        fwd: impl Fn(f64, f64) -> f64,
        // (grad_out, x, r) -> (dx, dr)
        vjp: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || row.shape() != [s[1]] {
            return Err(Error::dim(format!(
                "{op}: expected [R, C] with row [C], got {:?} and {:?}",
                s,
                row.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.values();
        let rv = row.values();
        let mut out = vec![0.0; r * c];
        for (out_row, x_row) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
            for ((o, &xv), &rvj) in out_row.iter_mut().zip(x_row).zip(rv) {
                *o = fwd(xv, rvj);
            }
        }
        let node = match common_tape(&[self, row])? {
            None => None,
            Some(tape) => {
                let (px, pr) = (parent(self), parent(row));
                let (vx, vr) = (self.values.clone(), row.values.clone());
                Some(tape.op_node(
                    r * c,
                    Box::new(move |g, buf| {
                        // Two passes keep the borrow of each slot simple.
                        if let Some(p) = px {
                            let slot = buf.slot(p, r * c);
                            for ((srow, grow), xrow) in slot
                                .chunks_exact_mut(c)
                                .zip(g.chunks_exact(c))
                                .zip(vx.chunks_exact(c))
                            {
                                for (((sv, &gv), &xv), &rvj) in
                                    srow.iter_mut().zip(grow).zip(xrow).zip(vr.iter())
                                {
                                    *sv += vjp(gv, xv, rvj).0;
                                }
                            }
                        }
                        if let Some(p) = pr {
                            let slot = buf.slot(p, c);
                            for (grow, xrow) in g.chunks_exact(c).zip(vx.chunks_exact(c)) {
                                for (((sv, &gv), &xv), &rvj) in
                                    slot.iter_mut().zip(grow).zip(xrow).zip(vr.iter())
                                {
                                    *sv += vjp(gv, xv, rvj).1;
                                }
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(vec![r, c], out, node))
    }

    /// [R, C] + [C], broadcast over rows.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "add_row", |x, r| x + r, |g, _, _| (g, g))
    }

    pub fn sub_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "sub_row", |x, r| x - r, |g, _, _| (g, -g))
    }

    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(row, "mul_row", |x, r| x * r, |g, x, r| (g * r, g * x))
    }

    pub fn div_row(&self, row: &Tensor) -> Result<Tensor> {
        self.row_broadcast(
            row,
            "div_row",
            |x, r| x / r,
            |g, x, r| (g / r, -g * x / (r * r)),
        )
    }

    /// [R, C] - [R], broadcast over columns.
    pub fn sub_col(&self, col: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || col.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "sub_col: expected [R, C] with col [R], got {:?} and {:?}",
                s,
                col.shape()
            )));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.values();
        let cv = col.values();
        let mut out = vec![0.0; r * c];
        for ((out_row, x_row), &ci) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)).zip(cv) {
            for (o, &xv) in out_row.iter_mut().zip(x_row) {
                *o = xv - ci;
            }
        }
        let node = match common_tape(&[self, col])? {
            None => None,
            Some(tape) => {
                let (px, pc) = (parent(self), parent(col));
                Some(tape.op_node(
                    r * c,
                    Box::new(move |g, buf| {
                        if let Some(p) = px {
                            let slot = buf.slot(p, r * c);
                            for (s, gi) in slot.iter_mut().zip(g) {
                                *s += gi;
                            }
                        }
                        if let Some(p) = pc {
                            let slot = buf.slot(p, r);
                            for (s, grow) in slot.iter_mut().zip(g.chunks_exact(c)) {
                                *s -= grow.iter().sum::<f64>();
                            }
                        }
                    }),
                ))
            }
        };
        Ok(Tensor::with_node(vec![r, c], out, node))
    }

    /// Select one entry per row of [B, L]: out[b] = self[b, picks[b]].
    pub fn pick_rows(&self, picks: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || picks.len() != s[0] {
            return Err(Error::dim(format!(
                "pick_rows: shape {:?} with {} picks",
                s,
                picks.len()
            )));
        }
        let (b_n, l) = (s[0], s[1]);
        for &p in picks {
            if p >= l {
                return Err(Error::Index { index: p, len: l });
            }
        }
        let x = self.values();
        let out: Vec<f64> = picks.iter().enumerate().map(|(b, &p)| x[b * l + p]).collect();
        let node = self.bound().map(|bd| {
            let pid = bd.id;
            let picks = picks.to_vec();
            bd.tape.op_node(
                b_n,
                Box::new(move |g, buf| {
                    let slot = buf.slot(pid, b_n * l);
                    for (b, &p) in picks.iter().enumerate() {
                        slot[b * l + p] += g[b];
                    }
                }),
            )
        });
        Ok(Tensor::with_node(vec![b_n], out, node))
    }

    /// Repeat a trailing extent of 1: [..., 1] -> [..., m].
    pub fn repeat_last(&self, m: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.last() != Some(&1) || m == 0 {
            return Err(Error::dim(format!(
                "repeat_last: shape {s:?} must end in 1, target width {m}"
            )));
        }
        let rows = self.len();
        let x = self.values();
        let mut out = vec![0.0; rows * m];
        for i in 0..rows {
            out[i * m..(i + 1) * m].fill(x[i]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = m;
        let node = self.bound().map(|b| {
            let p = b.id;
            b.tape.op_node(
                rows * m,
                Box::new(move |g, buf| {
                    let slot = buf.slot(p, rows);
                    for i in 0..rows {
                        let mut acc = 0.0;
                        for gj in &g[i * m..(i + 1) * m] {
                            acc += gj;
                        }
                        slot[i] += acc;
                    }
                }),
            )
        });
        Ok(Tensor::with_node(shape, out, node))
    }
}
