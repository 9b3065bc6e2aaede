//! Differentiable operations on [`Var`].
//!
//! Layout conventions: sequences are time-major `[T, B, d]`; linear weights
//! are stored `[in, out]` so that `y = x · W + b`.

use rand::Rng;

use super::{BackCtx, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Float, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn same_tape<T: Float>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars belong to different tapes");
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

/// tanh-approximated GeLU and its derivative.
#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh_fast())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh_fast();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh_fast(),
            Activation::Gelu => gelu(x),
        }
    }
}

impl<T: Float> Tape<T> {
    /// Concatenates vars along the leading axis.
    pub fn concat_leading<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor<T>> = vals.iter().map(|v| &**v).collect();
            Tensor::concat_leading(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = ids.iter().any(|&i| self.requires_grad(i));
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let mut off = 0;
            for &id in &ids {
                let n = ctx.value(id).len();
                if let Some(dst) = grads.get(id) {
                    for (d, &s) in dst.iter_mut().zip(&g[off..off + n]) {
                        *d += s;
                    }
                }
                off += n;
            }
        });
        Ok(self.push(out, rg, Some(bw)))
    }

    /// Gathers rows of `weight` `[V, d]` for `ids`, producing `[lead.., d]`.
    pub fn embedding<'t>(
        &'t self,
        weight: Var<'t, T>,
        ids: &[usize],
        lead: &[usize],
    ) -> Result<Var<'t, T>> {
        let (d, out) = {
            let w = weight.value();
            if w.shape().len() != 2 {
                return Err(Error::Shape(format!("embedding weight must be 2-d, got {:?}", w.shape())));
            }
            let (vocab, d) = (w.shape()[0], w.shape()[1]);
            if lead.iter().product::<usize>() != ids.len() {
                return Err(Error::Shape(format!("{} ids cannot form leading shape {:?}", ids.len(), lead)));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= vocab {
                    return Err(Error::TargetOutOfRange { id: i, vocab });
                }
                data.extend_from_slice(&w.data()[i * d..(i + 1) * d]);
            }
            let mut shape = lead.to_vec();
            shape.push(d);
            (d, Tensor::from_parts(shape, data))
        };
        let wid = weight.id;
        let ids = ids.to_vec();
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dw) = grads.get(wid) {
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &b) in dw[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
        });
        Ok(self.push(out, weight.requires_grad(), Some(bw)))
    }

    /// Recurrence of a standard LSTM over pre-computed input projections.
    ///
    /// `xg` is `[T, B, 4h]` holding `x·W_ih + b` with gate blocks ordered
    /// input, forget, cell, output. Returns the hidden sequence `[T, B, h]`
    /// and the final `(h, c)` as detached tensors.
    pub fn lstm_recurrence<'t>(
        &'t self,
        xg: Var<'t, T>,
        w_hh: Var<'t, T>,
        h0: &Tensor<T>,
        c0: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Tensor<T>, Tensor<T>)> {
        same_tape(&xg, &w_hh);
        let (tlen, b, h) = {
            let xs = xg.value();
            let ws = w_hh.value();
            let s = xs.shape();
            if s.len() != 3 || !s[2].is_multiple_of(4) {
                return Err(Error::Shape(format!("lstm gate input must be [T,B,4h], got {:?}", s)));
            }
            let h = s[2] / 4;
            if ws.shape() != [h, 4 * h] {
                return Err(Error::Shape(format!(
                    "recurrent weight must be [{h},{}], got {:?}",
                    4 * h,
                    ws.shape()
                )));
            }
            if h0.shape() != [s[1], h] || c0.shape() != [s[1], h] {
                return Err(Error::Shape(format!(
                    "lstm state must be [{},{h}], got h {:?} c {:?}",
                    s[1],
                    h0.shape(),
                    c0.shape()
                )));
            }
            (s[0], s[1], h)
        };
        let bh = b * h;
        let mut acts = vec![T::ZERO; tlen * b * 4 * h];
        // cs[t] holds c_{t-1}; cs[0] = c0.
        let mut cs = vec![T::ZERO; (tlen + 1) * bh];
        let mut hs = vec![T::ZERO; tlen * bh];
        cs[..bh].copy_from_slice(c0.data());
        {
            let xv = xg.value();
            let wv = w_hh.value();
            let mut gates = vec![T::ZERO; b * 4 * h];
            for t in 0..tlen {
                gates.copy_from_slice(&xv.data()[t * b * 4 * h..(t + 1) * b * 4 * h]);
                let hprev: &[T] = if t == 0 { h0.data() } else { &hs[(t - 1) * bh..t * bh] };
                gemm_into(b, h, 4 * h, hprev, false, wv.data(), false, &mut gates, true);
                let act = &mut acts[t * b * 4 * h..(t + 1) * b * 4 * h];
                let (cprev_all, cnext_all) = cs.split_at_mut((t + 1) * bh);
                let cprev = &cprev_all[t * bh..];
                let cnext = &mut cnext_all[..bh];
                let hout = &mut hs[t * bh..(t + 1) * bh];
                for r in 0..b {
                    let g = &gates[r * 4 * h..(r + 1) * 4 * h];
                    let a = &mut act[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let i = g[j].sigmoid();
                        let f = g[h + j].sigmoid();
                        let gg = g[2 * h + j].tanh_fast();
                        let o = g[3 * h + j].sigmoid();
                        a[j] = i;
                        a[h + j] = f;
                        a[2 * h + j] = gg;
                        a[3 * h + j] = o;
                        let c = f * cprev[r * h + j] + i * gg;
                        cnext[r * h + j] = c;
                        hout[r * h + j] = o * c.tanh_fast();
                    }
                }
            }
        }
        let h_last = if tlen == 0 {
            h0.clone()
        } else {
            Tensor::from_parts(vec![b, h], hs[(tlen - 1) * bh..].to_vec())
        };
        let c_last = Tensor::from_parts(vec![b, h], cs[tlen * bh..].to_vec());
        let out = Tensor::from_parts(vec![tlen, b, h], hs.clone());
        let rg = xg.requires_grad() || w_hh.requires_grad();
        let (xid, wid) = (xg.id, w_hh.id);
        let h0v = h0.data().to_vec();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, gy: &[T], grads: &mut Grads<'_, T>| {
            let w = ctx.value(wid).data();
            let mut dgates = vec![T::ZERO; tlen * b * 4 * h];
            let mut dh_next = vec![T::ZERO; bh];
            let mut dc_next = vec![T::ZERO; bh];
            for t in (0..tlen).rev() {
                let act = &acts[t * b * 4 * h..(t + 1) * b * 4 * h];
                let cprev = &cs[t * bh..(t + 1) * bh];
                let ccur = &cs[(t + 1) * bh..(t + 2) * bh];
                let dg = &mut dgates[t * b * 4 * h..(t + 1) * b * 4 * h];
                for r in 0..b {
                    for j in 0..h {
                        let k = r * h + j;
                        let a = &act[r * 4 * h..];
                        let (i, f, gg, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let dh = gy[t * bh + k] + dh_next[k];
                        let tc = ccur[k].tanh_fast();
                        let d_o = dh * tc;
                        let dc = dc_next[k] + dh * o * (T::ONE - tc * tc);
                        let di = dc * gg;
                        let dgg = dc * i;
                        let df = dc * cprev[k];
                        dc_next[k] = dc * f;
                        let d = &mut dg[r * 4 * h..(r + 1) * 4 * h];
                        d[j] = di * i * (T::ONE - i);
                        d[h + j] = df * f * (T::ONE - f);
                        d[2 * h + j] = dgg * (T::ONE - gg * gg);
                        d[3 * h + j] = d_o * o * (T::ONE - o);
                    }
                }
                gemm_into(b, 4 * h, h, dg, false, w, true, &mut dh_next, false);
            }
            if let Some(dx) = grads.get(xid) {
                for (a, &g) in dx.iter_mut().zip(&dgates) {
                    *a += g;
                }
            }
            if let Some(dw) = grads.get(wid) {
                // h_{t-1} for every t, stacked [T*B, h]
                let mut hprev = Vec::with_capacity(tlen * bh);
                hprev.extend_from_slice(&h0v);
                hprev.extend_from_slice(&hs[..tlen.saturating_sub(1) * bh]);
                gemm_into(h, tlen * b, 4 * h, &hprev, true, &dgates, false, dw, true);
            }
        });
        Ok((self.push(out, rg, Some(bw)), h_last, c_last))
    }

    /// Forget/output pooling: `c_t = f_t⊙c_{t-1} + (1-f_t)⊙z_t`, `h_t = o_t⊙c_t`.
    ///
    /// Returns the hidden sequence and the detached final cell state.
    pub fn fo_pool<'t>(
        &'t self,
        z: Var<'t, T>,
        f: Var<'t, T>,
        o: Var<'t, T>,
        c0: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        same_tape(&z, &f);
        same_tape(&z, &o);
        let shape = z.shape();
        if shape.len() != 3 || f.shape() != shape || o.shape() != shape {
            return Err(Error::Shape(format!(
                "fo-pool needs equal [T,B,d] gates, got z {:?} f {:?} o {:?}",
                shape,
                f.shape(),
                o.shape()
            )));
        }
        let (tlen, bd) = (shape[0], shape[1] * shape[2]);
        if c0.shape() != [shape[1], shape[2]] {
            return Err(Error::Shape(format!(
                "fo-pool state must be {:?}, got {:?}",
                &shape[1..],
                c0.shape()
            )));
        }
        let mut cs = vec![T::ZERO; (tlen + 1) * bd];
        cs[..bd].copy_from_slice(c0.data());
        let mut hs = vec![T::ZERO; tlen * bd];
        {
            let (zv, fv, ov) = (z.value(), f.value(), o.value());
            let (zv, fv, ov) = (zv.data(), fv.data(), ov.data());
            for t in 0..tlen {
                for k in 0..bd {
                    let i = t * bd + k;
                    let c = fv[i] * cs[i] + (T::ONE - fv[i]) * zv[i];
                    cs[i + bd] = c;
                    hs[i] = ov[i] * c;
                }
            }
        }
        let c_last = Tensor::from_parts(vec![shape[1], shape[2]], cs[tlen * bd..].to_vec());
        let out = Tensor::from_parts(shape, hs);
        let rg = z.requires_grad() || f.requires_grad() || o.requires_grad();
        let (zid, fid, oid) = (z.id, f.id, o.id);
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, gy: &[T], grads: &mut Grads<'_, T>| {
            let zv = ctx.value(zid).data();
            let fv = ctx.value(fid).data();
            let ov = ctx.value(oid).data();
            let n = tlen * bd;
            let mut dz = vec![T::ZERO; n];
            let mut df = vec![T::ZERO; n];
            let mut d_o = vec![T::ZERO; n];
            let mut dc_next = vec![T::ZERO; bd];
            for t in (0..tlen).rev() {
                for k in 0..bd {
                    let i = t * bd + k;
                    let c = cs[i + bd];
                    d_o[i] = gy[i] * c;
                    let dc = dc_next[k] + gy[i] * ov[i];
                    dz[i] = dc * (T::ONE - fv[i]);
                    df[i] = dc * (cs[i] - zv[i]);
                    dc_next[k] = dc * fv[i];
                }
            }
            for (id, src) in [(zid, &dz), (fid, &df), (oid, &d_o)] {
                if let Some(dst) = grads.get(id) {
                    for (a, &b) in dst.iter_mut().zip(src.iter()) {
                        *a += b;
                    }
                }
            }
        });
        Ok((self.push(out, rg, Some(bw)), c_last))
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn unary(
        self,
        f: impl Fn(T) -> T,
        // derivative expressed through input x and output y
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let out = {
            let v = self.value();
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        let xid = self.id;
        let rg = self.requires_grad();
        let tape = self.tape;
        let yid = tape.len();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let x = ctx.value(xid).data();
            let y = ctx.value(yid).data();
            if let Some(dx) = grads.get(xid) {
                for i in 0..dx.len() {
                    dx[i] += g[i] * df(x[i], y[i]);
                }
            }
        });
        let v = tape.push(out, rg, Some(bw));
        debug_assert_eq!(v.id, yid);
        v
    }

    pub fn activation(self, kind: Activation) -> Var<'t, T> {
        match kind {
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
            Activation::Gelu => self.gelu(),
        }
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(|x| x.sigmoid(), |_, y| y * (T::ONE - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh_fast(), |_, y| T::ONE - y * y)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// Elementwise binary op where `other`'s shape is a suffix of `self`'s
    /// (equal shapes, or a trailing vector broadcast over leading axes).
    fn broadcast_binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
        name: &str,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let out = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(Error::Shape(format!("{name}: cannot broadcast {:?} onto {:?}", sb, sa)));
            }
            let inner = b.len().max(1);
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % inner]))
                .collect();
            Tensor::from_parts(sa.to_vec(), data)
        };
        let (aid, bid) = (self.id, other.id);
        let rg = self.requires_grad() || other.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let a = ctx.value(aid).data();
            let b = ctx.value(bid).data();
            let inner = b.len().max(1);
            if let Some(dx) = grads.get(aid) {
                for i in 0..dx.len() {
                    dx[i] += g[i] * da(a[i], b[i % inner]);
                }
            }
            if let Some(dy) = grads.get(bid) {
                for i in 0..g.len() {
                    dy[i % inner] += g[i] * db(a[i], b[i % inner]);
                }
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_binary(other, |a, b| a + b, |_, _| T::ONE, |_, _| T::ONE, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_binary(other, |a, b| a - b, |_, _| T::ONE, |_, _| -T::ONE, "sub")
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_binary(other, |a, b| a * b, |_, b| b, |a, _| a, "mul")
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        let xid = self.id;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        });
        self.tape.push(out, self.requires_grad(), Some(bw))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.to_tensor().reshape(shape)?;
        let xid = self.id;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                for (a, &b) in dx.iter_mut().zip(g) {
                    *a += b;
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_leading(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (out, row) = {
            let v = self.value();
            let s = v.shape();
            if s.is_empty() || start > end || end > s[0] {
                return Err(Error::Shape(format!("slice {start}..{end} out of range for {:?}", s)));
            }
            (v.slice_leading(start, end), s[1..].iter().product::<usize>())
        };
        let xid = self.id;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                for (a, &b) in dx[start * row..end * row].iter_mut().zip(g) {
                    *a += b;
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let (out, w) = {
            let v = self.value();
            let s = v.shape();
            let w = v.last_dim();
            if s.is_empty() || start > end || end > w {
                return Err(Error::Shape(format!("last-axis slice {start}..{end} out of range for {:?}", s)));
            }
            let n = end - start;
            let mut data = Vec::with_capacity(v.len() / w * n);
            for row in v.data().chunks(w) {
                data.extend_from_slice(&row[start..end]);
            }
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::from_parts(shape, data), w)
        };
        let xid = self.id;
        let n = end - start;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                for (r, gr) in g.chunks(n).enumerate() {
                    for (a, &b) in dx[r * w + start..r * w + end].iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Sums `n` contiguous chunks of the last axis: `[.., n*w] -> [.., w]`.
    pub fn chunk_sum(self, n: usize) -> Result<Var<'t, T>> {
        let (out, w) = {
            let v = self.value();
            let full = v.last_dim();
            if n == 0 || !full.is_multiple_of(n) {
                return Err(Error::Shape(format!("last extent {full} not divisible into {n} chunks")));
            }
            let w = full / n;
            let mut data = Vec::with_capacity(v.len() / n);
            for row in v.data().chunks(full) {
                let mut acc = row[..w].to_vec();
                for c in 1..n {
                    for (a, &b) in acc.iter_mut().zip(&row[c * w..(c + 1) * w]) {
                        *a += b;
                    }
                }
                data.extend(acc);
            }
            let mut shape = v.shape().to_vec();
            *shape.last_mut().unwrap() = w;
            (Tensor::from_parts(shape, data), w)
        };
        let xid = self.id;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                for (r, gr) in g.chunks(w).enumerate() {
                    for c in 0..n {
                        let base = r * n * w + c * w;
                        for (a, &b) in dx[base..base + w].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let plan = {
            let (a, b) = (self.value(), other.value());
            MatmulPlan::new(a.shape(), b.shape())?
        };
        let out = {
            let (a, b) = (self.value(), other.value());
            let mut out = vec![T::ZERO; plan.out_len()];
            plan.forward(a.data(), b.data(), &mut out);
            Tensor::from_parts(plan.out_shape.clone(), out)
        };
        let (aid, bid) = (self.id, other.id);
        let rg = self.requires_grad() || other.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let a = ctx.value(aid).data();
            let b = ctx.value(bid).data();
            if let Some(da) = grads.get(aid) {
                plan.backward_a(g, b, da);
            }
            if let Some(db) = grads.get(bid) {
                plan.backward_b(g, a, db);
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }

    /// `x · W (+ b)` with `W: [k, n]` applied to the last axis of `x`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.linear_impl(weight, bias, false)
    }

    /// `x · Wᵀ (+ b)` with `W: [n, k]`; used for a head tied to an embedding.
    pub fn linear_transposed(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.linear_impl(weight, bias, true)
    }

    fn linear_impl(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, wt: bool) -> Result<Var<'t, T>> {
        same_tape(&self, &weight);
        let (rows, k, n, out) = {
            let (x, w) = (self.value(), weight.value());
            let ws = w.shape();
            if ws.len() != 2 {
                return Err(Error::Shape(format!("linear weight must be 2-d, got {:?}", ws)));
            }
            let (wk, wn) = if wt { (ws[1], ws[0]) } else { (ws[0], ws[1]) };
            let k = x.last_dim();
            if x.shape().is_empty() || k != wk {
                return Err(Error::Shape(format!(
                    "linear: input {:?} does not match weight {:?}",
                    x.shape(),
                    ws
                )));
            }
            let rows = rows_of(x.shape());
            let mut out = vec![T::ZERO; rows * wn];
            if let Some(b) = bias {
                let bv = b.value();
                if bv.shape() != [wn] {
                    return Err(Error::Shape(format!("linear bias must be [{wn}], got {:?}", bv.shape())));
                }
                for row in out.chunks_mut(wn) {
                    row.copy_from_slice(bv.data());
                }
            }
            gemm_into(rows, k, wn, x.data(), false, w.data(), wt, &mut out, bias.is_some());
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = wn;
            (rows, k, wn, Tensor::from_parts(shape, out))
        };
        let (xid, wid, bid) = (self.id, weight.id, bias.map(|b| b.id));
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let x = ctx.value(xid).data();
            let w = ctx.value(wid).data();
            if let Some(dx) = grads.get(xid) {
                // dx = g · Wᵀ  (or g · W when stored transposed)
                gemm_into(rows, n, k, g, false, w, !wt, dx, true);
            }
            if let Some(dw) = grads.get(wid) {
                if wt {
                    gemm_into(n, rows, k, g, true, x, false, dw, true);
                } else {
                    gemm_into(k, rows, n, x, true, g, false, dw, true);
                }
            }
            if let Some(bid) = bid {
                if let Some(db) = grads.get(bid) {
                    for row in g.chunks(n) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let (outer, len, inner, out) = {
            let v = self.value();
            let s = v.shape();
            if axis >= s.len() {
                return Err(Error::Shape(format!("softmax axis {axis} invalid for {:?}", s)));
            }
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = s[axis];
            let x = v.data();
            let mut y = vec![T::ZERO; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m = x[base];
                    for l in 1..len {
                        m = m.max(x[base + l * inner]);
                    }
                    let mut z = T::ZERO;
                    for l in 0..len {
                        let e = (x[base + l * inner] - m).exp();
                        y[base + l * inner] = e;
                        z += e;
                    }
                    for l in 0..len {
                        y[base + l * inner] /= z;
                    }
                }
            }
            (outer, len, inner, Tensor::from_parts(s.to_vec(), y))
        };
        let xid = self.id;
        let yid = self.tape.len();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let y = ctx.value(yid).data();
            if let Some(dx) = grads.get(xid) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for l in 0..len {
                            dot += y[base + l * inner] * g[base + l * inner];
                        }
                        for l in 0..len {
                            let k = base + l * inner;
                            dx[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Row softmax over `[B, P, N]` scores where row `i` sees columns
    /// `j < prefix + i + 1`; hidden columns get exactly zero weight.
    pub fn causal_softmax(self, prefix: usize) -> Result<Var<'t, T>> {
        let (p, n, out) = {
            let v = self.value();
            let s = v.shape();
            if s.len() != 3 {
                return Err(Error::Shape(format!("causal softmax expects [B,P,N], got {:?}", s)));
            }
            let (p, n) = (s[1], s[2]);
            let x = v.data();
            let mut y = vec![T::ZERO; x.len()];
            for (r, (xr, yr)) in x.chunks(n).zip(y.chunks_mut(n)).enumerate() {
                let vis = (prefix + r % p + 1).min(n);
                let m = xr[..vis].iter().copied().fold(xr[0], T::max);
                let mut z = T::ZERO;
                for j in 0..vis {
                    let e = (xr[j] - m).exp();
                    yr[j] = e;
                    z += e;
                }
                for yj in &mut yr[..vis] {
                    *yj /= z;
                }
            }
            (p, n, Tensor::from_parts(s.to_vec(), y))
        };
        let xid = self.id;
        let yid = self.tape.len();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let y = ctx.value(yid).data();
            if let Some(dx) = grads.get(xid) {
                for r in 0..y.len() / n {
                    let vis = (prefix + r % p + 1).min(n);
                    let base = r * n;
                    let mut dot = T::ZERO;
                    for j in 0..vis {
                        dot += y[base + j] * g[base + j];
                    }
                    for j in 0..vis {
                        dx[base + j] += y[base + j] * (g[base + j] - dot);
                    }
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Layer normalization over the last axis followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        same_tape(&self, &gamma);
        let (d, xhat, rstd, out) = {
            let (x, ga, be) = (self.value(), gamma.value(), beta.value());
            let d = x.last_dim();
            if x.shape().is_empty() || ga.shape() != [d] || be.shape() != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    ga.shape(),
                    be.shape()
                )));
            }
            let eps = T::from_f64(eps);
            let dn = T::from_f64(d as f64);
            let rows = x.len() / d;
            let mut xhat = vec![T::ZERO; x.len()];
            let mut rstd = vec![T::ZERO; rows];
            let mut y = vec![T::ZERO; x.len()];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mu = xr.iter().copied().sum::<T>() / dn;
                let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                let rs = T::ONE / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mu) * rs;
                    xhat[r * d + j] = h;
                    y[r * d + j] = ga.data()[j] * h + be.data()[j];
                }
            }
            (d, xhat, rstd, Tensor::from_parts(x.shape().to_vec(), y))
        };
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let ga = ctx.value(gid).data();
            let dn = T::from_f64(d as f64);
            if let Some(dx) = grads.get(xid) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::ZERO;
                    let mut s2 = T::ZERO;
                    for j in 0..d {
                        let dh = gr[j] * ga[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * ga[j];
                        dx[r * d + j] += rs / dn * (dn * dh - s1 - hr[j] * s2);
                    }
                }
            }
            if let Some(dg) = grads.get(gid) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(db) = grads.get(bid) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        db[j] += gr[j];
                    }
                }
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }

    /// Inverted dropout. Identity (the same var) when `!train` or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, train: bool, rng: &mut R) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let (mask, out) = {
            let v = self.value();
            let mask: Vec<T> = (0..v.len())
                .map(|_| if rng.random::<f64>() < p { T::ZERO } else { keep })
                .collect();
            let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (mask, Tensor::from_parts(v.shape().to_vec(), data))
        };
        let xid = self.id;
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                for i in 0..dx.len() {
                    dx[i] += g[i] * mask[i];
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`self`) over
    /// the last axis, in nats.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let (v, probs, out) = {
            let x = self.value();
            let v = x.last_dim();
            if x.shape().is_empty() {
                return Err(Error::Shape("cross entropy on a scalar".into()));
            }
            let rows = x.len() / v;
            if targets.len() != rows {
                return Err(Error::Shape(format!("{} targets for {} logit rows", targets.len(), rows)));
            }
            let mut probs = vec![T::ZERO; x.len()];
            let mut total = 0.0f64;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::TargetOutOfRange { id: t, vocab: v });
                }
                let xr = &x.data()[r * v..(r + 1) * v];
                let m = xr.iter().copied().fold(xr[0], T::max);
                let mut z = T::ZERO;
                for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(xr) {
                    *p = (l - m).exp();
                    z += *p;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p /= z;
                }
                total += (z.ln() + m - xr[t]).to_f64();
            }
            (v, probs, Tensor::scalar(T::from_f64(total / rows.max(1) as f64)))
        };
        let xid = self.id;
        let targets = targets.to_vec();
        let bw = Box::new(move |_: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dx) = grads.get(xid) {
                let scale = g[0] / T::from_f64(targets.len().max(1) as f64);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let one = if j == t { T::ONE } else { T::ZERO };
                        dx[r * v + j] += scale * (probs[r * v + j] - one);
                    }
                }
            }
        });
        Ok(self.tape.push(out, self.requires_grad(), Some(bw)))
    }

    /// Per-batch attention scores: `q: [P,B,d]`, `k: [N,B,d]` to
    /// `[B,P,N]` with entries `scale · q_i·k_j`.
    pub fn attn_scores(self, keys: Var<'t, T>, scale: f64) -> Result<Var<'t, T>> {
        same_tape(&self, &keys);
        let (p, n, b, d, out) = {
            let (q, k) = (self.value(), keys.value());
            let (qs, ks) = (q.shape(), k.shape());
            if qs.len() != 3 || ks.len() != 3 || qs[1..] != ks[1..] {
                return Err(Error::Shape(format!("attention scores: q {:?} vs k {:?}", qs, ks)));
            }
            let (p, b, d, n) = (qs[0], qs[1], qs[2], ks[0]);
            let mut out = vec![T::ZERO; b * p * n];
            let s = T::from_f64(scale);
            for bi in 0..b {
                // SAFETY: strided views into contiguous [P,B,d] / [N,B,d] / [B,P,N].
                unsafe {
                    T::gemm(
                        p,
                        d,
                        n,
                        s,
                        q.data().as_ptr().add(bi * d),
                        (b * d) as isize,
                        1,
                        k.data().as_ptr().add(bi * d),
                        1,
                        (b * d) as isize,
                        T::ZERO,
                        out.as_mut_ptr().add(bi * p * n),
                        n as isize,
                        1,
                    );
                }
            }
            (p, n, b, d, Tensor::from_parts(vec![b, p, n], out))
        };
        let (qid, kid) = (self.id, keys.id);
        let rg = self.requires_grad() || keys.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let s = T::from_f64(scale);
            let q = ctx.value(qid).data();
            let k = ctx.value(kid).data();
            if let Some(dq) = grads.get(qid) {
                for bi in 0..b {
                    // dQ_b += s · G_b · K_b
                    unsafe {
                        T::gemm(
                            p,
                            n,
                            d,
                            s,
                            g.as_ptr().add(bi * p * n),
                            n as isize,
                            1,
                            k.as_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                            T::ONE,
                            dq.as_mut_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(dk) = grads.get(kid) {
                for bi in 0..b {
                    // dK_b += s · G_bᵀ · Q_b
                    unsafe {
                        T::gemm(
                            n,
                            p,
                            d,
                            s,
                            g.as_ptr().add(bi * p * n),
                            1,
                            n as isize,
                            q.as_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                            T::ONE,
                            dk.as_mut_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                        );
                    }
                }
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }

    /// Weighted sum of values: `w: [B,P,N]`, `v: [N,B,d]` to `[P,B,d]`.
    pub fn attn_mix(self, values: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &values);
        let (p, n, b, d, out) = {
            let (w, v) = (self.value(), values.value());
            let (ws, vs) = (w.shape(), v.shape());
            if ws.len() != 3 || vs.len() != 3 || ws[0] != vs[1] || ws[2] != vs[0] {
                return Err(Error::Shape(format!("attention mix: weights {:?} vs values {:?}", ws, vs)));
            }
            let (b, p, n, d) = (ws[0], ws[1], ws[2], vs[2]);
            let mut out = vec![T::ZERO; p * b * d];
            for bi in 0..b {
                unsafe {
                    T::gemm(
                        p,
                        n,
                        d,
                        T::ONE,
                        w.data().as_ptr().add(bi * p * n),
                        n as isize,
                        1,
                        v.data().as_ptr().add(bi * d),
                        (b * d) as isize,
                        1,
                        T::ZERO,
                        out.as_mut_ptr().add(bi * d),
                        (b * d) as isize,
                        1,
                    );
                }
            }
            (p, n, b, d, Tensor::from_parts(vec![p, b, d], out))
        };
        let (wid, vid) = (self.id, values.id);
        let rg = self.requires_grad() || values.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let w = ctx.value(wid).data();
            let v = ctx.value(vid).data();
            if let Some(dw) = grads.get(wid) {
                for bi in 0..b {
                    // dW_b += G_b · V_bᵀ
                    unsafe {
                        T::gemm(
                            p,
                            d,
                            n,
                            T::ONE,
                            g.as_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                            v.as_ptr().add(bi * d),
                            1,
                            (b * d) as isize,
                            T::ONE,
                            dw.as_mut_ptr().add(bi * p * n),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(dv) = grads.get(vid) {
                for bi in 0..b {
                    // dV_b += W_bᵀ · G_b
                    unsafe {
                        T::gemm(
                            n,
                            p,
                            d,
                            T::ONE,
                            w.as_ptr().add(bi * p * n),
                            1,
                            n as isize,
                            g.as_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                            T::ONE,
                            dv.as_mut_ptr().add(bi * d),
                            (b * d) as isize,
                            1,
                        );
                    }
                }
            }
        });
        Ok(self.tape.push(out, rg, Some(bw)))
    }
}

/// Shape bookkeeping for batched matmul with numpy-style batch broadcasting.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a batch index, b batch index) for each output batch
    pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs >=2-d operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?} ({k} vs {k2})",
                sa, sb
            )));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let nd = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(nd);
        for i in 0..nd {
            let (x, y) = (pa[i], pb[i]);
            if x != y && x != 1 && y != 1 {
                return Err(Error::Shape(format!("matmul batch extents not broadcastable: {:?} vs {:?}", sa, sb)));
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let mut pairs = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        for _ in 0..total {
            let (mut ia, mut ib) = (0, 0);
            for i in 0..nd {
                ia = ia * pa[i] + if pa[i] == 1 { 0 } else { idx[i] };
                ib = ib * pb[i] + if pb[i] == 1 { 0 } else { idx[i] };
            }
            pairs.push((ia, ib));
            for i in (0..nd).rev() {
                idx[i] += 1;
                if idx[i] < batch[i] {
                    break;
                }
                idx[i] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulPlan { m, k, n, out_shape, pairs })
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn forward<T: Float>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm_into(
                m,
                k,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                false,
                &b[ib * k * n..(ib + 1) * k * n],
                false,
                &mut out[o * m * n..(o + 1) * m * n],
                false,
            );
        }
    }

    fn backward_a<T: Float>(&self, g: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm_into(
                m,
                n,
                k,
                &g[o * m * n..(o + 1) * m * n],
                false,
                &b[ib * k * n..(ib + 1) * k * n],
                true,
                &mut da[ia * m * k..(ia + 1) * m * k],
                true,
            );
        }
    }

    fn backward_b<T: Float>(&self, g: &[T], a: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for (o, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm_into(
                k,
                m,
                n,
                &a[ia * m * k..(ia + 1) * m * k],
                true,
                &g[o * m * n..(o + 1) * m * n],
                false,
                &mut db[ib * k * n..(ib + 1) * k * n],
                true,
            );
        }
    }
}
