//! Fused QRNN kernels: the causal convolution as one node over contiguous
//! shifted views, and gate activation plus fo-pooling as another.

use super::{BackCtx, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Float, Tensor};

impl<T: Float> Tape<T> {
    /// `y_t = b + Σ_k x_{t-k} · W_k` for `x` `[T, B, d_in]`, `weight`
    /// `[w, d_in, d_out]` and `bias` `[d_out]`. Inputs before the window are
    /// read from `tail` `[w-1, B, d_in]`, which is not differentiated.
    pub fn causal_conv<'t>(
        &'t self,
        x: Var<'t, T>,
        tail: &Tensor<T>,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let xs = x.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || ws[0] == 0 {
            return Err(Error::Shape(format!("causal conv: input {:?} vs weight {:?}", xs, ws)));
        }
        let (tlen, b, din, w, dout) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        if tail.shape() != [w - 1, b, din] {
            return Err(Error::Shape(format!("causal conv tail must be [{},{b},{din}], got {:?}", w - 1, tail.shape())));
        }
        if bias.shape() != [dout] {
            return Err(Error::Shape(format!("causal conv bias must be [{dout}], got {:?}", bias.shape())));
        }
        let rows = tlen * b;
        let lead = (w - 1) * b * din;
        let mut padded = Vec::with_capacity(lead + rows * din);
        padded.extend_from_slice(tail.data());
        padded.extend_from_slice(x.value().data());
        let mut out = vec![T::ZERO; rows * dout];
        {
            let wv = weight.value();
            let bv = bias.value();
            out.chunks_mut(dout).for_each(|r| r.copy_from_slice(bv.data()));
            for k in 0..w {
                let start = (w - 1 - k) * b * din;
                let tap = &wv.data()[k * din * dout..(k + 1) * din * dout];
                gemm_into(rows, din, dout, &padded[start..start + rows * din], false, tap, false, &mut out, true);
            }
        }
        let (xid, wid, bid) = (x.id, weight.id, bias.id);
        let rg = x.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            if let Some(dw) = grads.get(wid) {
                for k in 0..w {
                    let start = (w - 1 - k) * b * din;
                    let dtap = &mut dw[k * din * dout..(k + 1) * din * dout];
                    gemm_into(din, rows, dout, &padded[start..start + rows * din], true, g, false, dtap, true);
                }
            }
            if let Some(db) = grads.get(bid) {
                for r in g.chunks(dout) {
                    db.iter_mut().zip(r).for_each(|(a, &v)| *a += v);
                }
            }
            if let Some(dx) = grads.get(xid) {
                let wv = ctx.value(wid).data();
                // tap k writes x rows shifted back by k; the part landing in
                // the tail is dropped
                for k in 0..w {
                    let skip = k * b;
                    if skip >= rows {
                        continue;
                    }
                    let tap = &wv[k * din * dout..(k + 1) * din * dout];
                    gemm_into(rows - skip, dout, din, &g[skip * dout..], false, tap, true, &mut dx[..(rows - skip) * din], true);
                }
            }
        });
        Ok(self.push(Tensor::from_parts(vec![tlen, b, dout], out), rg, Some(bw)))
    }

    /// Splits pre-activations `[T, B, 3d]` into `z, f, o` blocks, applies
    /// `tanh`, `σ`, `σ`, and runs `c_t = f_t⊙c_{t-1} + (1-f_t)⊙z_t`,
    /// `h_t = o_t⊙c_t` from `c0` `[B, d]`. Returns `h` and the final cell.
    pub fn qrnn_pool<'t>(&'t self, pre: Var<'t, T>, c0: &Tensor<T>) -> Result<(Var<'t, T>, Tensor<T>)> {
        let shape = pre.shape();
        if shape.len() != 3 || !shape[2].is_multiple_of(3) {
            return Err(Error::Shape(format!("qrnn pool needs [T,B,3d], got {:?}", shape)));
        }
        let (tlen, b, d) = (shape[0], shape[1], shape[2] / 3);
        if c0.shape() != [b, d] {
            return Err(Error::Shape(format!("qrnn pool state must be [{b},{d}], got {:?}", c0.shape())));
        }
        let bd = b * d;
        let mut acts = vec![T::ZERO; tlen * b * 3 * d];
        {
            let pv = pre.value();
            for (a, p) in acts.chunks_mut(3 * d).zip(pv.data().chunks(3 * d)) {
                a[..d].iter_mut().zip(&p[..d]).for_each(|(y, &x)| *y = x.tanh_fast());
                a[d..].iter_mut().zip(&p[d..]).for_each(|(y, &x)| *y = x.sigmoid());
            }
        }
        let mut cs = vec![T::ZERO; (tlen + 1) * bd];
        cs[..bd].copy_from_slice(c0.data());
        let mut hs = vec![T::ZERO; tlen * bd];
        for t in 0..tlen {
            let (prev, next) = cs.split_at_mut((t + 1) * bd);
            let (prev, next) = (&prev[t * bd..], &mut next[..bd]);
            for r in 0..b {
                let a = &acts[(t * b + r) * 3 * d..(t * b + r + 1) * 3 * d];
                let (z, f, o) = (&a[..d], &a[d..2 * d], &a[2 * d..]);
                for j in 0..d {
                    let c = f[j] * prev[r * d + j] + (T::ONE - f[j]) * z[j];
                    next[r * d + j] = c;
                    hs[t * bd + r * d + j] = o[j] * c;
                }
            }
        }
        let c_last = Tensor::from_parts(vec![b, d], cs[tlen * bd..].to_vec());
        let out = Tensor::from_parts(vec![tlen, b, d], hs);
        let pid = pre.id;
        let rg = pre.requires_grad();
        let bw = Box::new(move |_: &BackCtx<'_, T>, gy: &[T], grads: &mut Grads<'_, T>| {
            let Some(dp) = grads.get(pid) else {
                return;
            };
            let mut dc_next = vec![T::ZERO; bd];
            for t in (0..tlen).rev() {
                for r in 0..b {
                    let base = (t * b + r) * 3 * d;
                    let a = &acts[base..base + 3 * d];
                    let dpr = &mut dp[base..base + 3 * d];
                    let (z, f, o) = (&a[..d], &a[d..2 * d], &a[2 * d..]);
                    for j in 0..d {
                        let k = r * d + j;
                        let i = t * bd + k;
                        let c = cs[i + bd];
                        let dc = dc_next[k] + gy[i] * o[j];
                        let dz = dc * (T::ONE - f[j]);
                        let df = dc * (cs[i] - z[j]);
                        let d_o = gy[i] * c;
                        dc_next[k] = dc * f[j];
                        dpr[j] += dz * (T::ONE - z[j] * z[j]);
                        dpr[d + j] += df * f[j] * (T::ONE - f[j]);
                        dpr[2 * d + j] += d_o * o[j] * (T::ONE - o[j]);
                    }
                }
            }
        });
        Ok((self.push(out, rg, Some(bw)), c_last))
    }
}
