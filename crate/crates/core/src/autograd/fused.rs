//! Fused single-head attention over a constant memory plus the current
//! window, with elementwise affine key/value maps.
//!
//! For sources `n_j` (memory rows first, then window rows) the op computes
//!
//! ```text
//! s_ij = scale · (q_i ⊙ a) · n_j          j ≤ S + i
//! w_i  = dropout(softmax(s_i))
//! y_i  = e ⊙ Σ_j w_ij n_j + f · Σ_j w_ij
//! ```
//!
//! which is attention with keys `a ⊙ n_j + c` and values `e ⊙ n_j + f`: a
//! key shift `c` adds the same amount to every score of a row and cancels
//! in the softmax, so it is not an input. The memory is never
//! differentiated, which lets the backward pass run two large products
//! instead of four and skip materializing keys and values altogether.

use std::sync::Arc;

use rand::Rng;

use super::{BackCtx, Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Rows `start..end` of a shared `[r, B, d]` tensor.
#[derive(Clone, Debug)]
pub struct MemoryRows<T> {
    pub rows: Arc<Tensor<T>>,
    pub start: usize,
    pub end: usize,
}

impl<T: Float> MemoryRows<T> {
    pub fn whole(rows: Tensor<T>) -> Self {
        let end = rows.shape()[0];
        MemoryRows { rows: Arc::new(rows), start: 0, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pointer to row `start`, batch element `bi`.
    fn ptr(&self, bi: usize) -> *const T {
        let s = self.rows.shape();
        self.rows.data()[self.start * s[1] * s[2] + bi * s[2]..].as_ptr()
    }
}

/// Inputs of [`Tape::memory_attention`]. `None` scales mean 1, `None`
/// shifts mean 0.
pub struct MemoryAttention<'t, T: Float> {
    /// `[P, B, d]`
    pub query: Var<'t, T>,
    /// Memory rows, oldest first, `S` in total; never differentiated.
    pub memory: Vec<MemoryRows<T>>,
    /// `[P, B, d]`
    pub window: Var<'t, T>,
    pub key_scale: Option<Var<'t, T>>,
    pub value_scale: Option<Var<'t, T>>,
    pub value_shift: Option<Var<'t, T>>,
    pub scale: f64,
    pub dropout: f64,
}

type Strides = (isize, isize);

/// `C = alpha·A·B + beta·C` on strided views.
#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    sa: Strides,
    b: *const T,
    sb: Strides,
    beta: T,
    c: *mut T,
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    T::gemm(m, k, n, alpha, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1);
}

fn check_vec<T: Float>(v: &Option<Var<'_, T>>, d: usize, what: &str) -> Result<()> {
    match v {
        Some(v) if v.shape() != [d] => Err(Error::Shape(format!("{what} must be [{d}], got {:?}", v.shape()))),
        _ => Ok(()),
    }
}

impl<T: Float> Tape<T> {
    /// See the module docs. Returns the output `[P, B, d]` and the number of
    /// key positions `S + P`.
    pub fn memory_attention<'t, R: Rng + ?Sized>(
        &'t self,
        spec: MemoryAttention<'t, T>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var<'t, T>, usize)> {
        let MemoryAttention { query, memory, window, key_scale, value_scale, value_shift, scale, dropout } = spec;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout probability {dropout} outside [0, 1)")));
        }
        let ws = window.shape();
        if ws.len() != 3 || query.shape() != ws {
            return Err(Error::Shape(format!("attention: query {:?} vs window {:?}", query.shape(), ws)));
        }
        let (p, b, d) = (ws[0], ws[1], ws[2]);
        let mut s = 0;
        for m in &memory {
            let ms = m.rows.shape();
            if ms.len() != 3 || ms[1..] != ws[1..] || m.start > m.end || m.end > ms[0] {
                return Err(Error::Shape(format!(
                    "attention: memory rows {}..{} of {:?} vs window {:?}",
                    m.start, m.end, ms, ws
                )));
            }
            s += m.len();
        }
        // column offset of each memory run in the score matrix
        let runs: Vec<(MemoryRows<T>, usize)> = memory
            .into_iter()
            .filter(|m| !m.is_empty())
            .scan(0, |off, m| {
                let o = *off;
                *off += m.len();
                Some((m, o))
            })
            .collect();
        check_vec(&key_scale, d, "key scale")?;
        check_vec(&value_scale, d, "value scale")?;
        check_vec(&value_shift, d, "value shift")?;
        let n = s + p;
        let bd = b * d;
        let sc = T::from_f64(scale);
        let drop = train && dropout > 0.0;
        let keep = T::from_f64(1.0 / (1.0 - dropout));

        let rg = query.requires_grad()
            || window.requires_grad()
            || [key_scale, value_scale, value_shift].iter().flatten().any(|v| v.requires_grad());
        let (qa, w, mask, z, r, out) = {
            let q = query.value();
            let win = window.value();
            let qa: Vec<T> = match key_scale {
                None => q.data().to_vec(),
                Some(a) => {
                    let a = a.value();
                    q.data().chunks(d).flat_map(|row| row.iter().zip(a.data()).map(|(&x, &y)| x * y)).collect()
                }
            };
            // keep with probability 1 - dropout, from one u32 draw per weight
            let cut = (dropout * 4_294_967_296.0) as u64;
            let block = p * n;
            // weights of every batch element are kept only for the backward pass
            let mut w = vec![T::ZERO; if rg { b * block } else { block }];
            let mut mask = if drop && rg { vec![false; b * block] } else { Vec::new() };
            let mut mask_b = vec![false; if drop { block } else { 0 }];
            let mut wd = vec![T::ZERO; if drop { block } else { 0 }];
            let mut draws = vec![0u32; if drop { block } else { 0 }];
            let mut z = vec![T::ZERO; p * bd];
            let mut r = vec![T::ZERO; p * b];
            for bi in 0..b {
                let wb = if rg { &mut w[bi * block..(bi + 1) * block] } else { &mut w[..] };
                // SAFETY: every view stays within its [rows, B, d] or [P, N] buffer.
                unsafe {
                    for (m, off) in &runs {
                        gemm(p, d, m.len(), sc, qa.as_ptr().add(bi * d), (bd as isize, 1), m.ptr(bi), (1, bd as isize), T::ZERO, wb.as_mut_ptr().add(*off), (n as isize, 1));
                    }
                    gemm(p, d, p, sc, qa.as_ptr().add(bi * d), (bd as isize, 1), win.data().as_ptr().add(bi * d), (1, bd as isize), T::ZERO, wb.as_mut_ptr().add(s), (n as isize, 1));
                }
                for (i, row) in wb.chunks_mut(n).enumerate() {
                    let vis = s + i + 1;
                    let m = row[..vis].iter().fold(row[0], |a, &x| if x > a { x } else { a });
                    row[..vis].iter_mut().for_each(|x| *x = (*x - m).exp_fast());
                    let inv = T::ONE / lane_sum(&row[..vis]);
                    row[..vis].iter_mut().for_each(|x| *x *= inv);
                    row[vis..].iter_mut().for_each(|x| *x = T::ZERO);
                }
                let mixed: &[T] = if drop {
                    rng.fill(&mut draws[..]);
                    let mb = if rg { &mut mask[bi * block..(bi + 1) * block] } else { &mut mask_b[..] };
                    for (((k, o), &u), &x) in mb.iter_mut().zip(wd.iter_mut()).zip(&draws).zip(wb.iter()) {
                        *k = u as u64 >= cut;
                        *o = if *k { x * keep } else { T::ZERO };
                    }
                    &wd
                } else {
                    wb
                };
                unsafe {
                    for (m, off) in &runs {
                        gemm(p, m.len(), d, T::ONE, mixed.as_ptr().add(*off), (n as isize, 1), m.ptr(bi), (bd as isize, 1), T::ONE, z.as_mut_ptr().add(bi * d), (bd as isize, 1));
                    }
                    gemm(p, p, d, T::ONE, mixed.as_ptr().add(s), (n as isize, 1), win.data().as_ptr().add(bi * d), (bd as isize, 1), T::ONE, z.as_mut_ptr().add(bi * d), (bd as isize, 1));
                }
                for (i, row) in mixed.chunks(n).enumerate() {
                    r[i * b + bi] = lane_sum(row);
                }
            }
            let mask = drop.then_some(mask);
            let mut y = z.clone();
            if let Some(e) = value_scale {
                let e = e.value();
                y.chunks_mut(d).for_each(|row| row.iter_mut().zip(e.data()).for_each(|(x, &g)| *x *= g));
            }
            if let Some(f) = value_shift {
                let f = f.value();
                for (row, &ri) in y.chunks_mut(d).zip(&r) {
                    row.iter_mut().zip(f.data()).for_each(|(x, &g)| *x += ri * g);
                }
            }
            (qa, w, mask, z, r, Tensor::from_parts(vec![p, b, d], y))
        };

        let ids = (query.id, window.id, key_scale.map(|v| v.id), value_scale.map(|v| v.id), value_shift.map(|v| v.id));
        let bw = Box::new(move |ctx: &BackCtx<'_, T>, g: &[T], grads: &mut Grads<'_, T>| {
            let (qid, wid, aid, eid, fid) = ids;
            let win = ctx.value(wid).data();
            // dZ = G ⊙ e
            let dz: Vec<T> = match eid {
                None => g.to_vec(),
                Some(e) => {
                    let e = ctx.value(e).data();
                    g.chunks(d).flat_map(|row| row.iter().zip(e).map(|(&x, &y)| x * y)).collect()
                }
            };
            if let Some(de) = eid.and_then(|e| grads.get(e)) {
                for (gr, zr) in g.chunks(d).zip(z.chunks(d)) {
                    for k in 0..d {
                        de[k] += gr[k] * zr[k];
                    }
                }
            }
            // per-row G·f, added to every visible weight gradient
            let gf: Option<Vec<T>> = fid.map(|f| {
                let f = ctx.value(f).data();
                g.chunks(d).map(|row| row.iter().zip(f).map(|(&x, &y)| x * y).sum()).collect()
            });
            if let Some(df) = fid.and_then(|f| grads.get(f)) {
                for (gr, &ri) in g.chunks(d).zip(&r) {
                    for k in 0..d {
                        df[k] += gr[k] * ri;
                    }
                }
            }
            let mut m_acc = vec![T::ZERO; p * bd];
            let mut dwin = vec![T::ZERO; p * bd];
            let mut buf = vec![T::ZERO; p * n];
            let mut wd_win = vec![T::ZERO; p * p];
            for bi in 0..b {
                let wb = &w[bi * p * n..(bi + 1) * p * n];
                let mb = mask.as_ref().map(|m| &m[bi * p * n..(bi + 1) * p * n]);
                unsafe {
                    for (m, off) in &runs {
                        gemm(p, d, m.len(), T::ONE, dz.as_ptr().add(bi * d), (bd as isize, 1), m.ptr(bi), (1, bd as isize), T::ZERO, buf.as_mut_ptr().add(*off), (n as isize, 1));
                    }
                    gemm(p, d, p, T::ONE, dz.as_ptr().add(bi * d), (bd as isize, 1), win.as_ptr().add(bi * d), (1, bd as isize), T::ZERO, buf.as_mut_ptr().add(s), (n as isize, 1));
                }
                for i in 0..p {
                    let vis = s + i + 1;
                    let row = &mut buf[i * n..(i + 1) * n];
                    let wr = &wb[i * n..(i + 1) * n];
                    let shift = gf.as_ref().map_or(T::ZERO, |v| v[i * b + bi]);
                    let mut dot = T::ZERO;
                    for j in 0..vis {
                        let mut dw = row[j] + shift;
                        if let Some(mb) = mb {
                            dw = if mb[i * n + j] { dw * keep } else { T::ZERO };
                        }
                        row[j] = dw;
                        dot += wr[j] * dw;
                    }
                    for j in 0..vis {
                        row[j] = sc * wr[j] * (row[j] - dot);
                    }
                    row[vis..].iter_mut().for_each(|x| *x = T::ZERO);
                }
                // buf now holds dS for this batch element
                unsafe {
                    for (m, off) in &runs {
                        gemm(p, m.len(), d, T::ONE, buf.as_ptr().add(*off), (n as isize, 1), m.ptr(bi), (bd as isize, 1), T::ONE, m_acc.as_mut_ptr().add(bi * d), (bd as isize, 1));
                    }
                    gemm(p, p, d, T::ONE, buf.as_ptr().add(s), (n as isize, 1), win.as_ptr().add(bi * d), (bd as isize, 1), T::ONE, m_acc.as_mut_ptr().add(bi * d), (bd as isize, 1));
                    // window rows as keys: dS_winᵀ · (Q ⊙ a)
                    gemm(p, p, d, T::ONE, buf.as_ptr().add(s), (1, n as isize), qa.as_ptr().add(bi * d), (bd as isize, 1), T::ONE, dwin.as_mut_ptr().add(bi * d), (bd as isize, 1));
                }
                // window rows as values: W_winᵀ · dZ
                for i in 0..p {
                    for j in 0..p {
                        let x = wb[i * n + s + j];
                        wd_win[i * p + j] = match mb {
                            Some(mb) if !mb[i * n + s + j] => T::ZERO,
                            Some(_) => x * keep,
                            None => x,
                        };
                    }
                }
                unsafe {
                    gemm(p, p, d, T::ONE, wd_win.as_ptr(), (1, p as isize), dz.as_ptr().add(bi * d), (bd as isize, 1), T::ONE, dwin.as_mut_ptr().add(bi * d), (bd as isize, 1));
                }
            }
            if let Some(dw) = grads.get(wid) {
                dw.iter_mut().zip(&dwin).for_each(|(a, &b)| *a += b);
            }
            let a = aid.map(|a| ctx.value(a).data().to_vec());
            if let Some(dq) = grads.get(qid) {
                match &a {
                    None => dq.iter_mut().zip(&m_acc).for_each(|(x, &y)| *x += y),
                    Some(a) => {
                        for (dr, mr) in dq.chunks_mut(d).zip(m_acc.chunks(d)) {
                            for k in 0..d {
                                dr[k] += mr[k] * a[k];
                            }
                        }
                    }
                }
            }
            if let Some(da) = aid.and_then(|a| grads.get(a)) {
                let q = ctx.value(qid).data();
                for (qr, mr) in q.chunks(d).zip(m_acc.chunks(d)) {
                    for k in 0..d {
                        da[k] += qr[k] * mr[k];
                    }
                }
            }
        });
        Ok((self.push(out, rg, Some(bw)), n))
    }
}

/// Sum with eight independent accumulators, which the compiler can keep in
/// vector registers.
fn lane_sum<T: Float>(x: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

/// Per-row layer normalization without affine parameters, matching the
/// pre-affine part of [`Var::layer_norm`] exactly.
pub fn normalize_rows<T: Float>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let d = x.last_dim();
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let mut y = vec![T::ZERO; x.len()];
    for (xr, yr) in x.data().chunks(d).zip(y.chunks_mut(d)) {
        let mu = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let rs = T::ONE / (var + eps).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - mu) * rs;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}
