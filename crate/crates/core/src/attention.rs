//! Single-headed attention over a rolling memory of past recurrent outputs.
//!
//! Three variants share one implementation:
//!
//! * gated: query, key and value streams are scaled elementwise by
//!   sigmoid-activated trainable vectors `qs`, `ks`, `vs`;
//! * ungated: the same head with those factors removed;
//! * mean-memory: the cached memory is condensed to its sequence mean `W`,
//!   which is prepended to the current window as a single pseudo-timestep.
//!
//! Keys and values get no linear projection; only the query does.

use rand::Rng;
use serde::{Deserialize, Serialize};

use std::collections::VecDeque;
use std::sync::{Arc, OnceLock};

use crate::autograd::{normalize_rows, MemoryAttention, MemoryRows, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Attention flavour as selected by the model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Gated,
    Ungated,
    /// Gated head reading the mean of the cached memory.
    Mean,
}

impl AttnKind {
    pub fn gate_mode(self) -> GateMode {
        match self {
            AttnKind::Gated | AttnKind::Mean => GateMode::Gated,
            AttnKind::Ungated => GateMode::Ungated,
        }
    }

    pub fn memory_mode(self) -> MemoryMode {
        match self {
            AttnKind::Mean => MemoryMode::Mean,
            _ => MemoryMode::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Gated,
    Ungated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    Full,
    Mean,
}

/// Shape and options of one head.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub d: usize,
    pub kind: AttnKind,
    /// Layer-norm the query input and the key/value source inside the head.
    pub inner_norm: bool,
    /// Pass `σ(vs)` through a `d → 2d` linear map and combine the halves as
    /// `σ(b) ⊙ tanh(a)` before using it as the value gate.
    pub value_gate_overparam: bool,
    /// Dropout on attention weights (train mode only).
    pub weight_dropout: f64,
}

impl AttentionSpec {
    pub fn num_params(&self) -> usize {
        let d = self.d;
        let mut n = d * d;
        if self.inner_norm {
            n += 2 * LayerNorm::num_params(d);
        }
        if self.kind.gate_mode() == GateMode::Gated {
            n += 3 * d;
            if self.value_gate_overparam {
                n += Linear::num_params(d, 2 * d, true);
            }
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub spec: AttentionSpec,
    pub w_q: ParamId,
    pub gates: Option<Gates>,
    pub ln_q: Option<LayerNorm>,
    pub ln_kv: Option<LayerNorm>,
    /// Forces every gate factor to 1 (the `+∞` limit of the pre-sigmoid
    /// parameters); for equivalence testing.
    pub bypass_gates: bool,
}

#[derive(Clone, Debug)]
pub struct Gates {
    pub qs: ParamId,
    pub ks: ParamId,
    pub vs: ParamId,
    pub vq: Option<Linear>,
}

impl Attention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: AttentionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let d = spec.d;
        let bound = 1.0 / (d as f64).sqrt();
        let w_q = store.register(format!("{name}.w_q"), crate::nn::uniform(&[d, d], bound, rng))?;
        let gates = if spec.kind.gate_mode() == GateMode::Gated {
            // zero pre-activation: every gate starts at 0.5
            let qs = store.register(format!("{name}.qs"), Tensor::zeros(&[d]))?;
            let ks = store.register(format!("{name}.ks"), Tensor::zeros(&[d]))?;
            let vs = store.register(format!("{name}.vs"), Tensor::zeros(&[d]))?;
            let vq = if spec.value_gate_overparam {
                Some(Linear::new(store, &format!("{name}.vq"), d, 2 * d, true, rng)?)
            } else {
                None
            };
            Some(Gates { qs, ks, vs, vq })
        } else {
            None
        };
        let (ln_q, ln_kv) = if spec.inner_norm {
            (
                Some(LayerNorm::new(store, &format!("{name}.ln_q"), d)?),
                Some(LayerNorm::new(store, &format!("{name}.ln_kv"), d)?),
            )
        } else {
            (None, None)
        };
        Ok(Attention { spec, w_q, gates, ln_q, ln_kv, bypass_gates: false })
    }

    fn value_gate<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, g: &Gates) -> Result<Var<'t, T>> {
        let s = ctx.param(g.vs).sigmoid();
        match &g.vq {
            None => Ok(s),
            Some(lin) => {
                let d = self.spec.d;
                let both = lin.forward(ctx, s)?;
                let a = both.slice_last(0, d)?.tanh();
                let b = both.slice_last(d, 2 * d)?.sigmoid();
                a.mul(b)
            }
        }
    }

    /// Attends from `h: [p, B, d]` over the cached memory plus the causally
    /// visible part of the current window. Returns `[p, B, d]` for the
    /// caller's residual addition.
    pub fn attend<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        h: Var<'t, T>,
        cache: &MemoryCache<T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.attend_with_stats(ctx, h, cache)?.0)
    }

    pub fn attend_with_stats<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        h: Var<'t, T>,
        cache: &MemoryCache<T>,
    ) -> Result<(Var<'t, T>, AttendStats)> {
        let (p, b) = self.check_input(&h, cache)?;
        let d = self.spec.d;
        let gated = if self.bypass_gates { None } else { self.gates.as_ref() };
        let q = self.query(ctx, h, gated)?;
        let memory = match self.spec.kind.memory_mode() {
            MemoryMode::Full => match &self.ln_kv {
                Some(ln) => cache.normalized_rows(ln.eps),
                None => cache.rows(),
            },
            MemoryMode::Mean => mean_condense(cache)
                .map(|w| {
                    let w = Tensor::from_parts(vec![1, b, d], w.into_data());
                    MemoryRows::whole(match &self.ln_kv {
                        Some(ln) => normalize_rows(&w, ln.eps),
                        None => w,
                    })
                })
                .into_iter()
                .collect(),
        };
        let (gk, gv) = match gated {
            Some(g) => (Some(ctx.param(g.ks).sigmoid()), Some(self.value_gate(ctx, g)?)),
            None => (None, None),
        };
        let (window, key_scale, value_scale, value_shift) = match &self.ln_kv {
            Some(ln) => {
                let ones = ctx.constant(Tensor::full(&[d], T::ONE));
                let zeros = ctx.constant(Tensor::zeros(&[d]));
                let window = h.layer_norm(ones, zeros, ln.eps)?;
                let (gamma, beta) = (ctx.param(ln.gamma), ctx.param(ln.beta));
                let scaled = |x: Var<'t, T>, g: Option<Var<'t, T>>| match g {
                    Some(g) => x.mul(g),
                    None => Ok(x),
                };
                (window, Some(scaled(gamma, gk)?), Some(scaled(gamma, gv)?), Some(scaled(beta, gv)?))
            }
            None => (h, gk, gv, None),
        };
        let spec = MemoryAttention {
            query: q,
            memory,
            window,
            key_scale,
            value_scale,
            value_shift,
            scale: 1.0 / (d as f64).sqrt(),
            dropout: self.spec.weight_dropout,
        };
        let (out, n) = ctx.with_rng(|rng| ctx.tape.memory_attention(spec, ctx.train, rng))?;
        Ok((out, AttendStats { query_len: p, key_len: n, score_macs: b * p * n * d }))
    }

    fn check_input<T: Float>(&self, h: &Var<'_, T>, cache: &MemoryCache<T>) -> Result<(usize, usize)> {
        let shape = h.shape();
        let d = self.spec.d;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::Shape(format!("attention input must be [p,B,{d}], got {:?}", shape)));
        }
        match cache.batch() {
            Some(cached) if cached != shape[1] => Err(Error::CacheBatchMismatch { cached, given: shape[1] }),
            _ => Ok((shape[0], shape[1])),
        }
    }

    fn query<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, h: Var<'t, T>, gated: Option<&Gates>) -> Result<Var<'t, T>> {
        let hq = match &self.ln_q {
            Some(ln) => ln.forward(ctx, h)?,
            None => h,
        };
        let q = hq.linear(ctx.param(self.w_q), None)?;
        match gated {
            Some(g) => q.mul(ctx.param(g.qs).sigmoid()),
            None => Ok(q),
        }
    }

    /// The same head composed from primitive ops (explicit keys, values,
    /// score matrix and masked softmax). Slower; kept as a reference.
    pub fn attend_reference<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        h: Var<'t, T>,
        cache: &MemoryCache<T>,
    ) -> Result<(Var<'t, T>, AttendStats)> {
        let (p, b) = self.check_input(&h, cache)?;
        let d = self.spec.d;
        let gated = if self.bypass_gates { None } else { self.gates.as_ref() };
        let q = self.query(ctx, h, gated)?;

        let (source, prefix) = match self.spec.kind.memory_mode() {
            MemoryMode::Full => match cache.memory() {
                Some(m) => {
                    let s = m.shape()[0];
                    (ctx.tape.concat_leading(&[ctx.constant(m), h])?, s)
                }
                None => (h, 0),
            },
            MemoryMode::Mean => {
                let w = mean_condense(cache);
                let prefix = usize::from(w.is_some());
                (build_kv_mean(ctx, w, h)?, prefix)
            }
        };
        let source = match &self.ln_kv {
            Some(ln) => ln.forward(ctx, source)?,
            None => source,
        };
        let (k, v) = match gated {
            Some(g) => (source.mul(ctx.param(g.ks).sigmoid())?, source.mul(self.value_gate(ctx, g)?)?),
            None => (source, source),
        };
        let n = k.shape()[0];
        let scores = q.attn_scores(k, 1.0 / (d as f64).sqrt())?;
        let weights = scores.causal_softmax(prefix)?;
        let weights = ctx.dropout(weights, self.spec.weight_dropout)?;
        let out = weights.attn_mix(v)?;
        Ok((out, AttendStats { query_len: p, key_len: n, score_macs: b * p * n * d }))
    }
}

/// Size of the score computation performed by one `attend` call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttendStats {
    pub query_len: usize,
    pub key_len: usize,
    /// Multiply-accumulates in the query·key products.
    pub score_macs: usize,
}

/// One stored window plus, once requested, its row-normalized copy.
#[derive(Debug)]
struct Segment<T> {
    rows: Arc<Tensor<T>>,
    normalized: OnceLock<(u64, Arc<Tensor<T>>)>,
}

/// Rolling store of detached past memory vectors `[S, B, d]`, oldest first,
/// holding at most `cap` timesteps.
///
/// Windows are kept as shared segments, so cloning and updating never copy
/// the stored rows.
#[derive(Clone, Debug)]
pub struct MemoryCache<T> {
    /// Each segment with the index of its first live row.
    segments: VecDeque<(Arc<Segment<T>>, usize)>,
    cap: usize,
    len: usize,
}

impl<T: PartialEq> PartialEq for MemoryCache<T> {
    fn eq(&self, other: &Self) -> bool {
        fn live<T>(c: &MemoryCache<T>) -> Vec<&T> {
            c.segments
                .iter()
                .flat_map(|(s, start)| {
                    let sh = s.rows.shape();
                    s.rows.data()[start * sh[1] * sh[2]..].iter()
                })
                .collect()
        }
        let shapes = |c: &Self| c.segments.front().map(|(s, _)| s.rows.shape()[1..].to_vec());
        self.cap == other.cap && self.len == other.len && shapes(self) == shapes(other) && live(self) == live(other)
    }
}

impl<T: Float> MemoryCache<T> {
    pub fn new(cap: usize) -> Self {
        MemoryCache { segments: VecDeque::new(), cap, len: 0 }
    }

    pub fn with_memory(mem: Tensor<T>, cap: usize) -> Result<Self> {
        let mut c = Self::new(cap);
        c.update(&mem)?;
        Ok(c)
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Batch size of the stored rows, if any.
    pub fn batch(&self) -> Option<usize> {
        self.segments.front().map(|(s, _)| s.rows.shape()[1])
    }

    /// The stored rows as one contiguous tensor.
    pub fn memory(&self) -> Option<Tensor<T>> {
        if self.is_empty() {
            return None;
        }
        let parts: Vec<Tensor<T>> = self.rows().iter().map(|m| m.rows.slice_leading(m.start, m.end)).collect();
        Some(Tensor::concat_leading(&parts.iter().collect::<Vec<_>>()).expect("segments share trailing dims"))
    }

    /// The stored rows as shared runs, oldest first.
    pub fn rows(&self) -> Vec<MemoryRows<T>> {
        self.runs(|s| s.rows.clone())
    }

    /// Like [`MemoryCache::rows`] with every row layer-normalized (no affine
    /// part). Each segment is normalized once and the result shared.
    pub fn normalized_rows(&self, eps: f64) -> Vec<MemoryRows<T>> {
        self.runs(|s| match s.normalized.get() {
            Some((bits, t)) if *bits == eps.to_bits() => t.clone(),
            Some(_) => Arc::new(normalize_rows(&s.rows, eps)),
            None => s.normalized.get_or_init(|| (eps.to_bits(), Arc::new(normalize_rows(&s.rows, eps)))).1.clone(),
        })
    }

    fn runs(&self, pick: impl Fn(&Segment<T>) -> Arc<Tensor<T>>) -> Vec<MemoryRows<T>> {
        self.segments
            .iter()
            .map(|(s, start)| MemoryRows { rows: pick(s), start: *start, end: s.rows.shape()[0] })
            .collect()
    }

    pub fn clear(&mut self) {
        self.segments.clear();
        self.len = 0;
    }

    /// Appends `new_mem: [p, B, d]` and keeps the most recent `cap` steps.
    pub fn update(&mut self, new_mem: &Tensor<T>) -> Result<()> {
        let shape = new_mem.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("cache entries must be [p,B,d], got {:?}", shape)));
        }
        if let Some((s, _)) = self.segments.front() {
            let have = s.rows.shape();
            if have[1] != shape[1] {
                return Err(Error::CacheBatchMismatch { cached: have[1], given: shape[1] });
            }
            if have[2] != shape[2] {
                return Err(Error::Shape(format!("cache rows are {:?}, got {:?}", have, shape)));
            }
        }
        if shape[0] == 0 {
            return Ok(());
        }
        let seg = Segment { rows: Arc::new(new_mem.clone()), normalized: OnceLock::new() };
        self.segments.push_back((Arc::new(seg), 0));
        self.len += shape[0];
        while self.len > self.cap {
            let excess = self.len - self.cap;
            let (seg, start) = self.segments.front_mut().expect("len > 0");
            let live = seg.rows.shape()[0] - *start;
            if live <= excess {
                self.segments.pop_front();
                self.len -= live;
            } else {
                *start += excess;
                self.len -= excess;
            }
        }
        Ok(())
    }
}

/// Arithmetic mean over the sequence axis of the cached memory, `[B, d]`;
/// `None` for an empty cache.
pub fn mean_condense<T: Float>(cache: &MemoryCache<T>) -> Option<Tensor<T>> {
    let runs = cache.rows();
    let first = runs.first()?;
    let inner = first.rows.shape()[1..].to_vec();
    let row: usize = inner.iter().product();
    let mut acc = vec![0.0f64; row];
    for m in &runs {
        for chunk in m.rows.data()[m.start * row..m.end * row].chunks(row) {
            for (a, &v) in acc.iter_mut().zip(chunk) {
                *a += v.to_f64();
            }
        }
    }
    let s = cache.len() as f64;
    let data = acc.into_iter().map(|a| T::from_f64(a / s)).collect();
    Some(Tensor::from_parts(inner, data))
}

/// `Z = [W, h_1, …, h_p]`, or `h` alone when there is no condensed memory.
pub fn build_kv_mean<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    mean: Option<Tensor<T>>,
    h: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match mean {
        None => Ok(h),
        Some(w) => {
            let hs = h.shape();
            if w.shape() != &hs[1..] {
                return Err(Error::Shape(format!("memory mean {:?} does not match window {:?}", w.shape(), hs)));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(w.shape());
            let w = ctx.constant(w.reshape(&shape)?);
            ctx.tape.concat_leading(&[w, h])
        }
    }
}
