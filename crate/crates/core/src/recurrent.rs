//! Recurrent cells over `[T, B, d]` sequences with carried state: the LSTM
//! baseline and the QRNN (causal convolution feeding forget/output pooling).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{uniform, Ctx};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CellKind {
    Lstm,
    Qrnn { window: usize },
}

impl CellKind {
    /// Closed-form parameter count of one layer.
    pub fn num_params(self, d_in: usize, d_h: usize) -> usize {
        match self {
            CellKind::Lstm => lstm_param_count(d_in, d_h),
            CellKind::Qrnn { window } => qrnn_param_count(window, d_in, d_h),
        }
    }
}

/// `4·(d_in·d_h + d_h² + d_h)`: input and recurrent weights for four gates
/// plus one bias per gate.
pub fn lstm_param_count(d_in: usize, d_h: usize) -> usize {
    4 * (d_in * d_h + d_h * d_h + d_h)
}

/// `3·(w·d_in·d_h + d_h)`: one width-`w` filter bank and bias per gate.
pub fn qrnn_param_count(window: usize, d_in: usize, d_h: usize) -> usize {
    3 * (window * d_in * d_h + d_h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Float> LstmState<T> {
    pub fn zeros(batch: usize, d_h: usize) -> Self {
        LstmState { h: Tensor::zeros(&[batch, d_h]), c: Tensor::zeros(&[batch, d_h]) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QrnnState<T> {
    /// Final pooled cell state `[B, d_h]`.
    pub c: Tensor<T>,
    /// Last `w-1` inputs `[w-1, B, d_in]`, zero at stream start.
    pub tail: Tensor<T>,
}

impl<T: Float> QrnnState<T> {
    pub fn zeros(window: usize, batch: usize, d_in: usize, d_h: usize) -> Self {
        QrnnState {
            c: Tensor::zeros(&[batch, d_h]),
            tail: Tensor::zeros(&[window.saturating_sub(1), batch, d_in]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellState<T> {
    Lstm(LstmState<T>),
    Qrnn(QrnnState<T>),
}

impl<T: Float> CellState<T> {
    pub fn batch_size(&self) -> usize {
        match self {
            CellState::Lstm(s) => s.h.shape()[0],
            CellState::Qrnn(s) => s.c.shape()[0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `[d_in, 4·d_h]`, gate blocks ordered input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[d_h, 4·d_h]`
    pub w_hh: ParamId,
    /// `[4·d_h]`
    pub bias: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl LstmParams {
    /// Weights uniform in `±1/√d_h`; forget-gate bias 1, other biases 0.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_h as f64).sqrt();
        let w_ih = store.register(format!("{name}.w_ih"), uniform(&[d_in, 4 * d_h], bound, rng))?;
        let w_hh = store.register(format!("{name}.w_hh"), uniform(&[d_h, 4 * d_h], bound, rng))?;
        let mut b = Tensor::zeros(&[4 * d_h]);
        b.data_mut()[d_h..2 * d_h].iter_mut().for_each(|v| *v = T::ONE);
        let bias = store.register(format!("{name}.bias"), b)?;
        Ok(LstmParams { w_ih, w_hh, bias, d_in, d_h })
    }
}

fn check_seq<T: Float>(x: &Var<'_, T>, d_in: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != d_in {
        return Err(Error::Shape(format!("cell input must be [T,B,{d_in}], got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

/// Runs an LSTM over `x: [T, B, d_in]`; returns `y: [T, B, d_h]` (`y_t = h_t`)
/// and the detached final state.
pub fn lstm_forward<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    x: Var<'t, T>,
    state: &LstmState<T>,
    params: &LstmParams,
) -> Result<(Var<'t, T>, LstmState<T>)> {
    let (_, b) = check_seq(&x, params.d_in)?;
    if state.h.shape() != [b, params.d_h] || state.c.shape() != [b, params.d_h] {
        return Err(Error::Shape(format!(
            "lstm state {:?}/{:?} does not match batch {b} and hidden {}",
            state.h.shape(),
            state.c.shape(),
            params.d_h
        )));
    }
    let xg = x.linear(ctx.param(params.w_ih), Some(ctx.param(params.bias)))?;
    let (y, h, c) = ctx.tape.lstm_recurrence(xg, ctx.param(params.w_hh), &state.h, &state.c)?;
    Ok((y, LstmState { h, c }))
}

#[derive(Clone, Debug)]
pub struct QrnnParams {
    /// `[w, d_in, 3·d_h]`; tap `k` multiplies `x_{t-k}`; gate blocks z, f, o.
    pub weight: ParamId,
    /// `[3·d_h]`
    pub bias: ParamId,
    pub window: usize,
    pub d_in: usize,
    pub d_h: usize,
}

impl QrnnParams {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        window: usize,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("qrnn window must be >= 1".into()));
        }
        let bound = 1.0 / ((window * d_in) as f64).sqrt();
        let weight = store.register(format!("{name}.weight"), uniform(&[window, d_in, 3 * d_h], bound, rng))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[3 * d_h]))?;
        Ok(QrnnParams { weight, bias, window, d_in, d_h })
    }
}

/// Output of the QRNN convolution: activated gate sequences and the input
/// history to carry into the next call.
pub struct QrnnGates<'t, T: Float> {
    pub z: Var<'t, T>,
    pub f: Var<'t, T>,
    pub o: Var<'t, T>,
    pub tail: Tensor<T>,
}

fn check_tail<T: Float>(tail: &Tensor<T>, params: &QrnnParams, b: usize) -> Result<()> {
    if tail.shape() != [params.window - 1, b, params.d_in] {
        return Err(Error::Shape(format!(
            "qrnn tail must be [{},{b},{}], got {:?}",
            params.window - 1,
            params.d_in,
            tail.shape()
        )));
    }
    Ok(())
}

/// The last `w-1` inputs of `tail ++ x`.
fn next_tail<T: Float>(tail: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let keep = tail.shape()[0];
    let tlen = x.shape()[0];
    if tlen >= keep {
        x.slice_leading(tlen - keep, tlen)
    } else {
        Tensor::concat_leading(&[tail, x]).expect("matching trailing dims").slice_leading(tlen, tlen + keep)
    }
}

/// Gate pre-activations `W * X + b`, `[T, B, 3·d_h]`, by causal width-`w`
/// convolution. Position `t` sees `x_{t-w+1..=t}`; positions before the
/// window come from `tail` (zeros at the true start of a stream).
pub fn qrnn_preact<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    x: Var<'t, T>,
    tail: &Tensor<T>,
    params: &QrnnParams,
) -> Result<(Var<'t, T>, Tensor<T>)> {
    let (_, b) = check_seq(&x, params.d_in)?;
    check_tail(tail, params, b)?;
    let pre = ctx.tape.causal_conv(x, tail, ctx.param(params.weight), ctx.param(params.bias))?;
    Ok((pre, next_tail(tail, &x.value())))
}

/// Causal width-`w` convolution producing `Z = tanh(W_z * X)`,
/// `F = σ(W_f * X)`, `O = σ(W_o * X)`, all timesteps at once.
pub fn qrnn_conv<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    x: Var<'t, T>,
    tail: &Tensor<T>,
    params: &QrnnParams,
) -> Result<QrnnGates<'t, T>> {
    let (pre, tail) = qrnn_preact(ctx, x, tail, params)?;
    let d = params.d_h;
    let z = pre.slice_last(0, d)?.tanh();
    let f = pre.slice_last(d, 2 * d)?.sigmoid();
    let o = pre.slice_last(2 * d, 3 * d)?.sigmoid();
    Ok(QrnnGates { z, f, o, tail })
}

/// Parameter-free sequential scan `c_t = f_t⊙c_{t-1} + (1-f_t)⊙z_t`,
/// `h_t = o_t⊙c_t`.
pub fn qrnn_fo_pool<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    z: Var<'t, T>,
    f: Var<'t, T>,
    o: Var<'t, T>,
    c0: &Tensor<T>,
) -> Result<(Var<'t, T>, Tensor<T>)> {
    ctx.tape.fo_pool(z, f, o, c0)
}

pub fn qrnn_forward<'t, T: Float>(
    ctx: &Ctx<'t, '_, T>,
    x: Var<'t, T>,
    state: &QrnnState<T>,
    params: &QrnnParams,
) -> Result<(Var<'t, T>, QrnnState<T>)> {
    let (pre, tail) = qrnn_preact(ctx, x, &state.tail, params)?;
    let (y, c) = ctx.tape.qrnn_pool(pre, &state.c)?;
    Ok((y, QrnnState { c, tail }))
}

/// A recurrent layer of either kind.
#[derive(Clone, Debug)]
pub enum Cell {
    Lstm(LstmParams),
    Qrnn(QrnnParams),
}

impl Cell {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CellKind,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            CellKind::Lstm => Cell::Lstm(LstmParams::new(store, name, d_in, d_h, rng)?),
            CellKind::Qrnn { window } => Cell::Qrnn(QrnnParams::new(store, name, window, d_in, d_h, rng)?),
        })
    }

    pub fn zero_state<T: Float>(&self, batch: usize) -> CellState<T> {
        match self {
            Cell::Lstm(p) => CellState::Lstm(LstmState::zeros(batch, p.d_h)),
            Cell::Qrnn(p) => CellState::Qrnn(QrnnState::zeros(p.window, batch, p.d_in, p.d_h)),
        }
    }

    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        state: &CellState<T>,
    ) -> Result<(Var<'t, T>, CellState<T>)> {
        match (self, state) {
            (Cell::Lstm(p), CellState::Lstm(s)) => {
                let (y, s) = lstm_forward(ctx, x, s, p)?;
                Ok((y, CellState::Lstm(s)))
            }
            (Cell::Qrnn(p), CellState::Qrnn(s)) => {
                let (y, s) = qrnn_forward(ctx, x, s, p)?;
                Ok((y, CellState::Qrnn(s)))
            }
            _ => Err(Error::InvalidArgument("cell/state kind mismatch".into())),
        }
    }
}
