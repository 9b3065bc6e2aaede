//! Benchmark fixtures: one recurrent layer or one whole training step at a
//! fixed shape, ready to be timed repeatedly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shaq_core::data::{batchify, next_window, synthetic_corpus, BatchPlan, Batched};
use shaq_core::model::{shrink, ForwardState};
use shaq_core::nn::{uniform, Ctx};
use shaq_core::optim::{clip_grad_norm, OptimConfig, Optimizer};
use shaq_core::recurrent::{Cell, CellKind};
use shaq_core::{Model, ModelConfig, ParamStore, Tape, Tensor};

/// A single cell with a fixed `[len, batch, d]` input.
pub struct CellFixture {
    pub cell: Cell,
    pub store: ParamStore<f32>,
    pub input: Tensor<f32>,
    pub batch: usize,
}

impl CellFixture {
    pub fn new(kind: CellKind, d: usize, len: usize, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = Cell::new(&mut store, "cell", kind, d, d, &mut rng).expect("valid cell shape");
        let input = uniform(&[len, batch, d], 1.0, &mut rng);
        Self { cell, store, input, batch }
    }

    /// Forward and backward through the cell; returns the loss.
    pub fn forward_backward(&mut self) -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, true, &mut rng);
        let (y, _) = self.cell.forward(&ctx, ctx.constant(self.input.clone()), &self.cell.zero_state(self.batch)).expect("forward");
        let loss = y.sum();
        let value = loss.value().data()[0];
        let grads = tape.backward(loss).expect("backward");
        drop(ctx);
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        value
    }
}

/// A model with its optimizer and a batched synthetic corpus; `step` runs
/// one training window, carrying state and wrapping around at the end.
pub struct StepFixture {
    pub model: Model,
    pub store: ParamStore<f32>,
    opt: Optimizer<f32>,
    tracks: Batched,
    plan: BatchPlan,
    state: ForwardState<f32>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl StepFixture {
    pub fn new(base: &ModelConfig, d: usize, len: usize, batch: usize) -> Self {
        let cfg = shrink(base, d, len);
        let (model, store) = Model::build::<f32>(&cfg, 0).expect("valid config");
        let tracks = batchify(&synthetic_corpus(batch * len * 40, 3), batch).expect("corpus");
        let opt = Optimizer::new(OptimConfig::default(), &store);
        let state = model.init_state(batch);
        Self { model, store, opt, tracks, plan: BatchPlan::new(batch, len), state, cursor: 0, rng: ChaCha8Rng::seed_from_u64(2) }
    }

    pub fn step(&mut self) -> f32 {
        let w = match next_window(&self.tracks, &self.plan, self.cursor, &mut self.rng) {
            Some(w) => w,
            None => {
                self.cursor = 0;
                self.state = self.model.init_state(self.plan.batch);
                next_window(&self.tracks, &self.plan, 0, &mut self.rng).expect("corpus holds a window")
            }
        };
        let value;
        let grads = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store, true, &mut self.rng);
            let (loss, next) = self.model.loss(&ctx, &w.inputs, &w.targets, w.len, self.plan.batch, &self.state).expect("loss");
            self.state = next;
            value = loss.value().data()[0];
            tape.backward(loss).expect("backward")
        };
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        clip_grad_norm(&mut self.store, 0.25).expect("finite gradients");
        self.opt.step(&mut self.store, 1e-3).expect("finite update");
        self.cursor += w.len;
        value
    }
}
