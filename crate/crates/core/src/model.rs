//! Model assembly: byte embedding, a stack of SHA-RNN or SHAQ blocks, final
//! layer norm and the (optionally tied) output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attention, AttentionSpec, AttnKind, MemoryCache};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::feedforward::{FeedForward, FeedForwardSpec, FfKind};
use crate::nn::{Ctx, Embedding, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::recurrent::{Cell, CellKind, CellState};
use crate::tensor::Float;
use crate::VOCAB;

/// Block wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStyle {
    /// LN → cell → residual, then per head LN → attend → residual, then
    /// LN → feed-forward → residual.
    ShaRnn,
    /// LN₁ → cell → residual, then per head LN₂ → LN₃ → attend → residual.
    /// No feed-forward.
    Shaq,
}

/// Dropout probability per site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub embed: f64,
    pub cell: f64,
    pub attn_weights: f64,
    pub attn_out: f64,
    pub ff: f64,
}

impl DropoutConfig {
    pub fn all(p: f64) -> Self {
        DropoutConfig { embed: p, cell: p, attn_weights: p, attn_out: p, ff: p }
    }

    pub fn none() -> Self {
        Self::all(0.0)
    }

    fn sites(&self) -> [(&'static str, f64); 5] {
        [
            ("embed", self.embed),
            ("cell", self.cell),
            ("attn_weights", self.attn_weights),
            ("attn_out", self.attn_out),
            ("ff", self.ff),
        ]
    }
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self::all(0.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub cell: CellKind,
    pub block: BlockStyle,
    /// 1-based indices of blocks carrying an attention head. A repeated index
    /// stacks several heads in that block, so `[3, 3]` is two heads on
    /// block 3.
    pub attn_layers: Vec<usize>,
    pub attn: AttnKind,
    pub ff: FfKind,
    pub d_inner: usize,
    pub dropout: DropoutConfig,
    /// Training window length `p`.
    pub bptt: usize,
    /// Attention sees at most `memory_horizon − p` cached steps.
    pub memory_horizon: usize,
    pub tie_embeddings: bool,
    pub value_gate_overparam: bool,
    pub attn_inner_norm: bool,
}

impl ModelConfig {
    /// Merity's SHA-RNN at full scale: 4 LSTM blocks of width 1024, gated
    /// attention on block 3, Boom feed-forward in every block.
    pub fn sharnn() -> Self {
        ModelConfig {
            d_model: 1024,
            n_blocks: 4,
            cell: CellKind::Lstm,
            block: BlockStyle::ShaRnn,
            attn_layers: vec![3],
            attn: AttnKind::Gated,
            ff: FfKind::Boom,
            d_inner: 4096,
            dropout: DropoutConfig::default(),
            bptt: 1024,
            memory_horizon: 5000,
            tie_embeddings: true,
            value_gate_overparam: true,
            attn_inner_norm: true,
        }
    }

    /// SHAQ at full scale: 4 QRNN(w=2) blocks, one ungated head on the last
    /// block, no feed-forward.
    pub fn shaq() -> Self {
        ModelConfig {
            cell: CellKind::Qrnn { window: 2 },
            block: BlockStyle::Shaq,
            attn_layers: vec![4],
            attn: AttnKind::Ungated,
            ff: FfKind::None,
            ..Self::sharnn()
        }
    }

    /// Desk-scale SHAQ: width 256, 2 blocks, window 256.
    pub fn toy_shaq() -> Self {
        ModelConfig { d_model: 256, n_blocks: 2, attn_layers: vec![2], d_inner: 1024, bptt: 256, ..Self::shaq() }
    }

    /// [`toy_shaq`](Self::toy_shaq) with an LSTM in place of the QRNN.
    pub fn toy_lstm() -> Self {
        ModelConfig { cell: CellKind::Lstm, ..Self::toy_shaq() }
    }

    /// Desk-scale SHA-RNN skeleton: width 256, 4 blocks, head on block 3.
    pub fn toy_sharnn() -> Self {
        ModelConfig { d_model: 256, d_inner: 1024, bptt: 256, ..Self::sharnn() }
    }

    /// Cache capacity `memory_horizon − p`.
    pub fn cache_cap(&self) -> usize {
        self.memory_horizon.saturating_sub(self.bptt)
    }

    /// Number of heads on each block, indexed from 0.
    pub fn heads_per_block(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_blocks];
        for &l in &self.attn_layers {
            if (1..=self.n_blocks).contains(&l) {
                n[l - 1] += 1;
            }
        }
        n
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            d: self.d_model,
            kind: self.attn,
            inner_norm: self.attn_inner_norm,
            value_gate_overparam: self.value_gate_overparam,
            weight_dropout: self.dropout.attn_weights,
        }
    }

    pub fn ff_spec(&self) -> FeedForwardSpec {
        FeedForwardSpec { kind: self.ff, d_model: self.d_model, d_inner: self.d_inner }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be positive".into());
        }
        if let Some(&l) = self.attn_layers.iter().find(|&&l| l == 0 || l > self.n_blocks) {
            return bad(format!("attn_layers entry {l} outside 1..={}", self.n_blocks));
        }
        if self.bptt < 5 {
            return bad(format!("bptt {} must be at least 5", self.bptt));
        }
        if self.memory_horizon <= self.bptt {
            return bad(format!("memory_horizon {} must exceed bptt {}", self.memory_horizon, self.bptt));
        }
        if let CellKind::Qrnn { window: 0 } = self.cell {
            return bad("qrnn window must be >= 1".into());
        }
        if self.block == BlockStyle::Shaq && self.ff != FfKind::None {
            return bad("shaq blocks have no feed-forward; set ff = none".into());
        }
        for (site, p) in self.dropout.sites() {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout.{site} = {p} outside [0, 1)"));
            }
        }
        self.ff_spec().validate()
    }

    /// Stable JSON used for hashing and checkpoints.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy_shaq()
    }
}

/// Closed-form parameter counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub head: usize,
    pub cells: usize,
    pub attention: usize,
    pub feedforward: usize,
    pub norms: usize,
    pub total: usize,
}

pub fn param_count(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let d = cfg.d_model;
    let heads = cfg.attn_layers.len();
    let norms_per_head = match cfg.block {
        BlockStyle::ShaRnn => 1,
        BlockStyle::Shaq => 2,
    };
    let ff_norm = usize::from(cfg.ff != FfKind::None);
    let ln = LayerNorm::num_params(d);
    let mut b = ParamBreakdown {
        embedding: VOCAB * d,
        head: if cfg.tie_embeddings { VOCAB } else { Linear::num_params(d, VOCAB, true) },
        cells: cfg.n_blocks * cfg.cell.num_params(d, d),
        attention: heads * cfg.attention_spec().num_params(),
        feedforward: cfg.n_blocks * cfg.ff_spec().num_params(),
        norms: ln * (cfg.n_blocks * (1 + ff_norm) + heads * norms_per_head + 1),
        total: 0,
    };
    b.total = b.embedding + b.head + b.cells + b.attention + b.feedforward + b.norms;
    Ok(b)
}

/// One attention head with its pre-attention norms.
#[derive(Clone, Debug)]
pub struct Head {
    pub norms: Vec<LayerNorm>,
    pub attn: Attention,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_in: LayerNorm,
    pub cell: Cell,
    pub heads: Vec<Head>,
    pub ff: Option<(LayerNorm, FeedForward)>,
    pub dropout: DropoutConfig,
}

/// Recurrent state and per-head memory of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    pub cell: CellState<T>,
    pub caches: Vec<MemoryCache<T>>,
}

impl Block {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let ln_in = LayerNorm::new(store, &format!("{name}.ln_in"), d)?;
        let cell = Cell::new(store, &format!("{name}.cell"), cfg.cell, d, d, rng)?;
        let norms = match cfg.block {
            BlockStyle::ShaRnn => 1,
            BlockStyle::Shaq => 2,
        };
        let mut heads = Vec::with_capacity(n_heads);
        for k in 0..n_heads {
            let hn = format!("{name}.heads.{k}");
            let norms = (0..norms)
                .map(|j| LayerNorm::new(store, &format!("{hn}.ln{j}"), d))
                .collect::<Result<Vec<_>>>()?;
            let attn = Attention::new(store, &format!("{hn}.attn"), cfg.attention_spec(), rng)?;
            heads.push(Head { norms, attn });
        }
        let ff = if cfg.ff == FfKind::None {
            None
        } else {
            Some((
                LayerNorm::new(store, &format!("{name}.ln_ff"), d)?,
                FeedForward::new(store, &format!("{name}.ff"), cfg.ff_spec(), rng)?,
            ))
        };
        Ok(Block { ln_in, cell, heads, ff, dropout: cfg.dropout })
    }

    pub fn zero_state<T: Float>(&self, batch: usize, cache_cap: usize) -> BlockState<T> {
        BlockState {
            cell: self.cell.zero_state(batch),
            caches: self.heads.iter().map(|_| MemoryCache::new(cache_cap)).collect(),
        }
    }

    /// `x: [p, B, d]` to `[p, B, d]`. Each head's cache receives the
    /// (detached) normalized stream the head attended over, so the next
    /// window sees exactly what an unsplit pass would have seen as keys.
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        state: &BlockState<T>,
    ) -> Result<(Var<'t, T>, BlockState<T>)> {
        if state.caches.len() != self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "block has {} heads but state carries {} caches",
                self.heads.len(),
                state.caches.len()
            )));
        }
        let a = self.ln_in.forward(ctx, x)?;
        let (y, cell) = self.cell.forward(ctx, a, &state.cell)?;
        let mut r = a.add(ctx.dropout(y, self.dropout.cell)?)?;
        let mut caches = Vec::with_capacity(self.heads.len());
        for (head, cache) in self.heads.iter().zip(&state.caches) {
            let mut h = r;
            for ln in &head.norms {
                h = ln.forward(ctx, h)?;
            }
            let att = head.attn.attend(ctx, h, cache)?;
            r = r.add(ctx.dropout(att, self.dropout.attn_out)?)?;
            let mut next = cache.clone();
            next.update(&h.to_tensor())?;
            caches.push(next);
        }
        if let Some((ln, ff)) = &self.ff {
            let f = ff.forward(ctx, ln.forward(ctx, r)?)?;
            r = r.add(ctx.dropout(f, self.dropout.ff)?)?;
        }
        Ok((r, BlockState { cell, caches }))
    }
}

/// Carried state of the whole model between windows.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardState<T> {
    pub blocks: Vec<BlockState<T>>,
}

impl<T: Float> ForwardState<T> {
    pub fn batch_size(&self) -> Option<usize> {
        self.blocks.first().map(|b| b.cell.batch_size())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    /// Separate `[d, 256]` projection when embeddings are untied.
    pub head: Option<Linear>,
    /// Output bias used with the tied head.
    pub head_bias: Option<ParamId>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters. The same
    /// seed gives the same draws regardless of `T`.
    pub fn build<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embed = Embedding::new(&mut store, "embed", VOCAB, d, &mut rng)?;
        let heads = cfg.heads_per_block();
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), cfg, heads[i], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&mut store, "final_ln", d)?;
        let (head, head_bias) = if cfg.tie_embeddings {
            (None, Some(store.register("head.bias", crate::tensor::Tensor::zeros(&[VOCAB]))?))
        } else {
            (Some(Linear::new(&mut store, "head", d, VOCAB, true, &mut rng)?), None)
        };
        Ok((Model { config: cfg.clone(), embed, blocks, final_ln, head, head_bias }, store))
    }

    pub fn init_state<T: Float>(&self, batch: usize) -> ForwardState<T> {
        let cap = self.config.cache_cap();
        ForwardState { blocks: self.blocks.iter().map(|b| b.zero_state(batch, cap)).collect() }
    }

    /// `ids` is a time-major `[len, batch]` window of byte ids. Returns
    /// logits `[len, batch, 256]` and the detached state for the next window.
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        ids: &[usize],
        len: usize,
        batch: usize,
        state: &ForwardState<T>,
    ) -> Result<(Var<'t, T>, ForwardState<T>)> {
        if ids.len() != len * batch {
            return Err(Error::Shape(format!("{} ids for a [{len},{batch}] window", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: VOCAB });
        }
        if state.blocks.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "state has {} blocks, model has {}",
                state.blocks.len(),
                self.blocks.len()
            )));
        }
        let mut x = self.embed.forward(ctx, ids, &[len, batch])?;
        x = ctx.dropout(x, self.config.dropout.embed)?;
        let mut next = Vec::with_capacity(self.blocks.len());
        for (block, st) in self.blocks.iter().zip(&state.blocks) {
            let (y, s) = block.forward(ctx, x, st)?;
            x = y;
            next.push(s);
        }
        let x = self.final_ln.forward(ctx, x)?;
        let logits = match (&self.head, self.head_bias) {
            (Some(lin), _) => lin.forward(ctx, x)?,
            (None, bias) => x.linear_transposed(ctx.param(self.embed.weight), bias.map(|b| ctx.param(b)))?,
        };
        Ok((logits, ForwardState { blocks: next }))
    }

    /// Forward pass plus mean cross-entropy (nats) against `targets`.
    pub fn loss<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        ids: &[usize],
        targets: &[usize],
        len: usize,
        batch: usize,
        state: &ForwardState<T>,
    ) -> Result<(Var<'t, T>, ForwardState<T>)> {
        let (logits, next) = self.forward(ctx, ids, len, batch, state)?;
        Ok((logits.cross_entropy(targets)?, next))
    }
}

/// A named model configuration from one of the ablation tables.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub config: ModelConfig,
}

/// Rows of the component-ablation table, all at full scale.
pub fn ablation_presets() -> Vec<Preset> {
    let base = ModelConfig::sharnn();
    vec![
        Preset { name: "Baseline", config: base.clone() },
        Preset { name: "Removed Boom", config: ModelConfig { ff: FfKind::None, ..base.clone() } },
        Preset { name: "Replace Boom with FC", config: ModelConfig { ff: FfKind::Fc, ..base.clone() } },
        Preset { name: "QRNN (w=2)", config: ModelConfig { cell: CellKind::Qrnn { window: 2 }, ..base.clone() } },
        Preset { name: "Mean Attention", config: ModelConfig { attn: AttnKind::Mean, ..base.clone() } },
        Preset { name: "Removal of Qs,Ks,Vs", config: ModelConfig { attn: AttnKind::Ungated, ..base } },
    ]
}

/// Rows of the attention-placement table, all at full scale.
pub fn placement_presets() -> Vec<Preset> {
    let base = ModelConfig::sharnn();
    let row = |name, n_blocks, layers: &[usize]| Preset {
        name,
        config: ModelConfig { n_blocks, attn_layers: layers.to_vec(), ..base.clone() },
    };
    vec![
        row("4 layer (1)", 4, &[1]),
        row("4 layer (2)", 4, &[2]),
        row("4 layer (3) base", 4, &[3]),
        row("4 Layer (4)", 4, &[4]),
        row("3 Layer (3,3)", 3, &[3, 3]),
        row("2 Layer (2,2)", 2, &[2, 2]),
        row("2 Layer (2)", 2, &[2]),
    ]
}

/// Scales a full-size preset down to desk scale, keeping its shape.
pub fn shrink(cfg: &ModelConfig, d_model: usize, bptt: usize) -> ModelConfig {
    ModelConfig { d_model, d_inner: cfg.d_inner / cfg.d_model * d_model, bptt, ..cfg.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn full_scale_counts_by_component() {
        let b = param_count(&ModelConfig::sharnn()).unwrap();
        assert_eq!(b.embedding, 262_144);
        assert_eq!(b.head, 256);
        assert_eq!(b.cells, 4 * 8_392_704);
        assert_eq!(b.feedforward, 4 * (1024 * 4096 + 4096));
        assert_eq!(b.total, 53_802_240);
    }

    #[test]
    fn validation_names_the_constraint() {
        let cfg = ModelConfig { attn_layers: vec![5], ..ModelConfig::sharnn() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("attn_layers"), "{err}");
        let cfg = ModelConfig { bptt: 4, ..ModelConfig::toy_shaq() };
        assert!(cfg.validate().unwrap_err().to_string().contains("bptt"));
        let cfg = ModelConfig { ff: FfKind::Boom, ..ModelConfig::toy_shaq() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logits_shape_and_tiny_registry() {
        let cfg = ModelConfig {
            d_model: 8,
            n_blocks: 1,
            attn_layers: vec![1],
            d_inner: 16,
            bptt: 5,
            memory_horizon: 20,
            ..ModelConfig::sharnn()
        };
        let (model, store) = Model::build::<f64>(&cfg, 1).unwrap();
        assert_eq!(store.num_scalars(), param_count(&cfg).unwrap().total);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = Ctx::new(&tape, &store, false, &mut rng);
        let ids: Vec<usize> = (0..10).map(|i| i * 25).collect();
        let (logits, st) = model.forward(&ctx, &ids, 5, 2, &model.init_state(2)).unwrap();
        assert_eq!(logits.shape(), vec![5, 2, 256]);
        assert_eq!(st.blocks[0].caches[0].len(), 5);
        assert!(model.forward(&ctx, &[300; 10], 5, 2, &model.init_state(2)).is_err());
    }

    #[test]
    fn presets_are_constructible() {
        for p in ablation_presets().into_iter().chain(placement_presets()) {
            assert!(param_count(&p.config).is_ok(), "{}", p.name);
            let small = shrink(&p.config, 8, 6);
            let (_, store) = Model::build::<f32>(&ModelConfig { memory_horizon: 30, ..small.clone() }, 0).unwrap();
            assert_eq!(store.num_scalars(), param_count(&small).unwrap().total, "{}", p.name);
        }
    }
}
