use std::ops::Range;

use rand::{Rng, SeedableRng};

use rand_chacha::ChaCha8Rng;

use super::block::{all_share, concat_mlp, per_token_ffn, shared_ffn};
use super::config::{RankMixerConfig, RoutingVariant};
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{moe_layer, GateMode, MoEConfig, MoeLayerVars, MoeToken};
use crate::tokenizer::{tokenize, TokenizerConfig};

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub enum MixerParams {
    TokenMixing,
    ConcatMlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Share { w: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug)]
pub struct MoeParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub router_train_w: ParamId,
    pub router_train_b: ParamId,
    pub router_infer_w: ParamId,
    pub router_infer_b: ParamId,
}

impl MoeParams {
    fn all(&self) -> [ParamId; 8] {
        [
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.router_train_w,
            self.router_train_b,
            self.router_infer_w,
            self.router_infer_b,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum FfnParams {
    PerToken { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Shared { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Moe(MoeParams),
}

impl FfnParams {
    fn ids(&self) -> Vec<ParamId> {
        match *self {
            FfnParams::PerToken { w1, b1, w2, b2 } | FfnParams::Shared { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            FfnParams::Moe(m) => m.all().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub mixer: MixerParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Training forward: DTSI gates when enabled.
    Train,
    /// Inference forward: inference-router gates only.
    Infer,
}

pub struct Forward {
    /// `[B, n_tasks]`
    pub logits: Var,
    /// Per-sample sparsity penalty `sum_{layers, tokens, experts} g_infer`,
    /// averaged over the batch. `None` without MoE.
    pub reg: Option<Var>,
    /// Inference-router gates `[B, T, N_e]` per layer.
    pub gates: Vec<Var>,
    pub tokens: Var,
    pub block_outputs: Vec<Var>,
}

/// The full dense model: tokenizer, `L` blocks, mean pooling, task heads.
/// Embedding tables are held separately (see `data::EmbeddingSet`).
#[derive(Clone, Debug)]
pub struct RankMixer {
    config: RankMixerConfig,
    moe: Option<MoEConfig>,
    tokenizer: TokenizerConfig,
    tok_w: ParamId,
    tok_b: ParamId,
    blocks: Vec<BlockParams>,
    head_w: ParamId,
    head_b: ParamId,
    store: ParamStore,
}

/// How a parameter starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    Fill(f64),
}

/// Receives parameter declarations in creation order.
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId;
}

struct Allocate<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl ParamSink for Allocate<'_> {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        match init {
            Init::Zeros => self.store.add(name, Tensor::zeros(shape)),
            Init::Fill(v) => self.store.add(name, Tensor::filled(shape, v)),
            Init::Uniform(bound) => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
                // weights are laid out [.., in, out]
                let fan_in = shape[shape.len().saturating_sub(2)];
                self.store.add_weight(name, Tensor::new(shape.to_vec(), data).expect("sized"), fan_in)
            }
        }
    }
}

/// Records names and shapes only.
#[derive(Default)]
pub struct Manifest {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn total(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn total_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(n, _)| pred(n)).map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParamSink for Manifest {
    fn declare(&mut self, name: String, shape: &[usize], _init: Init) -> ParamId {
        self.entries.push((name, shape.to_vec()));
        ParamId::from_index(self.entries.len() - 1)
    }
}

/// Router weight scale relative to fan-in init; small so the positive bias
/// starts every expert active.
const ROUTER_WEIGHT_SCALE: f64 = 1.0;
const ROUTER_BIAS_INIT: f64 = 0.1;

struct Layout {
    tok_w: ParamId,
    tok_b: ParamId,
    blocks: Vec<BlockParams>,
    head_w: ParamId,
    head_b: ParamId,
}

fn validate(config: &RankMixerConfig, moe: Option<&MoEConfig>) -> Result<()> {
    let mut errs = config.violations();
    if let Some(m) = moe {
        errs.extend(m.violations(config.hidden()));
        if config.toggles.shared_ffn {
            errs.push("moe cannot be combined with the shared-ffn toggle".into());
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs.join("; ")))
    }
}

fn declare_all<S: ParamSink>(
    sink: &mut S,
    config: &RankMixerConfig,
    moe: Option<&MoEConfig>,
    tokenizer: &TokenizerConfig,
) -> Layout {
    let (t, d, kd) = (config.tokens, config.dim, config.hidden());
    let tok_w = sink.declare(
        "tokenizer.w".into(),
        &[t, tokenizer.slice_width, d],
        Init::Uniform(1.0 / (tokenizer.slice_width as f64).sqrt()),
    );
    let tok_b = sink.declare("tokenizer.b".into(), &[t, d], Init::Zeros);

    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let ln1 = LayerNormParams {
            gain: sink.declare(format!("layer{l}.ln1.gain"), &[d], Init::Fill(1.0)),
            bias: sink.declare(format!("layer{l}.ln1.bias"), &[d], Init::Zeros),
        };
        let ln2 = LayerNormParams {
            gain: sink.declare(format!("layer{l}.ln2.gain"), &[d], Init::Fill(1.0)),
            bias: sink.declare(format!("layer{l}.ln2.bias"), &[d], Init::Zeros),
        };
        let td = t * d;
        let td_bound = Init::Uniform(1.0 / (td as f64).sqrt());
        let mixer = match config.routing {
            _ if config.toggles.no_mixing => MixerParams::TokenMixing,
            RoutingVariant::TokenMixing => MixerParams::TokenMixing,
            RoutingVariant::AllConcatMlp => MixerParams::ConcatMlp {
                w1: sink.declare(format!("layer{l}.concat_mlp.w1"), &[td, td], td_bound),
                b1: sink.declare(format!("layer{l}.concat_mlp.b1"), &[td], Init::Zeros),
                w2: sink.declare(format!("layer{l}.concat_mlp.w2"), &[td, td], td_bound),
                b2: sink.declare(format!("layer{l}.concat_mlp.b2"), &[td], Init::Zeros),
            },
            RoutingVariant::AllShare => MixerParams::Share {
                w: sink.declare(format!("layer{l}.share.w"), &[td, d], td_bound),
                b: sink.declare(format!("layer{l}.share.b"), &[d], Init::Zeros),
            },
        };
        let in1 = 1.0 / (d as f64).sqrt();
        let in2 = 1.0 / (kd as f64).sqrt();
        let ffn = if let Some(m) = moe {
            let ne = m.experts;
            let rw = Init::Uniform(ROUTER_WEIGHT_SCALE * in1);
            let rb = Init::Fill(ROUTER_BIAS_INIT);
            FfnParams::Moe(MoeParams {
                w1: sink.declare(format!("layer{l}.moe.w1"), &[t, d, kd], Init::Uniform(in1)),
                b1: sink.declare(format!("layer{l}.moe.b1"), &[t, kd], Init::Zeros),
                w2: sink.declare(format!("layer{l}.moe.w2"), &[t, kd, d], Init::Uniform(in2)),
                b2: sink.declare(format!("layer{l}.moe.b2"), &[t, ne, d], Init::Zeros),
                router_train_w: sink.declare(format!("layer{l}.moe.router_train.w"), &[t, d, ne], rw),
                router_train_b: sink.declare(format!("layer{l}.moe.router_train.b"), &[t, ne], rb),
                router_infer_w: sink.declare(format!("layer{l}.moe.router_infer.w"), &[t, d, ne], rw),
                router_infer_b: sink.declare(format!("layer{l}.moe.router_infer.b"), &[t, ne], rb),
            })
        } else if config.toggles.shared_ffn {
            FfnParams::Shared {
                w1: sink.declare(format!("layer{l}.ffn.w1"), &[d, kd], Init::Uniform(in1)),
                b1: sink.declare(format!("layer{l}.ffn.b1"), &[kd], Init::Zeros),
                w2: sink.declare(format!("layer{l}.ffn.w2"), &[kd, d], Init::Uniform(in2)),
                b2: sink.declare(format!("layer{l}.ffn.b2"), &[d], Init::Zeros),
            }
        } else {
            FfnParams::PerToken {
                w1: sink.declare(format!("layer{l}.ffn.w1"), &[t, d, kd], Init::Uniform(in1)),
                b1: sink.declare(format!("layer{l}.ffn.b1"), &[t, kd], Init::Zeros),
                w2: sink.declare(format!("layer{l}.ffn.w2"), &[t, kd, d], Init::Uniform(in2)),
                b2: sink.declare(format!("layer{l}.ffn.b2"), &[t, d], Init::Zeros),
            }
        };
        blocks.push(BlockParams { mixer, ln1, ln2, ffn });
    }
    let n_tasks = config.tasks.len();
    let head_w = sink.declare("heads.w".into(), &[d, n_tasks], Init::Uniform(1.0 / (d as f64).sqrt()));
    let head_b = sink.declare("heads.b".into(), &[n_tasks], Init::Zeros);
    Layout { tok_w, tok_b, blocks, head_w, head_b }
}

impl RankMixer {
    pub fn new(config: RankMixerConfig, moe: Option<MoEConfig>, input_width: usize, seed: u64) -> Result<Self> {
        validate(&config, moe.as_ref())?;
        let tokenizer = TokenizerConfig::for_input(input_width, config.tokens, config.dim)?;
        let mut store = ParamStore::new();
        let mut sink = Allocate { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let Layout { tok_w, tok_b, blocks, head_w, head_b } = declare_all(&mut sink, &config, moe.as_ref(), &tokenizer);
        Ok(RankMixer { config, moe, tokenizer, tok_w, tok_b, blocks, head_w, head_b, store })
    }

    /// Names and shapes of every parameter `new` would allocate, without
    /// allocating them.
    pub fn manifest(config: &RankMixerConfig, moe: Option<&MoEConfig>, input_width: usize) -> Result<Manifest> {
        validate(config, moe)?;
        let tokenizer = TokenizerConfig::for_input(input_width, config.tokens, config.dim)?;
        let mut m = Manifest::default();
        declare_all(&mut m, config, moe, &tokenizer);
        Ok(m)
    }

    pub fn config(&self) -> &RankMixerConfig {
        &self.config
    }

    pub fn moe_config(&self) -> Option<&MoEConfig> {
        self.moe.as_ref()
    }

    pub fn tokenizer_config(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn tokenizer_params(&self) -> (ParamId, ParamId) {
        (self.tok_w, self.tok_b)
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Parameters of every FFN (dense, shared, or expert banks without routers).
    pub fn ffn_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b.ffn {
                FfnParams::PerToken { w1, b1, w2, b2 } | FfnParams::Shared { w1, b1, w2, b2 } => [w1, b1, w2, b2]
                    .iter()
                    .map(|&p| self.store.get(p).len())
                    .sum::<usize>(),
                FfnParams::Moe(m) => [m.w1, m.b1, m.w2, m.b2].iter().map(|&p| self.store.get(p).len()).sum(),
            })
            .sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Forward pass from the concatenated embeddings `[B, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, emb: Var, mode: Mode) -> Result<Forward> {
        let x0 = tokenize(g, emb, p.var(self.tok_w), p.var(self.tok_b), &self.tokenizer)?;
        let mut x = x0;
        let mut gates = Vec::new();
        let mut reg_terms = Vec::new();
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (out, gate) = self.block_forward(g, p, blk, x, mode)?;
            if let Some(gv) = gate {
                reg_terms.push(g.sum(gv));
                gates.push(gv);
            }
            block_outputs.push(out);
            x = out;
        }
        let pooled = g.mean_tokens(x)?;
        let logits = g.matmul(pooled, p.var(self.head_w))?;
        let logits = g.add_bias(logits, p.var(self.head_b))?;
        let reg = if reg_terms.is_empty() {
            None
        } else {
            let batch = g.shape(emb)[0] as f64;
            let mut total = reg_terms[0];
            for &r in &reg_terms[1..] {
                total = g.add(total, r)?;
            }
            Some(g.scale(total, 1.0 / batch))
        };
        Ok(Forward { logits, reg, gates, tokens: x0, block_outputs })
    }

    /// One block: mixing sublayer then FFN sublayer, each with residual + LN
    /// unless toggled off.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        blk: &BlockParams,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<Var>)> {
        let cfg = &self.config;
        let tg = cfg.toggles;
        let eps = cfg.ln_eps;
        let s_pre = if tg.no_mixing {
            x
        } else {
            match blk.mixer {
                MixerParams::TokenMixing => {
                    let m = g.token_mix(x, cfg.heads())?;
                    if tg.no_residual {
                        m
                    } else {
                        g.add(m, x)?
                    }
                }
                MixerParams::ConcatMlp { w1, b1, w2, b2 } => {
                    let m = concat_mlp(g, x, p.var(w1), p.var(b1), p.var(w2), p.var(b2))?;
                    if tg.no_residual {
                        m
                    } else {
                        g.add(m, x)?
                    }
                }
                // every token sees the same vector, so no per-token residual here
                MixerParams::Share { w, b } => all_share(g, x, p.var(w), p.var(b))?,
            }
        };
        let s = if tg.no_ln { s_pre } else { g.layer_norm(s_pre, p.var(blk.ln1.gain), p.var(blk.ln1.bias), eps)? };
        let (v, gate) = match blk.ffn {
            FfnParams::PerToken { w1, b1, w2, b2 } => (per_token_ffn(g, s, p.var(w1), p.var(b1), p.var(w2), p.var(b2))?, None),
            FfnParams::Shared { w1, b1, w2, b2 } => (shared_ffn(g, s, p.var(w1), p.var(b1), p.var(w2), p.var(b2))?, None),
            FfnParams::Moe(m) => {
                let moe = self.moe.as_ref().expect("moe params imply moe config");
                let vars = MoeLayerVars {
                    w1: p.var(m.w1),
                    b1: p.var(m.b1),
                    w2: p.var(m.w2),
                    b2: p.var(m.b2),
                    router_train_w: p.var(m.router_train_w),
                    router_train_b: p.var(m.router_train_b),
                    router_infer_w: p.var(m.router_infer_w),
                    router_infer_b: p.var(m.router_infer_b),
                };
                let gm = if mode == Mode::Train && moe.dtsi { GateMode::Dtsi } else { GateMode::InferOnly };
                let out = moe_layer(g, s, &vars, moe.experts, gm)?;
                (out.v, Some(out.infer_gates))
            }
        };
        let x_pre = if tg.no_residual { v } else { g.add(v, s)? };
        let out = if tg.no_ln { x_pre } else { g.layer_norm(x_pre, p.var(blk.ln2.gain), p.var(blk.ln2.bias), eps)? };
        Ok((out, gate))
    }

    /// Sum over tasks of mean BCE-with-logits. `labels[task]` holds one label per sample.
    pub fn task_loss(&self, g: &mut Graph, logits: Var, labels: &[Vec<f64>]) -> Result<Var> {
        let n_tasks = self.config.tasks.len();
        if labels.len() != n_tasks {
            return Err(Error::shape(format!("{} label columns for {n_tasks} tasks", labels.len())));
        }
        let mut total: Option<Var> = None;
        for (t, lab) in labels.iter().enumerate() {
            let col = g.slice_last(logits, t, 1)?;
            let l = g.bce_with_logits(col, lab)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        Ok(total.expect("at least one task"))
    }

    /// Token `t` of layer `l` as a standalone MoE bank.
    pub fn moe_token(&self, layer: usize, token: usize) -> Option<MoeToken> {
        let moe = self.moe.as_ref()?;
        let FfnParams::Moe(m) = self.blocks.get(layer)?.ffn else { return None };
        let slab = |id: ParamId| {
            let t = self.store.get(id);
            let per = t.len() / self.config.tokens;
            t.data()[token * per..(token + 1) * per].to_vec()
        };
        Some(MoeToken {
            dim: self.config.dim,
            experts: moe.experts,
            expert_hidden: self.config.hidden() / moe.experts,
            w1: slab(m.w1),
            b1: slab(m.b1),
            w2: slab(m.w2),
            b2: slab(m.b2),
            router_train_w: slab(m.router_train_w),
            router_train_b: slab(m.router_train_b),
            router_infer_w: slab(m.router_infer_w),
            router_infer_b: slab(m.router_infer_b),
        })
    }

    /// Flat serialization order: tokenizer; every layer's LayerNorms; every
    /// layer's mixer parameters (variant-specific); every layer's FFN
    /// parameters token by token; task heads.
    pub fn segments(&self) -> Vec<(ParamId, Range<usize>)> {
        let whole = |id: ParamId| (id, 0..self.store.get(id).len());
        let mut out = vec![whole(self.tok_w), whole(self.tok_b)];
        for b in &self.blocks {
            out.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias].map(whole));
        }
        for b in &self.blocks {
            match b.mixer {
                MixerParams::TokenMixing => {}
                MixerParams::ConcatMlp { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2].map(whole)),
                MixerParams::Share { w, b } => out.extend([w, b].map(whole)),
            }
        }
        for b in &self.blocks {
            let ids = b.ffn.ids();
            if matches!(b.ffn, FfnParams::Shared { .. }) {
                out.extend(ids.into_iter().map(whole));
                continue;
            }
            let t = self.config.tokens;
            for tok in 0..t {
                for &id in &ids {
                    let per = self.store.get(id).len() / t;
                    out.push((id, tok * per..(tok + 1) * per));
                }
            }
        }
        out.push(whole(self.head_w));
        out.push(whole(self.head_b));
        out
    }
}
