//! Spatial-aware block-wise aggregator: per block, predicts a softmax weight
//! over the N models at every spatial location and mixes their features.
//!
//! Block `j` computes
//! `logits = Proj(Transformer(Res(concat(y_1..y_N) + Time(t)), c))` where
//! `Proj` is a zero-initialised per-location linear map to `N` outputs, so a
//! fresh aggregator averages the models uniformly.

use afa_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{stack_tokens, time_embedding_batch, BlockFeature, Condition, DenoiserSpec};
use crate::diffusion::check_batch;
use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{join, Linear, Params, ResLayer, TransformerLayer};
use crate::random::stream;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SabwConfig {
    /// Hidden width `d`; `None` uses the block's own width `c_j`.
    pub hidden: Option<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for SabwConfig {
    fn default() -> Self {
        SabwConfig {
            hidden: None,
            heads: 1,
            mlp_ratio: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SabwBlock<T> {
    pub time_proj: Linear<T>,
    pub res: ResLayer<T>,
    pub attn: TransformerLayer<T>,
    /// Zero-initialised projection `d -> N`.
    pub proj: Linear<T>,
}

impl<T: Real> SabwBlock<T> {
    fn logits(&self, g: &mut Graph<T>, feats: &[Var], cond: Var, tsin: Var) -> Var {
        let x = if feats.len() == 1 { feats[0] } else { g.concat(feats) };
        let gamma = self.time_proj.forward(g, tsin);
        let x = g.add_per_batch(x, gamma);
        let h = self.res.forward(g, x, None);
        let h = self.attn.forward(g, h, cond);
        self.proj.forward(g, h)
    }
}

impl<T: Real> Params<T> for SabwBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.res.visit(&join(prefix, "res"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.res.visit_mut(&join(prefix, "res"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SabwParams<T = f32> {
    pub n_models: usize,
    pub spec: DenoiserSpec,
    pub config: SabwConfig,
    pub blocks: Vec<SabwBlock<T>>,
}

/// Raw softmax inputs `[B, h, w, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLogits<T = f32> {
    pub data: Tensor<T>,
}

/// Per-location model weights `[B, h, w, N]`, summing to one over `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub data: Tensor<T>,
}

pub fn sabw_init<T: Real>(n: usize, spec: &DenoiserSpec, config: &SabwConfig, seed: u64) -> Result<SabwParams<T>> {
    spec.validate()?;
    if n == 0 {
        return Err(param_err("an ensemble needs at least one model"));
    }
    if config.hidden == Some(0) {
        return Err(param_err("hidden width must be positive"));
    }
    let mut rng = stream(seed, 0x5ab3);
    let mut blocks = Vec::with_capacity(spec.num_blocks());
    for shape in spec.shape_table() {
        let c = shape.output[2];
        let d = config.hidden.unwrap_or(c);
        blocks.push(SabwBlock {
            time_proj: Linear::new(&mut rng, spec.time_dim(), n * c),
            res: ResLayer::new(&mut rng, n * c, d, None),
            attn: TransformerLayer::new(&mut rng, d, spec.cond_dim, config.heads, config.mlp_ratio)?,
            proj: Linear::zeros(d, n),
        });
    }
    Ok(SabwParams {
        n_models: n,
        spec: spec.clone(),
        config: config.clone(),
        blocks,
    })
}

/// Per-forward SABW inputs: raw condition tokens and timestep sinusoids.
#[derive(Clone, Copy, Debug)]
pub struct SabwContext {
    pub cond: Var,
    pub tsin: Var,
}

/// Binds raw condition tokens and timestep sinusoids for the auxiliary
/// networks (aggregator and routers), which keep their own time embedding.
pub fn aux_context<T: Real>(
    g: &mut Graph<T>,
    spec: &DenoiserSpec,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<SabwContext> {
    let tokens = stack_tokens(conds, spec.cond_tokens, spec.cond_dim)?;
    let cond = g.constant(tokens);
    let tsin = g.constant(time_embedding_batch(t, spec.time_dim())?);
    Ok(SabwContext { cond, tsin })
}

impl<T: Real> SabwParams<T> {
    /// Binds the SABW inputs for a batch. Null conditions keep their raw
    /// (zero) tokens.
    pub fn context(&self, g: &mut Graph<T>, conds: &[Condition<T>], t: &[usize]) -> Result<SabwContext> {
        aux_context(g, &self.spec, conds, t)
    }

    /// Records the logits of block `j`: `[B, h, w, N]`.
    pub fn logits_graph(&self, g: &mut Graph<T>, j: usize, feats: &[Var], ctx: &SabwContext) -> Var {
        assert_eq!(feats.len(), self.n_models, "one feature per model");
        self.blocks[j].logits(g, feats, ctx.cond, ctx.tsin)
    }

    /// Records attention and aggregation for block `j`, returning the mixed
    /// feature and the attention map.
    pub fn aggregate_graph(&self, g: &mut Graph<T>, j: usize, feats: &[Var], ctx: &SabwContext) -> (Var, Var) {
        let logits = self.logits_graph(g, j, feats, ctx);
        let attn = g.softmax(logits);
        (g.weighted_sum(attn, feats), attn)
    }

    fn check_feats(&self, j: usize, feats: &[BlockFeature<T>]) -> Result<()> {
        self.spec.check_block(j)?;
        if feats.len() != self.n_models {
            return Err(shape_err(format!("{} features for {} models", feats.len(), self.n_models)));
        }
        let expected = self.spec.block_shape(j).output;
        for f in feats {
            if f.data.shape().len() != 4 || f.data.shape()[1..] != expected || f.data.shape() != feats[0].data.shape() {
                return Err(shape_err(format!("block {j} feature {:?}, expected [B, {expected:?}]", f.data.shape())));
            }
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for SabwParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}

/// Attention logits of block `j` for the `N` batched block outputs.
pub fn sabw_logits<T: Real>(
    params: &SabwParams<T>,
    j: usize,
    feats: &[BlockFeature<T>],
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<AttentionLogits<T>> {
    params.check_feats(j, feats)?;
    check_batch(&feats[0].data, conds, t)?;
    let mut g = Graph::new();
    let ctx = params.context(&mut g, conds, t)?;
    let vars: Vec<Var> = feats.iter().map(|f| g.constant(f.data.clone())).collect();
    let l = params.logits_graph(&mut g, j, &vars, &ctx);
    Ok(AttentionLogits { data: g.value(l).clone() })
}

/// Softmax over the model axis at every location.
pub fn sabw_attention<T: Real>(logits: &AttentionLogits<T>) -> Result<AttentionMap<T>> {
    if !logits.data.is_finite() {
        return Err(Error::Numeric("non-finite attention logits".into()));
    }
    if logits.data.is_empty() {
        return Err(shape_err("empty attention logits"));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.data.clone());
    let a = g.softmax(l);
    Ok(AttentionMap { data: g.value(a).clone() })
}

/// `sum_i A[.., i] * feats[i]`, the map broadcast across channels.
pub fn sabw_aggregate<T: Real>(a: &AttentionMap<T>, feats: &[BlockFeature<T>]) -> Result<BlockFeature<T>> {
    let n = feats.len();
    if n == 0 || a.data.shape().is_empty() || a.data.last_dim() != n {
        return Err(shape_err(format!("attention {:?} for {n} features", a.data.shape())));
    }
    let fshape = feats[0].data.shape();
    let ashape = a.data.shape();
    if fshape.len() != ashape.len() || fshape[..fshape.len() - 1] != ashape[..ashape.len() - 1] {
        return Err(shape_err(format!("attention {ashape:?} vs feature {fshape:?}")));
    }
    if feats.iter().any(|f| f.data.shape() != fshape) {
        return Err(shape_err("features differ in shape"));
    }
    let mut g = Graph::new();
    let w = g.constant(a.data.clone());
    let vars: Vec<Var> = feats.iter().map(|f| g.constant(f.data.clone())).collect();
    let y = g.weighted_sum(w, &vars);
    Ok(BlockFeature {
        data: g.value(y).clone(),
        block_index: feats[0].block_index,
    })
}
