//! The ensembled forward pass: every model's block `j` consumes the same
//! aggregated feature, and the aggregated block outputs feed the skip stack.

use afa_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    check_input, denoiser_graph, BlockFeature, BlockRunner, Condition, DenoiserParams, DenoiserSpec, ModelContext,
    StackStats,
};
use crate::diffusion::{check_batch, Denoiser};
use crate::error::{param_err, shape_err, Error, Result};
use crate::sabw::{AttentionMap, SabwParams};

/// How the models' features are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    /// Learned spatial attention at every block on a shared feature stream.
    #[default]
    Full,
    /// Each model runs privately up to the last block, whose outputs are
    /// mixed by the learned attention.
    LastBlockOnly,
    /// Uniform mean at every block on a shared feature stream.
    BlockAveraging,
    /// Uniform mean of the models' final noise predictions.
    NoiseAveraging,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleBundle<T = f32> {
    pub models: Vec<DenoiserParams<T>>,
    pub sabw: SabwParams<T>,
    pub mode: EnsembleMode,
}

/// Result of recording an ensembled forward on a graph.
#[derive(Clone, Debug)]
pub struct AfaOutput {
    pub eps: Var,
    /// Attention map `[B, h, w, N]` per block, where one was computed.
    pub attention: Vec<Option<Var>>,
    pub stats: StackStats,
}

impl<T: Real> EnsembleBundle<T> {
    pub fn new(models: Vec<DenoiserParams<T>>, sabw: SabwParams<T>) -> Result<Self> {
        let bundle = EnsembleBundle {
            models,
            sabw,
            mode: EnsembleMode::Full,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn with_mode(mut self, mode: EnsembleMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .models
            .first()
            .ok_or_else(|| param_err("an ensemble needs at least one model"))?;
        for m in &self.models {
            m.validate()?;
            if m.spec != first.spec {
                return Err(Error::Structure("ensembled models must share one spec".into()));
            }
        }
        if self.sabw.n_models != self.models.len() || self.sabw.spec != first.spec {
            return Err(Error::Structure(format!(
                "aggregator built for {} models of another spec, bundle has {}",
                self.sabw.n_models,
                self.models.len()
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.models[0].spec
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    fn contexts(&self, g: &mut Graph<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Vec<ModelContext>> {
        self.models.iter().map(|m| m.context(g, conds, t)).collect()
    }

    /// Block `j` of every model on the same input, with frozen base weights.
    fn model_blocks(&self, g: &mut Graph<T>, j: usize, x: Var, ctxs: &[ModelContext]) -> Vec<Var> {
        self.models
            .iter()
            .zip(ctxs)
            .map(|(m, ctx)| m.block(g, j, x, ctx))
            .collect()
    }
}

/// Uniform `[B, N]` weights.
fn uniform_weights<T: Real>(g: &mut Graph<T>, batch: usize, n: usize) -> Var {
    g.constant(Tensor::full(&[batch, n], T::one() / T::lit(n as f64)))
}

/// Records the ensembled forward on `g`. Base-model parameters are bound as
/// frozen regardless of the graph's trainable flag; aggregator parameters
/// follow it.
pub fn afa_graph<T: Real>(
    bundle: &EnsembleBundle<T>,
    g: &mut Graph<T>,
    x_t: Var,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<AfaOutput> {
    let spec = bundle.spec();
    let k = spec.num_blocks();
    let batch = g.shape(x_t)[0];
    let mut attention = vec![None; k];

    let trainable = g.set_trainable(false);
    let ctxs = bundle.contexts(g, conds, t);
    g.set_trainable(trainable);
    let ctxs = ctxs?;
    let sctx = bundle.sabw.context(g, conds, t)?;

    let (eps, stats) = match bundle.mode {
        EnsembleMode::Full | EnsembleMode::BlockAveraging => {
            let mut runner = BlockRunner::new(spec);
            let mut x = x_t;
            for j in 0..k {
                let input = runner.enter(g, j, x)?;
                let trainable = g.set_trainable(false);
                let feats = bundle.model_blocks(g, j, input, &ctxs);
                g.set_trainable(trainable);
                x = if bundle.mode == EnsembleMode::Full {
                    let (y, a) = bundle.sabw.aggregate_graph(g, j, &feats, &sctx);
                    attention[j] = Some(a);
                    y
                } else {
                    let w = uniform_weights(g, batch, feats.len());
                    g.weighted_sum(w, &feats)
                };
                runner.leave(j, x)?;
            }
            (x, runner.finish()?)
        }
        EnsembleMode::LastBlockOnly => {
            let last = k - 1;
            let trainable = g.set_trainable(false);
            let private: Result<Vec<(Var, StackStats)>> = bundle
                .models
                .iter()
                .zip(&ctxs)
                .map(|(m, ctx)| {
                    let mut runner = BlockRunner::new(spec);
                    let mut x = x_t;
                    for j in 0..last {
                        let input = runner.enter(g, j, x)?;
                        x = m.block(g, j, input, ctx);
                        runner.leave(j, x)?;
                    }
                    let input = runner.enter(g, last, x)?;
                    let y = m.block(g, last, input, ctx);
                    runner.leave(last, y)?;
                    Ok((y, runner.finish()?))
                })
                .collect();
            g.set_trainable(trainable);
            let private = private?;
            let feats: Vec<Var> = private.iter().map(|p| p.0).collect();
            let (y, a) = bundle.sabw.aggregate_graph(g, last, &feats, &sctx);
            attention[last] = Some(a);
            (y, private[0].1)
        }
        EnsembleMode::NoiseAveraging => {
            let trainable = g.set_trainable(false);
            let outs: Result<Vec<(Var, StackStats)>> = bundle
                .models
                .iter()
                .map(|m| denoiser_graph(m, g, x_t, conds, t))
                .collect();
            g.set_trainable(trainable);
            let outs = outs?;
            let feats: Vec<Var> = outs.iter().map(|o| o.0).collect();
            let w = uniform_weights(g, batch, feats.len());
            (g.weighted_sum(w, &feats), outs[0].1)
        }
    };
    Ok(AfaOutput { eps, attention, stats })
}

/// Ensembled noise prediction for `x_t: [B,H,W,C]`.
pub fn afa_forward<T: Real>(
    bundle: &EnsembleBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<Tensor<T>> {
    Ok(afa_forward_traced(bundle, x_t, conds, t)?.0)
}

/// [`afa_forward`] that also reports the skip-stack counters.
pub fn afa_forward_traced<T: Real>(
    bundle: &EnsembleBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<(Tensor<T>, StackStats)> {
    check_input(bundle.spec(), x_t, conds, t)?;
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let out = afa_graph(bundle, &mut g, x, conds, t)?;
    Ok((g.value(out.eps).clone(), out.stats))
}

/// The attention maps of the requested blocks for one forward pass.
pub fn afa_attention<T: Real>(
    bundle: &EnsembleBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
    blocks: &[usize],
) -> Result<Vec<(usize, AttentionMap<T>)>> {
    check_input(bundle.spec(), x_t, conds, t)?;
    for &j in blocks {
        bundle.spec().check_block(j)?;
    }
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let out = afa_graph(bundle, &mut g, x, conds, t)?;
    blocks
        .iter()
        .map(|&j| match out.attention[j] {
            Some(a) => Ok((j, AttentionMap { data: g.value(a).clone() })),
            None => Err(param_err(format!("block {j} has no attention map in {:?} mode", bundle.mode))),
        })
        .collect()
}

/// One ensembled block: every model's block `j` on `x`, mixed by the
/// aggregator (or averaged in the averaging modes).
pub fn afa_block<T: Real>(
    bundle: &EnsembleBundle<T>,
    j: usize,
    x: &BlockFeature<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<BlockFeature<T>> {
    let spec = bundle.spec();
    spec.check_block(j)?;
    if x.block_index != j {
        return Err(param_err(format!("feature belongs to block {}, not {j}", x.block_index)));
    }
    check_batch(&x.data, conds, t)?;
    if x.data.shape()[1..] != spec.block_shape(j).input {
        return Err(shape_err(format!("block {j} input {:?}", x.data.shape())));
    }
    let mut g = Graph::new();
    let ctxs = bundle.contexts(&mut g, conds, t)?;
    let sctx = bundle.sabw.context(&mut g, conds, t)?;
    let xv = g.constant(x.data.clone());
    let feats = bundle.model_blocks(&mut g, j, xv, &ctxs);
    let y = match bundle.mode {
        EnsembleMode::Full | EnsembleMode::LastBlockOnly => bundle.sabw.aggregate_graph(&mut g, j, &feats, &sctx).0,
        EnsembleMode::BlockAveraging | EnsembleMode::NoiseAveraging => {
            let w = uniform_weights(&mut g, x.data.shape()[0], feats.len());
            g.weighted_sum(w, &feats)
        }
    };
    Ok(BlockFeature {
        data: g.value(y).clone(),
        block_index: j,
    })
}

impl<T: Real> Denoiser<T> for EnsembleBundle<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        afa_forward(self, x_t, conds, t)
    }
}
