//! Mixture-of-experts baselines: a router picks one model per block (or one
//! model for the whole forward). Training uses Gumbel-softmax probabilities
//! with a straight-through one-hot; inference runs only the argmax expert.

use afa_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    block_forward, check_input, denoiser_forward, denoiser_graph, BlockFeature, BlockKind, BlockRunner, Condition,
    DenoiserParams, DenoiserSpec, ModelContext,
};
use crate::diffusion::{check_batch, Denoiser};
use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{join, Linear, Params, ResLayer, TransformerLayer};
use crate::random::{stream, SeededRng};
use crate::sabw::{aux_context, SabwConfig, SabwContext};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeLevel {
    /// One routing decision per block.
    #[default]
    Block,
    /// One routing decision before the first block selects a whole model.
    Denoiser,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    pub tau: f64,
    pub seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { tau: 1.0, seed: 0 }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(param_err(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Router for one decision point:
/// `Linear(mean_xy(Transformer(Res(x + Time(t)), c)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterBlock<T> {
    pub time_proj: Linear<T>,
    pub res: ResLayer<T>,
    pub attn: TransformerLayer<T>,
    pub head: Linear<T>,
}

impl<T: Real> RouterBlock<T> {
    fn logits(&self, g: &mut Graph<T>, x: Var, ctx: &SabwContext) -> Var {
        let gamma = self.time_proj.forward(g, ctx.tsin);
        let h = g.add_per_batch(x, gamma);
        let h = self.res.forward(g, h, None);
        let h = self.attn.forward(g, h, ctx.cond);
        let pooled = g.spatial_mean(h);
        self.head.forward(g, pooled)
    }
}

impl<T: Real> Params<T> for RouterBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.res.visit(&join(prefix, "res"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.res.visit_mut(&join(prefix, "res"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Routers for every block (block level) or a single router on the noisy
/// image (denoiser level).
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T = f32> {
    pub n_models: usize,
    pub spec: DenoiserSpec,
    pub level: MoeLevel,
    pub config: SabwConfig,
    pub blocks: Vec<RouterBlock<T>>,
}

impl<T: Real> Params<T> for RouterParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}

/// Builds routers; the hidden width defaults to the width of the block's
/// resolution level.
pub fn router_init<T: Real>(
    n: usize,
    spec: &DenoiserSpec,
    level: MoeLevel,
    config: &SabwConfig,
    seed: u64,
) -> Result<RouterParams<T>> {
    spec.validate()?;
    if n == 0 {
        return Err(param_err("a mixture needs at least one expert"));
    }
    let mut rng = stream(seed, 0x2047);
    let points = match level {
        MoeLevel::Block => spec.num_blocks(),
        MoeLevel::Denoiser => 1,
    };
    let mut blocks = Vec::with_capacity(points);
    for j in 0..points {
        let shape = spec.block_shape(j);
        let c = shape.input[2];
        let d = config.hidden.unwrap_or(spec.channels(shape.level));
        blocks.push(RouterBlock {
            time_proj: Linear::new(&mut rng, spec.time_dim(), c),
            res: ResLayer::new(&mut rng, c, d, None),
            attn: TransformerLayer::new(&mut rng, d, spec.cond_dim, config.heads, config.mlp_ratio)?,
            head: Linear::new(&mut rng, d, n),
        });
    }
    Ok(RouterParams {
        n_models: n,
        spec: spec.clone(),
        level,
        config: config.clone(),
        blocks,
    })
}

/// Router logits `[B, N]` at decision point `j` for the block input `x`.
pub fn router_logits<T: Real>(
    zeta: &RouterParams<T>,
    j: usize,
    x: &BlockFeature<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<Tensor<T>> {
    if j >= zeta.blocks.len() {
        return Err(param_err(format!("no router for block {j}")));
    }
    check_batch(&x.data, conds, t)?;
    if x.data.shape()[1..] != zeta.spec.block_shape(j).input {
        return Err(shape_err(format!("router {j} input {:?}", x.data.shape())));
    }
    let mut g = Graph::new();
    let ctx = aux_context(&mut g, &zeta.spec, conds, t)?;
    let xv = g.constant(x.data.clone());
    let l = zeta.blocks[j].logits(&mut g, xv, &ctx);
    Ok(g.value(l).clone())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn sample_gumbel(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((l + g) / tau)` for given noise `g`.
pub fn gumbel_probs_with_noise(l: &[f64], g: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {tau}")));
    }
    if l.len() != g.len() || l.is_empty() {
        return Err(shape_err("logits and noise differ in length"));
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite router logits".into()));
    }
    let z: Vec<f64> = l.iter().zip(g).map(|(a, b)| (a + b) / tau).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Gumbel-softmax probabilities with fresh noise from `rng`.
pub fn gumbel_probs(l: &[f64], cfg: &GumbelConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
    cfg.validate()?;
    let g = sample_gumbel(rng, l.len());
    gumbel_probs_with_noise(l, &g, cfg.tau)
}

/// Forward value of the straight-through selection: the one-hot of `p`.
pub fn straight_through(p: &[f64]) -> Vec<f64> {
    let k = argmax(p);
    (0..p.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

/// Records `onehot(p) + (p - stopgrad(p))` row-wise over the last axis: the
/// value is exactly one-hot while gradients follow `p`.
pub fn straight_through_graph<T: Real>(g: &mut Graph<T>, p: Var) -> Var {
    let pv = g.value(p).clone();
    let n = pv.last_dim();
    let mut hot = vec![T::zero(); pv.len()];
    for (r, row) in pv.data().chunks(n).enumerate() {
        hot[r * n + argmax(row)] = T::one();
    }
    let hot = g.constant(Tensor::new(pv.shape(), hot));
    let frozen = g.detach(p);
    let delta = g.sub(p, frozen);
    g.add(hot, delta)
}

/// `sum_i p'[.., i] * y_i` with per-sample selections `p': [B, N]`.
pub fn moe_block_train<T: Real>(experts: &[BlockFeature<T>], p_prime: &Tensor<T>) -> Result<BlockFeature<T>> {
    let n = experts.len();
    if n == 0 || p_prime.shape().len() != 2 || p_prime.shape()[1] != n {
        return Err(shape_err(format!("selection {:?} for {n} experts", p_prime.shape())));
    }
    let shape = experts[0].data.shape();
    if experts.iter().any(|e| e.data.shape() != shape) || shape[0] != p_prime.shape()[0] {
        return Err(shape_err("expert outputs must share the batch shape"));
    }
    let mut g = Graph::new();
    let w = g.constant(p_prime.clone());
    let feats: Vec<Var> = experts.iter().map(|e| g.constant(e.data.clone())).collect();
    let y = g.weighted_sum(w, &feats);
    Ok(BlockFeature {
        data: g.value(y).clone(),
        block_index: experts[0].block_index,
    })
}

/// Frozen experts with their routers.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeBundle<T = f32> {
    pub models: Vec<DenoiserParams<T>>,
    pub routers: RouterParams<T>,
    pub gumbel: GumbelConfig,
}

/// Gumbel noise used by a training-mode forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GumbelNoise {
    Seeded(u64),
    /// No noise: the selection is the router argmax.
    Off,
}

/// Training-mode forward recorded on a graph.
#[derive(Clone, Debug)]
pub struct MoeTrainOutput {
    pub eps: Var,
    /// Router logits per decision point, `[B, N]`.
    pub logits: Vec<Var>,
    /// Selected expert per decision point and sample.
    pub choices: Vec<Vec<usize>>,
}

/// Instrumentation of an inference-mode forward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MoeTrace {
    pub choices: Vec<Vec<usize>>,
    /// Per decision point, the number of (sample, expert) evaluations.
    pub expert_evals: Vec<usize>,
}

impl<T: Real> MoeBundle<T> {
    pub fn new(models: Vec<DenoiserParams<T>>, routers: RouterParams<T>, gumbel: GumbelConfig) -> Result<Self> {
        let b = MoeBundle { models, routers, gumbel };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.gumbel.validate()?;
        let first = self.models.first().ok_or_else(|| param_err("a mixture needs at least one expert"))?;
        for m in &self.models {
            m.validate()?;
            if m.spec != first.spec {
                return Err(Error::Structure("experts must share one spec".into()));
            }
        }
        if self.routers.n_models != self.models.len() || self.routers.spec != first.spec {
            return Err(Error::Structure("routers were built for another ensemble".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.models[0].spec
    }

    pub fn level(&self) -> MoeLevel {
        self.routers.level
    }

    fn select(&self, g: &mut Graph<T>, logits: Var, noise: Option<Vec<f64>>) -> (Var, Vec<usize>) {
        let z = match noise {
            Some(noise) => {
                let n = g.constant(Tensor::new(g.shape(logits), noise.into_iter().map(T::lit).collect()));
                g.add(logits, n)
            }
            None => logits,
        };
        let z = g.scale(z, T::lit(1.0 / self.gumbel.tau));
        let p = g.softmax(z);
        let sel = straight_through_graph(g, p);
        let n = self.models.len();
        let choices = g.value(sel).data().chunks(n).map(argmax).collect();
        (sel, choices)
    }
}

/// Training-mode forward: every expert is evaluated and the straight-through
/// selection mixes them, so the value equals the selected expert's output.
pub fn moe_train_graph<T: Real>(
    bundle: &MoeBundle<T>,
    g: &mut Graph<T>,
    x_t: Var,
    conds: &[Condition<T>],
    t: &[usize],
    noise: GumbelNoise,
) -> Result<MoeTrainOutput> {
    let spec = bundle.spec();
    let batch = g.shape(x_t)[0];
    let n = bundle.models.len();
    let draw = |j: usize| match noise {
        GumbelNoise::Seeded(seed) => Some(sample_gumbel(&mut stream(seed, j as u64), batch * n)),
        GumbelNoise::Off => None,
    };
    let actx = aux_context(g, spec, conds, t)?;
    let mut logits = Vec::new();
    let mut choices = Vec::new();
    let eps = match bundle.level() {
        MoeLevel::Denoiser => {
            let l = bundle.routers.blocks[0].logits(g, x_t, &actx);
            let (sel, c) = bundle.select(g, l, draw(0));
            let trainable = g.set_trainable(false);
            let outs: Result<Vec<Var>> = bundle
                .models
                .iter()
                .map(|m| denoiser_graph(m, g, x_t, conds, t).map(|o| o.0))
                .collect();
            g.set_trainable(trainable);
            logits.push(l);
            choices.push(c);
            g.weighted_sum(sel, &outs?)
        }
        MoeLevel::Block => {
            let trainable = g.set_trainable(false);
            let ctxs: Result<Vec<ModelContext>> = bundle.models.iter().map(|m| m.context(g, conds, t)).collect();
            g.set_trainable(trainable);
            let ctxs = ctxs?;
            let mut runner = BlockRunner::new(spec);
            let mut x = x_t;
            for j in 0..spec.num_blocks() {
                let input = runner.enter(g, j, x)?;
                let l = bundle.routers.blocks[j].logits(g, input, &actx);
                let (sel, c) = bundle.select(g, l, draw(j));
                let trainable = g.set_trainable(false);
                let feats: Vec<Var> = bundle
                    .models
                    .iter()
                    .zip(&ctxs)
                    .map(|(m, ctx)| m.block(g, j, input, ctx))
                    .collect();
                g.set_trainable(trainable);
                x = g.weighted_sum(sel, &feats);
                runner.leave(j, x)?;
                logits.push(l);
                choices.push(c);
            }
            runner.finish()?;
            x
        }
    };
    Ok(MoeTrainOutput { eps, logits, choices })
}

/// Rows of `x` (leading axis) at `idx`.
fn gather<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let per = x.len() / x.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}

/// Groups sample indices by their chosen expert.
fn groups(choices: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for (i, &k) in choices.iter().enumerate() {
        out[k].push(i);
    }
    out
}

/// Evaluates `f(expert, sub-batch indices)` once per used expert and
/// scatters the results back into batch order.
fn routed<T: Real>(
    choices: &[usize],
    n: usize,
    mut f: impl FnMut(usize, &[usize]) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut out: Option<(Vec<usize>, Vec<T>)> = None;
    for (k, idx) in groups(choices, n).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let y = f(k, idx)?;
        let per = y.len() / idx.len();
        let (shape, data) = out.get_or_insert_with(|| {
            let mut s = y.shape().to_vec();
            s[0] = choices.len();
            (s, vec![T::zero(); choices.len() * per])
        });
        if y.shape()[1..] != shape[1..] {
            return Err(Error::Invariant("experts disagree on output shape".into()));
        }
        for (r, &i) in idx.iter().enumerate() {
            data[i * per..(i + 1) * per].copy_from_slice(&y.data()[r * per..(r + 1) * per]);
        }
    }
    let (shape, data) = out.ok_or_else(|| shape_err("empty batch"))?;
    Ok(Tensor::new(&shape, data))
}

fn sub_conds<T: Real>(conds: &[Condition<T>], idx: &[usize]) -> Vec<Condition<T>> {
    idx.iter().map(|&i| conds[i].clone()).collect()
}

/// Inference at block `j`: each sample runs only its argmax expert.
pub fn moe_block_infer<T: Real>(
    bundle: &MoeBundle<T>,
    j: usize,
    x: &BlockFeature<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<(BlockFeature<T>, Vec<usize>)> {
    if bundle.level() != MoeLevel::Block {
        return Err(param_err("block routing needs block-level routers"));
    }
    let l = router_logits(&bundle.routers, j, x, conds, t)?;
    let choices: Vec<usize> = l.data().chunks(bundle.models.len()).map(argmax).collect();
    let y = routed(&choices, bundle.models.len(), |k, idx| {
        let sub = BlockFeature {
            data: gather(&x.data, idx),
            block_index: j,
        };
        let ts: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
        Ok(block_forward(&bundle.models[k], j, &sub, &sub_conds(conds, idx), &ts)?.data)
    })?;
    Ok((BlockFeature { data: y, block_index: j }, choices))
}

/// Model chosen per sample by the single denoiser-level router.
pub fn denoiser_level_route<T: Real>(
    zeta: &RouterParams<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<Vec<usize>> {
    let x = BlockFeature {
        data: x_t.clone(),
        block_index: 0,
    };
    let l = router_logits(zeta, 0, &x, conds, t)?;
    Ok(l.data().chunks(zeta.n_models).map(argmax).collect())
}

fn concat_last<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.concat(&[av, bv]);
    g.value(c).clone()
}

/// Inference-mode forward with instrumentation.
pub fn moe_forward_traced<T: Real>(
    bundle: &MoeBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<(Tensor<T>, MoeTrace)> {
    let spec = bundle.spec();
    check_input(spec, x_t, conds, t)?;
    let n = bundle.models.len();
    let mut trace = MoeTrace::default();
    match bundle.level() {
        MoeLevel::Denoiser => {
            let choices = denoiser_level_route(&bundle.routers, x_t, conds, t)?;
            let y = routed(&choices, n, |k, idx| {
                let ts: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
                denoiser_forward(&bundle.models[k], &gather(x_t, idx), &sub_conds(conds, idx), &ts)
            })?;
            trace.expert_evals.push(choices.len());
            trace.choices.push(choices);
            Ok((y, trace))
        }
        MoeLevel::Block => {
            let mut stack: Vec<Tensor<T>> = Vec::new();
            let mut x = x_t.clone();
            for j in 0..spec.num_blocks() {
                let kind = spec.block_kind(j);
                if kind == BlockKind::Up {
                    let skip = stack.pop().ok_or_else(|| Error::Invariant("skip stack underflow".into()))?;
                    x = concat_last(&x, &skip);
                }
                let (y, choices) = moe_block_infer(
                    bundle,
                    j,
                    &BlockFeature {
                        data: x,
                        block_index: j,
                    },
                    conds,
                    t,
                )?;
                x = y.data;
                if kind == BlockKind::Down {
                    stack.push(x.clone());
                }
                trace.expert_evals.push(choices.len());
                trace.choices.push(choices);
            }
            if !stack.is_empty() {
                return Err(Error::Invariant("skip stack not empty after the last block".into()));
            }
            Ok((x, trace))
        }
    }
}

pub fn moe_forward<T: Real>(
    bundle: &MoeBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<Tensor<T>> {
    Ok(moe_forward_traced(bundle, x_t, conds, t)?.0)
}

/// Conditional and unconditional batches are routed independently, since
/// each call routes its own inputs.
impl<T: Real> Denoiser<T> for MoeBundle<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        moe_forward(self, x_t, conds, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng;

    #[test]
    fn gumbel_examples() {
        assert_eq!(gumbel_probs_with_noise(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = gumbel_probs_with_noise(&[1.0, 0.0], &[0.0, 0.0], 0.01).unwrap();
        assert!(p[0] > 0.99);
        assert!(gumbel_probs(&[0.0], &GumbelConfig { tau: 0.0, seed: 0 }, &mut rng(0)).is_err());
        let mut r = rng(5);
        for _ in 0..100 {
            let p = gumbel_probs(&[0.3, -1.0, 2.0], &GumbelConfig::default(), &mut r).unwrap();
            assert!(p.iter().all(|&v| v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn straight_through_examples() {
        assert_eq!(straight_through(&[0.7, 0.3]), vec![1.0, 0.0]);
        assert_eq!(straight_through(&[0.5, 0.5]), vec![1.0, 0.0]);
        assert_eq!(straight_through(&[0.2, 0.3, 0.5]), vec![0.0, 0.0, 1.0]);
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::new(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]));
        let s = straight_through_graph(&mut g, p);
        assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn one_hot_selection_reproduces_expert() {
        let e: Vec<BlockFeature<f32>> = (0..2)
            .map(|i| BlockFeature {
                data: crate::random::randn(&mut rng(i), &[2, 2, 2, 3]),
                block_index: 1,
            })
            .collect();
        let sel = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = moe_block_train(&e, &sel).unwrap();
        assert_eq!(y.data.data()[..12], e[0].data.data()[..12]);
        assert_eq!(y.data.data()[12..], e[1].data.data()[12..]);
        let solo = moe_block_train(&e[..1], &Tensor::new(&[2, 1], vec![1.0, 1.0])).unwrap();
        assert!(solo.data.bit_eq(&e[0].data));
        assert!(moe_block_train(&e, &Tensor::new(&[2, 1], vec![1.0, 1.0])).is_err());
    }
}
