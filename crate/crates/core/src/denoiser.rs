//! Miniature conditional U-Net denoisers organised as `K = n_down + 1 + n_up`
//! blocks.
//!
//! Layout for `n` levels with widths `C_k = base * mults[k-1]` and resolutions
//! `S / 2^(k-1)`:
//!
//! * down block `k`: (input conv for `k = 1`, stride-2 conv otherwise), a
//!   residual layer to `C_k` and a transformer layer;
//! * middle block: residual layer and transformer layer at level `n`;
//! * up block `k` (visited `k = n..1`): takes the running feature
//!   concatenated with the skip feature of down block `k`, applies a residual
//!   layer back to `C_k` and a transformer layer, then either upsamples and
//!   projects to `C_{k-1}` or, for `k = 1`, maps to image channels.
//!
//! The output of the last block is the noise prediction. Block indices are
//! zero-based in this crate.

use afa_autograd::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{check_batch, Denoiser};
use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{join, Conv, Linear, Norm, Params, ResLayer, TransformerLayer};
use crate::random::{randn, stream};

pub const FORMAT_VERSION: u32 = 1;

const HEADS: usize = 1;
const MLP_RATIO: usize = 2;

fn default_tokens() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub n_down: usize,
    pub n_up: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub cond_dim: usize,
    /// Number of condition tokens `L`.
    #[serde(default = "default_tokens")]
    pub cond_tokens: usize,
    pub img_channels: usize,
    pub img_size: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            n_down: 3,
            n_up: 3,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            cond_dim: 32,
            cond_tokens: 4,
            img_channels: 3,
            img_size: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Down,
    Middle,
    Up,
}

/// Static description of one block: its kind, level and feature shapes
/// (`[h, w, c]`, without the batch axis). For up blocks the input is the
/// channel concatenation with the skip feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub kind: BlockKind,
    pub level: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 || self.n_down != self.n_up {
            return Err(param_err(format!(
                "need n_down = n_up >= 1, got {} and {}",
                self.n_down, self.n_up
            )));
        }
        if self.channel_mults.len() != self.n_down || self.channel_mults.contains(&0) {
            return Err(param_err("channel_mults needs one positive entry per level"));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(param_err("base_channels must be even and at least 2"));
        }
        if self.cond_dim == 0 || self.cond_tokens == 0 || self.img_channels == 0 {
            return Err(param_err("cond_dim, cond_tokens and img_channels must be positive"));
        }
        let factor = 1usize << (self.n_down - 1);
        if self.img_size == 0 || !self.img_size.is_multiple_of(factor) {
            return Err(param_err(format!("img_size must be a positive multiple of {factor}")));
        }
        Ok(())
    }

    /// `K`, the number of blocks.
    pub fn num_blocks(&self) -> usize {
        self.n_down + 1 + self.n_up
    }

    /// Width at level `k` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level - 1]
    }

    /// Spatial size at level `k` (1-based).
    pub fn resolution(&self, level: usize) -> usize {
        self.img_size >> (level - 1)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.img_size, self.img_size, self.img_channels]
    }

    /// Width of the sinusoidal timestep features.
    pub fn time_dim(&self) -> usize {
        self.base_channels
    }

    /// Width of the learned time embedding fed to the residual layers.
    pub fn temb_dim(&self) -> usize {
        2 * self.base_channels
    }

    pub fn block_kind(&self, j: usize) -> BlockKind {
        match j {
            j if j < self.n_down => BlockKind::Down,
            j if j == self.n_down => BlockKind::Middle,
            _ => BlockKind::Up,
        }
    }

    pub fn block_shape(&self, j: usize) -> BlockShape {
        let n = self.n_down;
        let at = |k: usize, c: usize| [self.resolution(k), self.resolution(k), c];
        match self.block_kind(j) {
            BlockKind::Down => {
                let k = j + 1;
                let input = if k == 1 {
                    self.image_shape()
                } else {
                    at(k - 1, self.channels(k - 1))
                };
                BlockShape {
                    kind: BlockKind::Down,
                    level: k,
                    input,
                    output: at(k, self.channels(k)),
                }
            }
            BlockKind::Middle => BlockShape {
                kind: BlockKind::Middle,
                level: n,
                input: at(n, self.channels(n)),
                output: at(n, self.channels(n)),
            },
            BlockKind::Up => {
                let k = 2 * n + 1 - j;
                let output = if k == 1 {
                    self.image_shape()
                } else {
                    at(k - 1, self.channels(k - 1))
                };
                BlockShape {
                    kind: BlockKind::Up,
                    level: k,
                    input: at(k, 2 * self.channels(k)),
                    output,
                }
            }
        }
    }

    pub fn shape_table(&self) -> Vec<BlockShape> {
        (0..self.num_blocks()).map(|j| self.block_shape(j)).collect()
    }

    pub(crate) fn check_block(&self, j: usize) -> Result<()> {
        if j >= self.num_blocks() {
            return Err(param_err(format!("block {j} out of range (K = {})", self.num_blocks())));
        }
        Ok(())
    }
}

/// Condition token sequence `[L, cond_dim]`; `is_null` marks the
/// unconditional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<T = f32> {
    pub tokens: Tensor<T>,
    pub is_null: bool,
}

impl<T: Real> Condition<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] == 0 {
            return Err(shape_err(format!("condition tokens must be [L>=1, D], got {:?}", tokens.shape())));
        }
        Ok(Condition { tokens, is_null: false })
    }

    /// All-zero tokens flagged as unconditional.
    pub fn null(tokens: usize, width: usize) -> Self {
        Condition {
            tokens: Tensor::zeros(&[tokens, width]),
            is_null: true,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> Condition<U> {
        Condition {
            tokens: self.tokens.cast(),
            is_null: self.is_null,
        }
    }
}

/// Stacks per-sample tokens into `[B, L, D]`, checking every shape.
pub(crate) fn stack_tokens<T: Real>(conds: &[Condition<T>], tokens: usize, width: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(conds.len() * tokens * width);
    for c in conds {
        if c.tokens.shape() != [tokens, width] {
            return Err(shape_err(format!(
                "condition {:?} does not match [{tokens}, {width}]",
                c.tokens.shape()
            )));
        }
        data.extend_from_slice(c.tokens.data());
    }
    Ok(Tensor::new(&[conds.len(), tokens, width], data))
}

/// Feature entering or leaving block `block_index`, batched as `[B,h,w,c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockFeature<T = f32> {
    pub data: Tensor<T>,
    pub block_index: usize,
}

/// Sinusoidal embedding `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_k = 10000^(-2k/dim)`.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(param_err(format!("time embedding width must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-(2.0 * k as f64) / dim as f64);
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// `[B, dim]` batch of [`time_embedding`]s.
pub fn time_embedding_batch<T: Real>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim)?.into_iter().map(T::lit));
    }
    Ok(Tensor::new(&[ts.len(), dim], data))
}

/// What a block does after its transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockTail<T> {
    None,
    /// Nearest 2x upsampling followed by a 3x3 convolution.
    Upsample(Conv<T>),
    /// Normalization, SiLU and the output convolution to image channels.
    Output(Norm<T>, Conv<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub kind: BlockKind,
    /// Input convolution (first block) or stride-2 downsampling (other down
    /// blocks).
    pub head: Option<Conv<T>>,
    pub res: ResLayer<T>,
    pub attn: TransformerLayer<T>,
    pub tail: BlockTail<T>,
}

impl<T: Real> BlockParams<T> {
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &ModelContext) -> Var {
        let h = match &self.head {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        let h = self.res.forward(g, h, Some(ctx.temb));
        let h = self.attn.forward(g, h, ctx.cond);
        match &self.tail {
            BlockTail::None => h,
            BlockTail::Upsample(conv) => {
                let up = g.upsample2x(h);
                conv.forward(g, up)
            }
            BlockTail::Output(norm, conv) => {
                let h = norm.forward(g, h);
                let h = g.silu(h);
                conv.forward(g, h)
            }
        }
    }
}

impl<T: Real> Params<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some(h) = &self.head {
            h.visit(&join(prefix, "head"), f);
        }
        self.res.visit(&join(prefix, "res"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        match &self.tail {
            BlockTail::None => {}
            BlockTail::Upsample(c) => c.visit(&join(prefix, "up"), f),
            BlockTail::Output(n, c) => {
                n.visit(&join(prefix, "out_norm"), f);
                c.visit(&join(prefix, "out"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(h) = &mut self.head {
            h.visit_mut(&join(prefix, "head"), f);
        }
        self.res.visit_mut(&join(prefix, "res"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        match &mut self.tail {
            BlockTail::None => {}
            BlockTail::Upsample(c) => c.visit_mut(&join(prefix, "up"), f),
            BlockTail::Output(n, c) => {
                n.visit_mut(&join(prefix, "out_norm"), f);
                c.visit_mut(&join(prefix, "out"), f);
            }
        }
    }
}

/// Weights of one denoiser: the shared time MLP, the learned null-condition
/// tokens and the `K` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T = f32> {
    pub spec: DenoiserSpec,
    pub time_in: Linear<T>,
    pub time_out: Linear<T>,
    pub null_tokens: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub version: u32,
}

/// Per-forward quantities shared by all blocks of one model.
#[derive(Clone, Copy, Debug)]
pub struct ModelContext {
    /// Activated time embedding `[B, temb_dim]`.
    pub temb: Var,
    /// Condition tokens `[B, L, cond_dim]`.
    pub cond: Var,
}

pub fn build_denoiser<T: Real>(spec: &DenoiserSpec, seed: u64) -> Result<DenoiserParams<T>> {
    spec.validate()?;
    let mut rng = stream(seed, 0xde40);
    let temb = spec.temb_dim();
    let time_in = Linear::new(&mut rng, spec.time_dim(), temb);
    let time_out = Linear::new(&mut rng, temb, temb);
    let null_tokens = randn::<T>(&mut rng, &[spec.cond_tokens, spec.cond_dim]).map(|v| v * T::lit(0.1));
    let mut blocks = Vec::with_capacity(spec.num_blocks());
    for j in 0..spec.num_blocks() {
        let shape = spec.block_shape(j);
        let k = shape.level;
        let ck = spec.channels(k);
        let block = match shape.kind {
            BlockKind::Down => {
                let cin = shape.input[2];
                let head = if k == 1 {
                    Conv::new(&mut rng, cin, spec.channels(1), 3, 1)
                } else {
                    Conv::new(&mut rng, cin, cin, 3, 2)
                };
                let head_out = head.w.shape()[3];
                BlockParams {
                    kind: shape.kind,
                    head: Some(head),
                    res: ResLayer::new(&mut rng, head_out, ck, Some(temb)),
                    attn: TransformerLayer::new(&mut rng, ck, spec.cond_dim, HEADS, MLP_RATIO)?,
                    tail: BlockTail::None,
                }
            }
            BlockKind::Middle => BlockParams {
                kind: shape.kind,
                head: None,
                res: ResLayer::new(&mut rng, ck, ck, Some(temb)),
                attn: TransformerLayer::new(&mut rng, ck, spec.cond_dim, HEADS, MLP_RATIO)?,
                tail: BlockTail::None,
            },
            BlockKind::Up => {
                let res = ResLayer::new(&mut rng, 2 * ck, ck, Some(temb));
                let attn = TransformerLayer::new(&mut rng, ck, spec.cond_dim, HEADS, MLP_RATIO)?;
                let tail = if k == 1 {
                    BlockTail::Output(Norm::group(ck), Conv::new(&mut rng, ck, spec.img_channels, 3, 1))
                } else {
                    BlockTail::Upsample(Conv::new(&mut rng, ck, spec.channels(k - 1), 3, 1))
                };
                BlockParams {
                    kind: shape.kind,
                    head: None,
                    res,
                    attn,
                    tail,
                }
            }
        };
        blocks.push(block);
    }
    Ok(DenoiserParams {
        spec: spec.clone(),
        time_in,
        time_out,
        null_tokens,
        blocks,
        version: FORMAT_VERSION,
    })
}

impl<T: Real> DenoiserParams<T> {
    /// Binds the time embedding and condition tokens for a batch.
    pub fn context(&self, g: &mut Graph<T>, conds: &[Condition<T>], t: &[usize]) -> Result<ModelContext> {
        let spec = &self.spec;
        if conds.len() != t.len() {
            return Err(shape_err("one condition per timestep required"));
        }
        let sin = g.constant(time_embedding_batch(t, spec.time_dim())?);
        let h = self.time_in.forward(g, sin);
        let h = g.silu(h);
        let h = self.time_out.forward(g, h);
        let temb = g.silu(h);

        let tokens = stack_tokens(conds, spec.cond_tokens, spec.cond_dim)?;
        let mut cond = g.constant(tokens);
        if conds.iter().any(|c| c.is_null) {
            let per = spec.cond_tokens * spec.cond_dim;
            let mask = Tensor::from_fn(&[conds.len(), spec.cond_tokens, spec.cond_dim], |i| {
                if conds[i / per].is_null {
                    T::one()
                } else {
                    T::zero()
                }
            });
            // null rows: drop the given tokens, substitute the learned ones
            let keep: Vec<T> = (0..conds.len() * per)
                .map(|i| if conds[i / per].is_null { T::zero() } else { T::one() })
                .collect();
            let keep = g.constant(Tensor::new(&[conds.len(), spec.cond_tokens, spec.cond_dim], keep));
            cond = g.mul(cond, keep);
            let null = g.param(&self.null_tokens);
            let tiled = g.tile(null, conds.len());
            let mask = g.constant(mask);
            let masked = g.mul(tiled, mask);
            cond = g.add(cond, masked);
        }
        Ok(ModelContext { temb, cond })
    }

    /// Records block `j` on `g`.
    pub fn block(&self, g: &mut Graph<T>, j: usize, x: Var, ctx: &ModelContext) -> Var {
        self.blocks[j].forward(g, x, ctx)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Checks the structural invariants (block count and finiteness).
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.blocks.len() != self.spec.num_blocks() {
            return Err(Error::Structure(format!(
                "{} blocks for a spec with K = {}",
                self.blocks.len(),
                self.spec.num_blocks()
            )));
        }
        if !crate::layers::all_finite(self) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }
}

impl<T: Real> Params<T> for DenoiserParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.time_in.visit(&join(prefix, "time_in"), f);
        self.time_out.visit(&join(prefix, "time_out"), f);
        f(join(prefix, "null_tokens"), &self.null_tokens);
        self.blocks.visit(&join(prefix, "blocks"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.time_in.visit_mut(&join(prefix, "time_in"), f);
        self.time_out.visit_mut(&join(prefix, "time_out"), f);
        f(join(prefix, "null_tokens"), &mut self.null_tokens);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
    }
}

/// Skip-connection stack with push/pop instrumentation.
#[derive(Debug, Default)]
pub struct SkipStack {
    items: Vec<Var>,
    capacity: usize,
    pushes: usize,
    pops: usize,
}

/// Push/pop counts of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StackStats {
    pub pushes: usize,
    pub pops: usize,
}

impl SkipStack {
    pub fn with_capacity(capacity: usize) -> Self {
        SkipStack {
            capacity,
            ..Default::default()
        }
    }

    pub fn push(&mut self, v: Var) -> Result<()> {
        if self.items.len() >= self.capacity {
            return Err(Error::Invariant("skip stack overflow".into()));
        }
        self.items.push(v);
        self.pushes += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Result<Var> {
        let v = self
            .items
            .pop()
            .ok_or_else(|| Error::Invariant("skip stack underflow".into()))?;
        self.pops += 1;
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn stats(&self) -> StackStats {
        StackStats {
            pushes: self.pushes,
            pops: self.pops,
        }
    }
}

/// Drives the block sequence: pops and concatenates the skip feature before
/// every up block and pushes the output of every down block.
pub struct BlockRunner<'s> {
    spec: &'s DenoiserSpec,
    stack: SkipStack,
}

impl<'s> BlockRunner<'s> {
    pub fn new(spec: &'s DenoiserSpec) -> Self {
        BlockRunner {
            spec,
            stack: SkipStack::with_capacity(spec.n_down),
        }
    }

    /// The input of block `j` given the running feature `x`.
    pub fn enter<T: Real>(&mut self, g: &mut Graph<T>, j: usize, x: Var) -> Result<Var> {
        if self.spec.block_kind(j) == BlockKind::Up {
            let skip = self.stack.pop()?;
            Ok(g.concat(&[x, skip]))
        } else {
            Ok(x)
        }
    }

    /// Records the output `y` of block `j`.
    pub fn leave(&mut self, j: usize, y: Var) -> Result<()> {
        if self.spec.block_kind(j) == BlockKind::Down {
            self.stack.push(y)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<StackStats> {
        let stats = self.stack.stats();
        if !self.stack.is_empty() || stats.pushes != self.spec.n_down || stats.pops != self.spec.n_up {
            return Err(Error::Invariant(format!(
                "unbalanced skip stack: {} pushes, {} pops, {} left",
                stats.pushes,
                stats.pops,
                self.stack.len()
            )));
        }
        Ok(stats)
    }
}

pub(crate) fn check_input<T: Real>(spec: &DenoiserSpec, x: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<()> {
    check_batch(x, conds, t)?;
    if x.shape()[1..] != spec.image_shape() {
        return Err(shape_err(format!(
            "input {:?} does not match image shape {:?}",
            &x.shape()[1..],
            spec.image_shape()
        )));
    }
    Ok(())
}

/// Records a full forward pass on `g`.
pub fn denoiser_graph<T: Real>(
    params: &DenoiserParams<T>,
    g: &mut Graph<T>,
    x_t: Var,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<(Var, StackStats)> {
    let ctx = params.context(g, conds, t)?;
    let mut runner = BlockRunner::new(&params.spec);
    let mut x = x_t;
    for j in 0..params.num_blocks() {
        let input = runner.enter(g, j, x)?;
        x = params.block(g, j, input, &ctx);
        runner.leave(j, x)?;
    }
    Ok((x, runner.finish()?))
}

/// Noise prediction for a batch `x_t: [B,H,W,C]`.
pub fn denoiser_forward<T: Real>(
    params: &DenoiserParams<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<Tensor<T>> {
    Ok(denoiser_forward_traced(params, x_t, conds, t)?.0)
}

/// [`denoiser_forward`] that also reports the skip-stack counters.
pub fn denoiser_forward_traced<T: Real>(
    params: &DenoiserParams<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<(Tensor<T>, StackStats)> {
    check_input(&params.spec, x_t, conds, t)?;
    let mut g = Graph::new();
    let x = g.constant(x_t.clone());
    let (y, stats) = denoiser_graph(params, &mut g, x, conds, t)?;
    Ok((g.value(y).clone(), stats))
}

/// Runs block `j` alone on a batched feature.
pub fn block_forward<T: Real>(
    params: &DenoiserParams<T>,
    j: usize,
    x: &BlockFeature<T>,
    conds: &[Condition<T>],
    t: &[usize],
) -> Result<BlockFeature<T>> {
    params.spec.check_block(j)?;
    if x.block_index != j {
        return Err(param_err(format!("feature belongs to block {}, not {j}", x.block_index)));
    }
    check_batch(&x.data, conds, t)?;
    let expected = params.spec.block_shape(j).input;
    if x.data.shape()[1..] != expected {
        return Err(shape_err(format!("block {j} expects {expected:?}, got {:?}", &x.data.shape()[1..])));
    }
    let mut g = Graph::new();
    let ctx = params.context(&mut g, conds, t)?;
    let xv = g.constant(x.data.clone());
    let y = params.block(&mut g, j, xv, &ctx);
    Ok(BlockFeature {
        data: g.value(y).clone(),
        block_index: j,
    })
}

impl<T: Real> Denoiser<T> for DenoiserParams<T> {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        denoiser_forward(self, x_t, conds, t)
    }
}
