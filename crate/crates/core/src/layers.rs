//! Parameter containers and the residual / transformer layers shared by the
//! denoisers, the aggregator and the routers.

use afa_autograd::{Graph, Real, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::random::{randn, SeededRng};

/// A tree of named parameter tensors, visited in a fixed order.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<T: Real>(p: &impl Params<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name, t)));
    out
}

pub fn param_count<T: Real>(p: &impl Params<T>) -> usize {
    named_params(p).iter().map(|(_, t)| t.len()).sum()
}

/// SHA-256 over every parameter name, shape and little-endian value.
pub fn digest<T: Real>(p: &impl Params<T>) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Copies values between two structurally identical parameter trees,
/// converting the element type.
pub fn copy_params<S: Real, D: Real>(src: &impl Params<S>, dst: &mut impl Params<D>) -> Result<()> {
    let src = named_params(src);
    let mut idx = 0;
    let mut err = None;
    dst.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match src.get(idx) {
            Some((sname, s)) if *sname == name && s.shape() == t.shape() => *t = s.cast(),
            _ => err = Some(Error::Structure(format!("parameter {name} has no counterpart"))),
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None if idx != src.len() => Err(Error::Structure("parameter count differs".into())),
        None => Ok(()),
    }
}

pub fn all_finite<T: Real>(p: &impl Params<T>) -> bool {
    named_params(p).iter().all(|(_, t)| t.is_finite())
}

/// Largest divisor of `channels` that is at most 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn scaled_normal<T: Real>(rng: &mut SeededRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = T::lit(1.0 / (fan_in as f64).sqrt());
    randn::<T>(rng, shape).map(|v| v * std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(rng: &mut SeededRng, input: usize, output: usize) -> Self {
        Linear {
            w: scaled_normal(rng, &[input, output], input),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[input, output]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.linear(x, w, Some(b))
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    pub fn new(rng: &mut SeededRng, input: usize, output: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            w: scaled_normal(rng, &[kernel, kernel, input, output], kernel * kernel * input),
            b: Tensor::zeros(&[output]),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

impl<T: Real> Params<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}

/// Affine normalization; `groups == 0` means per-location layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
}

impl<T: Real> Norm<T> {
    pub fn group(channels: usize) -> Self {
        Norm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            groups: norm_groups(channels),
        }
    }

    pub fn layer(channels: usize) -> Self {
        Norm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            groups: 0,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        if self.groups == 0 {
            g.layer_norm(x, gamma, beta, 1e-5)
        } else {
            g.group_norm(x, gamma, beta, self.groups, 1e-5)
        }
    }
}

impl<T: Real> Params<T> for Norm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Pre-activation residual layer: two 3x3 convolutions with an optional
/// per-sample time-embedding injection between them and a 1x1 projection on
/// the shortcut when the width changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResLayer<T> {
    pub norm1: Norm<T>,
    pub conv1: Conv<T>,
    pub time: Option<Linear<T>>,
    pub norm2: Norm<T>,
    pub conv2: Conv<T>,
    pub skip: Option<Conv<T>>,
}

impl<T: Real> ResLayer<T> {
    pub fn new(rng: &mut SeededRng, input: usize, output: usize, time_dim: Option<usize>) -> Self {
        ResLayer {
            norm1: Norm::group(input),
            conv1: Conv::new(rng, input, output, 3, 1),
            time: time_dim.map(|d| Linear::new(rng, d, output)),
            norm2: Norm::group(output),
            conv2: Conv::new(rng, output, output, 3, 1),
            skip: (input != output).then(|| Conv::new(rng, input, output, 1, 1)),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.conv2.w.shape()[3]
    }

    /// `temb` is the already activated time embedding `[B, time_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        if let (Some(proj), Some(e)) = (&self.time, temb) {
            let e = proj.forward(g, e);
            h = g.add_per_batch(h, e);
        }
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(shortcut, h)
    }
}

impl<T: Real> Params<T> for ResLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        if let Some(t) = &self.time {
            t.visit(&join(prefix, "time"), f);
        }
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        if let Some(t) = &mut self.time {
            t.visit_mut(&join(prefix, "time"), f);
        }
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Per-location transformer layer: cross-attention from every spatial
/// position to the condition tokens, then an MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer<T> {
    pub norm1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub norm2: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub heads: usize,
}

impl<T: Real> TransformerLayer<T> {
    pub fn new(rng: &mut SeededRng, dim: usize, cond_dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Param(format!("width {dim} is not divisible into {heads} heads")));
        }
        let hidden = dim * mlp_ratio.max(1);
        Ok(TransformerLayer {
            norm1: Norm::layer(dim),
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, cond_dim, dim),
            value: Linear::new(rng, cond_dim, dim),
            out: Linear::new(rng, dim, dim),
            norm2: Norm::layer(dim),
            mlp_in: Linear::new(rng, dim, hidden),
            mlp_out: Linear::new(rng, hidden, dim),
            heads,
        })
    }

    /// `x` is `[B,H,W,D]`, `cond` is `[B,L,cond_dim]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (b, d) = (shape[0], shape[3]);
        let tokens = g.reshape(x, &[b, shape[1] * shape[2], d]);
        let h = self.norm1.forward(g, tokens);
        let q = self.query.forward(g, h);
        let k = self.key.forward(g, cond);
        let v = self.value.forward(g, cond);
        let a = g.cross_attention(q, k, v, self.heads);
        let a = self.out.forward(g, a);
        let x1 = g.add(tokens, a);
        let h = self.norm2.forward(g, x1);
        let h = self.mlp_in.forward(g, h);
        let h = g.silu(h);
        let h = self.mlp_out.forward(g, h);
        let x2 = g.add(x1, h);
        g.reshape(x2, &shape)
    }
}

impl<T: Real> Params<T> for TransformerLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

impl<T: Real, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
