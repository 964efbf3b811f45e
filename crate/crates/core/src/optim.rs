//! AdamW with decoupled weight decay.

use afa_autograd::{Gradients, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::layers::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(param_err("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(param_err("weight decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(param_err("invalid moment coefficients"));
        }
        Ok(())
    }
}

/// First and second moments for a list of parameters, in visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// One AdamW update of every parameter with a gradient; entries without a
/// gradient are left untouched (including their decay).
pub fn optimizer_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    cfg: &AdamWConfig,
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(shape_err("optimizer state belongs to another parameter list"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if let Some(g) = g {
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
    }
    state.step += 1;
    let k = Coefficients::new(cfg, state.step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if let Some(g) = g {
            k.apply(p, g, &mut state.m[i], &mut state.v[i]);
        }
    }
    Ok(())
}

struct Coefficients<T> {
    b1: T,
    b2: T,
    lr: T,
    eps: T,
    decay: T,
    c1: T,
    c2: T,
}

impl<T: Real> Coefficients<T> {
    fn new(cfg: &AdamWConfig, step: u64) -> Self {
        let t = step.min(i32::MAX as u64) as i32;
        Coefficients {
            b1: T::lit(cfg.beta1),
            b2: T::lit(cfg.beta2),
            lr: T::lit(cfg.lr),
            eps: T::lit(cfg.eps),
            decay: T::lit(1.0 - cfg.lr * cfg.weight_decay),
            c1: T::lit(1.0 / (1.0 - cfg.beta1.powi(t))),
            c2: T::lit(1.0 / (1.0 - cfg.beta2.powi(t))),
        }
    }

    fn apply(&self, p: &mut Tensor<T>, g: &Tensor<T>, m: &mut Tensor<T>, v: &mut Tensor<T>) {
        let one = T::one();
        for (((w, &gr), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = self.b1 * *mi + (one - self.b1) * gr;
            *vi = self.b2 * *vi + (one - self.b2) * gr * gr;
            let mhat = *mi * self.c1;
            let vhat = *vi * self.c2;
            *w = *w * self.decay - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// AdamW bound to one parameter tree.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: AdamState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            state: AdamState {
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        })
    }

    /// Updates every parameter of `params` that received a gradient.
    ///
    /// Gradients are matched by tensor identity, so `params` must not have
    /// been moved or reallocated since the graph bound them.
    pub fn step(&mut self, params: &mut impl Params<T>, grads: &Gradients<T>) -> Result<()> {
        let state = &mut self.state;
        state.step += 1;
        let k = Coefficients::new(&self.config, state.step);
        let mut idx = 0;
        let mut err = None;
        params.visit_mut("", &mut |name, p| {
            if state.m.len() == idx {
                state.m.push(Tensor::zeros(p.shape()));
                state.v.push(Tensor::zeros(p.shape()));
            }
            if state.m[idx].shape() != p.shape() {
                err.get_or_insert_with(|| shape_err(format!("optimizer state does not match {name}")));
            } else if let Some(g) = grads.of(p).cloned() {
                k.apply(p, &g, &mut state.m[idx], &mut state.v[idx]);
            }
            idx += 1;
        });
        err.map_or(Ok(()), Err)
    }
}
