//! Training loops: expert pretraining and aggregator training on frozen
//! bases, sharing one seeded mini-batch pipeline.

use afa_autograd::{Graph, Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConditionedBatch;
use crate::denoiser::{build_denoiser, denoiser_graph, Condition, DenoiserParams, DenoiserSpec};
use crate::diffusion::{q_sample_batch, NoiseSchedule};
use crate::ensemble::{afa_graph, EnsembleBundle};
use crate::error::{param_err, Error, Result};
use crate::layers::digest;
use crate::moe::{moe_train_graph, GumbelNoise, MoeBundle, RouterParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::random::{derive, randn, stream, SeededRng};
use crate::sabw::SabwParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_drop_prob: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 1,
            batch_size: 16,
            prompt_drop_prob: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prompt_drop_prob) {
            return Err(param_err("prompt_drop_prob must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(param_err("batch_size must be positive"));
        }
        self.adamw().validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// One optimizer step of a training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<TrainRecord>,
    pub examples: usize,
    pub null_examples: usize,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    /// Mean loss of the first `w` steps.
    pub fn head_loss(&self, w: usize) -> f64 {
        mean_loss(&self.records[..w.min(self.records.len())])
    }

    /// Mean loss of the last `w` steps.
    pub fn tail_loss(&self, w: usize) -> f64 {
        let n = self.records.len();
        mean_loss(&self.records[n - w.min(n)..])
    }
}

fn mean_loss(r: &[TrainRecord]) -> f64 {
    r.iter().map(|r| r.loss).sum::<f64>() / r.len().max(1) as f64
}

/// A noised mini-batch ready for a loss evaluation.
#[derive(Clone, Debug)]
pub struct TrainBatch<T> {
    pub x_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub conds: Vec<Condition<T>>,
    pub t: Vec<usize>,
}

/// Bernoulli(`p`) draws marking which examples lose their prompt.
pub fn prompt_dropout(rng: &mut SeededRng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

/// Draws `t ~ U[1, T]`, `eps ~ N(0, I)` and the prompt dropout for `images`.
pub fn make_batch<T: Real>(
    data: &ConditionedBatch<T>,
    idx: &[usize],
    sched: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut SeededRng,
) -> Result<TrainBatch<T>> {
    let sub = data.select(idx);
    let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.len())).collect();
    let eps = randn::<T>(rng, sub.images.shape());
    let drop = prompt_dropout(rng, idx.len(), drop_prob);
    let conds = sub
        .conditions
        .into_iter()
        .zip(&drop)
        .map(|(c, &d)| if d { Condition::null(c.num_tokens(), c.width()) } else { c })
        .collect();
    let x_t = q_sample_batch(&sub.images, &eps, &t, sched)?;
    Ok(TrainBatch { x_t, eps, conds, t })
}

/// Shuffled epochs of mini-batches; `step` returns the batch loss.
pub fn run_training<T: Real>(
    data: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut step: impl FnMut(&TrainBatch<T>) -> Result<f64>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(param_err("training data is empty"));
    }
    let mut report = TrainReport::default();
    let mut n = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, 0x5eed_0000 + epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| n >= m) {
                break 'epochs;
            }
            let mut rng = stream(cfg.seed, (1 << 40) + n as u64);
            let batch = make_batch(data, idx, sched, cfg.prompt_drop_prob, &mut rng)?;
            let loss = step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: n,
                    loss,
                    detail: format!("epoch {epoch}, batch of {}", idx.len()),
                });
            }
            report.examples += idx.len();
            report.null_examples += batch.conds.iter().filter(|c| c.is_null).count();
            report.records.push(TrainRecord { step: n, epoch, loss });
            n += 1;
        }
    }
    Ok(report)
}

/// Trains a freshly initialised denoiser (seeded by `init_seed`) on `data`.
pub fn pretrain_expert<T: Real>(
    data: &ConditionedBatch<T>,
    spec: &DenoiserSpec,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(DenoiserParams<T>, TrainReport)> {
    let mut params = build_denoiser::<T>(spec, init_seed)?;
    let report = train_denoiser(&mut params, data, sched, cfg)?;
    Ok((params, report))
}

/// Trains every parameter of `params` on the denoising objective.
pub fn train_denoiser<T: Real>(
    params: &mut DenoiserParams<T>,
    data: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut opt = AdamW::new(cfg.adamw())?;
    run_training(data, sched, cfg, |b| {
        let mut g = Graph::new();
        g.set_trainable(true);
        let x = g.constant(b.x_t.clone());
        let (pred, _) = denoiser_graph(params, &mut g, x, &b.conds, &b.t)?;
        let eps = g.constant(b.eps.clone());
        let loss = g.mse(pred, eps);
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if value.is_finite() {
            let grads = g.backward(loss);
            opt.step(params, &grads)?;
        }
        Ok(value)
    })
}

/// Digest of every model, for freezing checks.
pub fn model_digests<T: Real>(models: &[DenoiserParams<T>]) -> Vec<String> {
    models.iter().map(digest).collect()
}

/// Trains the aggregator of `bundle` with its base models frozen. The base
/// digests are compared before and after; a change is an invariant
/// violation.
pub fn train_sabw<T: Real>(
    bundle: &EnsembleBundle<T>,
    data: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(SabwParams<T>, TrainReport)> {
    bundle.validate()?;
    let mut work = bundle.clone();
    let before = model_digests(&work.models);
    let mut opt = AdamW::new(cfg.adamw())?;
    let report = run_training(data, sched, cfg, |b| {
        let mut g = Graph::new();
        g.set_trainable(true);
        let x = g.constant(b.x_t.clone());
        let out = afa_graph(&work, &mut g, x, &b.conds, &b.t)?;
        let eps = g.constant(b.eps.clone());
        let loss = g.mse(out.eps, eps);
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if value.is_finite() {
            let grads = g.backward(loss);
            opt.step(&mut work.sabw, &grads)?;
        }
        Ok(value)
    })?;
    if model_digests(&work.models) != before {
        return Err(Error::Invariant("base model changed during aggregator training".into()));
    }
    Ok((work.sabw, report))
}

/// Trains the routers of `bundle` through the straight-through Gumbel
/// selection with the experts frozen. Gumbel noise is fresh every step.
pub fn train_router<T: Real>(
    bundle: &MoeBundle<T>,
    data: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(RouterParams<T>, TrainReport)> {
    bundle.validate()?;
    let mut work = bundle.clone();
    let before = model_digests(&work.models);
    let mut opt = AdamW::new(cfg.adamw())?;
    let mut n = 0u64;
    let report = run_training(data, sched, cfg, |b| {
        let mut g = Graph::new();
        g.set_trainable(true);
        let x = g.constant(b.x_t.clone());
        let noise = GumbelNoise::Seeded(derive(work.gumbel.seed, n));
        n += 1;
        let out = moe_train_graph(&work, &mut g, x, &b.conds, &b.t, noise)?;
        let eps = g.constant(b.eps.clone());
        let loss = g.mse(out.eps, eps);
        let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        if value.is_finite() {
            let grads = g.backward(loss);
            opt.step(&mut work.routers, &grads)?;
        }
        Ok(value)
    })?;
    if model_digests(&work.models) != before {
        return Err(Error::Invariant("expert changed during router training".into()));
    }
    Ok((work.routers, report))
}
