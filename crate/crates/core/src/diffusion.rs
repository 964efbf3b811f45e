//! Noise schedules, forward diffusion, the denoising loss, classifier-free
//! guidance and deterministic DDIM sampling.
//!
//! The schedule stores the cumulative products `alpha_bar[t]` for
//! `t in 1..=T`; timestep `0` denotes the clean image (`alpha_bar = 1`).

use afa_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::error::{param_err, shape_err, Error, Result};
use crate::random::{randn, stream};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Validates and wraps cumulative products for `t = 1..=T`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(param_err("schedule needs at least one timestep"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(param_err("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(param_err("alpha_bar must be strictly decreasing"));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(param_err("betas must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    /// Number of diffusion timesteps `T`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    /// `alpha_bar` at `t`, with `alpha_bar(0) = 1`. Panics for `t > T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(param_err(format!("timestep {t} outside [1, {}]", self.len())))
        } else {
            Ok(())
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TIMESTEPS, ScheduleKind::LinearBeta, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Builds a schedule of `steps` timesteps. For `LinearBeta`, betas are
/// linearly spaced over `[lo, hi]`; `Cosine` ignores the bounds.
pub fn make_schedule(steps: usize, kind: ScheduleKind, lo: f64, hi: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(param_err("schedule needs T >= 1"));
    }
    match kind {
        ScheduleKind::LinearBeta => {
            if !(lo > 0.0 && lo < hi && hi < 1.0) {
                return Err(param_err(format!("linear-beta needs 0 < lo < hi < 1, got {lo}, {hi}")));
            }
            let betas: Vec<f64> = if steps == 1 {
                vec![lo]
            } else {
                (0..steps)
                    .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
                    .collect()
            };
            NoiseSchedule::from_betas(&betas)
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let betas: Vec<f64> = (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect();
            NoiseSchedule::from_betas(&betas)
        }
    }
}

/// Serializable description of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::LinearBeta,
            steps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState<T> {
    pub x_t: Tensor<T>,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfgConfig {
    #[serde(default = "default_guidance")]
    pub beta_cfg: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

fn default_steps() -> usize {
    DEFAULT_SAMPLING_STEPS
}

impl Default for CfgConfig {
    fn default() -> Self {
        CfgConfig {
            beta_cfg: DEFAULT_GUIDANCE,
            steps: DEFAULT_SAMPLING_STEPS,
        }
    }
}

impl CfgConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.beta_cfg >= 0.0 && self.beta_cfg.is_finite()) {
            return Err(param_err("guidance scale must be a nonnegative real"));
        }
        if self.steps == 0 || self.steps > sched.len() {
            return Err(param_err(format!("steps must lie in [1, {}]", sched.len())));
        }
        Ok(())
    }
}

/// Anything that predicts noise for a batch `x_t: [B,H,W,C]` with one
/// condition and one timestep per sample.
pub trait Denoiser<T: Real = f32> {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Real, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        (**self).predict_noise(x_t, conds, t)
    }
}

impl<T: Real, D: Denoiser<T> + ?Sized> Denoiser<T> for Box<D> {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        (**self).predict_noise(x_t, conds, t)
    }
}

/// Adapts a closure into a [`Denoiser`].
pub struct FnDenoiser<F>(pub F);

impl<T, F> Denoiser<T> for FnDenoiser<F>
where
    T: Real,
    F: Fn(&Tensor<T>, &[Condition<T>], &[usize]) -> Result<Tensor<T>>,
{
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        (self.0)(x_t, conds, t)
    }
}

/// Checks a `[B,H,W,C]` batch against its per-sample conditions and steps.
pub(crate) fn check_batch<T: Real>(x: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<usize> {
    if x.shape().len() != 4 {
        return Err(shape_err(format!("expected [B,H,W,C] input, got {:?}", x.shape())));
    }
    let b = x.shape()[0];
    if conds.len() != b || t.len() != b {
        return Err(shape_err(format!(
            "batch of {b} needs as many conditions and timesteps (got {}, {})",
            conds.len(),
            t.len()
        )));
    }
    Ok(b)
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps` at a single timestep.
pub fn q_sample<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<NoisyState<T>> {
    same_shape(x0, eps, "q_sample")?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(NoisyState {
        x_t: x0.zip_map(eps, |x, e| a * x + s * e),
        t,
    })
}

/// Forward diffusion of a `[B, ..]` batch with one timestep per sample.
pub fn q_sample_batch<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_sample_batch")?;
    let b = x0.shape().first().copied().unwrap_or(0);
    if t.len() != b {
        return Err(shape_err(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let per = x0.len() / b.max(1);
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_timestep(ti)?;
        let ab = sched.alpha_bar(ti);
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let span = i * per..(i + 1) * per;
        out.extend(x0.data()[span.clone()].iter().zip(&eps.data()[span]).map(|(&x, &e)| a * x + s * e));
    }
    Ok(Tensor::new(x0.shape(), out))
}

/// Mean over all elements of `(pred - eps)^2`.
pub fn denoising_loss<T: Real>(pred: &Tensor<T>, eps: &Tensor<T>) -> Result<T> {
    same_shape(pred, eps, "denoising_loss")?;
    if pred.is_empty() {
        return Err(shape_err("denoising_loss of empty arrays"));
    }
    let sum: T = pred.data().iter().zip(eps.data()).map(|(&p, &e)| (p - e) * (p - e)).sum();
    Ok(sum / T::lit(pred.len() as f64))
}

/// `eps_uc + beta * (eps_c - eps_uc)`; `beta` of exactly 0 or 1 returns the
/// corresponding input unchanged.
pub fn cfg_combine<T: Real>(eps_c: &Tensor<T>, eps_uc: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    same_shape(eps_c, eps_uc, "cfg_combine")?;
    if beta == 1.0 {
        return Ok(eps_c.clone());
    }
    if beta == 0.0 {
        return Ok(eps_uc.clone());
    }
    let b = T::lit(beta);
    Ok(eps_c.zip_map(eps_uc, |c, u| u + b * (c - u)))
}

/// Deterministic DDIM update from `state.t` to `t_next < state.t`.
///
/// With `alpha_bar(t_next) = 1` (in particular `t_next = 0`) the result is the
/// clean-image estimate `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn ddim_step<T: Real>(
    state: &NoisyState<T>,
    eps_pred: &Tensor<T>,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<NoisyState<T>> {
    same_shape(&state.x_t, eps_pred, "ddim_step")?;
    if t_next >= state.t {
        return Err(param_err(format!("ddim_step needs t_next < t ({t_next} >= {})", state.t)));
    }
    sched.check_timestep(state.t)?;
    let (ab, ab_next) = (sched.alpha_bar(state.t), sched.alpha_bar(t_next));
    let (s1, r) = (T::lit((1.0 - ab).sqrt()), T::lit(1.0 / ab.sqrt()));
    let (a_next, s_next) = (T::lit(ab_next.sqrt()), T::lit((1.0 - ab_next).sqrt()));
    let x_next = state.x_t.zip_map(eps_pred, |x, e| {
        let x0 = (x - s1 * e) * r;
        a_next * x0 + s_next * e
    });
    Ok(NoisyState { x_t: x_next, t: t_next })
}

/// Clean-image estimate implied by a noise prediction at `t`.
pub fn predict_x0<T: Real>(x_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    same_shape(x_t, eps_pred, "predict_x0")?;
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    let (s1, r) = (T::lit((1.0 - ab).sqrt()), T::lit(1.0 / ab.sqrt()));
    Ok(x_t.zip_map(eps_pred, |x, e| (x - s1 * e) * r))
}

/// Decreasing timesteps `T - floor(i * T / steps)` for `i in 0..steps`:
/// uniform stride over `[1, T]` that always starts at `T`.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(param_err(format!("steps must lie in [1, {total}], got {steps}")));
    }
    Ok((0..steps).map(|i| total - i * total / steps).collect())
}

/// Guided DDIM sampling from seeded standard Gaussian noise.
///
/// `image_shape` is `[H, W, C]`; the batch size is `conds.len()`.
pub fn sample<T: Real>(
    model: &dyn Denoiser<T>,
    conds: &[Condition<T>],
    unconds: &[Condition<T>],
    cfg: &CfgConfig,
    sched: &NoiseSchedule,
    seed: u64,
    image_shape: [usize; 3],
) -> Result<Tensor<T>> {
    let shape = [conds.len(), image_shape[0], image_shape[1], image_shape[2]];
    let x_start = randn::<T>(&mut stream(seed, 0x5a3_71e5_u64), &shape);
    sample_from(model, x_start, conds, unconds, cfg, sched)
}

/// Guided DDIM sampling from a given `x_T`.
pub fn sample_from<T: Real>(
    model: &dyn Denoiser<T>,
    x_start: Tensor<T>,
    conds: &[Condition<T>],
    unconds: &[Condition<T>],
    cfg: &CfgConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    cfg.validate(sched)?;
    let b = conds.len();
    if unconds.len() != b {
        return Err(shape_err("conditional and unconditional batches differ in size"));
    }
    let seq = timestep_sequence(sched.len(), cfg.steps)?;
    let mut state = NoisyState {
        x_t: x_start,
        t: seq[0],
    };
    for (i, &t) in seq.iter().enumerate() {
        let ts = vec![t; b];
        let eps_c = model.predict_noise(&state.x_t, conds, &ts)?;
        if eps_c.shape() != state.x_t.shape() {
            return Err(shape_err(format!(
                "denoiser returned {:?} for input {:?}",
                eps_c.shape(),
                state.x_t.shape()
            )));
        }
        let eps = if cfg.beta_cfg == 1.0 {
            eps_c
        } else {
            let eps_uc = model.predict_noise(&state.x_t, unconds, &ts)?;
            cfg_combine(&eps_c, &eps_uc, cfg.beta_cfg)?
        };
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t={t}")));
        }
        let t_next = seq.get(i + 1).copied().unwrap_or(0);
        state = ddim_step(&state, &eps, t_next, sched)?;
    }
    Ok(state.x_t)
}
