//! Synthetic conditioned corpus: anti-aliased coloured shapes on a plain
//! background, with attribute-embedding conditions.

use afa_autograd::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Condition;
use crate::diffusion::{check_batch, Denoiser, NoiseSchedule};
use crate::error::{param_err, Result};
use crate::random::{randn, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -0.8, -0.8],
            Color::Green => [-0.8, 1.0, -0.8],
            Color::Blue => [-0.8, -0.8, 1.0],
            Color::Yellow => [1.0, 1.0, -0.8],
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// Centre as fractions of the image side, `(x, y)`.
    fn centre(self) -> (f64, f64) {
        match self {
            Quadrant::TopLeft => (0.25, 0.25),
            Quadrant::TopRight => (0.75, 0.25),
            Quadrant::BottomLeft => (0.25, 0.75),
            Quadrant::BottomRight => (0.75, 0.75),
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    /// Half-extent as a fraction of the image side.
    fn radius(self) -> f64 {
        match self {
            Size::Small => 0.14,
            Size::Large => 0.22,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Quadrant,
    pub size: Size,
}

impl SceneSpec {
    /// Every attribute combination, in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for color in Color::ALL {
                for position in Quadrant::ALL {
                    for size in Size::ALL {
                        out.push(SceneSpec {
                            shape,
                            color,
                            position,
                            size,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Attribute predicate: each present list restricts that attribute.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneFilter {
    pub shapes: Option<Vec<Shape>>,
    pub colors: Option<Vec<Color>>,
    pub positions: Option<Vec<Quadrant>>,
    pub sizes: Option<Vec<Size>>,
}

impl SceneFilter {
    pub fn shapes(shapes: &[Shape]) -> Self {
        SceneFilter {
            shapes: Some(shapes.to_vec()),
            ..Default::default()
        }
    }

    pub fn matches(&self, s: &SceneSpec) -> bool {
        fn ok<A: PartialEq>(allowed: &Option<Vec<A>>, v: &A) -> bool {
            allowed.as_ref().is_none_or(|a| a.contains(v))
        }
        ok(&self.shapes, &s.shape) && ok(&self.colors, &s.color) && ok(&self.positions, &s.position) && ok(&self.sizes, &s.size)
    }

    /// The admitted attribute combinations.
    pub fn space(&self) -> Vec<SceneSpec> {
        SceneSpec::all().into_iter().filter(|s| self.matches(s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub img_size: usize,
    /// Maximum centre displacement in pixels (uniform in each axis).
    pub jitter: f64,
    /// Background value of every channel, in `[-1, 1]`.
    pub background: f64,
    pub cond_dim: usize,
    pub cond_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            img_size: 16,
            jitter: 1.0,
            background: -0.4,
            cond_dim: 32,
            cond_tokens: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_size < 4 {
            return Err(param_err("images must be at least 4 pixels wide"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(-1.0..=1.0).contains(&self.background) {
            return Err(param_err("jitter must be nonnegative and background in [-1, 1]"));
        }
        if self.cond_dim == 0 || self.cond_tokens == 0 {
            return Err(param_err("condition shape must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedBatch<T = f32> {
    /// `[B, S, S, 3]` in `[-1, 1]`.
    pub images: Tensor<T>,
    pub conditions: Vec<Condition<T>>,
    pub scene_specs: Vec<SceneSpec>,
}

impl<T: Real> ConditionedBatch<T> {
    pub fn len(&self) -> usize {
        self.scene_specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_specs.is_empty()
    }

    fn per_image(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    /// Images and conditions at `idx`, as a new batch.
    pub fn select(&self, idx: &[usize]) -> ConditionedBatch<T> {
        let per = self.per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        ConditionedBatch {
            images: Tensor::new(&shape, data),
            conditions: idx.iter().map(|&i| self.conditions[i].clone()).collect(),
            scene_specs: idx.iter().map(|&i| self.scene_specs[i]).collect(),
        }
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &ConditionedBatch<T>) -> ConditionedBatch<T> {
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        ConditionedBatch {
            images: Tensor::new(&shape, data),
            conditions: self.conditions.iter().chain(&other.conditions).cloned().collect(),
            scene_specs: self.scene_specs.iter().chain(&other.scene_specs).copied().collect(),
        }
    }
}

/// Renders one scene into `[S, S, 3]` values, supersampled 4x4 per pixel.
pub fn render_scene(scene: &SceneSpec, cfg: &DataConfig, offset: (f64, f64)) -> Vec<f64> {
    const SS: usize = 4;
    let s = cfg.img_size as f64;
    let (fx, fy) = scene.position.centre();
    let (cx, cy) = (fx * s + offset.0, fy * s + offset.1);
    let r = scene.size.radius() * s;
    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match scene.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // apex up, base at cy + r; half-width grows linearly downwards
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    };
    let color = scene.color.rgb();
    let bg = cfg.background;
    let n = cfg.img_size;
    let mut out = Vec::with_capacity(n * n * 3);
    for py in 0..n {
        for px in 0..n {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    hits += inside(x, y) as usize;
                }
            }
            let a = hits as f64 / (SS * SS) as f64;
            out.extend(color.iter().map(|c| bg * (1.0 - a) + c * a));
        }
    }
    out
}

const EMBED_SEED: u64 = 0xc0de_5eed;

/// Fixed token embedding of a scene: token `l` is the sum of one seeded
/// vector per attribute value.
pub fn encode_condition<T: Real>(scene: &SceneSpec, cond_dim: usize, tokens: usize) -> Condition<T> {
    let parts = [
        (0u64, scene.shape as u64),
        (1, scene.color as u64),
        (2, scene.position as u64),
        (3, scene.size as u64),
    ];
    let mut acc = vec![0.0f64; tokens * cond_dim];
    for (attr, value) in parts {
        let table = randn::<f64>(&mut stream(EMBED_SEED, attr << 8 | value), &[tokens * cond_dim]);
        for (a, v) in acc.iter_mut().zip(table.data()) {
            *a += v * 0.5;
        }
    }
    Condition {
        tokens: Tensor::new(&[tokens, cond_dim], acc.into_iter().map(T::lit).collect()),
        is_null: false,
    }
}

pub fn null_condition<T: Real>(cond_dim: usize, tokens: usize) -> Condition<T> {
    Condition::null(tokens, cond_dim)
}

/// `n` scenes drawn uniformly from the filtered attribute space.
pub fn gen_dataset<T: Real>(n: usize, filter: &SceneFilter, cfg: &DataConfig, seed: u64) -> Result<ConditionedBatch<T>> {
    cfg.validate()?;
    if n == 0 {
        return Err(param_err("dataset size must be positive"));
    }
    let space = filter.space();
    if space.is_empty() {
        return Err(param_err("filter admits no scene"));
    }
    let mut rng = stream(seed, 0xda7a);
    let s = cfg.img_size;
    let mut images = Vec::with_capacity(n * s * s * 3);
    let mut conditions = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let scene = space[rng.random_range(0..space.len())];
        let j = cfg.jitter;
        let offset = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        images.extend(render_scene(&scene, cfg, offset).into_iter().map(T::lit));
        conditions.push(encode_condition(&scene, cfg.cond_dim, cfg.cond_tokens));
        scenes.push(scene);
    }
    Ok(ConditionedBatch {
        images: Tensor::new(&[n, s, s, 3], images),
        conditions,
        scene_specs: scenes,
    })
}

/// Exact noise predictor for centred scenes: decodes the condition, renders
/// the clean image and inverts forward diffusion. Null conditions decode to
/// the empty background.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOracle {
    pub data: DataConfig,
    pub schedule: NoiseSchedule,
}

impl RenderOracle {
    pub fn new(data: DataConfig, schedule: NoiseSchedule) -> Result<Self> {
        data.validate()?;
        Ok(RenderOracle { data, schedule })
    }

    pub fn decode<T: Real>(&self, c: &Condition<T>) -> Result<Option<SceneSpec>> {
        if c.is_null {
            return Ok(None);
        }
        let target: Vec<f64> = c.tokens.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let mut best = None;
        for s in SceneSpec::all() {
            let e = encode_condition::<T>(&s, self.data.cond_dim, self.data.cond_tokens);
            let d: f64 = e
                .tokens
                .data()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a.to_f64().unwrap_or(f64::NAN) - b).powi(2))
                .sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, s));
            }
        }
        match best {
            Some((d, s)) if d < 1e-6 => Ok(Some(s)),
            _ => Err(param_err("condition does not encode a known scene")),
        }
    }

    /// The clean image the oracle assumes for condition `c`.
    pub fn target<T: Real>(&self, c: &Condition<T>) -> Result<Vec<f64>> {
        let centred = DataConfig {
            jitter: 0.0,
            ..self.data.clone()
        };
        Ok(match self.decode(c)? {
            Some(scene) => render_scene(&scene, &centred, (0.0, 0.0)),
            None => vec![self.data.background; self.data.img_size * self.data.img_size * 3],
        })
    }
}

impl<T: Real> Denoiser<T> for RenderOracle {
    fn predict_noise(&self, x_t: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Result<Tensor<T>> {
        let b = check_batch(x_t, conds, t)?;
        let per = x_t.len() / b.max(1);
        let mut out = Vec::with_capacity(x_t.len());
        for i in 0..b {
            self.schedule.check_timestep(t[i])?;
            let x0 = self.target(&conds[i])?;
            if x0.len() != per {
                return Err(param_err("oracle image size differs from the input"));
            }
            let ab = self.schedule.alpha_bar(t[i]);
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (x, x0) in x_t.data()[i * per..(i + 1) * per].iter().zip(&x0) {
                let x = x.to_f64().unwrap_or(f64::NAN);
                out.push(T::lit((x - a * x0) / s));
            }
        }
        Ok(Tensor::new(x_t.shape(), out))
    }
}
