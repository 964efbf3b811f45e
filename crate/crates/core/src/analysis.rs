//! Per-location denoising capability, regional win maps, attention export
//! and held-out denoising error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use afa_autograd::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConditionedBatch;
use crate::denoiser::Condition;
use crate::diffusion::{q_sample_batch, Denoiser, NoiseSchedule};
use crate::ensemble::{afa_attention, EnsembleBundle};
use crate::error::{param_err, shape_err, Error, Result};
use crate::random::{randn, stream};

pub const DEFAULT_REGION_SIZE: usize = 4;

/// Negated channel-summed squared noise error per location, averaged over
/// noise draws and the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityMap {
    /// `[h, w]`, entries `<= 0`.
    pub data: Tensor<f64>,
    pub model_id: usize,
    pub t: usize,
    pub n_samples: usize,
}

/// Win proportions per region and model.
#[derive(Clone, Debug, PartialEq)]
pub struct WinMap {
    /// `[R, C, N]`; every region sums to one.
    pub data: Tensor<f64>,
    pub region_size: usize,
}

/// Squared error summed over channels: `[B, h, w]` flattened.
fn location_errors<T: Real>(pred: &Tensor<T>, eps: &Tensor<T>) -> Result<Vec<f64>> {
    if pred.shape() != eps.shape() || pred.shape().len() != 4 {
        return Err(shape_err(format!("prediction {:?} for noise {:?}", pred.shape(), eps.shape())));
    }
    let c = pred.shape()[3];
    Ok(pred
        .data()
        .chunks(c)
        .zip(eps.data().chunks(c))
        .map(|(p, e)| {
            p.iter()
                .zip(e)
                .map(|(&a, &b)| {
                    let d = (a - b).to_f64().unwrap_or(f64::NAN);
                    d * d
                })
                .sum()
        })
        .collect())
}

/// Noise draw `m` of a Monte Carlo run; shared by every model so their
/// errors are paired.
fn draw<T: Real>(seed: u64, m: usize, shape: &[usize]) -> Tensor<T> {
    randn(&mut stream(seed, m as u64), shape)
}

fn noised<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    q_sample_batch(x0, eps, &vec![t; x0.shape()[0]], sched)
}

fn check_images<T: Real>(x0: &Tensor<T>, conds: &[Condition<T>]) -> Result<()> {
    if x0.shape().len() != 4 || x0.shape()[0] != conds.len() || conds.is_empty() {
        return Err(shape_err(format!("{} conditions for images {:?}", conds.len(), x0.shape())));
    }
    Ok(())
}

/// `-E_eps ||eps_hat(x, y) - eps(x, y)||^2` per location with `m` seeded
/// noise draws, averaged over the images of `x0` (`[B, h, w, C]`).
pub fn positional_capability<T: Real>(
    model: &dyn Denoiser<T>,
    x0: &Tensor<T>,
    conds: &[Condition<T>],
    t: usize,
    sched: &NoiseSchedule,
    m: usize,
    seed: u64,
) -> Result<CapabilityMap> {
    check_images(x0, conds)?;
    sched.check_timestep(t)?;
    if m == 0 {
        return Err(param_err("at least one noise draw is required"));
    }
    let [b, h, w, _] = x0.shape()[..] else { unreachable!() };
    let mut acc = vec![0.0; h * w];
    for k in 0..m {
        let eps = draw::<T>(seed, k, x0.shape());
        let pred = model.predict_noise(&noised(x0, &eps, t, sched)?, conds, &vec![t; b])?;
        for (i, e) in location_errors(&pred, &eps)?.into_iter().enumerate() {
            acc[i % (h * w)] += e;
        }
    }
    let n = (m * b) as f64;
    Ok(CapabilityMap {
        data: Tensor::new(&[h, w], acc.into_iter().map(|v| -v / n).collect()),
        model_id: 0,
        t,
        n_samples: m,
    })
}

/// Per region and noise draw (and image), the model with the smallest
/// regional squared error wins; ties go to the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn win_map<T: Real>(
    models: &[&dyn Denoiser<T>],
    x0: &Tensor<T>,
    conds: &[Condition<T>],
    t: usize,
    sched: &NoiseSchedule,
    region_size: usize,
    m: usize,
    seed: u64,
) -> Result<WinMap> {
    check_images(x0, conds)?;
    sched.check_timestep(t)?;
    let [b, h, w, _] = x0.shape()[..] else { unreachable!() };
    if region_size == 0 || h % region_size != 0 || w % region_size != 0 {
        return Err(param_err(format!("region size {region_size} does not divide {h}x{w}")));
    }
    if models.is_empty() || m == 0 {
        return Err(param_err("win maps need at least one model and one noise draw"));
    }
    let (rows, cols, n) = (h / region_size, w / region_size, models.len());
    let mut wins = vec![0.0; rows * cols * n];
    for k in 0..m {
        let eps = draw::<T>(seed, k, x0.shape());
        let x_t = noised(x0, &eps, t, sched)?;
        let mut regional = vec![0.0; n * b * rows * cols];
        for (mi, model) in models.iter().enumerate() {
            let err = location_errors(&model.predict_noise(&x_t, conds, &vec![t; b])?, &eps)?;
            for (i, e) in err.into_iter().enumerate() {
                let (bi, y, x) = (i / (h * w), (i / w) % h, i % w);
                regional[((mi * b + bi) * rows + y / region_size) * cols + x / region_size] += e;
            }
        }
        for bi in 0..b {
            for r in 0..rows * cols {
                let best = (1..n).fold(0, |best, mi| {
                    if regional[(mi * b + bi) * rows * cols + r] < regional[(best * b + bi) * rows * cols + r] {
                        mi
                    } else {
                        best
                    }
                });
                wins[r * n + best] += 1.0;
            }
        }
    }
    let total = (m * b) as f64;
    Ok(WinMap {
        data: Tensor::new(&[rows, cols, n], wins.into_iter().map(|v| v / total).collect()),
        region_size,
    })
}

/// One exported attention plane: `A[batch, :, :, model]` of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub block: usize,
    pub model: usize,
    pub batch_index: usize,
    /// `[h, w]` in `[0, 1]`.
    pub data: Tensor<f64>,
}

impl AttentionRecord {
    pub fn file_stem(&self) -> String {
        format!("attn_b{}_block{}_model{}", self.batch_index, self.block, self.model)
    }
}

/// Attention planes of `blocks` for every model and image.
pub fn export_attention<T: Real>(
    bundle: &EnsembleBundle<T>,
    x_t: &Tensor<T>,
    conds: &[Condition<T>],
    t: &[usize],
    blocks: &[usize],
) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for (block, map) in afa_attention(bundle, x_t, conds, t, blocks)? {
        let [b, h, w, n] = map.data.shape()[..] else {
            return Err(shape_err("attention maps are [B, h, w, N]"));
        };
        let d = map.data.data();
        for bi in 0..b {
            for model in 0..n {
                let plane = (0..h * w)
                    .map(|p| d[(bi * h * w + p) * n + model].to_f64().unwrap_or(f64::NAN))
                    .collect();
                out.push(AttentionRecord {
                    block,
                    model,
                    batch_index: bi,
                    data: Tensor::new(&[h, w], plane),
                });
            }
        }
    }
    Ok(out)
}

/// 8-bit quantization of a value in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit grayscale PNG of a `[h, w]` map with values in `[0, 1]`.
pub fn write_heatmap(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let [h, w] = map.shape()[..] else {
        return Err(shape_err(format!("heatmaps are 2-D, got {:?}", map.shape())));
    };
    let pixels: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &pixels)
}

/// Writes an RGB PNG of an `[h, w, 3]` image with values in `[-1, 1]`.
pub fn write_image<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(shape_err(format!("images are [h, w, 3], got {:?}", img.shape())));
    };
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|v| quantize((v.to_f64().unwrap_or(0.0) + 1.0) / 2.0))
        .collect();
    write_png(path, w, h, png::ColorType::Rgb, &pixels)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, pixels: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png(e.to_string());
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Writes one heatmap per record into `dir`, returning the paths.
pub fn write_attention(dir: &Path, records: &[AttentionRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    records
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.png", r.file_stem()));
            write_heatmap(&path, &r.data)?;
            Ok(path)
        })
        .collect()
}

/// Mean denoising loss and its spread over examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub mse: f64,
    /// Standard error of the per-example means.
    pub stderr: f64,
    pub examples: usize,
    pub draws: usize,
}

/// Mean denoising loss over `data` with `draws` seeded `(t, eps)` pairs per
/// example. Draws depend only on `seed` and the example index, so models
/// evaluated with one seed see identical noise.
pub fn eval_mse<T: Real>(
    model: &dyn Denoiser<T>,
    data: &ConditionedBatch<T>,
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<MseReport> {
    const CHUNK: usize = 64;
    if data.is_empty() || draws == 0 {
        return Err(param_err("evaluation needs examples and at least one draw"));
    }
    let per = data.images.len() / data.len();
    let mut rngs: Vec<_> = (0..data.len()).map(|i| stream(seed, i as u64)).collect();
    let mut per_example = vec![0.0; data.len()];
    for _ in 0..draws {
        for start in (0..data.len()).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
            let sub = data.select(&idx);
            let mut t = Vec::with_capacity(idx.len());
            let mut eps = Vec::with_capacity(idx.len() * per);
            for &i in &idx {
                t.push(rngs[i].random_range(1..=sched.len()));
                eps.extend(randn::<T>(&mut rngs[i], &[per]).into_data());
            }
            let eps = Tensor::new(sub.images.shape(), eps);
            let x_t = q_sample_batch(&sub.images, &eps, &t, sched)?;
            let pred = model.predict_noise(&x_t, &sub.conditions, &t)?;
            if pred.shape() != eps.shape() {
                return Err(shape_err(format!("prediction {:?} for noise {:?}", pred.shape(), eps.shape())));
            }
            for (k, (p, e)) in pred.data().chunks(per).zip(eps.data().chunks(per)).enumerate() {
                let se: f64 = p
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| (a - b).to_f64().unwrap_or(f64::NAN).powi(2))
                    .sum();
                per_example[idx[k]] += se / per as f64 / draws as f64;
            }
        }
    }
    let n = per_example.len() as f64;
    let mse = per_example.iter().sum::<f64>() / n;
    let var = per_example.iter().map(|v| (v - mse).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    if !mse.is_finite() {
        return Err(Error::Numeric("non-finite evaluation error".into()));
    }
    Ok(MseReport {
        mse,
        stderr: (var / n).sqrt(),
        examples: data.len(),
        draws,
    })
}
