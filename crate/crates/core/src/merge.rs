//! Static parameter merging of structurally identical denoisers.

use afa_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{param_err, Error, Result};
use crate::layers::{named_params, Params};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Weighted,
    Mbw,
}

/// Normalized merge weights. `global_weights` apply to every parameter in
/// weighted mode and to the non-block parameters (time embedding, null
/// tokens, input and output convolutions) in MBW mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub mode: MergeMode,
    pub global_weights: Vec<f64>,
    #[serde(default)]
    pub block_weights: Vec<Vec<f64>>,
}

fn normalize(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(param_err("merge weights are empty"));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(param_err(format!("merge weights must be finite and nonnegative: {w:?}")));
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return Err(param_err("merge weights sum to zero"));
    }
    Ok(w.iter().map(|v| v / s).collect())
}

impl MergeRecipe {
    pub fn weighted(w: &[f64]) -> Result<Self> {
        Ok(MergeRecipe {
            mode: MergeMode::Weighted,
            global_weights: normalize(w)?,
            block_weights: Vec::new(),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::weighted(&vec![1.0; n])
    }

    /// Per-block rows; the non-block parameters use the mean row (the shared
    /// row itself when all rows agree).
    pub fn mbw(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| normalize(r)).collect::<Result<_>>()?;
        let n = rows.first().ok_or_else(|| param_err("MBW needs at least one block row"))?.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(param_err("MBW rows differ in length"));
        }
        if rows.iter().all(|r| *r == rows[0]) {
            return Self::mbw_with_global(&rows[0], &rows);
        }
        let mean: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect();
        Self::mbw_with_global(&mean, &rows)
    }

    pub fn mbw_with_global(global: &[f64], rows: &[Vec<f64>]) -> Result<Self> {
        Ok(MergeRecipe {
            mode: MergeMode::Mbw,
            global_weights: normalize(global)?,
            block_weights: rows.iter().map(|r| normalize(r)).collect::<Result<_>>()?,
        })
    }

    /// Re-normalizes deserialized weights and checks them against `n`
    /// models and `k` blocks.
    pub fn validate(&mut self, n: usize, k: usize) -> Result<()> {
        self.global_weights = normalize(&self.global_weights)?;
        if self.global_weights.len() != n {
            return Err(param_err(format!("{} weights for {n} models", self.global_weights.len())));
        }
        match self.mode {
            MergeMode::Weighted => Ok(()),
            MergeMode::Mbw => {
                if self.block_weights.len() != k {
                    return Err(param_err(format!("{} block rows for {k} blocks", self.block_weights.len())));
                }
                for r in &mut self.block_weights {
                    *r = normalize(r)?;
                    if r.len() != n {
                        return Err(param_err(format!("block row of {} weights for {n} models", r.len())));
                    }
                }
                Ok(())
            }
        }
    }

    fn weights_for(&self, name: &str, k: usize) -> &[f64] {
        if self.mode == MergeMode::Weighted {
            return &self.global_weights;
        }
        match block_of(name, k) {
            Some(j) => &self.block_weights[j],
            None => &self.global_weights,
        }
    }
}

/// Block owning parameter `name`, or `None` for non-block parameters; the
/// input convolution and the output head count as non-block.
fn block_of(name: &str, k: usize) -> Option<usize> {
    let mut parts = name.split('.');
    if parts.next() != Some("blocks") {
        return None;
    }
    let j: usize = parts.next()?.parse().ok()?;
    let sub = parts.next()?;
    let io = (j == 0 && sub == "head") || (j + 1 == k && (sub == "out" || sub == "out_norm"));
    (!io).then_some(j)
}

/// Parameter-wise convex combination `sum_i w_i * param_i`, computed in f64.
/// Zero weights are skipped so a one-hot recipe copies a model exactly.
pub fn merge<T: Real>(models: &[DenoiserParams<T>], recipe: &MergeRecipe) -> Result<DenoiserParams<T>> {
    let first = models.first().ok_or_else(|| param_err("nothing to merge"))?;
    for m in models {
        m.validate()?;
        if m.spec != first.spec {
            return Err(Error::Structure("merged models must share one spec".into()));
        }
    }
    let k = first.spec.num_blocks();
    let mut recipe = recipe.clone();
    recipe.validate(models.len(), k)?;
    let sources: Vec<Vec<(String, &Tensor<T>)>> = models.iter().map(named_params).collect();
    let mut out = first.clone();
    let mut idx = 0;
    let mut err = None;
    out.visit_mut("", &mut |name, p| {
        let w = recipe.weights_for(&name, k);
        let mut acc = vec![0.0f64; p.len()];
        for (src, &wi) in sources.iter().zip(w) {
            let (n, t) = &src[idx];
            if *n != name || t.shape() != p.shape() {
                err.get_or_insert_with(|| Error::Structure(format!("parameter {name} differs across models")));
                return;
            }
            if wi == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += wi * v.to_f64().unwrap_or(f64::NAN);
            }
        }
        for (d, a) in p.data_mut().iter_mut().zip(acc) {
            *d = T::lit(a);
        }
        idx += 1;
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
