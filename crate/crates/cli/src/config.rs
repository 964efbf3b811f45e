//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use afa_core::data::{DataConfig, SceneFilter, Shape};
use afa_core::denoiser::DenoiserSpec;
use afa_core::diffusion::{CfgConfig, ScheduleConfig};
use afa_core::ensemble::EnsembleMode;
use afa_core::merge::MergeRecipe;
use afa_core::moe::{GumbelConfig, MoeLevel};
use afa_core::random::derive;
use afa_core::sabw::SabwConfig;
use afa_core::trainer::TrainConfig;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub spec: DenoiserSpec,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sabw: SabwConfig,
    #[serde(default)]
    pub ensemble_mode: EnsembleMode,
    #[serde(default)]
    pub moe: MoeSection,
    #[serde(default)]
    pub merge: Option<MergeRecipe>,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub config: DataConfig,
    /// Training images per split.
    pub n_train: usize,
    pub n_val: usize,
    /// One expert training set per filter.
    pub splits: Vec<SceneFilter>,
    pub val_filter: SceneFilter,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            config: DataConfig::default(),
            n_train: 2000,
            n_val: 500,
            splits: vec![SceneFilter::shapes(&[Shape::Circle]), SceneFilter::shapes(&[Shape::Square])],
            val_filter: SceneFilter::shapes(&[Shape::Circle, Shape::Square]),
        }
    }
}

/// Optimizer settings per stage; their `seed` fields are replaced by seeds
/// derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub expert: TrainConfig,
    pub aggregator: TrainConfig,
    pub router: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            expert: TrainConfig {
                lr: 2e-3,
                epochs: 5,
                ..base.clone()
            },
            aggregator: TrainConfig {
                lr: 1e-3,
                epochs: 10,
                ..base.clone()
            },
            router: TrainConfig {
                lr: 1e-3,
                epochs: 10,
                ..base
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSection {
    pub level: MoeLevel,
    pub gumbel: GumbelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub cfg: CfgConfig,
    /// Number of images; their scenes are drawn from `filter`.
    pub n: usize,
    pub filter: SceneFilter,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            cfg: CfgConfig {
                beta_cfg: afa_core::diffusion::DEFAULT_GUIDANCE,
                steps: afa_core::diffusion::DEFAULT_SAMPLING_STEPS,
            },
            n: 8,
            filter: SceneFilter::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Timestep of capability maps, win maps and attention export.
    pub t: usize,
    pub region_size: usize,
    /// Monte Carlo noise draws.
    pub draws: usize,
    /// Validation images used by the map analyses.
    pub images: usize,
    /// `(t, eps)` draws per example for `eval`.
    pub eval_draws: usize,
    /// Blocks exported by `export-attn`; empty means all.
    pub blocks: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            t: 500,
            region_size: afa_core::analysis::DEFAULT_REGION_SIZE,
            draws: 100,
            images: 16,
            eval_draws: 4,
            blocks: Vec::new(),
        }
    }
}

/// Inputs of the later stages; relative paths resolve against the config
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Output of `gen-data`.
    pub data: Option<PathBuf>,
    /// Expert checkpoints for ensembling, routing, merging and win maps.
    pub experts: Vec<PathBuf>,
    /// Checkpoint used by `sample`, `eval` and `export-attn`.
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Seed tags of the pipeline stages.
pub mod tags {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EXPERT: u64 = 3;
    pub const AGGREGATOR: u64 = 4;
    pub const ROUTER: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const ANALYSIS: u64 = 8;
}

impl RunConfig {
    /// Reads and validates a config; relative paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.paths.data.iter_mut().for_each(fix);
        cfg.paths.experts.iter_mut().for_each(fix);
        cfg.paths.model.iter_mut().for_each(fix);
        cfg.paths.out.iter_mut().for_each(fix);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.spec.validate()?;
        self.data.config.validate()?;
        let d = &self.data.config;
        if (d.img_size, d.cond_dim, d.cond_tokens) != (self.spec.img_size, self.spec.cond_dim, self.spec.cond_tokens) {
            bail!("data.config (size, cond_dim, cond_tokens) must match the spec");
        }
        if self.spec.img_channels != 3 {
            bail!("the synthetic corpus has 3 image channels");
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.splits.is_empty() {
            bail!("data needs positive sizes and at least one split");
        }
        for t in [&self.train.expert, &self.train.aggregator, &self.train.router] {
            t.validate()?;
        }
        self.moe.gumbel.validate()?;
        self.sampling.cfg.validate(&self.schedule.build()?)?;
        let a = &self.analysis;
        if a.region_size == 0 || !self.spec.img_size.is_multiple_of(a.region_size) {
            bail!("analysis.region_size must divide the image size");
        }
        if a.draws == 0 || a.images == 0 || a.eval_draws == 0 || a.t == 0 || a.t > self.schedule.steps {
            bail!("analysis needs positive draws and images and 1 <= t <= schedule steps");
        }
        if let Some(b) = a.blocks.iter().find(|&&b| b >= self.spec.num_blocks()) {
            bail!("analysis block {b} out of range");
        }
        Ok(())
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive(self.seed, tag)
    }

    /// Stage training config carrying its derived seed.
    pub fn train_for(&self, stage: &TrainConfig, tag: u64, index: u64) -> TrainConfig {
        TrainConfig {
            seed: derive(self.stage_seed(tag), index),
            ..stage.clone()
        }
    }
}
