//! Pipeline commands behind the `afa` binary.

pub mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use afa_core::analysis::{eval_mse, export_attention, positional_capability, win_map, write_attention, write_heatmap, write_image};
use afa_core::checkpoint::{load_checkpoint, load_dataset, save_arrays, save_checkpoint, save_dataset, Model};
use afa_core::data::{gen_dataset, ConditionedBatch};
use afa_core::denoiser::{Condition, DenoiserParams};
use afa_core::diffusion::{q_sample_batch, sample, Denoiser, NoiseSchedule};
use afa_core::ensemble::{EnsembleBundle, EnsembleMode};
use afa_core::merge::{merge, MergeRecipe};
use afa_core::moe::{router_init, MoeBundle};
use afa_core::random::{derive, randn, stream};
use afa_core::sabw::sabw_init;
use afa_core::trainer::{pretrain_expert, train_router, train_sabw, TrainReport};
use afa_core::Tensor;
use anyhow::{anyhow, bail, Context};
use serde_json::json;

pub use config::RunConfig;
use config::tags;

/// A problem with the invocation or configuration rather than the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    PretrainExperts,
    TrainAfa,
    TrainMoe,
    Merge,
    Sample,
    Eval,
    AnalyzeWins,
    ExportAttn,
}

/// Loads the config, applies the flag overrides and runs `cmd`.
pub fn run(cmd: Command, config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set paths.out"))?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let ctx = Ctx {
        sched: cfg.schedule.build()?,
        cfg,
        out,
    };
    match cmd {
        Command::GenData => ctx.gen_data(),
        Command::PretrainExperts => ctx.pretrain_experts(),
        Command::TrainAfa => ctx.train_afa(),
        Command::TrainMoe => ctx.train_moe(),
        Command::Merge => ctx.merge(),
        Command::Sample => ctx.sample(),
        Command::Eval => ctx.eval(),
        Command::AnalyzeWins => ctx.analyze_wins(),
        Command::ExportAttn => ctx.export_attn(),
    }
}

struct Ctx {
    cfg: RunConfig,
    sched: NoiseSchedule,
    out: PathBuf,
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn report(name: &str, r: &TrainReport) {
    eprintln!(
        "{name}: {} steps, loss {:.4} -> {:.4}",
        r.steps(),
        r.head_loss(50),
        r.tail_loss(50)
    );
}

impl Ctx {
    fn data_dir(&self) -> anyhow::Result<&Path> {
        self.cfg.paths.data.as_deref().ok_or_else(|| usage("paths.data is required"))
    }

    fn train_sets(&self) -> anyhow::Result<Vec<ConditionedBatch>> {
        let dir = self.data_dir()?;
        (0..self.cfg.data.splits.len())
            .map(|i| {
                let p = dir.join(format!("train_{i}"));
                Ok(load_dataset(&p).with_context(|| format!("cannot load {}", p.display()))?.0)
            })
            .collect()
    }

    fn union(&self) -> anyhow::Result<ConditionedBatch> {
        let sets = self.train_sets()?;
        Ok(sets[1..].iter().fold(sets[0].clone(), |acc, s| acc.concat(s)))
    }

    fn val(&self) -> anyhow::Result<ConditionedBatch> {
        let p = self.data_dir()?.join("val");
        Ok(load_dataset(&p).with_context(|| format!("cannot load {}", p.display()))?.0)
    }

    fn experts(&self) -> anyhow::Result<Vec<DenoiserParams>> {
        if self.cfg.paths.experts.is_empty() {
            return Err(usage("paths.experts is empty"));
        }
        self.cfg
            .paths
            .experts
            .iter()
            .map(|p| match load_checkpoint(p).with_context(|| format!("cannot load {}", p.display()))? {
                Model::Denoiser(d) => Ok(d),
                other => bail!("{} holds a {} checkpoint, not a denoiser", p.display(), other.kind()),
            })
            .collect()
    }

    fn model(&self) -> anyhow::Result<Model> {
        let p = self.cfg.paths.model.as_ref().ok_or_else(|| usage("paths.model is required"))?;
        load_checkpoint(p).with_context(|| format!("cannot load {}", p.display()))
    }

    fn gen_data(&self) -> anyhow::Result<()> {
        let d = &self.cfg.data;
        let seed = self.cfg.stage_seed(tags::DATA);
        for (i, f) in d.splits.iter().enumerate() {
            let set = gen_dataset(d.n_train, f, &d.config, derive(seed, i as u64))?;
            save_dataset(&set, &d.config, &self.out.join(format!("train_{i}")))?;
        }
        let val = gen_dataset(d.n_val, &d.val_filter, &d.config, derive(seed, 1 << 20))?;
        save_dataset(&val, &d.config, &self.out.join("val"))?;
        eprintln!("wrote {} training splits and {} validation images", d.splits.len(), d.n_val);
        Ok(())
    }

    fn pretrain_experts(&self) -> anyhow::Result<()> {
        let init = self.cfg.stage_seed(tags::INIT);
        for (i, set) in self.train_sets()?.iter().enumerate() {
            let tc = self.cfg.train_for(&self.cfg.train.expert, tags::EXPERT, i as u64);
            let (p, r) = pretrain_expert(set, &self.cfg.spec, &self.sched, &tc, init)?;
            report(&format!("expert {i}"), &r);
            save_checkpoint(&Model::Denoiser(p), &self.out.join(format!("expert_{i}")))?;
            write_jsonl(&self.out.join(format!("expert_{i}.jsonl")), &r.records)?;
        }
        Ok(())
    }

    fn train_afa(&self) -> anyhow::Result<()> {
        let experts = self.experts()?;
        let n = experts.len();
        let seed = self.cfg.stage_seed(tags::AGGREGATOR);
        let sabw = sabw_init(n, &experts[0].spec, &self.cfg.sabw, seed)?;
        let bundle = EnsembleBundle::new(experts, sabw)?.with_mode(self.cfg.ensemble_mode);
        let tc = self.cfg.train_for(&self.cfg.train.aggregator, tags::AGGREGATOR, 0);
        let bundle = if bundle.mode == EnsembleMode::NoiseAveraging || bundle.mode == EnsembleMode::BlockAveraging {
            eprintln!("{:?} has no trainable aggregator; saving as is", bundle.mode);
            bundle
        } else {
            let (sabw, r) = train_sabw(&bundle, &self.union()?, &self.sched, &tc)?;
            report("aggregator", &r);
            write_jsonl(&self.out.join("afa.jsonl"), &r.records)?;
            EnsembleBundle { sabw, ..bundle }
        };
        save_checkpoint(&Model::Ensemble(bundle), &self.out.join("afa"))?;
        Ok(())
    }

    fn train_moe(&self) -> anyhow::Result<()> {
        let experts = self.experts()?;
        let seed = self.cfg.stage_seed(tags::ROUTER);
        let routers = router_init(experts.len(), &experts[0].spec, self.cfg.moe.level, &self.cfg.sabw, seed)?;
        let bundle = MoeBundle::new(experts, routers, self.cfg.moe.gumbel)?;
        let tc = self.cfg.train_for(&self.cfg.train.router, tags::ROUTER, 0);
        let (routers, r) = train_router(&bundle, &self.union()?, &self.sched, &tc)?;
        report("router", &r);
        write_jsonl(&self.out.join("moe.jsonl"), &r.records)?;
        save_checkpoint(&Model::Moe(MoeBundle { routers, ..bundle }), &self.out.join("moe"))?;
        Ok(())
    }

    fn merge(&self) -> anyhow::Result<()> {
        let experts = self.experts()?;
        let mut recipe = match &self.cfg.merge {
            Some(r) => r.clone(),
            None => MergeRecipe::uniform(experts.len())?,
        };
        recipe
            .validate(experts.len(), experts[0].num_blocks())
            .map_err(|e| usage(format!("merge recipe: {e}")))?;
        let merged = merge(&experts, &recipe)?;
        save_checkpoint(&Model::Denoiser(merged), &self.out.join("merged"))?;
        Ok(())
    }

    fn sample(&self) -> anyhow::Result<()> {
        let model = self.model()?;
        let s = &self.cfg.sampling;
        let seed = self.cfg.stage_seed(tags::SAMPLE);
        let scenes = gen_dataset::<f32>(s.n.max(1), &s.filter, &self.cfg.data.config, seed)?;
        let d = &self.cfg.data.config;
        let unconds = vec![Condition::null(d.cond_tokens, d.cond_dim); scenes.len()];
        let x = sample(&model, &scenes.conditions, &unconds, &s.cfg, &self.sched, seed, self.cfg.spec.image_shape())?;
        for (k, img) in x.unstack().iter().enumerate() {
            write_image(&self.out.join(format!("sample_{k}.png")), img)?;
        }
        write_jsonl(&self.out.join("samples.jsonl"), &scenes.scene_specs)?;
        eprintln!("wrote {} samples", scenes.len());
        Ok(())
    }

    fn eval(&self) -> anyhow::Result<()> {
        let model = self.model()?;
        let val = self.val()?;
        let r = eval_mse(&model, &val, &self.sched, self.cfg.analysis.eval_draws, self.cfg.stage_seed(tags::EVAL))?;
        let row = json!({
            "model": self.cfg.paths.model,
            "kind": model.kind(),
            "mse": r.mse,
            "stderr": r.stderr,
            "examples": r.examples,
            "draws": r.draws,
        });
        println!("{row}");
        write_jsonl(&self.out.join("metrics.jsonl"), [row])
    }

    /// The first `analysis.images` validation images.
    fn analysis_images(&self) -> anyhow::Result<ConditionedBatch> {
        let val = self.val()?;
        let idx: Vec<usize> = (0..self.cfg.analysis.images.min(val.len())).collect();
        Ok(val.select(&idx))
    }

    fn analyze_wins(&self) -> anyhow::Result<()> {
        let experts = self.experts()?;
        let imgs = self.analysis_images()?;
        let a = &self.cfg.analysis;
        let seed = self.cfg.stage_seed(tags::ANALYSIS);
        let models: Vec<&dyn Denoiser<f32>> = experts.iter().map(|m| m as &dyn Denoiser<f32>).collect();
        let wins = win_map(&models, &imgs.images, &imgs.conditions, a.t, &self.sched, a.region_size, a.draws, seed)?;
        let caps = models
            .iter()
            .map(|m| positional_capability(*m, &imgs.images, &imgs.conditions, a.t, &self.sched, a.draws, seed))
            .collect::<afa_core::Result<Vec<_>>>()?;
        let dir = self.out.join("wins");
        let mut arrays = vec![("win_map".to_string(), wins.data.clone())];
        arrays.extend(caps.iter().enumerate().map(|(i, c)| (format!("capability_{i}"), c.data.clone())));
        save_arrays(&dir, "analysis", json!({"t": a.t, "region_size": a.region_size, "draws": a.draws}), &arrays)?;
        let [rows, cols, n] = wins.data.shape()[..] else { unreachable!() };
        let floor = caps.iter().flat_map(|c| c.data.data().iter().copied()).fold(0.0, f64::min).min(-f64::MIN_POSITIVE);
        let mut summary = Vec::new();
        for i in 0..n {
            let plane = Tensor::from_fn(&[rows, cols], |r| wins.data.data()[r * n + i]);
            write_heatmap(&dir.join(format!("wins_model{i}.png")), &plane)?;
            write_heatmap(&dir.join(format!("capability_model{i}.png")), &caps[i].data.map(|v| 1.0 - v / floor))?;
            summary.push(json!({
                "model": i,
                "mean_win": plane.mean(),
                "mean_capability": caps[i].data.mean(),
            }));
        }
        write_jsonl(&dir.join("summary.jsonl"), summary)
    }

    fn export_attn(&self) -> anyhow::Result<()> {
        let Model::Ensemble(bundle) = self.model()? else {
            return Err(usage("export-attn needs an ensemble checkpoint in paths.model"));
        };
        let imgs = self.analysis_images()?;
        let a = &self.cfg.analysis;
        let b = imgs.len();
        let eps: Tensor<f32> = randn(&mut stream(self.cfg.stage_seed(tags::ANALYSIS), 0), imgs.images.shape());
        let t = vec![a.t; b];
        let x_t = q_sample_batch(&imgs.images, &eps, &t, &self.sched)?;
        let k = bundle.spec().num_blocks();
        let blocks: Vec<usize> = match (a.blocks.is_empty(), bundle.mode) {
            (false, _) => a.blocks.clone(),
            (true, EnsembleMode::LastBlockOnly) => vec![k - 1],
            (true, _) => (0..k).collect(),
        };
        let records = export_attention(&bundle, &x_t, &imgs.conditions, &t, &blocks)?;
        let dir = self.out.join("attention");
        write_attention(&dir, &records)?;
        let arrays: Vec<(String, Tensor<f64>)> = records.iter().map(|r| (r.file_stem(), r.data.clone())).collect();
        save_arrays(&dir.join("arrays"), "attention", json!({"t": a.t, "blocks": blocks}), &arrays)?;
        eprintln!("exported {} attention maps", records.len());
        Ok(())
    }
}
