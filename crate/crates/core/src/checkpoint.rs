//! Named-array archives: a directory holding `manifest.json` (format
//! version, kind, metadata and a tensor index) and `payload.bin`, the
//! little-endian f32 arrays concatenated in index order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use afa_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::data::{ConditionedBatch, DataConfig, RenderOracle, SceneSpec};
use crate::denoiser::{build_denoiser, Condition, DenoiserParams, DenoiserSpec, FORMAT_VERSION};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::ensemble::{EnsembleBundle, EnsembleMode};
use crate::error::{Error, Result};
use crate::layers::{named_params, Params};
use crate::moe::{router_init, GumbelConfig, MoeBundle, MoeLevel};
use crate::sabw::{sabw_init, SabwConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

/// In-memory archive contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Archive {
    pub fn new(kind: &str, meta: Value) -> Self {
        Archive {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `p` under `prefix`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, p: &impl Params<T>) {
        for (name, t) in named_params(p) {
            self.tensors.push((format!("{prefix}{name}"), t.cast()));
        }
    }

    pub fn push(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| integrity(format!("missing array {name}")))
    }

    /// Overwrites every parameter of `p` from the arrays under `prefix`.
    pub fn fill_params<T: Real>(&self, prefix: &str, p: &mut impl Params<T>) -> Result<usize> {
        let mut err = None;
        let mut count = 0;
        p.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.get(&format!("{prefix}{name}")) {
                Ok(src) if src.shape() == t.shape() => {
                    *t = src.cast();
                    count += 1;
                }
                Ok(src) => {
                    err = Some(integrity(format!("{prefix}{name} has shape {:?}, expected {:?}", src.shape(), t.shape())))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(count), Err)
    }

    fn meta_field<D: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<D> {
        let v = self.meta.get(key).ok_or_else(|| integrity(format!("manifest meta lacks {key}")))?;
        Ok(D::deserialize(v)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut names = HashSet::new();
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            if !names.insert(name.as_str()) {
                return Err(integrity(format!("duplicate array {name}")));
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PAYLOAD_FILE), &payload)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| integrity(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = fs::read(dir.join(PAYLOAD_FILE))?;
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(integrity(format!(
                "payload has {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let mut names = HashSet::new();
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if !names.insert(e.name.as_str()) {
                return Err(integrity(format!("duplicate array {}", e.name)));
            }
            if e.dtype != "f32" {
                return Err(integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != offset {
                return Err(integrity(format!("{}: offset {} where {offset} was expected", e.name, e.offset)));
            }
            let len = e.shape.iter().product::<usize>();
            let end = offset + 4 * len as u64;
            if end > payload.len() as u64 {
                return Err(integrity(format!("{}: shape {:?} overruns the payload", e.name, e.shape)));
            }
            let data = payload[offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)));
            offset = end;
        }
        if offset != payload.len() as u64 {
            return Err(integrity(format!("index covers {offset} of {} payload bytes", payload.len())));
        }
        if hex(&Sha256::digest(&payload)) != manifest.payload_sha256 {
            return Err(integrity("payload checksum mismatch"));
        }
        Ok(Archive {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Any model the checkpoint format can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Denoiser(DenoiserParams),
    Ensemble(EnsembleBundle),
    Moe(MoeBundle),
    /// Exact noise predictor for the synthetic corpus; it has no weights.
    Oracle(RenderOracle),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Denoiser(_) => "denoiser",
            Model::Ensemble(_) => "afa",
            Model::Moe(_) => "moe",
            Model::Oracle(_) => "oracle",
        }
    }

    pub fn spec(&self) -> Option<&DenoiserSpec> {
        match self {
            Model::Denoiser(p) => Some(&p.spec),
            Model::Ensemble(b) => Some(b.spec()),
            Model::Moe(b) => Some(b.spec()),
            Model::Oracle(_) => None,
        }
    }
}

impl Denoiser<f32> for Model {
    fn predict_noise(&self, x_t: &Tensor<f32>, conds: &[Condition<f32>], t: &[usize]) -> Result<Tensor<f32>> {
        match self {
            Model::Denoiser(p) => p.predict_noise(x_t, conds, t),
            Model::Ensemble(b) => b.predict_noise(x_t, conds, t),
            Model::Moe(b) => b.predict_noise(x_t, conds, t),
            Model::Oracle(o) => o.predict_noise(x_t, conds, t),
        }
    }
}

fn model_prefix(i: usize) -> String {
    format!("model.{i}.")
}

fn push_models(a: &mut Archive, models: &[DenoiserParams]) {
    for (i, m) in models.iter().enumerate() {
        a.push_params(&model_prefix(i), m);
    }
}

fn read_models(a: &Archive, spec: &DenoiserSpec, n: usize) -> Result<Vec<DenoiserParams>> {
    (0..n)
        .map(|i| {
            let mut m = build_denoiser(spec, 0)?;
            a.fill_params(&model_prefix(i), &mut m)?;
            Ok(m)
        })
        .collect()
}

pub fn to_archive(model: &Model) -> Archive {
    match model {
        Model::Denoiser(p) => {
            let mut a = Archive::new(model.kind(), json!({ "spec": p.spec, "n_models": 1 }));
            a.push_params("", p);
            a
        }
        Model::Ensemble(b) => {
            let meta = json!({
                "spec": b.spec(),
                "n_models": b.n_models(),
                "mode": b.mode,
                "sabw": b.sabw.config,
            });
            let mut a = Archive::new(model.kind(), meta);
            push_models(&mut a, &b.models);
            a.push_params("sabw.", &b.sabw);
            a
        }
        Model::Moe(b) => {
            let meta = json!({
                "spec": b.spec(),
                "n_models": b.models.len(),
                "level": b.level(),
                "router": b.routers.config,
                "gumbel": b.gumbel,
            });
            let mut a = Archive::new(model.kind(), meta);
            push_models(&mut a, &b.models);
            a.push_params("router.", &b.routers);
            a
        }
        Model::Oracle(o) => Archive::new(
            model.kind(),
            json!({ "data": o.data, "alpha_bar": o.schedule.values() }),
        ),
    }
}

pub fn from_archive(a: &Archive) -> Result<Model> {
    let total = a.tensors.len();
    let (model, used) = match a.kind.as_str() {
        "denoiser" => {
            let spec: DenoiserSpec = a.meta_field("spec")?;
            let mut p = build_denoiser(&spec, 0)?;
            let used = a.fill_params("", &mut p)?;
            (Model::Denoiser(p), used)
        }
        "afa" => {
            let spec: DenoiserSpec = a.meta_field("spec")?;
            let n: usize = a.meta_field("n_models")?;
            let mode: EnsembleMode = a.meta_field("mode")?;
            let config: SabwConfig = a.meta_field("sabw")?;
            let models = read_models(a, &spec, n)?;
            let mut sabw = sabw_init(n, &spec, &config, 0)?;
            a.fill_params("sabw.", &mut sabw)?;
            let b = EnsembleBundle::new(models, sabw)?.with_mode(mode);
            (Model::Ensemble(b), total)
        }
        "moe" => {
            let spec: DenoiserSpec = a.meta_field("spec")?;
            let n: usize = a.meta_field("n_models")?;
            let level: MoeLevel = a.meta_field("level")?;
            let config: SabwConfig = a.meta_field("router")?;
            let gumbel: GumbelConfig = a.meta_field("gumbel")?;
            let models = read_models(a, &spec, n)?;
            let mut routers = router_init(n, &spec, level, &config, 0)?;
            a.fill_params("router.", &mut routers)?;
            (Model::Moe(MoeBundle::new(models, routers, gumbel)?), total)
        }
        "oracle" => {
            let data: DataConfig = a.meta_field("data")?;
            let schedule = NoiseSchedule::from_alpha_bar(a.meta_field("alpha_bar")?)?;
            (Model::Oracle(RenderOracle::new(data, schedule)?), 0)
        }
        other => return Err(integrity(format!("unknown checkpoint kind {other}"))),
    };
    let expected = to_archive(&model).tensors.len();
    if used != total || expected != total {
        return Err(integrity(format!("{total} arrays stored, {expected} expected")));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    to_archive(model).write(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    from_archive(&Archive::read(dir)?)
}

/// Stores a dataset as images and condition tokens plus the scene list.
pub fn save_dataset(data: &ConditionedBatch, cfg: &DataConfig, dir: &Path) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Param("cannot store an empty dataset".into()));
    }
    let mut a = Archive::new(
        "dataset",
        json!({
            "data": cfg,
            "scenes": data.scene_specs,
            "null": data.conditions.iter().map(|c| c.is_null).collect::<Vec<_>>(),
        }),
    );
    a.push("images", data.images.clone());
    let tokens: Vec<Tensor<f32>> = data.conditions.iter().map(|c| c.tokens.clone()).collect();
    a.push("tokens", Tensor::stack(&tokens));
    a.write(dir)
}

pub fn load_dataset(dir: &Path) -> Result<(ConditionedBatch, DataConfig)> {
    let a = Archive::read(dir)?;
    if a.kind != "dataset" {
        return Err(integrity(format!("expected a dataset, found {}", a.kind)));
    }
    let cfg: DataConfig = a.meta_field("data")?;
    let scene_specs: Vec<SceneSpec> = a.meta_field("scenes")?;
    let null: Vec<bool> = a.meta_field("null")?;
    let images = a.get("images")?.clone();
    let tokens = a.get("tokens")?;
    let n = scene_specs.len();
    if images.shape().first() != Some(&n) || tokens.shape().first() != Some(&n) || null.len() != n {
        return Err(integrity("dataset arrays disagree on the example count"));
    }
    let conditions = tokens
        .unstack()
        .into_iter()
        .zip(null)
        .map(|(t, is_null)| Condition { tokens: t, is_null })
        .collect();
    Ok((
        ConditionedBatch {
            images,
            conditions,
            scene_specs,
        },
        cfg,
    ))
}

/// Stores analysis arrays (capability maps, win maps, attention planes).
pub fn save_arrays(dir: &Path, kind: &str, meta: Value, arrays: &[(String, Tensor<f64>)]) -> Result<()> {
    let mut a = Archive::new(kind, meta);
    for (name, t) in arrays {
        a.push(name, t.cast());
    }
    a.write(dir)
}
