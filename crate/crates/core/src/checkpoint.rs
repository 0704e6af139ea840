//! Checkpoints: a JSON manifest of `{name, shape, offset}` entries plus one
//! little-endian `f32` blob holding weights and optimizer moments.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{AdamW, TrainState};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "vstyle-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

/// Training progress restored on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub iteration: u64,
    pub adam_step: u64,
    pub learning_rate: f32,
    pub rng: Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub loss_window: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub stage: String,
    pub model: ModelConfig,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    pub resume: Option<ResumeState>,
}

impl CheckpointManifest {
    /// Names and shapes only, for comparing layouts across runs.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect()
    }
}

fn push(entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>, name: String, t: &Tensor<f32>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: blob.len(),
    });
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes model weights, and when `state` is given, optimizer moments and
/// progress counters, into directory `dir`.
pub fn save(dir: &Path, stage: &str, model: &Model, state: Option<&TrainState>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = model.params();
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for id in params.ids() {
        push(&mut entries, &mut blob, format!("param/{}", params.name(id)), params.value(id));
    }
    let resume = state.map(|s| {
        for id in params.ids() {
            if let Some((m, v)) = s.opt.moments(id) {
                let name = params.name(id);
                push(&mut entries, &mut blob, format!("adam_m/{name}"), m);
                push(&mut entries, &mut blob, format!("adam_v/{name}"), v);
            }
        }
        ResumeState {
            iteration: s.iteration,
            adam_step: s.opt.step,
            learning_rate: s.opt.lr,
            rng: s.rng.clone(),
            order: s.order.clone(),
            cursor: s.cursor,
            loss_window: s.loss_window.iter().copied().collect(),
        }
    });
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        stage: stage.into(),
        model: model.config().clone(),
        blob: BLOB_FILE.into(),
        tensors: entries,
        resume,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if m.format != FORMAT {
        return Err(Error::Data(format!("{}: unknown checkpoint format '{}'", path.display(), m.format)));
    }
    Ok(m)
}

struct Loaded {
    manifest: CheckpointManifest,
    blob: Vec<u8>,
}

impl Loaded {
    fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let blob_path = dir.join(&manifest.blob);
        if !blob_path.exists() {
            return Err(Error::MissingPath(blob_path));
        }
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Ok(Loaded { manifest, blob })
    }

    fn tensor(&self, name: &str) -> Result<Option<Tensor<f32>>> {
        let Some(e) = self.manifest.tensors.iter().find(|t| t.name == name) else {
            return Ok(None);
        };
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > self.blob.len() {
            return Err(Error::Data(format!("tensor {name} runs past the end of the blob")));
        }
        let data = self.blob[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Some(Tensor::new(e.shape.clone(), data)?))
    }
}

fn fill_model(loaded: &Loaded, cfg: ModelConfig) -> Result<Model> {
    let mut model = Model::init(cfg, 0)?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = format!("param/{}", model.params().name(id));
        let t = loaded
            .tensor(&name)?
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        model.params_mut().set_value(id, t)?;
    }
    Ok(model)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let loaded = Loaded::open(dir)?;
    let cfg = loaded.manifest.model.clone();
    fill_model(&loaded, cfg)
}

/// Base weights from a checkpoint copied into a freshly initialised model of
/// configuration `cfg` (typically the same network with LoRA switched on).
pub fn load_base_into(dir: &Path, cfg: ModelConfig, seed: u64) -> Result<Model> {
    let base = load_model(dir)?;
    let mut model = Model::init(cfg, seed)?;
    for id in model.base_param_ids() {
        let name = model.params().name(id).to_string();
        let src = base
            .params()
            .id(&name)
            .ok_or_else(|| Error::Data(format!("base checkpoint lacks {name}")))?;
        model.params_mut().set_value(id, base.params().value(src).clone())?;
    }
    Ok(model)
}

/// Full training state for a bitwise resume.
pub fn load_state(dir: &Path) -> Result<TrainState> {
    let loaded = Loaded::open(dir)?;
    let resume = loaded
        .manifest
        .resume
        .clone()
        .ok_or_else(|| Error::Data(format!("{} holds weights only", dir.display())))?;
    let model = fill_model(&loaded, loaded.manifest.model.clone())?;
    let mut opt = AdamW::new(resume.learning_rate);
    opt.step = resume.adam_step;
    for id in model.params().ids() {
        let name = model.params().name(id);
        let m = loaded.tensor(&format!("adam_m/{name}"))?;
        let v = loaded.tensor(&format!("adam_v/{name}"))?;
        if let (Some(m), Some(v)) = (m, v) {
            opt.set_moments(id, m, v);
        }
    }
    Ok(TrainState {
        model,
        opt,
        iteration: resume.iteration,
        micro: 0,
        rng: resume.rng,
        order: resume.order,
        cursor: resume.cursor,
        loss_window: VecDeque::from(resume.loss_window),
    })
}
