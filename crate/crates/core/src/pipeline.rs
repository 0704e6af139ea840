//! Stage orchestration and inference shared by the commands and tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{Codec, Video};
use crate::conditioning::Mode;
use crate::config::RunConfig;
use crate::datagen::{load_dataset, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, Conditioned, SampleConditions, SamplerConfig};
use crate::net::{GlobalStyleFeature, LoraMode, Model, ModelConfig, TextCondition};
use crate::trainer::{run_stage, split, validation_set, Stage, StageOutput, StageReport, TrainState};

/// Which stages `train` runs after the base model exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    Base,
    Ct,
    Sft,
    Full,
}

impl TrainTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(TrainTarget::Base),
            "ct" => Ok(TrainTarget::Ct),
            "sft" => Ok(TrainTarget::Sft),
            "full" => Ok(TrainTarget::Full),
            _ => Err(Error::Usage(format!("unknown stage '{s}' (base, ct, sft, full)"))),
        }
    }

    fn stages(self) -> &'static [Stage] {
        match self {
            TrainTarget::Base => &[],
            TrainTarget::Ct => &[Stage::Ct],
            TrainTarget::Sft => &[Stage::Sft],
            TrainTarget::Full => &[Stage::Ct, Stage::Sft],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub base_checkpoint: PathBuf,
    pub stage_checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StageReport>,
}

pub fn dataset_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    match stage {
        Stage::Base | Stage::Ct => cfg.paths.data_dir.join("ct"),
        Stage::Sft => cfg.paths.data_dir.join("sft"),
    }
}

pub fn test_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("test")
}

fn check_geometry(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<()> {
    let g = ds.manifest.geometry;
    let want = cfg.geometry;
    if (g.frames, g.height, g.width) != (want.frames, want.height, want.width) {
        return Err(Error::Data(format!(
            "{}: dataset geometry {}x{}x{} does not match config {}x{}x{}",
            dir.display(),
            g.frames,
            g.height,
            g.width,
            want.frames,
            want.height,
            want.width
        )));
    }
    Ok(())
}

pub fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(dir)?;
    check_geometry(cfg, &ds, dir)?;
    if ds.samples.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", dir.display())));
    }
    Ok(ds)
}

fn run_one(
    cfg: &RunConfig,
    stage: Stage,
    model: Model,
    samples: &[SamplePair],
    out_dir: &Path,
) -> Result<(Model, StageReport)> {
    let scfg = cfg.trainer.stage(stage);
    let ctx = cfg.batch_context()?;
    let (train, held) = split(samples.len(), scfg.validation_fraction, scfg.seed);
    let val = validation_set(stage, samples, &held, scfg.validation_examples, scfg.seed, &ctx)?;
    let state = TrainState::new(model, scfg, train);
    let out = StageOutput {
        dir: out_dir.to_path_buf(),
    };
    let (state, report) = run_stage(stage, scfg, state, samples, &val, &ctx, Some(&out))?;
    Ok((state.model, report))
}

/// Trains the base model into `base_dir` unless a final checkpoint is
/// already there.
pub fn ensure_base(cfg: &RunConfig, base_dir: &Path) -> Result<(PathBuf, Option<StageReport>)> {
    let final_dir = base_dir.join("final");
    if final_dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Ok((final_dir, None));
    }
    let dir = dataset_dir(cfg, Stage::Base);
    let ds = open_dataset(cfg, &dir)?;
    let model = Model::init(base_model_config(&cfg.model), cfg.seeds.model)?;
    let (_, report) = run_one(cfg, Stage::Base, model, &ds.samples, base_dir)?;
    Ok((final_dir, Some(report)))
}

pub fn base_model_config(model: &ModelConfig) -> ModelConfig {
    ModelConfig {
        lora_mode: LoraMode::Off,
        ..model.clone()
    }
}

/// Base pretraining if needed, then the stages of `target`. Stage outputs go
/// to `run_dir/<stage>`, the last stage's weights to `run_dir/final`.
pub fn train(cfg: &RunConfig, target: TrainTarget, run_dir: &Path, base_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    if target != TrainTarget::Base && cfg.model.lora_mode == LoraMode::Off {
        return Err(Error::Usage("LoRA stages need model.lora_mode token_specific or standard".into()));
    }
    let stages = target.stages();
    // datasets are checked before any training starts
    let datasets = stages
        .iter()
        .map(|&s| open_dataset(cfg, &dataset_dir(cfg, s)))
        .collect::<Result<Vec<_>>>()?;
    let (base_ckpt, base_report) = ensure_base(cfg, base_dir)?;
    let mut reports: Vec<StageReport> = base_report.into_iter().collect();
    if stages.is_empty() {
        return Ok(TrainSummary {
            final_checkpoint: base_ckpt.clone(),
            base_checkpoint: base_ckpt,
            stage_checkpoints: Vec::new(),
            reports,
        });
    }
    let mut model = checkpoint::load_base_into(&base_ckpt, cfg.model.clone(), cfg.seeds.model)?;
    let mut stage_checkpoints = Vec::new();
    for (&stage, ds) in stages.iter().zip(&datasets) {
        let dir = run_dir.join(stage.name());
        let (m, report) = run_one(cfg, stage, model, &ds.samples, &dir)?;
        model = m;
        stage_checkpoints.push(dir.join("final"));
        reports.push(report);
    }
    let final_dir = run_dir.join("final");
    checkpoint::save(&final_dir, stages[stages.len() - 1].name(), &model, None)?;
    Ok(TrainSummary {
        base_checkpoint: base_ckpt,
        stage_checkpoints,
        final_checkpoint: final_dir,
        reports,
    })
}

/// Inference mode as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StylizeMode {
    Text,
    StyleImage,
    FirstFrame,
    T2v,
    Fuse,
}

impl StylizeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(StylizeMode::Text),
            "style-image" | "style_image" => Ok(StylizeMode::StyleImage),
            "first-frame" | "first_frame" => Ok(StylizeMode::FirstFrame),
            "t2v" => Ok(StylizeMode::T2v),
            "fuse" => Ok(StylizeMode::Fuse),
            _ => Err(Error::Usage(format!(
                "unknown mode '{s}' (text, style-image, first-frame, t2v, fuse)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StylizeMode::Text => "text",
            StylizeMode::StyleImage => "style-image",
            StylizeMode::FirstFrame => "first-frame",
            StylizeMode::T2v => "t2v",
            StylizeMode::Fuse => "fuse",
        }
    }
}

/// Conditions for one stylization run.
#[derive(Debug, Clone)]
pub struct StylizeRequest {
    pub mode: StylizeMode,
    /// Raw input video; must be absent for t2v.
    pub input: Option<Video>,
    pub content_tags: Vec<usize>,
    pub style_tag: Option<usize>,
    pub style_image: Option<Video>,
    pub first_frame: Option<Video>,
}

impl StylizeRequest {
    /// Checks that exactly the conditions of the mode are present.
    pub fn validate(&self) -> Result<()> {
        let (tag, image, first, input) = (
            self.style_tag.is_some(),
            self.style_image.is_some(),
            self.first_frame.is_some(),
            self.input.is_some(),
        );
        let ok = match self.mode {
            StylizeMode::Text => tag && !image && !first && input,
            StylizeMode::StyleImage => !tag && image && !first && input,
            StylizeMode::FirstFrame => !tag && !image && first && input,
            StylizeMode::T2v => tag && !image && !first && !input,
            StylizeMode::Fuse => (tag || first) && image && input,
        };
        if !ok {
            return Err(Error::Usage(format!(
                "mode {} takes {}; got style_tag={tag} style_image={image} first_frame={first} input={input}",
                self.mode.name(),
                match self.mode {
                    StylizeMode::Text => "an input video and --style-tag",
                    StylizeMode::StyleImage => "an input video and --style-image",
                    StylizeMode::FirstFrame => "an input video and --first-frame",
                    StylizeMode::T2v => "--style-tag and no input video",
                    StylizeMode::Fuse => "an input video, --style-image and --style-tag and/or --first-frame",
                }
            )));
        }
        Ok(())
    }
}

/// Runs the sampler for `req` and decodes the result.
pub fn stylize(
    model: &Model,
    codec: &Codec,
    latent_dims: [usize; 4],
    req: &StylizeRequest,
    sampler: &SamplerConfig,
) -> Result<Video> {
    req.validate()?;
    let encode_frame = |v: &Video| codec.encode(&v.frame(0));
    let z_raw = req.input.as_ref().map(|v| codec.encode(v)).transpose()?;
    if let Some(z) = &z_raw {
        if z.dims() != latent_dims {
            return Err(Error::Data(format!(
                "input latent {:?} does not match model geometry {latent_dims:?}",
                z.dims()
            )));
        }
    }
    let mut tags = req.content_tags.clone();
    tags.extend(req.style_tag);
    let mode = match req.mode {
        StylizeMode::Text | StylizeMode::T2v => Mode::Text,
        StylizeMode::StyleImage => Mode::StyleImage,
        StylizeMode::FirstFrame => Mode::FirstFrame,
        StylizeMode::Fuse => Mode::Fused,
    };
    let cond = SampleConditions {
        z_raw,
        first: req.first_frame.as_ref().map(encode_frame).transpose()?,
        style: req.style_image.as_ref().map(encode_frame).transpose()?,
        style_mask: Some(model.config().lora_mode.style_mask()),
    };
    let style = req
        .style_image
        .as_ref()
        .map(GlobalStyleFeature::from_image)
        .unwrap_or_else(GlobalStyleFeature::zero);
    let field = Conditioned {
        model,
        text: TextCondition::new(tags),
        style,
    };
    euler_sample(&field, mode, codec, latent_dims, model.config().patch, &cond, sampler)
}

/// Request that reproduces one training branch on a dataset sample.
pub fn request_for_sample(sample: &SamplePair, mode: StylizeMode, ref_index: usize) -> Result<StylizeRequest> {
    let mut req = StylizeRequest {
        mode,
        input: Some(sample.x_raw.clone()),
        content_tags: sample.t_ns.clone(),
        style_tag: None,
        style_image: None,
        first_frame: None,
    };
    let reference = || {
        sample
            .refs
            .get(ref_index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample has no reference {ref_index}")))
    };
    match mode {
        StylizeMode::Text => req.style_tag = Some(sample.op.style_tag()),
        StylizeMode::StyleImage => req.style_image = Some(reference()?),
        StylizeMode::FirstFrame => req.first_frame = Some(sample.x_sty.frame(0)),
        StylizeMode::T2v => {
            req.input = None;
            req.style_tag = Some(sample.op.style_tag());
        }
        StylizeMode::Fuse => {
            req.style_tag = Some(sample.op.style_tag());
            req.style_image = Some(reference()?);
        }
    }
    Ok(req)
}

/// Stylizes consecutive segments, feeding each segment's last generated
/// frame to the next as its first-frame condition. The first segment uses
/// `first` as given; later segments run fused with the persistent style.
pub fn long_video(
    model: &Model,
    codec: &Codec,
    latent_dims: [usize; 4],
    segments: &[Video],
    first: &StylizeRequest,
    sampler: &SamplerConfig,
) -> Result<Vec<Video>> {
    if segments.len() < 2 {
        return Err(Error::Usage(format!("long-video needs at least 2 segments, got {}", segments.len())));
    }
    if let Some(bad) = segments.iter().find(|s| !s.same_geometry(&segments[0])) {
        return Err(Error::Data(format!(
            "segment geometry {}x{}x{} differs from {}x{}x{}",
            bad.frames(),
            bad.height(),
            bad.width(),
            segments[0].frames(),
            segments[0].height(),
            segments[0].width()
        )));
    }
    if !matches!(first.mode, StylizeMode::Text | StylizeMode::StyleImage | StylizeMode::Fuse) {
        return Err(Error::Usage("long-video takes a text and/or style-image condition".into()));
    }
    let mut out = Vec::with_capacity(segments.len());
    for (k, seg) in segments.iter().enumerate() {
        let mut req = first.clone();
        req.input = Some(seg.clone());
        if k > 0 {
            let prev: &Video = &out[k - 1];
            req.mode = StylizeMode::Fuse;
            req.first_frame = Some(prev.last_frame());
        }
        let seg_sampler = SamplerConfig {
            steps: sampler.steps,
            seed: sampler.seed.wrapping_add(k as u64),
        };
        out.push(fused_or_single(model, codec, latent_dims, &req, &seg_sampler)?);
    }
    Ok(out)
}

// Fused mode without a style image (text + first frame) has no CLI-facing
// single mode, so it is validated here rather than by `StylizeRequest`.
fn fused_or_single(
    model: &Model,
    codec: &Codec,
    latent_dims: [usize; 4],
    req: &StylizeRequest,
    sampler: &SamplerConfig,
) -> Result<Video> {
    if req.mode == StylizeMode::Fuse && req.style_image.is_none() {
        let mut tags = req.content_tags.clone();
        tags.extend(req.style_tag);
        let cond = SampleConditions {
            z_raw: req.input.as_ref().map(|v| codec.encode(v)).transpose()?,
            first: req.first_frame.as_ref().map(|v| codec.encode(&v.frame(0))).transpose()?,
            style: None,
            style_mask: None,
        };
        let field = Conditioned {
            model,
            text: TextCondition::new(tags),
            style: GlobalStyleFeature::zero(),
        };
        return euler_sample(&field, Mode::Fused, codec, latent_dims, model.config().patch, &cond, sampler);
    }
    stylize(model, codec, latent_dims, req, sampler)
}
