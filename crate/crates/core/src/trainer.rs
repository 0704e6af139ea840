//! Stage training: condition-mode sampling, batch construction, AdamW with
//! gradient accumulation, validation and checkpointing.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{Codec, Latent};
use crate::conditioning::{
    assemble, build_first_frame_input, build_style_image_input, build_video_input, Mode, ModelInput,
};
use crate::datagen::SamplePair;
use crate::error::{Error, Result};
use crate::flow::{training_loss, velocity_target, NoiseDraw};
use crate::net::{GlobalStyleFeature, Model, TextCondition};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "SFT")]
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Ct => "CT",
            Stage::Sft => "SFT",
        }
    }
}

/// Decoupled AdamW. Weight decay applies to LoRA matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor<f32>, Tensor<f32>)>,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<f32>, v: Tensor<f32>) {
        self.moments.insert(id, (m, v));
    }

    /// One update from the accumulated gradients times `grad_scale`.
    /// Returns the global norm of the scaled gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grad_scale: f32) -> f64 {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut sq = 0.0f64;
        for id in params.trainable_ids() {
            let decay = params.name(id).contains(".lora.");
            let g: Vec<f32> = params.grad(id).data().iter().map(|&g| g * grad_scale).collect();
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            let shape = params.value(id).shape().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let w = params.value_mut(id).data_mut();
            for (((wi, mi), vi), gi) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if decay {
                    *wi -= self.lr * self.weight_decay * *wi;
                }
                *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        sq.sqrt()
    }
}

/// Categorical draw over (text, style image, first frame).
pub fn sample_mode(rng: &mut Rng, ratios: [f64; 3]) -> Result<Mode> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Invalid(format!("condition ratios {ratios:?} must be >= 0 with a positive sum")));
    }
    let u = rng.uniform() * ratios.iter().sum::<f64>();
    Ok(if u < ratios[0] {
        Mode::Text
    } else if u < ratios[0] + ratios[1] {
        Mode::StyleImage
    } else {
        Mode::FirstFrame
    })
}

/// Everything one forward pass and its loss need.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: ModelInput,
    pub text: TextCondition,
    pub style: GlobalStyleFeature,
    pub target: Latent,
    pub t: f32,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchContext {
    pub codec: Codec,
    pub patch: usize,
    /// Mask value of the style slab: 1.0, or -1.0 for the standard-LoRA arm.
    pub style_mask: f32,
}

/// One training example of the stylization objective. `ref_index` selects
/// the reference image in style-image mode and is ignored otherwise.
pub fn build_batch(
    sample: &SamplePair,
    mode: Mode,
    t: f32,
    noise: &NoiseDraw,
    ref_index: usize,
    ctx: &BatchContext,
) -> Result<Example> {
    let z_raw = ctx.codec.encode(&sample.x_raw)?;
    let z_sty = ctx.codec.encode(&sample.x_sty)?;
    if noise.eps_video.dims() != z_sty.dims() {
        return Err(Error::shape(
            "build_batch",
            format!("noise {:?} vs latent {:?}", noise.eps_video.dims(), z_sty.dims()),
        ));
    }
    let video = build_video_input(&z_sty, &z_raw, t, &noise.eps_video)?;
    let target = velocity_target(&z_sty, &noise.eps_video)?;
    let (input, text, style) = match mode {
        Mode::Text => (
            assemble(mode, &video, None, None, ctx.patch)?,
            TextCondition::new(sample.t_sty.clone()),
            GlobalStyleFeature::zero(),
        ),
        Mode::StyleImage => {
            let r = sample.refs.get(ref_index).ok_or_else(|| {
                Error::Invalid(format!(
                    "style-image mode needs reference {ref_index}, sample has {}",
                    sample.refs.len()
                ))
            })?;
            let z_s = ctx.codec.encode(r)?;
            let mut slab = build_style_image_input(&z_s, t, &noise.eps_style)?;
            slab.set_mask(ctx.style_mask);
            (
                assemble(mode, &video, None, Some(&slab), ctx.patch)?,
                TextCondition::new(sample.t_ns.clone()),
                GlobalStyleFeature::from_image(r),
            )
        }
        Mode::FirstFrame => {
            let z_1st = ctx.codec.encode(&sample.x_sty.frame(0))?;
            let slab = build_first_frame_input(&z_1st, t, &noise.eps_first)?;
            (
                assemble(mode, &video, Some(&slab), None, ctx.patch)?,
                TextCondition::new(sample.t_ns.clone()),
                GlobalStyleFeature::zero(),
            )
        }
        Mode::Fused => return Err(Error::Invalid("fused mode is inference-only".into())),
    };
    Ok(Example {
        input,
        text,
        style,
        target,
        t,
        mode,
    })
}

/// Base-model example on raw videos only. Text mode reconstructs the raw
/// video from its own condition slab, first-frame mode continues a raw first
/// frame, and style-image mode is replaced by text-to-video with an empty
/// video condition.
pub fn build_base_example(
    sample: &SamplePair,
    mode: Mode,
    t: f32,
    noise: &NoiseDraw,
    ctx: &BatchContext,
) -> Result<Example> {
    let z_raw = ctx.codec.encode(&sample.x_raw)?;
    let [c, f, h, w] = z_raw.dims();
    let target = velocity_target(&z_raw, &noise.eps_video)?;
    let text = TextCondition::new(sample.t_ns.clone());
    let input = match mode {
        Mode::Text => {
            let video = build_video_input(&z_raw, &z_raw, t, &noise.eps_video)?;
            assemble(Mode::Text, &video, None, None, ctx.patch)?
        }
        Mode::StyleImage => {
            let video = build_video_input(&z_raw, &Latent::zeros(c, f, h, w), t, &noise.eps_video)?;
            assemble(Mode::Text, &video, None, None, ctx.patch)?
        }
        Mode::FirstFrame => {
            let video = build_video_input(&z_raw, &z_raw, t, &noise.eps_video)?;
            let z_1st = ctx.codec.encode(&sample.x_raw.frame(0))?;
            let slab = build_first_frame_input(&z_1st, t, &noise.eps_first)?;
            assemble(Mode::FirstFrame, &video, Some(&slab), None, ctx.patch)?
        }
        Mode::Fused => return Err(Error::Invalid("fused mode is inference-only".into())),
    };
    Ok(Example {
        mode: input.mode,
        input,
        text,
        style: GlobalStyleFeature::zero(),
        target,
        t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub iterations: u64,
    pub learning_rate: f32,
    pub accumulation: usize,
    pub batch_size: usize,
    /// text : style image : first frame.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub validation_fraction: f64,
    pub validation_examples: usize,
    pub validate_every: u64,
    pub checkpoint_every: u64,
    pub loss_window: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            iterations: 2000,
            learning_rate: 1e-3,
            accumulation: 2,
            batch_size: 4,
            ratios: [1.0, 2.0, 1.0],
            seed: 17,
            validation_fraction: 0.05,
            validation_examples: 24,
            validate_every: 250,
            checkpoint_every: 500,
            loss_window: 100,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.accumulation < 1 || self.batch_size < 1 {
            return Err(Error::Invalid("iterations, accumulation and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Invalid("validation_fraction must be in [0, 1)".into()));
        }
        sample_mode(&mut Rng::new(0), self.ratios).map(|_| ())
    }
}

/// Indices of the training and held-out samples.
pub fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 11).shuffle(&mut idx);
    let held = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - held);
    (idx, val)
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    /// Completed optimizer updates.
    pub iteration: u64,
    /// Micro-batches accumulated since the last update.
    pub micro: usize,
    pub rng: Rng,
    /// Shuffled training indices and the read position within them.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub loss_window: VecDeque<f64>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &StageConfig, train_indices: Vec<usize>) -> Self {
        TrainState {
            model,
            opt: AdamW::new(cfg.learning_rate),
            iteration: 0,
            micro: 0,
            rng: Rng::derive(cfg.seed, 12),
            order: train_indices,
            cursor: usize::MAX,
            loss_window: VecDeque::new(),
        }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn push_loss(&mut self, loss: f64, window: usize) {
        self.loss_window.push_back(loss);
        while self.loss_window.len() > window.max(1) {
            self.loss_window.pop_front();
        }
    }

    pub fn mean_recent_loss(&self) -> Option<f64> {
        if self.loss_window.is_empty() {
            return None;
        }
        Some(self.loss_window.iter().sum::<f64>() / self.loss_window.len() as f64)
    }
}

fn example_loss(model: &Model, ex: &Example, tape: &mut Tape<f32>) -> Result<crate::tensor::Var> {
    let pred = model.forward(model.params(), tape, &ex.input, ex.t, &ex.text, &ex.style)?;
    training_loss(tape, pred, &ex.target, &ex.input)
}

/// Outcome of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Set when this micro-batch completed an optimizer update.
    pub grad_norm: Option<f64>,
}

/// Forward, loss and backward on one micro-batch; every `accumulation`
/// micro-batches the accumulated gradients are averaged and applied.
pub fn train_step(state: &mut TrainState, batch: &[Example], accumulation: usize) -> Result<StepOutcome> {
    if batch.is_empty() || accumulation == 0 {
        return Err(Error::Invalid("train_step needs a non-empty batch and accumulation >= 1".into()));
    }
    let inv = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    for ex in batch {
        let mut tape = Tape::new();
        let loss = example_loss(&state.model, ex, &mut tape)?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {value} at iteration {} (micro {}), mode {}, t={}",
                state.iteration,
                state.micro,
                ex.mode.name(),
                ex.t
            )));
        }
        total += value;
        let scaled = tape.scale(loss, inv)?;
        tape.backward(scaled, state.model.params_mut())?;
    }
    state.micro += 1;
    let mut grad_norm = None;
    if state.micro == accumulation {
        let norm = state.opt.update(state.model.params_mut(), 1.0 / accumulation as f32);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm {norm} at iteration {}", state.iteration)));
        }
        state.model.params_mut().zero_grad();
        state.micro = 0;
        state.iteration += 1;
        grad_norm = Some(norm);
    }
    Ok(StepOutcome {
        loss: total / batch.len() as f64,
        grad_norm,
    })
}

/// Draws the next micro-batch from the state's RNG and sample order.
pub fn draw_batch(
    state: &mut TrainState,
    stage: Stage,
    samples: &[SamplePair],
    cfg: &StageConfig,
    ctx: &BatchContext,
) -> Result<Vec<Example>> {
    let mode = sample_mode(&mut state.rng, cfg.ratios)?;
    let mut out = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let s = &samples[state.next_index()];
        let t = state.rng.uniform_f32();
        let seed = state.rng.next_u64();
        let r = state.rng.below(s.refs.len().max(1));
        let z = ctx.codec.encode(&s.x_raw)?;
        let noise = NoiseDraw::new(seed, z.dims());
        out.push(match stage {
            Stage::Base => build_base_example(s, mode, t, &noise, ctx)?,
            _ => build_batch(s, mode, t, &noise, r, ctx)?,
        });
    }
    Ok(out)
}

/// Fixed held-out examples cycling through the three modes.
pub fn validation_set(
    stage: Stage,
    samples: &[SamplePair],
    held_out: &[usize],
    count: usize,
    seed: u64,
    ctx: &BatchContext,
) -> Result<Vec<Example>> {
    if held_out.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = Rng::derive(seed, 13);
    let modes = [Mode::Text, Mode::StyleImage, Mode::FirstFrame];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = &samples[held_out[i % held_out.len()]];
        let t = (i as f32 + 0.5) / count as f32;
        let noise = NoiseDraw::new(rng.next_u64(), ctx.codec.encode(&s.x_raw)?.dims());
        let mode = modes[i % 3];
        out.push(match stage {
            Stage::Base => build_base_example(s, mode, t, &noise, ctx)?,
            _ => build_batch(s, mode, t, &noise, i % s.refs.len().max(1), ctx)?,
        });
    }
    Ok(out)
}

/// Mean flow loss over `examples` without touching gradients.
pub fn validation_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let mut sum = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let loss = example_loss(model, ex, &mut tape)?;
        sum += tape.value(loss).item() as f64;
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub iterations: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    /// `(iteration, validation loss)`.
    pub val_history: Vec<(u64, f64)>,
    /// Moving average of the training loss over the first and last windows.
    pub train_loss_start: f64,
    pub train_loss_end: f64,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

/// Where a stage writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub dir: PathBuf,
}

impl StageOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_dir(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{iteration:06}"))
    }

    pub fn final_dir(&self) -> PathBuf {
        self.dir.join("final")
    }
}

#[derive(Serialize)]
struct LogRow<'a> {
    iteration: u64,
    micro: usize,
    mode: &'a str,
    loss: f64,
    lr: f32,
    grad_norm: Option<f64>,
}

/// Runs `state` to `cfg.iterations` optimizer updates. A resumed state
/// continues from its iteration counter.
pub fn run_stage(
    stage: Stage,
    cfg: &StageConfig,
    mut state: TrainState,
    samples: &[SamplePair],
    validation: &[Example],
    ctx: &BatchContext,
    out: Option<&StageOutput>,
) -> Result<(TrainState, StageReport)> {
    cfg.validate()?;
    if state.order.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let started = Instant::now();
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.log_path();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let fresh = file.metadata().map(|m| m.len() == 0).unwrap_or(true);
            Some(
                csv::WriterBuilder::new()
                    .has_headers(fresh)
                    .from_writer(file),
            )
        }
        None => None,
    };
    let has_val = !validation.is_empty();
    let initial = if has_val { validation_loss(&state.model, validation)? } else { f64::NAN };
    let mut val_history = vec![(state.iteration, initial)];
    let mut checkpoints = Vec::new();
    let mut first_window = Vec::new();

    while state.iteration < cfg.iterations {
        let batch = draw_batch(&mut state, stage, samples, cfg, ctx)?;
        let outcome = train_step(&mut state, &batch, cfg.accumulation)?;
        state.push_loss(outcome.loss, cfg.loss_window);
        if first_window.len() < cfg.loss_window {
            first_window.push(outcome.loss);
        }
        if let Some(w) = log.as_mut() {
            w.serialize(LogRow {
                iteration: state.iteration,
                micro: state.micro,
                mode: batch[0].mode.name(),
                loss: outcome.loss,
                lr: state.opt.lr,
                grad_norm: outcome.grad_norm,
            })?;
        }
        if outcome.grad_norm.is_none() {
            continue;
        }
        let it = state.iteration;
        if has_val && cfg.validate_every > 0 && it % cfg.validate_every == 0 && it < cfg.iterations {
            val_history.push((it, validation_loss(&state.model, validation)?));
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.iterations {
                if let Some(w) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(o.log_path(), e))?;
                }
                checkpoints.push(checkpoint::save(&o.checkpoint_dir(it), stage.name(), &state.model, Some(&state))?);
            }
        }
    }
    let final_val = if has_val { validation_loss(&state.model, validation)? } else { f64::NAN };
    val_history.push((state.iteration, final_val));
    if let Some(o) = out {
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io(o.log_path(), e))?;
        }
        checkpoints.push(checkpoint::save(&o.final_dir(), stage.name(), &state.model, Some(&state))?);
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let report = StageReport {
        stage,
        iterations: state.iteration,
        initial_val_loss: initial,
        final_val_loss: final_val,
        val_history,
        train_loss_start: mean(&first_window),
        train_loss_end: state.mean_recent_loss().unwrap_or(f64::NAN),
        checkpoints,
        seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        let path = o.dir.join("stage_report.json");
        fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((state, report))
}

/// Returns the path of a stage's final checkpoint.
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    StageOutput { dir: dir.to_path_buf() }.final_dir()
}
