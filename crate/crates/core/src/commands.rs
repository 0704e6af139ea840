//! Command implementations behind the `vstyle` binary. Every command writes
//! `run.json` with its resolved configuration and arguments into its output
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::codec::Video;
use crate::config::RunConfig;
use crate::datagen::{build_dataset, gen_raw_video, manifest_path, write_dataset, SceneSpec, StyleOp, Tier};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::metrics::{
    dynamic_degree, region_consistency, structure_score, style_score, text_style_alignment, CentroidTable, COL_BACKGROUND,
    COL_CLIP_T, COL_CSD, COL_DINO, COL_DYNAMIC, COL_SUBJECT, MetricReport,
};
use crate::net::{LoraMode, Model};
use crate::pipeline::{self, long_video, request_for_sample, stylize, StylizeMode, StylizeRequest, TrainSummary, TrainTarget};
use crate::rng::Rng;
use crate::vtf::{export_ppm_frames, read_video, write_video};

pub const RUN_FILE: &str = "run.json";

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    args: A,
    config: &'a RunConfig,
}

pub fn write_run_json<A: Serialize>(out: &Path, command: &str, cfg: &RunConfig, args: A) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RUN_FILE);
    let rec = RunRecord {
        command,
        args,
        config: cfg,
    };
    fs::write(&path, serde_json::to_vec_pretty(&rec)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Ten-bin histogram of scores over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64) -> Self {
        let mut counts = vec![0; 10];
        for v in values {
            let b = (((v - lo) / (hi - lo)) * 10.0).floor().clamp(0.0, 9.0) as usize;
            counts[b] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn render(&self) -> String {
        let w = (self.hi - self.lo) / 10.0;
        self.counts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("  [{:.2}, {:.2}) {c}", self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub manifest: PathBuf,
    pub manifest_sha256: String,
    pub accepted: usize,
    pub rejected: usize,
    pub attempts: usize,
    pub style_histogram: Histogram,
    pub structure_histogram: Option<Histogram>,
}

#[derive(Serialize)]
struct GenDataArgs<'a> {
    profile: &'a str,
    n: usize,
    out: &'a Path,
    seed: u64,
}

pub fn cmd_gen_data(cfg: &RunConfig, profile: &str, n: usize, out: &Path, seed: u64) -> Result<GenDataSummary> {
    let tier = Tier::parse(profile)?;
    if n == 0 {
        return Err(Error::Usage("--n must be >= 1".into()));
    }
    cfg.validate()?;
    write_run_json(
        out,
        "gen-data",
        cfg,
        GenDataArgs {
            profile: tier.name(),
            n,
            out,
            seed,
        },
    )?;
    let ds = build_dataset(tier, n, seed, &cfg.datagen_config())?;
    let manifest = write_dataset(out, &ds)?;
    let bytes = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let structure: Vec<f64> = ds.manifest.entries.iter().filter_map(|e| e.structure_score).collect();
    Ok(GenDataSummary {
        manifest_sha256: format!("{:x}", Sha256::digest(&bytes)),
        manifest,
        accepted: ds.manifest.entries.len(),
        rejected: ds.manifest.rejected,
        attempts: ds.manifest.attempts,
        style_histogram: Histogram::of(ds.manifest.entries.iter().map(|e| e.filter_score), 0.5, 1.0),
        structure_histogram: (!structure.is_empty()).then(|| Histogram::of(structure, 0.0, 1.0)),
    })
}

#[derive(Serialize)]
struct TrainArgs<'a> {
    stage: TrainTarget,
    run_dir: &'a Path,
    base_dir: &'a Path,
}

/// Trains into `run_dir`; the base model lives in `run_dir/base` and is
/// reused when present.
pub fn cmd_train(cfg: &RunConfig, target: TrainTarget, run_dir: &Path) -> Result<TrainSummary> {
    let base_dir = run_dir.join("base");
    cmd_train_with_base(cfg, target, run_dir, &base_dir)
}

pub fn cmd_train_with_base(cfg: &RunConfig, target: TrainTarget, run_dir: &Path, base_dir: &Path) -> Result<TrainSummary> {
    write_run_json(
        run_dir,
        "train",
        cfg,
        TrainArgs {
            stage: target,
            run_dir,
            base_dir,
        },
    )?;
    let summary = pipeline::train(cfg, target, run_dir, base_dir)?;
    write_json(&run_dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

/// Command-line form of a stylization request: file paths and tag names.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StylizeArgs {
    pub checkpoint: PathBuf,
    pub input: Option<PathBuf>,
    pub mode: String,
    pub style_tag: Option<String>,
    pub style_image: Option<PathBuf>,
    pub first_frame: Option<PathBuf>,
    pub tags: Vec<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn resolve_request(args: &StylizeArgs) -> Result<StylizeRequest> {
    let mode = StylizeMode::parse(&args.mode)?;
    let style_tag = args
        .style_tag
        .as_deref()
        .map(|name| StyleOp::from_name(name).map(|op| op.style_tag()))
        .transpose()?;
    let load = |p: &Option<PathBuf>| p.as_deref().map(read_video).transpose();
    let req = StylizeRequest {
        mode,
        input: load(&args.input)?,
        content_tags: args.tags.clone(),
        style_tag,
        style_image: load(&args.style_image)?,
        first_frame: load(&args.first_frame)?,
    };
    req.validate()?;
    Ok(req)
}

fn sampler(cfg: &RunConfig, steps: Option<usize>, seed: Option<u64>) -> Result<SamplerConfig> {
    let s = SamplerConfig {
        steps: steps.unwrap_or(cfg.flow.sampler_steps),
        seed: seed.unwrap_or(cfg.seeds.sampler),
    };
    if s.steps == 0 {
        return Err(Error::Usage("--steps must be >= 1".into()));
    }
    Ok(s)
}

fn open_model(cfg: &RunConfig, dir: &Path) -> Result<Model> {
    let model = checkpoint::load_model(dir)?;
    let mc = model.config();
    if mc.latent_channels != cfg.latent_dims()[0] || mc.patch != cfg.model.patch {
        return Err(Error::Data(format!(
            "{}: checkpoint geometry does not match the config",
            dir.display()
        )));
    }
    Ok(model)
}

/// Writes `output.vtf` and one PPM per frame under `args.out`.
pub fn cmd_stylize(cfg: &RunConfig, args: &StylizeArgs) -> Result<Video> {
    // flags are checked before anything is written
    let req = resolve_request(args)?;
    let sampler = sampler(cfg, args.steps, args.seed)?;
    write_run_json(&args.out, "stylize", cfg, args)?;
    let model = open_model(cfg, &args.checkpoint)?;
    let video = stylize(&model, &cfg.codec()?, cfg.latent_dims(), &req, &sampler)?;
    write_video(&args.out.join("output.vtf"), &video)?;
    export_ppm_frames(&args.out.join("frames"), "frame", &video)?;
    Ok(video)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LongVideoArgs {
    pub checkpoint: PathBuf,
    pub segments: Vec<PathBuf>,
    pub style_tag: Option<String>,
    pub style_image: Option<PathBuf>,
    pub tags: Vec<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongVideoReport {
    pub frames: usize,
    pub segments: usize,
    /// Style score of each generated segment.
    pub segment_style: Vec<f64>,
    /// Largest `|style(k) − style(1)|`.
    pub max_style_drift: f64,
    /// Max-abs difference between each later segment's first generated frame
    /// and its conditioning frame.
    pub seam_error: Vec<f64>,
}

/// Seam and drift statistics of chained segments. Style is scored against
/// `refs`, or against the first segment when there are none.
pub fn chain_report(outputs: &[Video], refs: &[Video]) -> Result<LongVideoReport> {
    let refs: Vec<Video> = if refs.is_empty() { vec![outputs[0].clone()] } else { refs.to_vec() };
    let segment_style = outputs.iter().map(|v| style_score(v, &refs)).collect::<Result<Vec<_>>>()?;
    let max_style_drift = segment_style.iter().map(|s| (s - segment_style[0]).abs()).fold(0.0, f64::max);
    let seam_error = outputs
        .windows(2)
        .map(|w| {
            let cond = w[0].last_frame();
            let gen = w[1].frame(0);
            cond.data()
                .iter()
                .zip(gen.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(LongVideoReport {
        frames: outputs.iter().map(|v| v.frames()).sum(),
        segments: outputs.len(),
        segment_style,
        max_style_drift,
        seam_error,
    })
}

pub fn cmd_long_video(cfg: &RunConfig, args: &LongVideoArgs) -> Result<(Video, LongVideoReport)> {
    if args.segments.len() < 2 {
        return Err(Error::Usage(format!("long-video needs at least 2 --segment files, got {}", args.segments.len())));
    }
    let mode = match (&args.style_tag, &args.style_image) {
        (Some(_), Some(_)) => "fuse",
        (Some(_), None) => "text",
        (None, Some(_)) => "style-image",
        (None, None) => return Err(Error::Usage("long-video needs --style-tag and/or --style-image".into())),
    };
    let segments = args.segments.iter().map(|p| read_video(p)).collect::<Result<Vec<_>>>()?;
    let first = resolve_request(&StylizeArgs {
        input: Some(args.segments[0].clone()),
        mode: mode.into(),
        style_tag: args.style_tag.clone(),
        style_image: args.style_image.clone(),
        tags: args.tags.clone(),
        ..StylizeArgs::default()
    })?;
    let sampler = sampler(cfg, args.steps, args.seed)?;
    write_run_json(&args.out, "long-video", cfg, args)?;
    let model = open_model(cfg, &args.checkpoint)?;
    let outputs = long_video(&model, &cfg.codec()?, cfg.latent_dims(), &segments, &first, &sampler)?;
    let refs: Vec<Video> = first.style_image.iter().cloned().collect();
    let report = chain_report(&outputs, &refs)?;
    let video = Video::concat(&outputs)?;
    write_video(&args.out.join("output.vtf"), &video)?;
    export_ppm_frames(&args.out.join("frames"), "frame", &video)?;
    write_json(&args.out.join("long_video_report.json"), &report)?;
    Ok((video, report))
}

/// One row per (sample, mode); column names follow the metrics module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample: String,
    pub mode: String,
    #[serde(rename = "CLIP-T")]
    pub clip_t: f64,
    #[serde(rename = "CSD Score")]
    pub csd: f64,
    #[serde(rename = "DINO Score")]
    pub dino: f64,
    #[serde(rename = "Dynamic Degree")]
    pub dynamic: f64,
    #[serde(rename = "Subject Consistency")]
    pub subject: f64,
    #[serde(rename = "Background Consistency")]
    pub background: f64,
}

pub const EVAL_COLUMNS: [&str; 6] = [COL_CLIP_T, COL_CSD, COL_DINO, COL_DYNAMIC, COL_SUBJECT, COL_BACKGROUND];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modes: Vec<String>,
    pub rows: Vec<EvalRow>,
    /// The same metrics computed on the raw inputs.
    pub baseline: Vec<EvalRow>,
    /// Mean of each column per mode, baseline under `raw_input`.
    pub summary: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Centroids per style tag from freshly generated stylized videos.
pub fn centroid_table(cfg: &RunConfig) -> Result<CentroidTable> {
    let g = cfg.geometry;
    let mut rng = Rng::derive(cfg.seeds.metrics, 1);
    let mut examples = Vec::new();
    for op in StyleOp::all() {
        for _ in 0..cfg.metrics.centroid_examples.max(1) {
            let spec = SceneSpec::random(&mut rng);
            let (raw, _) = gen_raw_video(&spec, g.frames, g.height, g.width, rng.next_u64())?;
            examples.push((op.style_tag(), op.apply(&raw)?));
        }
    }
    Ok(CentroidTable::from_examples(examples.iter().map(|(t, v)| (*t, v))))
}

fn score_row(
    sample: &str,
    mode: &str,
    out: &Video,
    raw: &Video,
    refs: &[Video],
    masks: &[Vec<bool>],
    style_tag: usize,
    table: &CentroidTable,
) -> Result<EvalRow> {
    let (subject, background) = region_consistency(out, masks)?;
    Ok(EvalRow {
        sample: sample.into(),
        mode: mode.into(),
        clip_t: text_style_alignment(style_tag, out, table)?,
        csd: style_score(out, refs)?,
        dino: structure_score(raw, out)?,
        dynamic: dynamic_degree(out),
        subject,
        background,
    })
}

fn summarize(rows: &[EvalRow]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        *counts.entry(r.mode.clone()).or_default() += 1;
        let m = out.entry(r.mode.clone()).or_default();
        for (k, v) in EVAL_COLUMNS
            .iter()
            .zip([r.clip_t, r.csd, r.dino, r.dynamic, r.subject, r.background])
        {
            *m.entry(k.to_string()).or_default() += v;
        }
    }
    for (mode, m) in out.iter_mut() {
        let n = counts[mode] as f64;
        m.values_mut().for_each(|v| *v /= n);
    }
    out
}

pub const EVAL_MODES: [StylizeMode; 3] = [StylizeMode::Text, StylizeMode::StyleImage, StylizeMode::FirstFrame];

/// Stylizes every test sample in each of `modes` and scores the outputs.
pub fn evaluate(cfg: &RunConfig, model: &Model, test_dir: &Path, modes: &[StylizeMode]) -> Result<EvalReport> {
    let ds = pipeline::open_dataset(cfg, test_dir)?;
    let limit = cfg.metrics.eval_samples.min(ds.samples.len());
    let table = centroid_table(cfg)?;
    let codec = cfg.codec()?;
    let mut rows = Vec::new();
    let mut baseline = Vec::new();
    for (i, (s, e)) in ds.samples.iter().zip(&ds.manifest.entries).take(limit).enumerate() {
        let tag = s.op.style_tag();
        baseline.push(score_row(&e.id, "raw_input", &s.x_raw, &s.x_raw, &s.refs, &s.masks, tag, &table)?);
        for &mode in modes {
            let req = request_for_sample(s, mode, 0)?;
            let sampler = SamplerConfig {
                steps: cfg.flow.sampler_steps,
                seed: cfg.seeds.sampler.wrapping_add(i as u64),
            };
            let out = stylize(model, &codec, cfg.latent_dims(), &req, &sampler)?;
            rows.push(score_row(&e.id, mode.name(), &out, &s.x_raw, &s.refs, &s.masks, tag, &table)?);
        }
    }
    let mut summary = summarize(&rows);
    summary.extend(summarize(&baseline));
    Ok(EvalReport {
        modes: modes.iter().map(|m| m.name().to_string()).collect(),
        rows,
        baseline,
        summary,
    })
}

impl EvalReport {
    /// Long format: one row per (sample, mode, metric), baseline included.
    pub fn metric_report(&self) -> MetricReport {
        let mut m = MetricReport::default();
        for r in self.baseline.iter().chain(&self.rows) {
            for (k, v) in EVAL_COLUMNS
                .iter()
                .zip([r.clip_t, r.csd, r.dino, r.dynamic, r.subject, r.background])
            {
                m.push(&r.sample, &r.mode, k, v);
            }
        }
        m
    }
}

fn write_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EvalArgs<'a> {
    checkpoint: &'a Path,
    test: &'a Path,
    out: &'a Path,
}

/// Writes `eval.csv`, `baseline.csv`, `eval.json` and the long-format
/// `metrics.csv`/`metrics.json` under `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_dir: &Path, test_dir: &Path, out: &Path) -> Result<EvalReport> {
    if !manifest_path(test_dir).exists() {
        return Err(Error::MissingPath(manifest_path(test_dir)));
    }
    write_run_json(
        out,
        "eval",
        cfg,
        EvalArgs {
            checkpoint: checkpoint_dir,
            test: test_dir,
            out,
        },
    )?;
    let model = open_model(cfg, checkpoint_dir)?;
    let report = evaluate(cfg, &model, test_dir, &EVAL_MODES)?;
    write_rows(&out.join("eval.csv"), &report.rows)?;
    write_rows(&out.join("baseline.csv"), &report.baseline)?;
    write_json(&out.join("eval.json"), &report)?;
    report
        .metric_report()
        .write(&out.join("metrics.json"), &out.join("metrics.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    NoTokenLora,
    CtOnly,
    SftOnly,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::NoTokenLora, Arm::CtOnly, Arm::SftOnly, Arm::Full];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_token_lora" => Ok(Arm::NoTokenLora),
            "ct_only" => Ok(Arm::CtOnly),
            "sft_only" => Ok(Arm::SftOnly),
            "full" => Ok(Arm::Full),
            _ => Err(Error::Usage(format!("unknown arm '{s}' (no_token_lora, ct_only, sft_only, full)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoTokenLora => "no_token_lora",
            Arm::CtOnly => "ct_only",
            Arm::SftOnly => "sft_only",
            Arm::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::NoTokenLora => "w/o token-specific LoRA",
            Arm::CtOnly => "Only CT data",
            Arm::SftOnly => "Only SFT data",
            Arm::Full => "Full",
        }
    }

    /// The arm's declared configuration: LoRA variant and stages.
    pub fn apply(self, cfg: &RunConfig) -> (RunConfig, TrainTarget) {
        let mut c = cfg.clone();
        c.model.lora_mode = LoraMode::TokenSpecific;
        let target = match self {
            Arm::NoTokenLora => {
                c.model.lora_mode = LoraMode::Standard;
                TrainTarget::Full
            }
            Arm::CtOnly => TrainTarget::Ct,
            Arm::SftOnly => TrainTarget::Sft,
            Arm::Full => TrainTarget::Full,
        };
        (c, target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub label: String,
    pub lora_mode: String,
    pub stages: String,
    #[serde(rename = "CSD Score")]
    pub csd: f64,
    #[serde(rename = "DINO Score")]
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct AblateArgs<'a> {
    arms: Vec<&'static str>,
    out: &'a Path,
}

/// Trains (or reloads) each arm under `out/<arm>` from one shared base model
/// and scores style-image-guided outputs on the test set.
pub fn cmd_ablate(cfg: &RunConfig, arms: &[Arm], out: &Path) -> Result<AblationReport> {
    if arms.is_empty() {
        return Err(Error::Usage("ablate needs at least one arm".into()));
    }
    cfg.validate()?;
    let test = pipeline::test_dir(cfg);
    if !manifest_path(&test).exists() {
        return Err(Error::MissingPath(manifest_path(&test)));
    }
    write_run_json(
        out,
        "ablate",
        cfg,
        AblateArgs {
            arms: arms.iter().map(|a| a.name()).collect(),
            out,
        },
    )?;
    let base_dir = out.join("base");
    let mut rows = Vec::new();
    for &arm in arms {
        let (acfg, target) = arm.apply(cfg);
        let dir = out.join(arm.name());
        let final_dir = dir.join("final");
        if !final_dir.join(checkpoint::MANIFEST_FILE).exists() {
            cmd_train_with_base(&acfg, target, &dir, &base_dir)?;
        }
        let model = open_model(&acfg, &final_dir)?;
        let report = evaluate(&acfg, &model, &test, &[StylizeMode::StyleImage])?;
        let mean = &report.summary[StylizeMode::StyleImage.name()];
        rows.push(AblationRow {
            arm: arm.name().into(),
            label: arm.label().into(),
            lora_mode: acfg.model.lora_mode.name().into(),
            stages: format!("{target:?}").to_lowercase(),
            csd: mean[COL_CSD],
            dino: mean[COL_DINO],
        });
    }
    let mut notes = vec![
        "Expected direction (not asserted): full >= no_token_lora on CSD Score; sft_only lowest DINO Score.".to_string(),
    ];
    let find = |a: Arm| rows.iter().find(|r| r.arm == a.name());
    if let (Some(f), Some(n)) = (find(Arm::Full), find(Arm::NoTokenLora)) {
        notes.push(format!(
            "Observed: full CSD {:.4} vs no_token_lora CSD {:.4} ({}).",
            f.csd,
            n.csd,
            if f.csd >= n.csd { "matches" } else { "inverted" }
        ));
    }
    if let Some(s) = find(Arm::SftOnly) {
        let lowest = rows.iter().all(|r| r.dino >= s.dino);
        notes.push(format!(
            "Observed: sft_only DINO {:.4} is {}the lowest.",
            s.dino,
            if lowest { "" } else { "not " }
        ));
    }
    let report = AblationReport { rows, notes };
    write_json(&out.join("ablation.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(out.join("ablation.csv"), e))?;
    Ok(report)
}
