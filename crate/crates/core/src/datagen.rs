//! Procedural paired data: moving-shape videos with exact subject masks,
//! deterministic style operators, tag captions and filtered datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::metrics::{luminance, structure_score, style_score};
use crate::rng::Rng;
use crate::vtf::{read_tensor, read_video, write_tensor, write_video, FrameTensor};

pub const NUM_SHAPES: usize = 3;
pub const NUM_COLORS: usize = 6;
pub const NUM_BACKGROUNDS: usize = 4;
pub const NUM_OPS: usize = 8;

/// Content tags occupy `0..CONTENT_VOCAB`; style tags start at `STYLE_TAG_BASE`.
pub const CONTENT_VOCAB: usize = NUM_SHAPES + NUM_COLORS + NUM_BACKGROUNDS + 2;
pub const STYLE_TAG_BASE: usize = 32;
pub const SFT_MAX_REFS: usize = 16;

const COLORS: [[f32; 3]; NUM_COLORS] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.85],
];

/// Background gradients share one sky palette and differ in layout.
const SKY_NEAR: [f32; 3] = [0.82, 0.90, 0.97];
const SKY_FAR: [f32; 3] = [0.60, 0.70, 0.85];

#[derive(Debug, Clone, Copy)]
enum Layout {
    Vertical,
    Horizontal,
    Diagonal,
    Radial,
}

const BACKGROUNDS: [Layout; NUM_BACKGROUNDS] = [Layout::Vertical, Layout::Horizontal, Layout::Diagonal, Layout::Radial];

fn gradient_position(layout: Layout, y: usize, x: usize, h: usize, w: usize) -> f32 {
    let (fy, fx) = (y as f32 / (h - 1) as f32, x as f32 / (w - 1) as f32);
    match layout {
        Layout::Vertical => fy,
        Layout::Horizontal => fx,
        Layout::Diagonal => 0.5 * (fx + fy),
        Layout::Radial => (((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt() * std::f32::consts::SQRT_2).min(1.0),
    }
}

const TEXTURE_AMPLITUDE: f32 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; NUM_SHAPES] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Straight path, `speed` pixels per frame at `angle` radians.
    Linear { angle: f32, speed: f32 },
    /// Orbit of `radius` pixels advancing `angular_speed` radians per frame.
    Circular { radius: f32, angular_speed: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: usize,
    pub background: usize,
    pub motion: Motion,
    /// Placement of the path inside the feasible region, each in `[0,1]`.
    pub phase: [f32; 2],
}

impl SceneSpec {
    pub fn random(rng: &mut Rng) -> Self {
        let shape = ShapeKind::ALL[rng.below(NUM_SHAPES)];
        let color = rng.below(NUM_COLORS);
        let background = rng.below(NUM_BACKGROUNDS);
        let motion = if rng.uniform() < 0.5 {
            Motion::Linear {
                angle: rng.range(0.0, std::f64::consts::TAU) as f32,
                speed: rng.range(0.4, 1.0) as f32,
            }
        } else {
            Motion::Circular {
                radius: rng.range(1.5, 3.0) as f32,
                angular_speed: rng.range(0.3, 0.8) as f32 * if rng.uniform() < 0.5 { 1.0 } else { -1.0 },
            }
        };
        SceneSpec {
            shape,
            color,
            background,
            motion,
            phase: [rng.uniform_f32(), rng.uniform_f32()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.color >= NUM_COLORS || self.background >= NUM_BACKGROUNDS {
            return Err(Error::Invalid(format!(
                "scene color {} / background {} out of range",
                self.color, self.background
            )));
        }
        Ok(())
    }

    /// Content tags: shape, color, background, motion kind.
    pub fn tags(&self) -> Vec<usize> {
        let shape = ShapeKind::ALL.iter().position(|&s| s == self.shape).unwrap_or(0);
        let motion = match self.motion {
            Motion::Linear { .. } => 0,
            Motion::Circular { .. } => 1,
        };
        vec![
            shape,
            NUM_SHAPES + self.color,
            NUM_SHAPES + NUM_COLORS + self.background,
            NUM_SHAPES + NUM_COLORS + NUM_BACKGROUNDS + motion,
        ]
    }

    fn subject_radius(h: usize, w: usize) -> f32 {
        (h.min(w) as f32 / 5.0).max(1.5)
    }

    /// Subject centre for each frame; the path is scaled down if it cannot fit.
    fn centers(&self, frames: usize, h: usize, w: usize) -> Vec<(f32, f32)> {
        let r = Self::subject_radius(h, w) + 0.5;
        let (lo_x, hi_x) = (r, w as f32 - r);
        let (lo_y, hi_y) = (r, h as f32 - r);
        let steps = frames.saturating_sub(1) as f32;
        let offsets: Vec<(f32, f32)> = match self.motion {
            Motion::Linear { angle, speed } => {
                let total_x = (angle.cos() * speed * steps).abs().max(1e-6);
                let total_y = (angle.sin() * speed * steps).abs().max(1e-6);
                let fit = ((hi_x - lo_x) / total_x).min((hi_y - lo_y) / total_y).min(1.0);
                (0..frames)
                    .map(|f| {
                        let d = speed * fit * f as f32;
                        (angle.cos() * d, angle.sin() * d)
                    })
                    .collect()
            }
            Motion::Circular { radius, angular_speed } => {
                let fit = ((hi_x - lo_x).min(hi_y - lo_y) / (2.0 * radius)).min(1.0);
                (0..frames)
                    .map(|f| {
                        let a = angular_speed * f as f32;
                        (radius * fit * a.cos(), radius * fit * a.sin())
                    })
                    .collect()
            }
        };
        let (min_x, max_x) = offsets.iter().fold((f32::MAX, f32::MIN), |(a, b), o| (a.min(o.0), b.max(o.0)));
        let (min_y, max_y) = offsets.iter().fold((f32::MAX, f32::MIN), |(a, b), o| (a.min(o.1), b.max(o.1)));
        let x0 = lo_x - min_x + self.phase[0] * ((hi_x - lo_x) - (max_x - min_x)).max(0.0);
        let y0 = lo_y - min_y + self.phase[1] * ((hi_y - lo_y) - (max_y - min_y)).max(0.0);
        offsets.into_iter().map(|(dx, dy)| (x0 + dx, y0 + dy)).collect()
    }
}

fn inside(shape: ShapeKind, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        ShapeKind::Triangle => {
            // apex up, base at dy = r
            dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5
        }
    }
}

/// Per-frame subject masks, row-major `H·W`.
pub type Masks = Vec<Vec<bool>>;

pub fn gen_raw_video(spec: &SceneSpec, frames: usize, h: usize, w: usize, seed: u64) -> Result<(Video, Masks)> {
    spec.validate()?;
    if frames == 0 || h < 4 || w < 4 {
        return Err(Error::Invalid(format!("video geometry {frames}x{h}x{w} too small")));
    }
    let mut rng = Rng::derive(seed, 0x7E47);
    let texture: Vec<f32> = (0..h * w)
        .map(|_| (rng.uniform_f32() * 2.0 - 1.0) * TEXTURE_AMPLITUDE)
        .collect();
    let layout = BACKGROUNDS[spec.background];
    let color = COLORS[spec.color];
    let r = SceneSpec::subject_radius(h, w);
    let centers = spec.centers(frames, h, w);

    let mut data = Vec::with_capacity(frames * h * w * 3);
    let mut masks = Vec::with_capacity(frames);
    for &(cx, cy) in &centers {
        let mut mask = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let hit = inside(spec.shape, px - cx, py - cy, r);
                mask[y * w + x] = hit;
                if hit {
                    data.extend_from_slice(&color);
                } else {
                    let s = gradient_position(layout, y, x, h, w);
                    let n = texture[y * w + x];
                    for c in 0..3 {
                        data.push((SKY_NEAR[c] * (1.0 - s) + SKY_FAR[c] * s + n).clamp(0.0, 1.0));
                    }
                }
            }
        }
        masks.push(mask);
    }
    Ok((Video::new(frames, h, w, data)?, masks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StyleOp {
    PaletteRemap { k: usize },
    Invert,
    Sepia,
    Posterize { k: usize },
    EdgeSketch,
    CheckerOverlay { cell: usize },
    HueRotate { degrees: f32 },
    Pixelate { block: usize },
}

const PALETTE: [[f32; 3]; 4] = [
    [0.12, 0.08, 0.35],
    [0.70, 0.15, 0.55],
    [0.10, 0.60, 0.60],
    [0.55, 0.90, 0.45],
];

const PAPER: [f32; 3] = [0.96, 0.92, 0.78];
const INK: [f32; 3] = [0.25, 0.22, 0.20];
const SEPIA_TONE: f32 = 0.7;

impl StyleOp {
    /// The shipped operator set, indexed by op id.
    pub fn canonical(id: usize) -> Result<StyleOp> {
        Ok(match id {
            0 => StyleOp::PaletteRemap { k: 4 },
            1 => StyleOp::Invert,
            2 => StyleOp::Sepia,
            3 => StyleOp::Posterize { k: 3 },
            4 => StyleOp::EdgeSketch,
            5 => StyleOp::CheckerOverlay { cell: 2 },
            6 => StyleOp::HueRotate { degrees: 120.0 },
            7 => StyleOp::Pixelate { block: 2 },
            _ => return Err(Error::Invalid(format!("unknown style op id {id}"))),
        })
    }

    pub fn all() -> Vec<StyleOp> {
        (0..NUM_OPS).map(|i| StyleOp::canonical(i).expect("in range")).collect()
    }

    pub fn id(&self) -> usize {
        match self {
            StyleOp::PaletteRemap { .. } => 0,
            StyleOp::Invert => 1,
            StyleOp::Sepia => 2,
            StyleOp::Posterize { .. } => 3,
            StyleOp::EdgeSketch => 4,
            StyleOp::CheckerOverlay { .. } => 5,
            StyleOp::HueRotate { .. } => 6,
            StyleOp::Pixelate { .. } => 7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StyleOp::PaletteRemap { .. } => "palette_remap",
            StyleOp::Invert => "invert",
            StyleOp::Sepia => "sepia",
            StyleOp::Posterize { .. } => "posterize",
            StyleOp::EdgeSketch => "edge_sketch",
            StyleOp::CheckerOverlay { .. } => "checker_overlay",
            StyleOp::HueRotate { .. } => "hue_rotate",
            StyleOp::Pixelate { .. } => "pixelate",
        }
    }

    pub fn from_name(name: &str) -> Result<StyleOp> {
        StyleOp::all()
            .into_iter()
            .find(|op| op.name() == name)
            .ok_or_else(|| Error::Usage(format!("unknown style op '{name}'")))
    }

    pub fn style_tag(&self) -> usize {
        STYLE_TAG_BASE + self.id()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StyleOp::PaletteRemap { k } => (2..=PALETTE.len()).contains(&k),
            StyleOp::Posterize { k } => k >= 2,
            StyleOp::CheckerOverlay { cell } => cell >= 1,
            StyleOp::HueRotate { degrees } => degrees.is_finite(),
            StyleOp::Pixelate { block } => block >= 1,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid parameters for {self:?}")))
        }
    }

    /// Frame-wise application; the output stays in `[0,1]`.
    pub fn apply(&self, v: &Video) -> Result<Video> {
        self.validate()?;
        let mut out = v.clone();
        let (h, w) = (v.height(), v.width());
        for f in 0..v.frames() {
            let lum = luminance(v, f);
            let start = f * v.frame_len();
            let frame = &mut out.data_mut()[start..start + v.frame_len()];
            match *self {
                StyleOp::PaletteRemap { k } => {
                    for (px, &l) in frame.chunks_exact_mut(3).zip(&lum) {
                        let idx = ((l * k as f64) as usize).min(k - 1);
                        px.copy_from_slice(&PALETTE[idx * (PALETTE.len() - 1) / (k - 1)]);
                    }
                }
                StyleOp::Invert => frame.iter_mut().for_each(|x| *x = 1.0 - *x),
                StyleOp::Sepia => {
                    for px in frame.chunks_exact_mut(3) {
                        let [r, g, b] = [px[0], px[1], px[2]];
                        px[0] = SEPIA_TONE * (0.393 * r + 0.769 * g + 0.189 * b).min(1.0);
                        px[1] = SEPIA_TONE * (0.349 * r + 0.686 * g + 0.168 * b).min(1.0);
                        px[2] = SEPIA_TONE * (0.272 * r + 0.534 * g + 0.131 * b).min(1.0);
                    }
                }
                StyleOp::Posterize { k } => {
                    let levels = (k - 1) as f32;
                    frame.iter_mut().for_each(|x| *x = (*x * levels).round() / levels);
                }
                StyleOp::EdgeSketch => {
                    for (px, m) in frame.chunks_exact_mut(3).zip(sobel_magnitude(&lum, h, w)) {
                        let ink = ((m - 0.25) * 2.0).clamp(0.0, 1.0) as f32;
                        for c in 0..3 {
                            px[c] = PAPER[c] * (1.0 - ink) + INK[c] * ink;
                        }
                    }
                }
                StyleOp::CheckerOverlay { cell } => {
                    for y in 0..h {
                        for x in 0..w {
                            if (y / cell + x / cell) % 2 == 1 {
                                let px = &mut frame[(y * w + x) * 3..(y * w + x) * 3 + 3];
                                px.iter_mut().for_each(|c| *c *= 0.35);
                            }
                        }
                    }
                }
                StyleOp::HueRotate { degrees } => {
                    let m = hue_matrix(degrees);
                    for px in frame.chunks_exact_mut(3) {
                        let p = [px[0], px[1], px[2]];
                        for (c, row) in m.iter().enumerate() {
                            px[c] = (row[0] * p[0] + row[1] * p[1] + row[2] * p[2]).clamp(0.0, 1.0);
                        }
                    }
                }
                StyleOp::Pixelate { block } => {
                    let src = v.frame_data(f);
                    for by in (0..h).step_by(block) {
                        for bx in (0..w).step_by(block) {
                            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                            let n = ((ey - by) * (ex - bx)) as f32;
                            let mut mean = [0.0f32; 3];
                            for y in by..ey {
                                for x in bx..ex {
                                    for c in 0..3 {
                                        mean[c] += src[(y * w + x) * 3 + c];
                                    }
                                }
                            }
                            mean.iter_mut().for_each(|m| *m /= n);
                            for y in by..ey {
                                for x in bx..ex {
                                    frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&mean);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Subject footprint after the operator; only pixelate moves it.
    pub fn apply_mask(&self, mask: &[bool], h: usize, w: usize) -> Vec<bool> {
        let StyleOp::Pixelate { block } = *self else {
            return mask.to_vec();
        };
        let mut out = vec![false; h * w];
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let hits = (by..ey).flat_map(|y| (bx..ex).map(move |x| (y, x))).filter(|&(y, x)| mask[y * w + x]).count();
                let on = 2 * hits >= (ey - by) * (ex - bx);
                for y in by..ey {
                    for x in bx..ex {
                        out[y * w + x] = on;
                    }
                }
            }
        }
        out
    }
}

fn hue_matrix(degrees: f32) -> [[f32; 3]; 3] {
    // rotation about the grey axis
    let (s, c) = (degrees.to_radians().sin(), degrees.to_radians().cos());
    let k = 1.0 / 3.0;
    let q = (1.0f32 / 3.0).sqrt();
    [
        [c + (1.0 - c) * k, k * (1.0 - c) - q * s, k * (1.0 - c) + q * s],
        [k * (1.0 - c) + q * s, c + k * (1.0 - c), k * (1.0 - c) - q * s],
        [k * (1.0 - c) - q * s, k * (1.0 - c) + q * s, c + k * (1.0 - c)],
    ]
}

/// Sobel magnitude with replicated borders.
fn sobel_magnitude(lum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Sobel magnitude scaled by the frame maximum.
fn sobel(lum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = sobel_magnitude(lum, h, w);
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// Per-frame luminance edge map in `[0,1]`, one channel.
pub fn extract_control(v: &Video) -> FrameTensor {
    let (h, w) = (v.height(), v.width());
    let mut data = Vec::with_capacity(v.frames() * h * w);
    for f in 0..v.frames() {
        data.extend(sobel(&luminance(v, f), h, w).into_iter().map(|x| x as f32));
    }
    FrameTensor {
        frames: v.frames(),
        height: h,
        width: w,
        channels: 1,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "SFT")]
    Sft,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::Ct => "CT",
            Tier::Sft => "SFT",
        }
    }

    pub fn parse(s: &str) -> Result<Tier> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Tier::Ct),
            "SFT" => Ok(Tier::Sft),
            _ => Err(Error::Usage(format!("unknown profile '{s}', expected CT or SFT"))),
        }
    }

    /// Operators available to this tier; pixelate is held back for SFT.
    pub fn op_pool(self) -> Vec<StyleOp> {
        match self {
            Tier::Ct => StyleOp::all().into_iter().filter(|op| op.id() != 7).collect(),
            Tier::Sft => StyleOp::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub spec: SceneSpec,
    pub x_raw: Video,
    pub x_sty: Video,
    pub t_ns: Vec<usize>,
    pub t_sty: Vec<usize>,
    pub refs: Vec<Video>,
    pub op: StyleOp,
    pub control: FrameTensor,
    pub masks: Masks,
    pub tier: Tier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

/// CT-tier degradation of the stylized video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub pixel_noise: f32,
    pub brightness_jitter: f32,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            pixel_noise: 0.03,
            brightness_jitter: 0.02,
        }
    }
}

pub fn perturb(v: &Video, p: Perturbation, rng: &mut Rng) -> Video {
    let mut out = v.clone();
    let n = v.frame_len();
    for f in 0..v.frames() {
        let shift = rng.range(-p.brightness_jitter as f64, p.brightness_jitter as f64) as f32;
        for x in &mut out.data_mut()[f * n..(f + 1) * n] {
            let noise = rng.range(-p.pixel_noise as f64, p.pixel_noise as f64) as f32;
            *x = (*x + noise + shift).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn make_sample(
    spec: &SceneSpec,
    op: StyleOp,
    k: usize,
    tier: Tier,
    geometry: Geometry,
    perturbation: Perturbation,
    seed: u64,
) -> Result<SamplePair> {
    let k_ok = match tier {
        Tier::Ct => k == 1,
        Tier::Sft => (1..=SFT_MAX_REFS).contains(&k),
    };
    if !k_ok {
        return Err(Error::Invalid(format!("K={k} not allowed for tier {}", tier.name())));
    }
    let Geometry { frames, height, width } = geometry;
    let (x_raw, masks) = gen_raw_video(spec, frames, height, width, seed)?;
    let x_raw = x_raw.quantized();
    let mut x_sty = op.apply(&x_raw)?;
    let mut rng = Rng::derive(seed, 0x5A4D);
    if tier == Tier::Ct {
        x_sty = perturb(&x_sty, perturbation, &mut rng);
    }
    let x_sty = x_sty.quantized();
    let mut refs = Vec::with_capacity(k);
    for j in 0..k {
        let other = loop {
            let s = SceneSpec::random(&mut rng);
            if s.tags() != spec.tags() {
                break s;
            }
        };
        let (img, _) = gen_raw_video(&other, 1, height, width, seed ^ (0x9E37 + j as u64))?;
        refs.push(op.apply(&img)?.quantized());
    }
    let t_ns = spec.tags();
    let mut t_sty = t_ns.clone();
    t_sty.push(op.style_tag());
    let control = extract_control(&x_raw);
    Ok(SamplePair {
        spec: *spec,
        x_raw,
        x_sty,
        t_ns,
        t_sty,
        refs,
        op,
        control,
        masks,
        tier,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub ct_style: f64,
    pub sft_style: f64,
    pub sft_structure: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            ct_style: 0.86,
            sft_style: 0.87,
            sft_structure: 0.25,
        }
    }
}

impl Thresholds {
    pub fn for_tier(&self, tier: Tier) -> (f64, Option<f64>) {
        match tier {
            Tier::Ct => (self.ct_style, None),
            Tier::Sft => (self.sft_style, Some(self.sft_structure)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub accepted: bool,
    pub style: f64,
    pub structure: Option<f64>,
}

pub fn auto_filter(s: &SamplePair, tau_style: f64, tau_struct: Option<f64>) -> Result<FilterOutcome> {
    let style = style_score(&s.x_sty, &s.refs)?;
    let structure = match (s.tier, tau_struct) {
        (Tier::Sft, Some(_)) => Some(structure_score(&s.x_raw, &s.x_sty)?),
        _ => None,
    };
    let accepted = style >= tau_style && structure.zip(tau_struct).map_or(true, |(v, t)| v >= t);
    Ok(FilterOutcome {
        accepted,
        style,
        structure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub dir: String,
    pub raw: String,
    pub sty: String,
    pub refs: Vec<String>,
    pub control: String,
    pub masks: String,
    pub tags: String,
    pub op: StyleOp,
    pub tier: Tier,
    pub spec: SceneSpec,
    pub filter_score: f64,
    pub structure_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: Tier,
    pub seed: u64,
    pub geometry: Geometry,
    pub thresholds: Thresholds,
    pub attempts: usize,
    pub rejected: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub geometry: Geometry,
    pub thresholds: Thresholds,
    pub perturbation: Perturbation,
    pub max_retries: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            geometry: Geometry::default(),
            thresholds: Thresholds::default(),
            perturbation: Perturbation::default(),
            max_retries: 16,
        }
    }
}

/// In-memory dataset plus its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SamplePair>,
}

fn sample_seed(seed: u64, index: usize, attempt: usize) -> u64 {
    Rng::derive(seed, ((index as u64) << 16) | attempt as u64).next_u64()
}

pub fn build_dataset(profile: Tier, n: usize, seed: u64, cfg: &DatagenConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be >= 1".into()));
    }
    let pool = profile.op_pool();
    let (tau_style, tau_struct) = cfg.thresholds.for_tier(profile);
    let mut entries = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0;
    let mut failing: BTreeMap<&'static str, usize> = BTreeMap::new();
    for i in 0..n {
        let mut accepted = None;
        for attempt in 0..=cfg.max_retries {
            attempts += 1;
            let s_seed = sample_seed(seed, i, attempt);
            let mut rng = Rng::new(s_seed);
            let spec = SceneSpec::random(&mut rng);
            let op = pool[(i + attempt) % pool.len()];
            let k = match profile {
                Tier::Ct => 1,
                Tier::Sft => 1 + rng.below(SFT_MAX_REFS),
            };
            let sample = make_sample(&spec, op, k, profile, cfg.geometry, cfg.perturbation, s_seed)?;
            let outcome = auto_filter(&sample, tau_style, tau_struct)?;
            if outcome.accepted {
                accepted = Some((sample, outcome));
                break;
            }
            *failing.entry(op.name()).or_default() += 1;
        }
        let Some((sample, outcome)) = accepted else {
            let ops: Vec<String> = failing.iter().map(|(k, v)| format!("{k} ({v} rejections)")).collect();
            return Err(Error::Data(format!(
                "retry budget exhausted at sample {i}; failing ops: {}",
                ops.join(", ")
            )));
        };
        let dir = format!("sample_{i:05}");
        entries.push(ManifestEntry {
            id: format!("{}-{i:05}", profile.name().to_lowercase()),
            raw: format!("{dir}/raw.vtf"),
            sty: format!("{dir}/sty.vtf"),
            refs: (0..sample.refs.len()).map(|j| format!("{dir}/ref_{j}.vtf")).collect(),
            control: format!("{dir}/control.vtf"),
            masks: format!("{dir}/masks.vtf"),
            tags: format!("{dir}/tags.json"),
            dir,
            op: sample.op,
            tier: profile,
            spec: sample.spec,
            filter_score: outcome.style,
            structure_score: outcome.structure,
        });
        samples.push(sample);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            profile,
            seed,
            geometry: cfg.geometry,
            thresholds: cfg.thresholds,
            attempts,
            rejected: attempts - n,
            entries,
        },
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TagFile {
    t_ns: Vec<usize>,
    t_sty: Vec<usize>,
}

fn masks_tensor(masks: &Masks, h: usize, w: usize) -> FrameTensor {
    FrameTensor {
        frames: masks.len(),
        height: h,
        width: w,
        channels: 1,
        data: masks.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Writes every sample file and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    for (entry, s) in ds.manifest.entries.iter().zip(&ds.samples) {
        let sdir = dir.join(&entry.dir);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        write_video(&dir.join(&entry.raw), &s.x_raw)?;
        write_video(&dir.join(&entry.sty), &s.x_sty)?;
        for (path, r) in entry.refs.iter().zip(&s.refs) {
            write_video(&dir.join(path), r)?;
        }
        write_tensor(&dir.join(&entry.control), &s.control)?;
        write_tensor(
            &dir.join(&entry.masks),
            &masks_tensor(&s.masks, s.x_raw.height(), s.x_raw.width()),
        )?;
        let tags = TagFile {
            t_ns: s.t_ns.clone(),
            t_sty: s.t_sty.clone(),
        };
        let path = dir.join(&entry.tags);
        fs::write(&path, serde_json::to_vec_pretty(&tags)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = manifest_path(dir);
    fs::write(&path, serde_json::to_vec_pretty(&ds.manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let (tau, _) = manifest.thresholds.for_tier(manifest.profile);
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if e.filter_score < tau {
            return Err(Error::Data(format!("{}: filter score {} below {tau}", e.id, e.filter_score)));
        }
        let x_raw = read_video(&dir.join(&e.raw))?;
        let x_sty = read_video(&dir.join(&e.sty))?;
        let refs = e.refs.iter().map(|p| read_video(&dir.join(p))).collect::<Result<Vec<_>>>()?;
        let control = read_tensor(&dir.join(&e.control))?;
        let m = read_tensor(&dir.join(&e.masks))?;
        let plane = m.height * m.width;
        let masks = (0..m.frames)
            .map(|f| m.data[f * plane..(f + 1) * plane].iter().map(|&v| v > 0.5).collect())
            .collect();
        let tag_path = dir.join(&e.tags);
        if !tag_path.exists() {
            return Err(Error::MissingPath(tag_path));
        }
        let tags: TagFile =
            serde_json::from_slice(&fs::read(&tag_path).map_err(|err| Error::io(&tag_path, err))?)?;
        samples.push(SamplePair {
            spec: e.spec,
            x_raw,
            x_sty,
            t_ns: tags.t_ns,
            t_sty: tags.t_sty,
            refs,
            op: e.op,
            control,
            masks,
            tier: e.tier,
        });
    }
    Ok(Dataset { manifest, samples })
}

/// Intersection over union of two masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
