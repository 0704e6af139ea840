//! Condition slabs and frame-wise assembly of the model input.
//!
//! Every frame fed to the transformer is a `(2·C_l + 4)`-channel slab laid out
//! as `[noisy latent | 4 mask channels | clean condition latent]`. Style-image
//! and first-frame slabs carry mask 1.0, video slabs carry mask 0.0. Style
//! frames are appended after the video frames, first frames are prepended.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::{patchify, unpatchify, Latent, SlabDims, TokenSeq};
use crate::error::{Error, Result};
use crate::flow::add_noise;

pub const MASK_CHANNELS: usize = 4;

/// Token label used to route LoRA up matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenType {
    FirstFrame = 0,
    Video = 1,
    StyleImage = 2,
}

impl TokenType {
    pub const ALL: [TokenType; 3] = [TokenType::FirstFrame, TokenType::Video, TokenType::StyleImage];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("token type {i} not in 0..3")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Text,
    StyleImage,
    FirstFrame,
    Fused,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::StyleImage => "style_image",
            Mode::FirstFrame => "first_frame",
            Mode::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSlab {
    kind: TokenType,
    latent_channels: usize,
    slab: Latent,
}

impl ConditionSlab {
    fn compose(kind: TokenType, noisy: &Latent, mask: f32, clean: &Latent) -> Result<Self> {
        let ones = Latent::filled(MASK_CHANNELS, noisy.frames(), noisy.height(), noisy.width(), mask);
        let slab = Latent::concat_channels(&[noisy, &ones, clean])?;
        Ok(ConditionSlab {
            kind,
            latent_channels: noisy.channels(),
            slab,
        })
    }

    pub fn kind(&self) -> TokenType {
        self.kind
    }

    pub fn latent(&self) -> &Latent {
        &self.slab
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn frames(&self) -> usize {
        self.slab.frames()
    }

    pub fn noisy_part(&self) -> Latent {
        self.slab.channel_range(0, self.latent_channels).unwrap()
    }

    pub fn mask_part(&self) -> Latent {
        let c = self.latent_channels;
        self.slab.channel_range(c, c + MASK_CHANNELS).unwrap()
    }

    pub fn clean_part(&self) -> Latent {
        let c = self.latent_channels;
        self.slab.channel_range(c + MASK_CHANNELS, 2 * c + MASK_CHANNELS).unwrap()
    }

    /// Overwrites the mask channels with a constant.
    pub fn set_mask(&mut self, value: f32) {
        let per = self.slab.frames() * self.slab.height() * self.slab.width();
        let start = self.latent_channels * per;
        self.slab.data_mut()[start..start + MASK_CHANNELS * per]
            .iter_mut()
            .for_each(|v| *v = value);
    }
}

fn single_frame(op: &'static str, z: &Latent, eps: &Latent) -> Result<()> {
    if z.frames() != 1 {
        return Err(Error::shape(op, format!("expected a single frame, got {}", z.frames())));
    }
    if !z.same_dims(eps) {
        return Err(Error::shape(op, format!("latent {:?} vs noise {:?}", z.dims(), eps.dims())));
    }
    Ok(())
}

/// `add_noise(z_s, t) ⊕ 1 ⊕ z_s` for a single-frame style latent.
pub fn build_style_image_input(z_s: &Latent, t: f32, eps: &Latent) -> Result<ConditionSlab> {
    single_frame("build_style_image_input", z_s, eps)?;
    let noisy = add_noise(z_s, t, eps)?;
    ConditionSlab::compose(TokenType::StyleImage, &noisy, 1.0, z_s)
}

/// `add_noise(z_sty, t) ⊕ 0 ⊕ z_raw`; pass zeros for `z_raw` in text-to-video.
pub fn build_video_input(z_sty: &Latent, z_raw: &Latent, t: f32, eps: &Latent) -> Result<ConditionSlab> {
    if !z_sty.same_dims(z_raw) || !z_sty.same_dims(eps) {
        return Err(Error::shape(
            "build_video_input",
            format!("z_sty {:?}, z_raw {:?}, eps {:?}", z_sty.dims(), z_raw.dims(), eps.dims()),
        ));
    }
    let noisy = add_noise(z_sty, t, eps)?;
    ConditionSlab::compose(TokenType::Video, &noisy, 0.0, z_raw)
}

/// Video slab whose noisy part is supplied directly, as during sampling.
pub fn video_slab_from_noisy(noisy: &Latent, z_raw: &Latent) -> Result<ConditionSlab> {
    if !noisy.same_dims(z_raw) {
        return Err(Error::shape(
            "video_slab_from_noisy",
            format!("noisy {:?} vs z_raw {:?}", noisy.dims(), z_raw.dims()),
        ));
    }
    ConditionSlab::compose(TokenType::Video, noisy, 0.0, z_raw)
}

/// Same composition as the style slab, with the stylized first frame latent.
pub fn build_first_frame_input(z_1st: &Latent, t: f32, eps: &Latent) -> Result<ConditionSlab> {
    single_frame("build_first_frame_input", z_1st, eps)?;
    let noisy = add_noise(z_1st, t, eps)?;
    ConditionSlab::compose(TokenType::FirstFrame, &noisy, 1.0, z_1st)
}

/// Patchified, frame-wise assembled transformer input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: TokenSeq,
    pub type_map: Vec<TokenType>,
    pub video_token_range: Range<usize>,
    pub mode: Mode,
    /// Sequence position of each token's frame; the first-frame slab sits at -1.
    pub frame_position: Vec<i32>,
    pub patch: usize,
    pub latent_channels: usize,
    pub video_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
}

pub fn assemble(
    mode: Mode,
    video: &ConditionSlab,
    first: Option<&ConditionSlab>,
    style: Option<&ConditionSlab>,
    patch: usize,
) -> Result<ModelInput> {
    let ok = match mode {
        Mode::Text => first.is_none() && style.is_none(),
        Mode::StyleImage => first.is_none() && style.is_some(),
        Mode::FirstFrame => first.is_some() && style.is_none(),
        Mode::Fused => true,
    };
    if !ok {
        return Err(Error::Invalid(format!(
            "mode {} cannot take first_frame={} style_image={}",
            mode.name(),
            first.is_some(),
            style.is_some()
        )));
    }
    if video.kind != TokenType::Video {
        return Err(Error::Invalid("video slab has wrong kind".into()));
    }
    for (slab, kind) in [(first, TokenType::FirstFrame), (style, TokenType::StyleImage)] {
        if let Some(s) = slab {
            if s.kind != kind || s.frames() != 1 {
                return Err(Error::Invalid(format!("{kind:?} slab must be a single {kind:?} frame")));
            }
        }
    }

    let mut parts: Vec<&ConditionSlab> = Vec::new();
    parts.extend(first);
    parts.push(video);
    parts.extend(style);
    let latents: Vec<&Latent> = parts.iter().map(|s| &s.slab).collect();
    let joined = Latent::concat_frames(&latents)?;
    let tokens = patchify(&joined, patch)?;

    let per_frame = SlabDims::of(&joined, patch).tokens_per_frame();
    let mut type_map = Vec::with_capacity(tokens.len());
    for s in &parts {
        type_map.extend(std::iter::repeat(s.kind).take(s.frames() * per_frame));
    }
    let offset = first.map_or(0, |_| per_frame);
    let video_token_range = offset..offset + video.frames() * per_frame;
    let shift = if first.is_some() { 1 } else { 0 };
    let frame_position = tokens.frame_index.iter().map(|&f| f as i32 - shift).collect();

    Ok(ModelInput {
        tokens,
        type_map,
        video_token_range,
        mode,
        frame_position,
        patch,
        latent_channels: video.latent_channels,
        video_frames: video.frames(),
        latent_height: video.slab.height(),
        latent_width: video.slab.width(),
    })
}

/// Reconstructed slabs of an assembled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Disassembled {
    pub first: Option<ConditionSlab>,
    pub video: ConditionSlab,
    pub style: Option<ConditionSlab>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.type_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_map.is_empty()
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.latent_height / self.patch) * (self.latent_width / self.patch)
    }

    /// Geometry of the video part as a latent (`C_l` channels).
    pub fn video_dims(&self) -> SlabDims {
        SlabDims {
            channels: self.latent_channels,
            frames: self.video_frames,
            height: self.latent_height,
            width: self.latent_width,
            patch: self.patch,
        }
    }

    pub fn count(&self, kind: TokenType) -> usize {
        self.type_map.iter().filter(|&&k| k == kind).count()
    }

    /// Maximal runs of equal token type, in order.
    pub fn type_segments(&self) -> Vec<(Range<usize>, TokenType)> {
        let mut out: Vec<(Range<usize>, TokenType)> = Vec::new();
        for (i, &k) in self.type_map.iter().enumerate() {
            match out.last_mut() {
                Some((r, kind)) if *kind == k => r.end = i + 1,
                _ => out.push((i..i + 1, k)),
            }
        }
        out
    }

    /// The four mask-channel values of one token.
    pub fn mask_values(&self, token: usize) -> [f32; MASK_CHANNELS] {
        let p2 = self.patch * self.patch;
        let d = self.tokens.dim();
        let row = &self.tokens.tokens.data()[token * d..(token + 1) * d];
        let mut out = [0.0; MASK_CHANNELS];
        for (m, o) in out.iter_mut().enumerate() {
            *o = row[(self.latent_channels + m) * p2];
        }
        out
    }

    pub fn disassemble(&self) -> Result<Disassembled> {
        let slab_channels = 2 * self.latent_channels + MASK_CHANNELS;
        let per_frame = self.tokens_per_frame();
        let d = self.tokens.dim();
        let rows = |range: Range<usize>| -> Result<Latent> {
            let data = self.tokens.tokens.data()[range.start * d..range.end * d].to_vec();
            let t = crate::tensor::Tensor::new(vec![range.len(), d], data)?;
            unpatchify(
                &t,
                SlabDims {
                    channels: slab_channels,
                    frames: range.len() / per_frame,
                    height: self.latent_height,
                    width: self.latent_width,
                    patch: self.patch,
                },
            )
        };
        let wrap = |kind, slab| ConditionSlab {
            kind,
            latent_channels: self.latent_channels,
            slab,
        };
        let video = wrap(TokenType::Video, rows(self.video_token_range.clone())?);
        let first = if self.video_token_range.start > 0 {
            Some(wrap(TokenType::FirstFrame, rows(0..self.video_token_range.start)?))
        } else {
            None
        };
        let style = if self.video_token_range.end < self.len() {
            Some(wrap(TokenType::StyleImage, rows(self.video_token_range.end..self.len())?))
        } else {
            None
        };
        Ok(Disassembled { first, video, style })
    }
}
