//! Pixel/latent codec and patchification.
//!
//! The codec is a space-to-channel rearrangement: every `s×s` block of each
//! colour channel becomes `s²` latent channels. It is exactly invertible, so
//! encode/decode round trips are bitwise.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Dataset pixels sit on the grid k/256, so `z - eps` is exact in f32 for
/// noise on the `NOISE_GRID` grid.
pub const PIXEL_LEVELS: u32 = 256;

/// Raw frames, `F×H×W×3`, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Video {
    pub const CHANNELS: usize = 3;

    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::shape("video", format!("empty geometry {frames}x{height}x{width}")));
        }
        if data.len() != frames * height * width * 3 {
            return Err(Error::shape(
                "video",
                format!("{frames}x{height}x{width}x3 needs {} values, got {}", frames * height * width * 3, data.len()),
            ));
        }
        Ok(Video {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Self {
        Video {
            frames,
            height,
            width,
            data: vec![value; frames * height * width * 3],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame_data(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame(&self, f: usize) -> Video {
        Video {
            frames: 1,
            height: self.height,
            width: self.width,
            data: self.frame_data(f).to_vec(),
        }
    }

    pub fn last_frame(&self) -> Video {
        self.frame(self.frames - 1)
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((f * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_geometry(&self, other: &Video) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(mut self) -> Video {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Clamps to [0, 1] and rounds onto the grid k/`PIXEL_LEVELS`.
    pub fn quantized(mut self) -> Video {
        let q = PIXEL_LEVELS as f32;
        self.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * q).round() / q);
        self
    }

    /// Frame-wise concatenation of videos with equal spatial size.
    pub fn concat(parts: &[Video]) -> Result<Video> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero videos".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::shape(
                    "video concat",
                    format!("{}x{} vs {}x{}", first.height, first.width, p.height, p.width),
                ));
            }
            data.extend_from_slice(&p.data);
            frames += p.frames;
        }
        Video::new(frames, first.height, first.width, data)
    }
}

/// Channel-major latent-like slab `C×F×H×W`.
///
/// Used both for codec latents (`C = 3·s²`) and for condition slabs.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Latent {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * frames * height * width {
            return Err(Error::shape(
                "latent",
                format!("{channels}x{frames}x{height}x{width} needs {} values, got {}", channels * frames * height * width, data.len()),
            ));
        }
        Ok(Latent {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, frames, height, width, 0.0)
    }

    pub fn filled(channels: usize, frames: usize, height: usize, width: usize, value: f32) -> Self {
        Latent {
            channels,
            frames,
            height,
            width,
            data: vec![value; channels * frames * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Latent) -> bool {
        self.dims() == other.dims()
    }

    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f32 {
        self.data[((c * self.frames + f) * self.height + y) * self.width + x]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Latent]) -> Result<Latent> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("channel concat of zero latents".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.frames != first.frames || p.height != first.height || p.width != first.width {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", first.dims(), p.dims()),
                ));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Latent::new(channels, first.frames, first.height, first.width, data)
    }

    /// Channels `start..end`.
    pub fn channel_range(&self, start: usize, end: usize) -> Result<Latent> {
        if start >= end || end > self.channels {
            return Err(Error::shape("channel_range", format!("{start}..{end} of {}", self.channels)));
        }
        let per = self.frames * self.plane();
        Latent::new(end - start, self.frames, self.height, self.width, self.data[start * per..end * per].to_vec())
    }

    /// Concatenation along the frame axis.
    pub fn concat_frames(parts: &[&Latent]) -> Result<Latent> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("frame concat of zero latents".into()))?;
        for p in parts {
            if p.channels != first.channels || p.height != first.height || p.width != first.width {
                return Err(Error::shape(
                    "concat_frames",
                    format!("{:?} vs {:?}", first.dims(), p.dims()),
                ));
            }
        }
        let frames: usize = parts.iter().map(|p| p.frames).sum();
        let plane = first.plane();
        let mut data = Vec::with_capacity(first.channels * frames * plane);
        for c in 0..first.channels {
            for p in parts {
                let per = p.frames * plane;
                data.extend_from_slice(&p.data[c * per..(c + 1) * per]);
            }
        }
        Latent::new(first.channels, frames, first.height, first.width, data)
    }

    /// Frames `start..end`.
    pub fn frame_range(&self, start: usize, end: usize) -> Result<Latent> {
        if start >= end || end > self.frames {
            return Err(Error::shape("frame_range", format!("{start}..{end} of {}", self.frames)));
        }
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.channels * (end - start) * plane);
        for c in 0..self.channels {
            let base = c * self.frames * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Latent::new(self.channels, end - start, self.height, self.width, data)
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Pixel-shuffle codec with stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    stride: usize,
}

impl Codec {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid("codec stride must be >= 1".into()));
        }
        Ok(Codec { stride })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.stride * self.stride
    }

    pub fn encode(&self, v: &Video) -> Result<Latent> {
        let s = self.stride;
        if v.height % s != 0 || v.width % s != 0 {
            return Err(Error::shape(
                "encode",
                format!("{}x{} not divisible by stride {s}", v.height, v.width),
            ));
        }
        let (lh, lw) = (v.height / s, v.width / s);
        let c_l = self.latent_channels();
        let mut data = vec![0.0f32; c_l * v.frames * lh * lw];
        for f in 0..v.frames {
            for y in 0..v.height {
                for x in 0..v.width {
                    let src = ((f * v.height + y) * v.width + x) * 3;
                    let (ly, dy, lx, dx) = (y / s, y % s, x / s, x % s);
                    for c in 0..3 {
                        let lc = c * s * s + dy * s + dx;
                        data[((lc * v.frames + f) * lh + ly) * lw + lx] = v.data[src + c];
                    }
                }
            }
        }
        Latent::new(c_l, v.frames, lh, lw, data)
    }

    /// Exact inverse of [`Codec::encode`]; `clamp` limits output to `[0,1]`.
    pub fn decode(&self, z: &Latent, clamp: bool) -> Result<Video> {
        let s = self.stride;
        if z.channels != self.latent_channels() {
            return Err(Error::shape(
                "decode",
                format!("expected {} channels, got {}", self.latent_channels(), z.channels),
            ));
        }
        let (h, w) = (z.height * s, z.width * s);
        let mut data = vec![0.0f32; z.frames * h * w * 3];
        for f in 0..z.frames {
            for y in 0..h {
                for x in 0..w {
                    let dst = ((f * h + y) * w + x) * 3;
                    let (ly, dy, lx, dx) = (y / s, y % s, x / s, x % s);
                    for c in 0..3 {
                        let lc = c * s * s + dy * s + dx;
                        let v = z.data[((lc * z.frames + f) * z.height + ly) * z.width + lx];
                        data[dst + c] = if clamp { v.clamp(0.0, 1.0) } else { v };
                    }
                }
            }
        }
        Video::new(z.frames, h, w, data)
    }
}

/// Geometry needed to undo patchification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlabDims {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl SlabDims {
    pub fn of(z: &Latent, patch: usize) -> Self {
        SlabDims {
            channels: z.channels,
            frames: z.frames,
            height: z.height,
            width: z.width,
            patch,
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Token matrix `T×D` with the frame and spatial position of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub tokens: Tensor<f32>,
    pub frame_index: Vec<usize>,
    pub spatial_index: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Splits a slab into `p×p` patch tokens, frame-major then row-major.
pub fn patchify(z: &Latent, p: usize) -> Result<TokenSeq> {
    if p == 0 || z.height % p != 0 || z.width % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{}x{} not divisible by patch {p}", z.height, z.width),
        ));
    }
    let dims = SlabDims::of(z, p);
    let (gh, gw) = (z.height / p, z.width / p);
    let t = z.frames * gh * gw;
    let d = dims.token_dim();
    let mut data = vec![0.0f32; t * d];
    let mut frame_index = Vec::with_capacity(t);
    let mut spatial_index = Vec::with_capacity(t);
    for f in 0..z.frames {
        for by in 0..gh {
            for bx in 0..gw {
                let tok = (f * gh + by) * gw + bx;
                frame_index.push(f);
                spatial_index.push(by * gw + bx);
                for c in 0..z.channels {
                    for py in 0..p {
                        for px in 0..p {
                            data[tok * d + (c * p + py) * p + px] = z.get(c, f, by * p + py, bx * p + px);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenSeq {
        tokens: Tensor::new(vec![t, d], data)?,
        frame_index,
        spatial_index,
    })
}

/// Exact inverse of [`patchify`] for a `T×D` token matrix.
pub fn unpatchify(tokens: &Tensor<f32>, dims: SlabDims) -> Result<Latent> {
    let data = unpatchify_values(tokens.shape(), tokens.data(), dims)?;
    Latent::new(dims.channels, dims.frames, dims.height, dims.width, data)
}

/// [`unpatchify`] over raw values of any element type, returning `C×F×H×W` data.
pub fn unpatchify_values<T: Real>(shape: &[usize], src: &[T], dims: SlabDims) -> Result<Vec<T>> {
    let SlabDims {
        channels,
        frames,
        height,
        width,
        patch: p,
    } = dims;
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::shape("unpatchify", format!("{height}x{width} with patch {p}")));
    }
    let (gh, gw) = (height / p, width / p);
    let t = frames * gh * gw;
    let d = dims.token_dim();
    if shape != [t, d] || src.len() != t * d {
        return Err(Error::shape(
            "unpatchify",
            format!("tokens {shape:?} vs expected [{t}, {d}]"),
        ));
    }
    let mut data = vec![T::zero(); channels * frames * height * width];
    for f in 0..frames {
        for by in 0..gh {
            for bx in 0..gw {
                let tok = (f * gh + by) * gw + bx;
                for c in 0..channels {
                    for py in 0..p {
                        for px in 0..p {
                            let (y, x) = (by * p + py, bx * p + px);
                            data[((c * frames + f) * height + y) * width + x] = src[tok * d + (c * p + py) * p + px];
                        }
                    }
                }
            }
        }
    }
    Ok(data)
}
