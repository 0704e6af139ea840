//! Video tensor files and PPM frame export.
//!
//! `.vtf` layout: magic `VTF1`, four little-endian `u32` (F, H, W, C), then
//! `F·H·W·C` little-endian `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::codec::Video;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VTF1";

/// Raw contents of a `.vtf` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FrameTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in [self.frames, self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::Data("not a VTF1 file".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (frames, height, width, channels) = (dim(0), dim(1), dim(2), dim(3));
        let n = frames * height * width * channels;
        if bytes.len() != 20 + 4 * n {
            return Err(Error::Data(format!(
                "VTF1 header {frames}x{height}x{width}x{channels} needs {} payload bytes, file has {}",
                4 * n,
                bytes.len() - 20
            )));
        }
        let data = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FrameTensor {
            frames,
            height,
            width,
            channels,
            data,
        })
    }
}

impl From<&Video> for FrameTensor {
    fn from(v: &Video) -> Self {
        FrameTensor {
            frames: v.frames(),
            height: v.height(),
            width: v.width(),
            channels: 3,
            data: v.data().to_vec(),
        }
    }
}

impl TryFrom<FrameTensor> for Video {
    type Error = Error;

    fn try_from(t: FrameTensor) -> Result<Video> {
        if t.channels != 3 {
            return Err(Error::Data(format!("expected 3 channels, file has {}", t.channels)));
        }
        Video::new(t.frames, t.height, t.width, t.data)
    }
}

pub fn write_tensor(path: &Path, t: &FrameTensor) -> Result<()> {
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<FrameTensor> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrameTensor::from_bytes(&bytes)
}

pub fn write_video(path: &Path, v: &Video) -> Result<()> {
    write_tensor(path, &FrameTensor::from(v))
}

pub fn read_video(path: &Path) -> Result<Video> {
    Video::try_from(read_tensor(path)?)
}

/// Binary P6 encoding of one frame; values are `round(255·clamp(v,0,1))`.
pub fn ppm_bytes(v: &Video, frame: usize) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", v.width(), v.height()).into_bytes();
    out.extend(
        v.frame_data(frame)
            .iter()
            .map(|&x| (255.0 * x.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

/// Writes `<stem>_<f>.ppm` for every frame into `dir`.
pub fn export_ppm_frames(dir: &Path, stem: &str, v: &Video) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in 0..v.frames() {
        let path = dir.join(format!("{stem}_{f:03}.ppm"));
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&ppm_bytes(v, f)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
