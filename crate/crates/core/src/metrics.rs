//! Fixed-feature evaluation metrics.
//!
//! Style similarity compares a descriptor built from second-order statistics
//! of a seeded filter bank plus a colour histogram. Structure similarity
//! compares seeded projections of per-patch edge magnitudes. No learned
//! weights are involved, so every score is reproducible from the seeds below.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FILTER_BANK_SEED: u64 = 0x5EED_F117;
pub const PATCH_PROJECTION_SEED: u64 = 0x5EED_9A7C;

const NUM_FILTERS: usize = 8;
const HIST_BINS: usize = 8;
const GRAM_LEN: usize = NUM_FILTERS * (NUM_FILTERS + 1) / 2;
/// Length of a [`StyleDescriptor`].
pub const DESCRIPTOR_LEN: usize = GRAM_LEN + 3 * HIST_BINS;

const PATCH: usize = 4;
const PATCH_FEATURES: usize = 16;
const PATCH_BIAS: f64 = 0.1;

fn filter_bank() -> &'static [[f64; 9]; NUM_FILTERS] {
    static BANK: OnceLock<[[f64; 9]; NUM_FILTERS]> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut rng = Rng::new(FILTER_BANK_SEED);
        let mut bank = [[0.0; 9]; NUM_FILTERS];
        for f in bank.iter_mut() {
            for v in f.iter_mut() {
                *v = rng.normal();
            }
            // zero-mean so flat regions give no response
            let mean = f.iter().sum::<f64>() / 9.0;
            f.iter_mut().for_each(|v| *v -= mean);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            f.iter_mut().for_each(|v| *v /= norm);
        }
        bank
    })
}

fn patch_projection() -> &'static Vec<f64> {
    static PROJ: OnceLock<Vec<f64>> = OnceLock::new();
    PROJ.get_or_init(|| {
        let mut rng = Rng::new(PATCH_PROJECTION_SEED);
        let inputs = PATCH * PATCH + 1;
        (0..PATCH_FEATURES * inputs)
            .map(|_| rng.normal() / (inputs as f64).sqrt())
            .collect()
    })
}

pub(crate) fn luminance(v: &Video, f: usize) -> Vec<f64> {
    v.frame_data(f)
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Unit-norm style descriptor: filter-response Gram (upper triangle) and RGB histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleDescriptor(pub Vec<f64>);

impl StyleDescriptor {
    pub fn of_frame(v: &Video, f: usize) -> Self {
        Self::of_frame_masked(v, f, None)
    }

    /// Descriptor over the pixels where `mask` equals `keep`.
    pub fn of_frame_masked(v: &Video, f: usize, mask: Option<(&[bool], bool)>) -> Self {
        let (h, w) = (v.height(), v.width());
        let lum = luminance(v, f);
        let take = |i: usize| mask.map_or(true, |(m, keep)| m[i] == keep);

        let bank = filter_bank();
        let mut gram = [0.0f64; GRAM_LEN];
        let mut count = 0usize;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                if !take(y * w + x) {
                    continue;
                }
                let mut resp = [0.0f64; NUM_FILTERS];
                for (r, filt) in resp.iter_mut().zip(bank) {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += filt[dy * 3 + dx] * lum[(y + dy - 1) * w + x + dx - 1];
                        }
                    }
                    *r = acc;
                }
                let mut k = 0;
                for i in 0..NUM_FILTERS {
                    for j in i..NUM_FILTERS {
                        gram[k] += resp[i] * resp[j];
                        k += 1;
                    }
                }
                count += 1;
            }
        }
        if count > 0 {
            gram.iter_mut().for_each(|g| *g /= count as f64);
        }

        let mut hist = [0.0f64; 3 * HIST_BINS];
        for (i, px) in v.frame_data(f).chunks_exact(3).enumerate() {
            if !take(i) {
                continue;
            }
            for c in 0..3 {
                let b = ((px[c].clamp(0.0, 1.0) as f64 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                hist[c * HIST_BINS + b] += 1.0;
            }
        }

        let mut g = gram.to_vec();
        let mut hv = hist.to_vec();
        normalize(&mut g);
        normalize(&mut hv);
        g.extend(hv);
        normalize(&mut g);
        StyleDescriptor(g)
    }

    /// Mean of per-frame descriptors, renormalized.
    pub fn of_video(v: &Video) -> Self {
        let mut acc = vec![0.0; DESCRIPTOR_LEN];
        for f in 0..v.frames() {
            for (a, d) in acc.iter_mut().zip(Self::of_frame(v, f).0) {
                *a += d;
            }
        }
        normalize(&mut acc);
        StyleDescriptor(acc)
    }

    pub fn cosine(&self, other: &StyleDescriptor) -> f64 {
        cosine(&self.0, &other.0)
    }
}

/// Mean over frames of `v` and images in `refs` of descriptor cosine.
pub fn style_score(v: &Video, refs: &[Video]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Invalid("style_score needs at least one reference".into()));
    }
    let ref_desc: Vec<StyleDescriptor> = refs
        .iter()
        .flat_map(|r| (0..r.frames()).map(move |f| StyleDescriptor::of_frame(r, f)))
        .collect();
    let mut total = 0.0;
    for f in 0..v.frames() {
        let d = StyleDescriptor::of_frame(v, f);
        total += ref_desc.iter().map(|r| d.cosine(r)).sum::<f64>();
    }
    Ok(total / (v.frames() * ref_desc.len()) as f64)
}

/// Per-patch features of one frame, `PATCH×PATCH` luminance-gradient patches
/// projected to a fixed dimension.
pub fn patch_features(v: &Video, f: usize) -> Vec<Vec<f64>> {
    let (h, w) = (v.height(), v.width());
    let lum = luminance(v, f);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        lum[yy * w + xx]
    };
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let proj = patch_projection();
    let inputs = PATCH * PATCH + 1;
    let mut out = Vec::new();
    for py in 0..h / PATCH {
        for px in 0..w / PATCH {
            let mut input = Vec::with_capacity(inputs);
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    input.push(mag[(py * PATCH + dy) * w + px * PATCH + dx]);
                }
            }
            input.push(PATCH_BIAS);
            let feat = (0..PATCH_FEATURES)
                .map(|o| (0..inputs).map(|i| proj[o * inputs + i] * input[i]).sum())
                .collect();
            out.push(feat);
        }
    }
    out
}

/// Mean patch-feature cosine between two videos of equal geometry.
pub fn structure_score(a: &Video, b: &Video) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::shape(
            "structure_score",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.frames(),
                a.height(),
                a.width(),
                b.frames(),
                b.height(),
                b.width()
            ),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for f in 0..a.frames() {
        let fa = patch_features(a, f);
        let fb = patch_features(b, f);
        for (x, y) in fa.iter().zip(&fb) {
            total += cosine(x, y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Mean absolute difference between adjacent frames.
pub fn dynamic_degree(v: &Video) -> f64 {
    if v.frames() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for f in 0..v.frames() - 1 {
        let a = v.frame_data(f);
        let b = v.frame_data(f + 1);
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
    }
    total / (v.frames() - 1) as f64
}

/// Adjacent-frame descriptor cosine inside (subject) and outside (background) the masks.
pub fn region_consistency(v: &Video, masks: &[Vec<bool>]) -> Result<(f64, f64)> {
    if masks.len() != v.frames() {
        return Err(Error::shape(
            "region_consistency",
            format!("{} masks for {} frames", masks.len(), v.frames()),
        ));
    }
    if v.frames() < 2 {
        return Ok((1.0, 1.0));
    }
    let mut subject = 0.0;
    let mut background = 0.0;
    for f in 0..v.frames() - 1 {
        for (keep, acc) in [(true, &mut subject), (false, &mut background)] {
            let a = StyleDescriptor::of_frame_masked(v, f, Some((&masks[f], keep)));
            let b = StyleDescriptor::of_frame_masked(v, f + 1, Some((&masks[f + 1], keep)));
            let empty = |d: &StyleDescriptor| d.0.iter().all(|&x| x == 0.0);
            *acc += if empty(&a) && empty(&b) { 1.0 } else { a.cosine(&b) };
        }
    }
    let n = (v.frames() - 1) as f64;
    Ok((subject / n, background / n))
}

/// Mean descriptor per style tag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CentroidTable {
    pub centroids: BTreeMap<usize, Vec<f64>>,
}

impl CentroidTable {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = (usize, &'a Video)>) -> Self {
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (tag, v) in examples {
            let d = StyleDescriptor::of_video(v);
            let acc = sums.entry(tag).or_insert_with(|| vec![0.0; DESCRIPTOR_LEN]);
            for (a, x) in acc.iter_mut().zip(d.0) {
                *a += x;
            }
        }
        for c in sums.values_mut() {
            normalize(c);
        }
        CentroidTable { centroids: sums }
    }

    /// Tag whose centroid is closest to `v`.
    pub fn classify(&self, v: &Video) -> Option<usize> {
        let d = StyleDescriptor::of_video(v);
        self.centroids
            .iter()
            .map(|(&tag, c)| (tag, cosine(&d.0, c)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(tag, _)| tag)
    }
}

/// Cosine between the video's mean descriptor and the centroid of `style_tag`.
pub fn text_style_alignment(style_tag: usize, v: &Video, table: &CentroidTable) -> Result<f64> {
    let c = table
        .centroids
        .get(&style_tag)
        .ok_or_else(|| Error::Invalid(format!("no centroid for style tag {style_tag}")))?;
    Ok(cosine(&StyleDescriptor::of_video(v).0, c))
}

pub const COL_CLIP_T: &str = "CLIP-T";
pub const COL_CSD: &str = "CSD Score";
pub const COL_DINO: &str = "DINO Score";
pub const COL_DYNAMIC: &str = "Dynamic Degree";
pub const COL_SUBJECT: &str = "Subject Consistency";
pub const COL_BACKGROUND: &str = "Background Consistency";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample: String,
    pub mode: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn push(&mut self, sample: &str, mode: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            sample: sample.to_string(),
            mode: mode.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Mean value per (mode, metric).
    pub fn summary(&self) -> BTreeMap<(String, String), f64> {
        let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.mode.clone(), r.metric.clone())).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        let mut w = csv::Writer::from_path(csv_path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        Ok(())
    }
}
