//! Flow-matching path, velocity targets, the masked training loss and the
//! Euler sampler.
//!
//! The path is `z_t = t·z + (1−t)·ε`, so `z_0` is noise, `z_1` is data and the
//! velocity along the path is `z − ε`.

use crate::codec::{patchify, unpatchify_values, Codec, Latent, SlabDims, Video};
use crate::conditioning::{
    assemble, build_first_frame_input, build_style_image_input, video_slab_from_noisy, Mode, ModelInput,
};
use crate::error::{Error, Result};
use crate::net::{GlobalStyleFeature, Model, TextCondition};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Tensor, Var};

pub fn add_noise(z: &Latent, t: f32, eps: &Latent) -> Result<Latent> {
    if !z.same_dims(eps) {
        return Err(Error::shape(
            "add_noise",
            format!("latent {:?} vs noise {:?}", z.dims(), eps.dims()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("add_noise: t={t} outside [0, 1]")));
    }
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| t * a + (1.0 - t) * e)
        .collect();
    Latent::new(z.channels(), z.frames(), z.height(), z.width(), data)
}

pub fn velocity_target(z_sty: &Latent, eps: &Latent) -> Result<Latent> {
    if !z_sty.same_dims(eps) {
        return Err(Error::shape(
            "velocity_target",
            format!("latent {:?} vs noise {:?}", z_sty.dims(), eps.dims()),
        ));
    }
    let data = z_sty.data().iter().zip(eps.data()).map(|(&a, &e)| a - e).collect();
    Latent::new(z_sty.channels(), z_sty.frames(), z_sty.height(), z_sty.width(), data)
}

/// Mean squared error between the video-token rows of `pred` and the
/// patchified `target`; condition-token rows do not enter the loss.
pub fn training_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Latent, input: &ModelInput) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let want = input.latent_channels * input.patch * input.patch;
    if shape.len() != 2 || shape[0] != input.len() || shape[1] != want {
        return Err(Error::shape(
            "training_loss",
            format!("prediction {shape:?} vs {} tokens of width {want}", input.len()),
        ));
    }
    let dims = input.video_dims();
    if target.dims() != [dims.channels, dims.frames, dims.height, dims.width] {
        return Err(Error::shape(
            "training_loss",
            format!("target {:?} does not cover the video tokens", target.dims()),
        ));
    }
    let range = input.video_token_range.clone();
    let video = if range.len() == shape[0] {
        pred
    } else {
        tape.slice(pred, 0, range.start, range.end)?
    };
    let tokens = patchify(target, input.patch)?.tokens.cast::<T>();
    let target = tape.constant(tokens);
    tape.mse(video, target)
}

/// Noise values are rounded to multiples of 1/`NOISE_GRID`.
pub const NOISE_GRID: f32 = 65536.0;

fn snap_noise(e: f32) -> f32 {
    (e * NOISE_GRID).round() / NOISE_GRID
}

/// Gaussian noise fixed for one training example or sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps_video: Latent,
    pub eps_style: Latent,
    pub eps_first: Latent,
    pub seed: u64,
}

impl NoiseDraw {
    /// `video` gives the video latent geometry; condition noise is single-frame.
    pub fn new(seed: u64, video: [usize; 4]) -> Self {
        let [c, f, h, w] = video;
        let mut rng = Rng::new(seed);
        let mut draw = |frames| {
            let data = rng.normal_vec(c * frames * h * w).into_iter().map(snap_noise).collect();
            Latent::new(c, frames, h, w, data).expect("sized by construction")
        };
        let eps_video = draw(f);
        let eps_style = draw(1);
        let eps_first = draw(1);
        NoiseDraw {
            eps_video,
            eps_style,
            eps_first,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn timesteps(&self) -> Result<Vec<f32>> {
        if self.steps < 1 {
            return Err(Error::Invalid("sampler needs at least one step".into()));
        }
        Ok((0..self.steps).map(|k| k as f32 / self.steps as f32).collect())
    }
}

/// Anything that predicts per-token velocities for an assembled input.
/// Rows are tokens, each of width `C_l·p²`.
pub trait VelocityModel {
    fn velocity(&self, input: &ModelInput, t: f32) -> Result<Vec<f64>>;
}

/// A trained network bound to its text and global style conditions.
pub struct Conditioned<'a> {
    pub model: &'a Model,
    pub text: TextCondition,
    pub style: GlobalStyleFeature,
}

impl VelocityModel for Conditioned<'_> {
    fn velocity(&self, input: &ModelInput, t: f32) -> Result<Vec<f64>> {
        let out = self.model.predict(input, t, &self.text, &self.style)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "velocity" });
        }
        Ok(out.data().iter().map(|&v| v as f64).collect())
    }
}

/// Clean latents the sampler conditions on. `z_raw: None` runs text-to-video
/// with an all-zero video condition.
#[derive(Debug, Clone, Default)]
pub struct SampleConditions {
    pub z_raw: Option<Latent>,
    pub first: Option<Latent>,
    pub style: Option<Latent>,
    /// Mask value written into the style slab.
    pub style_mask: Option<f32>,
}

/// Integrates the velocity field from `t=0` to `t=1` and returns the final
/// video latent. The state is carried in `f64` and rounded once at the end.
pub fn euler_sample_latent(
    model: &dyn VelocityModel,
    mode: Mode,
    video_dims: [usize; 4],
    patch: usize,
    cond: &SampleConditions,
    cfg: &SamplerConfig,
) -> Result<Latent> {
    let ts = cfg.timesteps()?;
    let [c, f, h, w] = video_dims;
    let noise = NoiseDraw::new(cfg.seed, video_dims);
    let z_raw = match &cond.z_raw {
        Some(z) if z.dims() == video_dims => z.clone(),
        Some(z) => {
            return Err(Error::shape(
                "euler_sample",
                format!("raw latent {:?} vs video dims {video_dims:?}", z.dims()),
            ))
        }
        None => Latent::zeros(c, f, h, w),
    };
    let dims = SlabDims {
        channels: c,
        frames: f,
        height: h,
        width: w,
        patch,
    };
    let dt = 1.0 / cfg.steps as f64;
    let mut z: Vec<f64> = noise.eps_video.data().iter().map(|&v| v as f64).collect();
    for &t in &ts {
        let noisy = Latent::new(c, f, h, w, z.iter().map(|&v| v as f32).collect())?;
        let video = video_slab_from_noisy(&noisy, &z_raw)?;
        let first = cond
            .first
            .as_ref()
            .map(|z1| build_first_frame_input(z1, t, &noise.eps_first))
            .transpose()?;
        let style = match cond.style.as_ref() {
            Some(zs) => {
                let mut s = build_style_image_input(zs, t, &noise.eps_style)?;
                if let Some(m) = cond.style_mask {
                    s.set_mask(m);
                }
                Some(s)
            }
            None => None,
        };
        let input = assemble(mode, &video, first.as_ref(), style.as_ref(), patch)?;
        let v = model.velocity(&input, t)?;
        let width = c * patch * patch;
        if v.len() != input.len() * width {
            return Err(Error::shape(
                "euler_sample",
                format!("velocity has {} values, expected {}", v.len(), input.len() * width),
            ));
        }
        let range = input.video_token_range.clone();
        let rows = &v[range.start * width..range.end * width];
        let step = unpatchify_values(&[range.len(), width], rows, dims)?;
        for (zi, vi) in z.iter_mut().zip(step) {
            *zi += dt * vi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "euler_sample" });
        }
    }
    Latent::new(c, f, h, w, z.into_iter().map(|v| v as f32).collect())
}

/// Sampling followed by a clamped decode.
pub fn euler_sample(
    model: &dyn VelocityModel,
    mode: Mode,
    codec: &Codec,
    video_dims: [usize; 4],
    patch: usize,
    cond: &SampleConditions,
    cfg: &SamplerConfig,
) -> Result<Video> {
    let z = euler_sample_latent(model, mode, video_dims, patch, cond, cfg)?;
    codec.decode(&z, true)
}

/// Test oracle with the constant field `z* − ε_video`.
pub struct ConstantVelocity {
    pub target: Latent,
    pub eps: Latent,
    pub patch: usize,
}

impl VelocityModel for ConstantVelocity {
    fn velocity(&self, input: &ModelInput, _t: f32) -> Result<Vec<f64>> {
        let z = &self.target;
        let mut idx = Latent::zeros(z.channels(), z.frames(), z.height(), z.width());
        for (i, v) in idx.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        // Patchify the index map so the differences stay exact in f64.
        let map = patchify(&idx, self.patch)?;
        let width = map.dim();
        let mut out = vec![0.0f64; input.len() * width];
        let start = input.video_token_range.start * width;
        for (k, &src) in map.tokens.data().iter().enumerate() {
            let s = src as usize;
            out[start + k] = self.target.data()[s] as f64 - self.eps.data()[s] as f64;
        }
        Ok(out)
    }
}

/// Reference loss evaluated element by element straight from the latent
/// layout, for checking [`training_loss`].
pub fn brute_force_loss(pred: &Tensor<f32>, target: &Latent, input: &ModelInput) -> f64 {
    let p = input.patch;
    let (c_l, h, w) = (target.channels(), target.height(), target.width());
    let per_row = w / p;
    let per_frame = (h / p) * per_row;
    let width = pred.shape()[1];
    let mut sum = 0.0f64;
    for c in 0..c_l {
        for f in 0..target.frames() {
            for y in 0..h {
                for x in 0..w {
                    let token = input.video_token_range.start + f * per_frame + (y / p) * per_row + x / p;
                    let feat = (c * p + y % p) * p + x % p;
                    let d = pred.data()[token * width + feat] as f64 - target.get(c, f, y, x) as f64;
                    sum += d * d;
                }
            }
        }
    }
    sum / target.data().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_video_input, TokenType};

    fn lat(rng: &mut Rng, f: usize) -> Latent {
        Latent::new(12, f, 4, 4, rng.normal_vec(12 * f * 16)).unwrap()
    }

    #[test]
    fn endpoints_exact() {
        let mut rng = Rng::new(1);
        let (z, e) = (lat(&mut rng, 2), lat(&mut rng, 2));
        assert_eq!(add_noise(&z, 1.0, &e).unwrap(), z);
        assert_eq!(add_noise(&z, 0.0, &e).unwrap(), e);
        let two = Latent::filled(1, 1, 1, 1, 2.0);
        let zero = Latent::zeros(1, 1, 1, 1);
        assert_eq!(add_noise(&two, 0.5, &zero).unwrap().data(), &[1.0]);
        assert!(add_noise(&z, 0.5, &lat(&mut rng, 1)).is_err());
        assert!(add_noise(&z, 1.5, &e).is_err());
    }

    #[test]
    fn target_is_path_derivative() {
        let mut rng = Rng::new(2);
        let (z, e) = (lat(&mut rng, 1), lat(&mut rng, 1));
        let v = velocity_target(&z, &e).unwrap();
        let h = 1e-3f64;
        for i in 0..z.data().len() {
            let (a, b) = (z.data()[i] as f64, e.data()[i] as f64);
            let path = |t: f64| t * a + (1.0 - t) * b;
            let fd = (path(0.5 + h) - path(0.5 - h)) / (2.0 * h);
            assert!((fd - v.data()[i] as f64).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let back: Vec<f32> = v.data().iter().zip(e.data()).map(|(a, b)| a + b).collect();
        for (x, y) in back.iter().zip(z.data()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        assert!(velocity_target(&z, &z).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dataset_latents_reconstruct_bitwise() {
        let mut rng = Rng::new(9);
        let px: Vec<f32> = (0..4 * 8 * 8 * 3).map(|_| rng.uniform() as f32).collect();
        let v = crate::codec::Video::new(4, 8, 8, px).unwrap().quantized();
        let z = crate::codec::Codec::new(2).unwrap().encode(&v).unwrap();
        for seed in 0..20 {
            let e = NoiseDraw::new(seed, z.dims()).eps_video;
            let t = velocity_target(&z, &e).unwrap();
            let back: Vec<f32> = t.data().iter().zip(e.data()).map(|(a, b)| a + b).collect();
            assert_eq!(back, z.data());
        }
    }

    fn style_input(rng: &mut Rng) -> (ModelInput, Latent) {
        let (zs, zr, e, z1, e1) = (lat(rng, 2), lat(rng, 2), lat(rng, 2), lat(rng, 1), lat(rng, 1));
        let video = build_video_input(&zs, &zr, 0.3, &e).unwrap();
        let style = build_style_image_input(&z1, 0.3, &e1).unwrap();
        let x = assemble(Mode::StyleImage, &video, None, Some(&style), 2).unwrap();
        (x, velocity_target(&zs, &e).unwrap())
    }

    #[test]
    fn loss_masks_condition_tokens() {
        let mut rng = Rng::new(3);
        let (x, target) = style_input(&mut rng);
        let mut pred = Tensor::new(vec![x.len(), 48], rng.normal_vec(x.len() * 48)).unwrap();
        let tt = patchify(&target, 2).unwrap().tokens;
        let r = x.video_token_range.clone();
        pred.data_mut()[r.start * 48..r.end * 48].copy_from_slice(tt.data());
        let mut tape = Tape::<f32>::new();
        let pv = tape.leaf(pred.clone(), true);
        let loss = training_loss(&mut tape, pv, &target, &x).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let shifted = pred.map(|v| v + 0.25);
        let mut tape = Tape::<f32>::new();
        let pv = tape.leaf(shifted, true);
        let loss = training_loss(&mut tape, pv, &target, &x).unwrap();
        assert!((tape.value(loss).item() - 0.0625).abs() < 1e-6);
    }

    #[test]
    fn loss_matches_brute_force() {
        let mut rng = Rng::new(4);
        for _ in 0..5 {
            let (x, target) = style_input(&mut rng);
            let pred = Tensor::new(vec![x.len(), 48], rng.normal_vec(x.len() * 48)).unwrap();
            let mut tape = Tape::<f64>::new();
            let pv = tape.leaf(pred.cast(), true);
            let loss = training_loss(&mut tape, pv, &target, &x).unwrap();
            let oracle = brute_force_loss(&pred, &target, &x);
            assert!((tape.value(loss).item() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_rows_get_zero_grad() {
        let mut rng = Rng::new(5);
        let (x, target) = style_input(&mut rng);
        let pred = Tensor::new(vec![x.len(), 48], rng.normal_vec(x.len() * 48)).unwrap();
        let mut tape = Tape::<f32>::new();
        let pv = tape.leaf(pred, true);
        let loss = training_loss(&mut tape, pv, &target, &x).unwrap();
        let g = tape.grads(loss).unwrap();
        let g = g.get(pv).unwrap();
        for (i, kind) in x.type_map.iter().enumerate() {
            let row = &g.data()[i * 48..(i + 1) * 48];
            if *kind == TokenType::StyleImage {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn loss_rejects_wrong_target() {
        let mut rng = Rng::new(6);
        let (x, _) = style_input(&mut rng);
        let mut tape = Tape::<f32>::new();
        let pv = tape.leaf(Tensor::zeros(&[x.len(), 48]), true);
        assert!(training_loss(&mut tape, pv, &lat(&mut rng, 3), &x).is_err());
    }

    #[test]
    fn noise_statistics() {
        let n = NoiseDraw::new(9, [12, 8, 16, 16]);
        let d = n.eps_video.data();
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let se = 1.0 / (d.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se);
        assert!((var - 1.0).abs() < 3.0 * (2.0f64).sqrt() * se);
        assert_eq!(n, NoiseDraw::new(9, [12, 8, 16, 16]));
        assert_eq!(n.eps_style.frames(), 1);
    }

    #[test]
    fn sampler_rejects_zero_steps() {
        let cfg = SamplerConfig { steps: 0, seed: 1 };
        assert!(cfg.timesteps().is_err());
        let ts = SamplerConfig { steps: 4, seed: 1 }.timesteps().unwrap();
        assert_eq!(ts, vec![0.0, 0.25, 0.5, 0.75]);
    }

    fn oracle_run(steps: usize, mode: Mode) -> (Latent, Latent) {
        let dims = [12, 2, 4, 4];
        let seed = 11;
        let mut rng = Rng::new(12);
        let target = lat(&mut rng, 2);
        let eps = NoiseDraw::new(seed, dims).eps_video;
        let oracle = ConstantVelocity {
            target: target.clone(),
            eps,
            patch: 2,
        };
        let cond = SampleConditions {
            z_raw: Some(lat(&mut rng, 2)),
            first: matches!(mode, Mode::FirstFrame | Mode::Fused).then(|| lat(&mut rng, 1)),
            style: matches!(mode, Mode::StyleImage | Mode::Fused).then(|| lat(&mut rng, 1)),
            style_mask: None,
        };
        let out =
            euler_sample_latent(&oracle, mode, dims, 2, &cond, &SamplerConfig { steps, seed }).unwrap();
        (out, target)
    }

    #[test]
    fn constant_field_oracle() {
        for mode in [Mode::Text, Mode::StyleImage, Mode::FirstFrame, Mode::Fused] {
            let (one, target) = oracle_run(1, mode);
            assert_eq!(one, target);
            for s in [4, 16] {
                let (z, _) = oracle_run(s, mode);
                assert!(z.max_abs_diff(&target) < 1e-5);
            }
        }
        assert_eq!(oracle_run(4, Mode::Fused).0, oracle_run(4, Mode::Fused).0);
    }
}
