//! The transformer: patch-token embedding, timestep and position embeddings,
//! text/style cross-attention, and token-routed LoRA adapters.
//!
//! Every adapted projection carries one shared down matrix and, in
//! token-specific mode, one up matrix per token type. A token's residual is
//! `scale · up[type] · down · x`, so a token only ever touches the up matrix
//! of its own type.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::Video;
use crate::conditioning::{ModelInput, TokenType};
use crate::error::{Error, Result};
use crate::metrics::{StyleDescriptor, DESCRIPTOR_LEN};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Floor on `1 - t` when turning a clean-latent prediction into a velocity.
pub const MIN_REMAINING_TIME: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraMode {
    TokenSpecific,
    Standard,
    Off,
}

impl LoraMode {
    pub fn name(self) -> &'static str {
        match self {
            LoraMode::TokenSpecific => "token_specific",
            LoraMode::Standard => "standard",
            LoraMode::Off => "off",
        }
    }

    /// Mask value of the style slab. The standard-LoRA arm marks style frames
    /// with -1 so a single up matrix can still tell them apart.
    pub fn style_mask(self) -> f32 {
        match self {
            LoraMode::Standard => -1.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub lora_rank: usize,
    pub lora_mode: LoraMode,
    pub lora_scale: f32,
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            blocks: 4,
            heads: 4,
            ffn_mult: 4,
            patch: 2,
            latent_channels: 12,
            lora_rank: 8,
            lora_mode: LoraMode::TokenSpecific,
            lora_scale: 1.0,
            vocab: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            return Err(Error::Invalid(format!(
                "lora rank {} must be in 1..={}",
                self.lora_rank, self.dim
            )));
        }
        if self.blocks == 0 || self.ffn_mult == 0 || self.patch == 0 || self.vocab == 0 {
            return Err(Error::Invalid("blocks, ffn_mult, patch and vocab must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of one input token: `(2·C_l + 4)·p²`.
    pub fn input_dim(&self) -> usize {
        (2 * self.latent_channels + crate::conditioning::MASK_CHANNELS) * self.patch * self.patch
    }

    /// Width of one predicted velocity token: `C_l·p²`.
    pub fn output_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }
}

/// Tag ids fed to cross-attention.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCondition {
    pub tags: Vec<usize>,
}

impl TextCondition {
    pub fn new(tags: Vec<usize>) -> Self {
        TextCondition { tags }
    }

    pub fn empty() -> Self {
        TextCondition::default()
    }
}

/// Global style vector of the reference image; zero when there is none.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalStyleFeature(pub Vec<f32>);

impl GlobalStyleFeature {
    pub fn zero() -> Self {
        GlobalStyleFeature(vec![0.0; DESCRIPTOR_LEN])
    }

    pub fn from_image(image: &Video) -> Self {
        GlobalStyleFeature(
            StyleDescriptor::of_frame(image, 0)
                .0
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Shared down projection plus type-indexed up projections.
///
/// Stored transposed for row-vector inputs: `down` is `D_in×r`, each up is `r×D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub ups: Vec<ParamId>,
    pub scale: f32,
}

impl LoraAdapter {
    fn up_for(&self, kind: TokenType) -> ParamId {
        if self.ups.len() == 1 {
            self.ups[0]
        } else {
            self.ups[kind.index()]
        }
    }

    pub fn param_count<T: Real>(&self, params: &ParamStore<T>) -> usize {
        params.num_elements(self.down) + self.ups.iter().map(|&u| params.num_elements(u)).sum::<usize>()
    }
}

/// Residual of one adapter for a single token, outside any tape.
pub fn lora_apply(
    params: &ParamStore<f32>,
    adapter: Option<&LoraAdapter>,
    x_in: &[f32],
    type_idx: usize,
) -> Result<Vec<f32>> {
    let kind = TokenType::from_index(type_idx)?;
    let Some(a) = adapter else {
        return Ok(Vec::new());
    };
    let down = params.value(a.down);
    let (d_in, r) = (down.shape()[0], down.shape()[1]);
    if x_in.len() != d_in {
        return Err(Error::shape("lora_apply", format!("input {} vs adapter {d_in}", x_in.len())));
    }
    let mut h = vec![0.0f32; r];
    for (i, &x) in x_in.iter().enumerate() {
        for j in 0..r {
            h[j] += x * down.data()[i * r + j];
        }
    }
    let up = params.value(a.up_for(kind));
    let d_out = up.shape()[1];
    let mut out = vec![0.0f32; d_out];
    for (j, &hj) in h.iter().enumerate() {
        for o in 0..d_out {
            out[o] += hj * up.data()[j * d_out + o];
        }
    }
    out.iter_mut().for_each(|v| *v *= a.scale);
    Ok(out)
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    lora: Option<LoraAdapter>,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Linear,
    time_in: Linear,
    time_out: Linear,
    text_table: ParamId,
    style_proj: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    out: Linear,
}

/// Contiguous token runs sharing one LoRA up matrix.
type Routing = [(Range<usize>, TokenType)];

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore<f32>,
    layout: Layout,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    params: ParamStore<f32>,
    rng: Rng,
    lora_rng: Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let std = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, &mut self.rng);
        self.params.add(name, t, true)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, adapted: bool) -> Linear {
        let w = self.weight(&format!("{name}.w"), fan_in, fan_out);
        let b = Some(self.params.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]), true));
        let lora = if adapted && self.cfg.lora_mode != LoraMode::Off {
            let r = self.cfg.lora_rank;
            let std = 1.0 / (fan_in as f64).sqrt();
            let down = self.params.add(
                &format!("{name}.lora.down"),
                Tensor::randn(&[fan_in, r], std, &mut self.lora_rng),
                true,
            );
            let n_up = if self.cfg.lora_mode == LoraMode::TokenSpecific { 3 } else { 1 };
            let ups = (0..n_up)
                .map(|i| self.params.add(&format!("{name}.lora.up{i}"), Tensor::zeros(&[r, fan_out]), true))
                .collect();
            Some(LoraAdapter {
                down,
                ups,
                scale: self.cfg.lora_scale,
            })
        } else {
            None
        };
        Linear { w, b, lora }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.params.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: self.params.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    fn attention(&mut self, name: &str, dim: usize, adapted: bool) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dim, dim, adapted),
            k: self.linear(&format!("{name}.k"), dim, dim, adapted),
            v: self.linear(&format!("{name}.v"), dim, dim, adapted),
            o: self.linear(&format!("{name}.o"), dim, dim, adapted),
        }
    }
}

/// Sinusoidal features of a scalar position.
fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Mutable forward state: the tape, parameter values, and an optional
/// parameter replaced by a tape variable (used by gradient checks).
struct Ctx<'a, T: Real> {
    tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    bound: Option<(ParamId, Var)>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        match self.bound {
            Some((b, v)) if b == id => v,
            _ => self.tape.param(self.params, id),
        }
    }

    fn norm(&mut self, x: Var, n: &Norm) -> Result<Var> {
        let g = self.p(n.gamma);
        let b = self.p(n.beta);
        self.tape.layer_norm(x, g, b)
    }

    fn lora(&mut self, x: Var, a: &LoraAdapter, routing: &Routing) -> Result<Var> {
        let down = self.p(a.down);
        let h = self.tape.matmul(x, down)?;
        let r = if a.ups.len() == 1 {
            let up = self.p(a.ups[0]);
            self.tape.matmul(h, up)?
        } else {
            let mut parts = Vec::with_capacity(routing.len());
            for (range, kind) in routing {
                let rows = if routing.len() == 1 {
                    h
                } else {
                    self.tape.slice(h, 0, range.start, range.end)?
                };
                let up = self.p(a.up_for(*kind));
                parts.push(self.tape.matmul(rows, up)?);
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                self.tape.concat(&parts, 0)?
            }
        };
        if a.scale == 1.0 {
            Ok(r)
        } else {
            self.tape.scale(r, T::of_f32(a.scale))
        }
    }

    fn linear(&mut self, x: Var, l: &Linear, routing: Option<&Routing>) -> Result<Var> {
        let w = self.p(l.w);
        let mut y = self.tape.matmul(x, w)?;
        if let Some(b) = l.b {
            let b = self.p(b);
            y = self.tape.add(y, b)?;
        }
        if let (Some(a), Some(routing)) = (&l.lora, routing) {
            let r = self.lora(x, a, routing)?;
            y = self.tape.add(y, r)?;
        }
        Ok(y)
    }

    fn attention(
        &mut self,
        a: &Attention,
        heads: usize,
        x: Var,
        context: Var,
        routing: Option<&Routing>,
    ) -> Result<Var> {
        let q = self.linear(x, &a.q, routing)?;
        let k = self.linear(context, &a.k, routing)?;
        let v = self.linear(context, &a.v, routing)?;
        let dim = self.tape.shape(q)[1];
        let dh = dim / heads;
        let scale = T::of_f64(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice(q, 1, s, e)?,
                    self.tape.slice(k, 1, s, e)?,
                    self.tape.slice(v, 1, s, e)?,
                )
            };
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, scale)?;
            let probs = self.tape.softmax(scores)?;
            outs.push(self.tape.matmul(probs, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.tape.concat(&outs, 1)? };
        self.linear(joined, &a.o, routing)
    }
}

impl Model {
    /// Seeded initialization. LoRA up matrices start at zero, so the adapted
    /// model initially equals the base model; base weights are frozen unless
    /// LoRA is off.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg: &cfg,
            params: ParamStore::new(),
            rng: Rng::derive(seed, 1),
            lora_rng: Rng::derive(seed, 2),
        };
        let d = cfg.dim;
        let embed = b.linear("embed", cfg.input_dim(), d, false);
        let time_in = b.linear("time.in", d, d, false);
        let time_out = b.linear("time.out", d, d, false);
        let text_table = {
            let t = Tensor::randn(&[cfg.vocab, d], 1.0, &mut b.rng);
            b.params.add("text.table", t, true)
        };
        let style_proj = b.weight("style.proj", DESCRIPTOR_LEN, d);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let name = format!("block{i}");
            blocks.push(Block {
                ln_self: b.norm(&format!("{name}.ln_self"), d),
                self_attn: b.attention(&format!("{name}.self"), d, true),
                ln_cross: b.norm(&format!("{name}.ln_cross"), d),
                cross_attn: b.attention(&format!("{name}.cross"), d, false),
                ln_ffn: b.norm(&format!("{name}.ln_ffn"), d),
                ffn_in: b.linear(&format!("{name}.ffn.in"), d, d * cfg.ffn_mult, true),
                ffn_out: b.linear(&format!("{name}.ffn.out"), d * cfg.ffn_mult, d, true),
            });
        }
        let final_norm = b.norm("final.ln", d);
        let out = b.linear("out", d, cfg.output_dim(), false);
        let mut params = b.params;
        let layout = Layout {
            embed,
            time_in,
            time_out,
            text_table,
            style_proj,
            blocks,
            final_norm,
            out,
        };
        if cfg.lora_mode != LoraMode::Off {
            for id in params.ids().collect::<Vec<_>>() {
                let trainable = is_adapter_param(params.name(id));
                params.set_trainable(id, trainable);
            }
        }
        Ok(Model { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// All LoRA adapters in a fixed order.
    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        let mut out = Vec::new();
        for b in &self.layout.blocks {
            for l in [
                &b.self_attn.q,
                &b.self_attn.k,
                &b.self_attn.v,
                &b.self_attn.o,
                &b.ffn_in,
                &b.ffn_out,
            ] {
                out.extend(l.lora.as_ref());
            }
        }
        out
    }

    /// Names of base weights (everything that is not adapter-class).
    pub fn base_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| !is_adapter_param(self.params.name(id)))
            .collect()
    }

    /// Copies every same-named, same-shaped tensor from `source`.
    pub fn load_matching(&mut self, source: &ParamStore<f32>) -> usize {
        let mut n = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if let Some(src) = source.id(&name) {
                if source.value(src).shape() == self.params.value(id).shape() {
                    self.params.value_mut(id).data_mut().copy_from_slice(source.value(src).data());
                    n += 1;
                }
            }
        }
        n
    }

    pub fn timestep_embed(&self, t: f32) -> Result<Vec<f32>> {
        check_time(t)?;
        let mut tape = Tape::<f32>::new();
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &self.params,
            bound: None,
        };
        let v = time_embedding(&mut ctx, &self.layout, self.cfg.dim, t)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Velocity prediction for every token, shape `T × C_l·p²`. The head
    /// predicts the clean latent `ẑ`; the velocity is `(ẑ − noisy) / max(1 − t, MIN_REMAINING_TIME)`.
    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: &ModelInput,
        t: f32,
        text: &TextCondition,
        g: &GlobalStyleFeature,
    ) -> Result<Var> {
        self.forward_bound(params, tape, None, x, t, text, g)
    }

    /// As [`Model::forward`], with one parameter replaced by a tape variable.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_bound<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &mut Tape<T>,
        bound: Option<(ParamId, Var)>,
        x: &ModelInput,
        t: f32,
        text: &TextCondition,
        g: &GlobalStyleFeature,
    ) -> Result<Var> {
        check_time(t)?;
        let cfg = &self.cfg;
        let lay = &self.layout;
        if x.tokens.dim() != cfg.input_dim() {
            return Err(Error::shape(
                "forward",
                format!("token dim {} vs model input dim {}", x.tokens.dim(), cfg.input_dim()),
            ));
        }
        if g.0.len() != DESCRIPTOR_LEN {
            return Err(Error::shape(
                "forward",
                format!("style feature length {} vs {DESCRIPTOR_LEN}", g.0.len()),
            ));
        }
        if let Some(&bad) = text.tags.iter().find(|&&tag| tag >= cfg.vocab) {
            return Err(Error::Invalid(format!("tag {bad} outside vocab {}", cfg.vocab)));
        }
        let n = x.len();
        let d = cfg.dim;
        let mut ctx = Ctx { tape, params, bound };

        let tokens = ctx.tape.constant(x.tokens.tokens.cast());
        let mut h = ctx.linear(tokens, &lay.embed, None)?;

        let mut pos = Vec::with_capacity(n * d);
        for i in 0..n {
            pos.extend(sinusoid(x.frame_position[i] as f64, d / 2).into_iter().map(T::of_f64));
            pos.extend(sinusoid(x.tokens.spatial_index[i] as f64, d - d / 2).into_iter().map(T::of_f64));
        }
        let pos = ctx.tape.constant(Tensor::new(vec![n, d], pos)?);
        h = ctx.tape.add(h, pos)?;
        let temb = time_embedding(&mut ctx, lay, d, t)?;
        h = ctx.tape.add(h, temb)?;

        let mut ctx_parts = Vec::with_capacity(2);
        if !text.tags.is_empty() {
            let mut onehot = vec![T::zero(); text.tags.len() * cfg.vocab];
            for (i, &tag) in text.tags.iter().enumerate() {
                onehot[i * cfg.vocab + tag] = T::one();
            }
            let sel = ctx.tape.constant(Tensor::new(vec![text.tags.len(), cfg.vocab], onehot)?);
            let table = ctx.p(lay.text_table);
            ctx_parts.push(ctx.tape.matmul(sel, table)?);
        }
        let gv = ctx
            .tape
            .constant(Tensor::new(vec![1, DESCRIPTOR_LEN], g.0.iter().map(|&v| T::of_f32(v)).collect())?);
        let proj = ctx.p(lay.style_proj);
        ctx_parts.push(ctx.tape.matmul(gv, proj)?);
        let context = if ctx_parts.len() == 1 {
            ctx_parts[0]
        } else {
            ctx.tape.concat(&ctx_parts, 0)?
        };

        let routing = x.type_segments();
        for b in &lay.blocks {
            let a = ctx.norm(h, &b.ln_self)?;
            let o = ctx.attention(&b.self_attn, cfg.heads, a, a, Some(&routing))?;
            h = ctx.tape.add(h, o)?;

            let a = ctx.norm(h, &b.ln_cross)?;
            let o = ctx.attention(&b.cross_attn, cfg.heads, a, context, None)?;
            h = ctx.tape.add(h, o)?;

            let a = ctx.norm(h, &b.ln_ffn)?;
            let f = ctx.linear(a, &b.ffn_in, Some(&routing))?;
            let f = ctx.tape.gelu(f)?;
            let f = ctx.linear(f, &b.ffn_out, Some(&routing))?;
            h = ctx.tape.add(h, f)?;
        }
        let h = ctx.norm(h, &lay.final_norm)?;
        let out = ctx.linear(h, &lay.out, None)?;
        // The head predicts the clean latent; the velocity follows from the
        // noisy channels, which lead every token.
        let width = cfg.output_dim();
        let dim = x.tokens.dim();
        let noisy: Vec<T> = (0..n)
            .flat_map(|i| x.tokens.tokens.data()[i * dim..i * dim + width].iter().map(|&v| T::of_f32(v)))
            .collect();
        let noisy = ctx.tape.constant(Tensor::new(vec![n, width], noisy)?);
        let diff = ctx.tape.sub(out, noisy)?;
        ctx.tape.scale(diff, T::of_f64(1.0 / (1.0 - t as f64).max(MIN_REMAINING_TIME)))
    }

    /// Inference helper: velocity tokens as `f32`.
    pub fn predict(
        &self,
        x: &ModelInput,
        t: f32,
        text: &TextCondition,
        g: &GlobalStyleFeature,
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = self.forward(&self.params, &mut tape, x, t, text, g)?;
        Ok(tape.value(out).clone())
    }
}

fn time_embedding<T: Real>(ctx: &mut Ctx<'_, T>, lay: &Layout, d: usize, t: f32) -> Result<Var> {
    let feats: Vec<T> = sinusoid(t as f64 * 1000.0, d).into_iter().map(T::of_f64).collect();
    let tv = ctx.tape.constant(Tensor::new(vec![1, d], feats)?);
    let hidden = ctx.linear(tv, &lay.time_in, None)?;
    let hidden = ctx.tape.gelu(hidden)?;
    let out = ctx.linear(hidden, &lay.time_out, None)?;
    ctx.tape.reshape(out, &[d])
}

fn check_time(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Parameters trained alongside LoRA: the adapters themselves plus the
/// text table, style projection and timestep MLP.
pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".lora.") || name.starts_with("text.") || name.starts_with("style.") || name.starts_with("time.")
}
