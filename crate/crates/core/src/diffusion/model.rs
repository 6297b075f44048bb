use rand::Rng;

use super::{DiffusionConfig, NoiseSchedule};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Conv2d, Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Side of the per-frame embedding map produced by the condition encoder.
pub const EMBED_SIDE: usize = 8;
const TIME_DIM: usize = 32;

fn silu(s: &mut Session, x: Var) -> Result<Var> {
    s.silu(x)
}

/// `[N, C, H, W]` to `[N, H*W, C]`.
fn to_tokens(s: &mut Session, x: Var) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let flat = s.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
    s.permute(flat, &[0, 2, 1])
}

fn from_tokens(s: &mut Session, x: Var, h: usize, w: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let t = s.permute(x, &[0, 2, 1])?;
    s.reshape(t, &[sh[0], sh[2], h, w])
}

/// Attention across the frame axis only. `x` is `[B * F, C, H, W]` with the
/// frames of each clip contiguous; every spatial location attends over its
/// own `F` frames.
pub fn temporal_attention(s: &mut Session, block: &AttentionBlock, x: Var, frames: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if frames == 0 || n % frames != 0 {
        return Err(Error::shape(format!("{n} frames do not split into clips of {frames}")));
    }
    let b = n / frames;
    let hw = h * w;
    let t = s.reshape(x, &[b, frames, c, hw])?;
    let t = s.permute(t, &[0, 3, 1, 2])?;
    let t = s.reshape(t, &[b * hw, frames, c])?;
    let t = block.forward(s, t, None, None)?;
    let t = s.reshape(t, &[b, hw, frames, c])?;
    let t = s.permute(t, &[0, 2, 3, 1])?;
    s.reshape(t, &[n, c, h, w])
}

/// Conditions `[F, C_cond, 16, 16]` to per-frame embeddings `[F, D_e, 8, 8]`.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    layers: Vec<Conv2d>,
}

impl ConditionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cond_channels: usize, width: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Conv2d::same3(store, "cond_enc.0", cond_channels, width, rng),
                Conv2d::strided3(store, "cond_enc.1", width, width, (2, 2), rng),
                Conv2d::same3(store, "cond_enc.2", width, width, rng),
                Conv2d::same3(store, "cond_enc.3", width, embed_dim, rng),
            ],
        }
    }

    pub fn forward(&self, s: &mut Session, conditions: Var) -> Result<Var> {
        let mut h = conditions;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = silu(s, h)?;
            }
        }
        Ok(h)
    }
}

/// Embeddings to feature maps added into the denoiser's two down blocks.
#[derive(Clone, Debug)]
struct Guider {
    input: Conv2d,
    temporal: AttentionBlock,
    to_deep: Conv2d,
    to_mid: Conv2d,
    to_top: Conv2d,
}

/// Reference frame to key/value tokens for the spatial attention.
#[derive(Clone, Debug)]
struct ReferenceEncoder {
    layers: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Self {
        Self {
            a: Conv2d::same3(store, &format!("{name}.a"), ch, ch, rng),
            b: Conv2d::same3(store, &format!("{name}.b"), ch, ch, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.a.forward(s, x)?;
        let h = silu(s, h)?;
        let h = self.b.forward(s, h)?;
        s.add(x, h)
    }
}

/// Noise predictor plus the condition encoder, guider and reference path.
#[derive(Clone, Debug)]
pub struct DiffusionNet {
    pub config: DiffusionConfig,
    schedule: NoiseSchedule,
    pub cond_encoder: ConditionEncoder,
    null_embedding: ParamId,
    guider: Guider,
    reference: ReferenceEncoder,
    time_a: Linear,
    time_b: Linear,
    conv_in: Conv2d,
    down_mid: Conv2d,
    res_mid: ResBlock,
    down_deep: Conv2d,
    res_deep: ResBlock,
    spatial: AttentionBlock,
    temporal: AttentionBlock,
    up_mid: Conv2d,
    up_top: Conv2d,
    conv_out: Conv2d,
}

/// Sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// What the denoiser is conditioned on for one batch.
pub enum Conditioning {
    /// Raw condition rasters `[N, C_cond, h, w]` run through the encoder.
    Conditions(Tensor),
    /// Precomputed embeddings `[N, D_e, 8, 8]`.
    Embeddings(Tensor),
    /// The learned null embedding for every frame.
    Null,
    /// Conditions, with whole clips swapped for the null embedding where `drop[b]`.
    Dropped(Tensor, Vec<bool>),
}

impl DiffusionNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &DiffusionConfig, cond_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c0, c1, c2) = (config.channels[0], config.channels[1], config.channels[2]);
        let lc = config.latent_channels;
        let de = config.embed_dim;
        Ok(Self {
            config: config.clone(),
            schedule: NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?,
            cond_encoder: ConditionEncoder::new(store, cond_channels, config.encoder_width, de, rng),
            null_embedding: store.add("null_embedding", Tensor::zeros([de, EMBED_SIDE, EMBED_SIDE])),
            guider: Guider {
                input: Conv2d::same3(store, "guider.in", de, c2, rng),
                temporal: AttentionBlock::new(store, "guider.temporal", c2, rng),
                to_deep: Conv2d::same3(store, "guider.deep", c2, c2, rng),
                to_mid: Conv2d::same3(store, "guider.mid", c2, c1, rng),
                to_top: Conv2d::same3(store, "guider.top", c1, c0, rng),
            },
            reference: ReferenceEncoder {
                layers: vec![
                    Conv2d::strided3(store, "ref.0", lc, c0, (2, 2), rng),
                    Conv2d::strided3(store, "ref.1", c0, c1, (2, 2), rng),
                    Conv2d::same3(store, "ref.2", c1, c2, rng),
                ],
            },
            time_a: Linear::new(store, "time.a", TIME_DIM, 2 * TIME_DIM, rng),
            time_b: Linear::new(store, "time.b", 2 * TIME_DIM, c1 + c2, rng),
            conv_in: Conv2d::same3(store, "conv_in", lc, c0, rng),
            down_mid: Conv2d::strided3(store, "down.mid", c0, c1, (2, 2), rng),
            res_mid: ResBlock::new(store, "res.mid", c1, rng),
            down_deep: Conv2d::strided3(store, "down.deep", c1, c2, (2, 2), rng),
            res_deep: ResBlock::new(store, "res.deep", c2, rng),
            spatial: AttentionBlock::new(store, "attn.spatial", c2, rng),
            temporal: AttentionBlock::new(store, "attn.temporal", c2, rng),
            up_mid: Conv2d::same3(store, "up.mid", c2 + c1, c1, rng),
            up_top: Conv2d::same3(store, "up.top", c1 + c0, c0, rng),
            conv_out: Conv2d::same3(store, "conv_out", c0, lc, rng),
        })
    }

    /// Per-frame embeddings `[F, D_e, 8, 8]` of condition rasters.
    pub fn embed(&self, s: &mut Session, conditions: &Tensor) -> Result<Var> {
        let c = s.constant(conditions.clone());
        self.cond_encoder.forward(s, c)
    }

    fn null_tiled(&self, s: &mut Session, n: usize) -> Result<Var> {
        let z = s.param(self.null_embedding);
        let shape = s.shape(z).to_vec();
        let z = s.reshape(z, &[1, shape[0], shape[1], shape[2]])?;
        s.tile(z, n)
    }

    fn embedding_var(&self, s: &mut Session, cond: &Conditioning, n: usize) -> Result<Var> {
        let e = match cond {
            Conditioning::Conditions(c) => self.embed(s, c)?,
            Conditioning::Embeddings(e) => s.constant(e.clone()),
            Conditioning::Null => self.null_tiled(s, n)?,
            Conditioning::Dropped(c, drop) => {
                let e = self.embed(s, c)?;
                if !drop.iter().any(|&d| d) {
                    e
                } else {
                    let per_clip = n / drop.len();
                    let inner = self.config.embed_dim * EMBED_SIDE * EMBED_SIDE;
                    let keep = Tensor::from_fn([n, self.config.embed_dim, EMBED_SIDE, EMBED_SIDE], |i| {
                        if drop[i / inner / per_clip] {
                            0.0
                        } else {
                            1.0
                        }
                    });
                    let null = self.null_tiled(s, n)?;
                    let drop_mask = s.constant(keep.map(|k| 1.0 - k));
                    let keep = s.constant(keep);
                    let a = s.mul(e, keep)?;
                    let b = s.mul(null, drop_mask)?;
                    s.add(a, b)?
                }
            }
        };
        let es = s.shape(e).to_vec();
        let want = [n, self.config.embed_dim, EMBED_SIDE, EMBED_SIDE];
        if es != want {
            return Err(Error::shape(format!("embeddings {es:?}, expected {want:?}")));
        }
        Ok(e)
    }

    /// Predict the noise in `x_t` `[B * F, C, H, W]`.
    ///
    /// `t[b]` is the timestep of clip `b`; `reference` is `[B, C, H, W]`.
    /// The output is `sqrt(1 - alpha_bar_t) x_t + net(x_t)`, so at high noise
    /// the network only has to model the small residual.
    pub fn forward(&self, s: &mut Session, x_t: Var, t: &[usize], frames: usize, reference: &Tensor, cond: &Conditioning) -> Result<Var> {
        let xs = s.shape(x_t).to_vec();
        let n = xs[0];
        let b = t.len();
        if b * frames != n || reference.dim(0) != b {
            return Err(Error::shape(format!(
                "{n} frames for {b} clips of {frames}, reference batch {}",
                reference.dim(0)
            )));
        }
        let (c1, c2) = (self.config.channels[1], self.config.channels[2]);
        let (h, w) = (xs[2], xs[3]);
        let clip_of: Vec<usize> = (0..n).map(|i| i / frames).collect();

        // Time embedding, one row per clip then per frame.
        let temb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, TIME_DIM)).collect();
        let temb = s.constant(Tensor::new([b, TIME_DIM], temb)?);
        let temb = self.time_a.forward(s, temb)?;
        let temb = silu(s, temb)?;
        let temb = self.time_b.forward(s, temb)?;
        let temb = s.gather(temb, &clip_of)?;
        let t_mid = s.narrow(temb, 1, 0, c1)?;
        let t_mid = s.reshape(t_mid, &[n, c1, 1, 1])?;
        let t_mid = s.upsample(t_mid, h / 2, w / 2)?;
        let t_deep = s.narrow(temb, 1, c1, c2)?;
        let t_deep = s.reshape(t_deep, &[n, c2, 1, 1])?;
        let t_deep = s.upsample(t_deep, h / 4, w / 4)?;

        // Guider features.
        let e = self.embedding_var(s, cond, n)?;
        let g = self.guider.input.forward(s, e)?;
        let g = silu(s, g)?;
        let g = temporal_attention(s, &self.guider.temporal, g, frames)?;
        let g = s.upsample(g, h / 4 / EMBED_SIDE, w / 4 / EMBED_SIDE)?;
        let g_deep = self.guider.to_deep.forward(s, g)?;
        let g = s.upsample(g_deep, 2, 2)?;
        let g_mid = self.guider.to_mid.forward(s, g)?;
        let g = s.upsample(g_mid, 2, 2)?;
        let g_top = self.guider.to_top.forward(s, g)?;

        // Reference tokens, shared by every frame of a clip.
        let mut r = s.constant(reference.clone());
        for (i, layer) in self.reference.layers.iter().enumerate() {
            r = layer.forward(s, r)?;
            if i + 1 < self.reference.layers.len() {
                r = silu(s, r)?;
            }
        }
        let r = to_tokens(s, r)?;
        let rt = s.shape(r).to_vec();
        let r = s.reshape(r, &[b, rt[1] * rt[2]])?;
        let r = s.gather(r, &clip_of)?;
        let ref_tokens = s.reshape(r, &[n, rt[1], rt[2]])?;

        // Down path.
        let h0 = self.conv_in.forward(s, x_t)?;
        let h0 = s.add(h0, g_top)?;
        let h0 = silu(s, h0)?;
        let h1 = self.down_mid.forward(s, h0)?;
        let h1 = s.add(h1, g_mid)?;
        let h1 = s.add(h1, t_mid)?;
        let h1 = silu(s, h1)?;
        let h1 = self.res_mid.forward(s, h1)?;
        let h2 = self.down_deep.forward(s, h1)?;
        let h2 = s.add(h2, g_deep)?;
        let h2 = s.add(h2, t_deep)?;
        let h2 = silu(s, h2)?;
        let h2 = self.res_deep.forward(s, h2)?;

        // Spatial attention with reference tokens, then temporal attention.
        let tok = to_tokens(s, h2)?;
        let tok = self.spatial.forward(s, tok, Some(ref_tokens), None)?;
        let h2 = from_tokens(s, tok, h / 4, w / 4)?;
        let h2 = temporal_attention(s, &self.temporal, h2, frames)?;

        // Up path with skips.
        let u = s.upsample(h2, 2, 2)?;
        let u = s.concat(&[u, h1], 1)?;
        let u = self.up_mid.forward(s, u)?;
        let u = silu(s, u)?;
        let u = s.upsample(u, 2, 2)?;
        let u = s.concat(&[u, h0], 1)?;
        let u = self.up_top.forward(s, u)?;
        let u = silu(s, u)?;
        let out = self.conv_out.forward(s, u)?;
        let per_frame = xs[1] * h * w;
        let mut skip = Vec::with_capacity(n * per_frame);
        for &ti in t {
            let c = (1.0 - self.schedule.alpha_bar(ti)?).sqrt();
            skip.extend(std::iter::repeat_n(c, frames * per_frame));
        }
        let skip = s.constant(Tensor::new(xs.clone(), skip)?);
        let skip = s.mul(skip, x_t)?;
        s.add(out, skip)
    }
}
