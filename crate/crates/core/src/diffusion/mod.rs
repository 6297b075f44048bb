//! Stage I: condition encoder and conditional video diffusion.

mod codec;
mod model;
mod schedule;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{Corpus, COND_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;

pub use codec::{CodecConfig, VideoCodec};
pub use model::{temporal_attention, timestep_embedding, ConditionEncoder, Conditioning, DiffusionNet, EMBED_SIDE};
pub use schedule::{ddim_sample, gaussian, guide, NoiseSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channels of the per-frame condition embedding `e_t`.
    pub embed_dim: usize,
    pub encoder_width: usize,
    /// Denoiser widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub codec: CodecConfig,
    #[serde(skip)]
    pub latent_channels: usize,
    /// Affine map from codec latents to diffusion space: `z = (x - shift) * scale`.
    pub data_shift: f64,
    pub data_scale: f64,
    pub clip_frames: usize,
    pub batch_clips: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub cfg_dropout: f64,
    pub cond_aug_p: f64,
    pub ddim_steps: usize,
    pub guidance: f64,
    /// Clamp predicted clean samples to the image of `[0, 1]` during DDIM.
    pub clip_sample: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            embed_dim: 8,
            encoder_width: 16,
            channels: [8, 16, 32],
            codec: CodecConfig::Identity,
            latent_channels: 1,
            data_shift: 0.15,
            data_scale: 3.0,
            clip_frames: 4,
            batch_clips: 2,
            train_steps: 2500,
            lr: 2e-3,
            cfg_dropout: 0.1,
            cond_aug_p: 1e-3,
            ddim_steps: 50,
            guidance: 3.5,
            clip_sample: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("diffusion: {m}")));
        if self.embed_dim == 0 || self.encoder_width == 0 || self.channels.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.clip_frames == 0 || self.batch_clips == 0 {
            return bad("clip_frames and batch_clips must be positive".into());
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.timesteps {
            return bad(format!("ddim_steps {} outside 1..={}", self.ddim_steps, self.timesteps));
        }
        for (name, p) in [("cfg_dropout", self.cfg_dropout), ("cond_aug_p", self.cond_aug_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.guidance >= 0.0) || !(self.lr > 0.0) || !(self.data_scale > 0.0) {
            return bad("guidance, lr and data_scale must be positive".into());
        }
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)?;
        Ok(())
    }

    fn resolved(&self) -> Self {
        Self {
            latent_channels: self.codec.latent_channels(),
            ..self.clone()
        }
    }
}

/// Replace each frame of `frames` `[F, ...]` with a uniformly drawn donor
/// frame with probability `p`. Returns the result and the replaced count.
pub fn condition_augment<R: Rng + ?Sized>(frames: &Tensor, p: f64, donors: &[&[f64]], rng: &mut R) -> Result<(Tensor, usize)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("augmentation probability {p}")));
    }
    if p == 0.0 {
        return Ok((frames.clone(), 0));
    }
    if donors.is_empty() {
        return Err(Error::state("condition augmentation with an empty donor pool"));
    }
    let width: usize = frames.frame_shape().iter().product();
    let mut out = frames.clone();
    let mut replaced = 0;
    for f in 0..frames.frames() {
        if rng.random_bool(p) {
            let d = donors[rng.random_range(0..donors.len())];
            if d.len() != width {
                return Err(Error::shape("donor frame size"));
            }
            out.data_mut()[f * width..(f + 1) * width].copy_from_slice(d);
            replaced += 1;
        }
    }
    Ok((out, replaced))
}

/// A trained Stage-I stack.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub net: DiffusionNet,
    pub store: ParamStore,
    pub codec: VideoCodec,
    pub schedule: NoiseSchedule,
}

/// One training step's batch, built from a corpus.
struct Batch {
    latents: Tensor,
    conditions: Tensor,
    reference: Tensor,
}

impl DiffusionModel {
    pub fn init(config: &DiffusionConfig, seed: u64) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let mut r = rng::stream(seed, 100);
        let mut store = ParamStore::new();
        let net = DiffusionNet::new(&mut store, &config, COND_CHANNELS, &mut r)?;
        let codec = VideoCodec::new(&config.codec, &mut r);
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            net,
            store,
            codec,
            schedule,
        })
    }

    fn to_diffusion_space(&self, latents: &Tensor) -> Tensor {
        let (a, b) = (self.config.data_shift, self.config.data_scale);
        latents.map(|x| (x - a) * b)
    }

    fn from_diffusion_space(&self, z: &Tensor) -> Tensor {
        let (a, b) = (self.config.data_shift, self.config.data_scale);
        z.map(|x| x / b + a)
    }

    fn clip_range(&self) -> Option<(f64, f64)> {
        let (a, b) = (self.config.data_shift, self.config.data_scale);
        self.config.clip_sample.then(|| ((0.0 - a) * b, (1.0 - a) * b))
    }

    pub fn encode_video(&self, video: &Tensor) -> Result<Tensor> {
        self.codec.encode(video)
    }

    /// Latents back to frames, clipped to `[0, 1]`.
    pub fn decode_video(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(self.codec.decode(latents)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Per-frame condition embeddings `[F, D_e, 8, 8]`.
    pub fn embed_conditions(&self, conditions: &Tensor) -> Result<Tensor> {
        let mut out = Vec::new();
        for start in (0..conditions.frames()).step_by(64) {
            let len = 64.min(conditions.frames() - start);
            let chunk = conditions.narrow_frames(start, len)?;
            let mut s = Session::inference(&self.store);
            let e = self.net.embed(&mut s, &chunk)?;
            out.push(s.value(e).clone());
        }
        Tensor::cat_frames(&out)
    }

    pub fn null_conditioning(&self) -> Conditioning {
        Conditioning::Null
    }

    /// Noise prediction for one clip at one timestep.
    pub fn predict_noise(&self, z_t: &Tensor, t: usize, reference: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let x = s.constant(z_t.clone());
        let frames = z_t.frames();
        let r = reference.clone().reshape(prepend(reference.shape()))?;
        let eps = self.net.forward(&mut s, x, &[t], frames, &r, cond)?;
        Ok(s.value(eps).clone())
    }

    /// DDIM with classifier-free guidance for one video.
    ///
    /// `reference` is a `[1, H, W]` frame, `embeddings` `[F, D_e, 8, 8]`.
    pub fn sample(&self, reference: &Tensor, embeddings: &Tensor, steps: usize, guidance: f64, seed: u64) -> Result<Tensor> {
        let f = embeddings.frames();
        if f == 0 {
            return Err(Error::arg("no frames to sample"));
        }
        let ref_latent = self.to_diffusion_space(&self.codec.encode(&reference.clone().reshape(prepend(reference.shape()))?)?);
        let ref_latent = ref_latent.clone().reshape(ref_latent.shape()[1..].to_vec())?;
        let lat = self.latent_shape(reference)?;
        let mut shape = vec![f];
        shape.extend(lat);
        let noise = gaussian(&shape, &mut rng::stream(seed, 200));
        let cond = Conditioning::Embeddings(embeddings.clone());
        let z = ddim_sample(&self.schedule, steps, guidance, self.clip_range(), noise, |x, t, conditional| {
            if conditional {
                self.predict_noise(x, t, &ref_latent, &cond)
            } else {
                self.predict_noise(x, t, &ref_latent, &Conditioning::Null)
            }
        })?;
        self.decode_video(&self.from_diffusion_space(&z))
    }

    fn latent_shape(&self, reference: &Tensor) -> Result<Vec<usize>> {
        let s = reference.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape(format!("reference frame {s:?}, expected [1, H, W]")));
        }
        let d = self.config.codec.downsample();
        Ok(vec![self.config.latent_channels, s[1] / d, s[2] / d])
    }

    fn batch<R: Rng + ?Sized>(&self, corpus: &Corpus, rng: &mut R) -> Result<Batch> {
        let clip = self.config.clip_frames;
        let mut lat = Vec::new();
        let mut cond = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..self.config.batch_clips {
            let s = &corpus.samples[rng.random_range(0..corpus.samples.len())];
            let f = s.video.frames();
            let start = if f > clip { rng.random_range(0..=f - clip) } else { 0 };
            let order: Vec<usize> = (0..clip).map(|k| (start + k).min(f - 1)).collect();
            for &i in &order {
                lat.push(s.video.frame(i));
                cond.push(s.conditions.frame(i));
            }
            refs.push(s.reference.clone());
        }
        let video = Tensor::stack(&lat)?;
        let reference = Tensor::stack(&refs)?;
        Ok(Batch {
            latents: self.to_diffusion_space(&self.codec.encode(&video)?),
            conditions: Tensor::stack(&cond)?,
            reference: self.to_diffusion_space(&self.codec.encode(&reference)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.to_named();
        entries.extend(self.codec.store.to_named());
        checkpoint::write(path, &entries)
    }

    pub fn load(path: &Path, config: &DiffusionConfig) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        let entries = checkpoint::read(path)?;
        let (codec, net): (Vec<_>, Vec<_>) = entries.into_iter().partition(|(n, _)| n.starts_with("codec."));
        model.store.load_named(&net)?;
        model.codec.store.load_named(&codec)?;
        Ok(model)
    }
}

fn prepend(shape: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(shape);
    v
}

/// Loss curve and augmentation statistics of a Stage-I run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DiffusionReport {
    pub losses: Vec<f64>,
    pub codec_losses: Vec<f64>,
    pub replaced_frames: usize,
    pub total_frames: usize,
}

/// Train the condition encoder and denoiser jointly on the noise-prediction
/// loss. Condition frames are augmented with donors from the whole corpus;
/// since the encoder is per-frame this equals replacing embedding frames.
pub fn train_diffusion(corpus: &Corpus, config: &DiffusionConfig, seed: u64) -> Result<(DiffusionModel, DiffusionReport)> {
    if corpus.samples.is_empty() {
        return Err(Error::state("empty corpus"));
    }
    let mut model = DiffusionModel::init(config, seed)?;
    let mut report = DiffusionReport::default();
    let all_frames: Vec<Tensor> = corpus.samples.iter().map(|s| s.video.clone()).collect();
    let all_frames = Tensor::cat_frames(&all_frames)?;
    report.codec_losses = model.codec.fit(&all_frames, 16, &mut rng::stream(seed, 101))?;
    let donors: Vec<&[f64]> = corpus
        .samples
        .iter()
        .flat_map(|s| (0..s.conditions.frames()).map(move |i| s.conditions.frame_data(i)))
        .collect();
    let mut batch_rng = rng::stream(seed, 102);
    let mut noise_rng = rng::stream(seed, 103);
    let mut aug_rng = rng::stream(seed, 104);
    let mut drop_rng = rng::stream(seed, 105);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(model.config.lr));
    let clips = model.config.batch_clips;
    for _ in 0..model.config.train_steps {
        let batch = model.batch(corpus, &mut batch_rng)?;
        let (conditions, replaced) = condition_augment(&batch.conditions, model.config.cond_aug_p, &donors, &mut aug_rng)?;
        report.replaced_frames += replaced;
        report.total_frames += conditions.frames();
        let t: Vec<usize> = (0..clips).map(|_| model.schedule.sample_t(&mut noise_rng)).collect();
        let eps = gaussian(batch.latents.shape(), &mut noise_rng);
        let per_clip = batch.latents.frames() / clips;
        let mut noisy = Vec::with_capacity(clips);
        for (b, &tb) in t.iter().enumerate() {
            let z0 = batch.latents.narrow_frames(b * per_clip, per_clip)?;
            let e = eps.narrow_frames(b * per_clip, per_clip)?;
            noisy.push(model.schedule.add_noise(&z0, &e, tb)?);
        }
        let z_t = Tensor::cat_frames(&noisy)?;
        let drop: Vec<bool> = (0..clips).map(|_| drop_rng.random_bool(model.config.cfg_dropout)).collect();
        let grads = {
            let mut s = Session::training(&model.store);
            let x = s.constant(z_t);
            let pred = model.net.forward(
                &mut s,
                x,
                &t,
                model.config.clip_frames,
                &batch.reference,
                &Conditioning::Dropped(conditions, drop),
            )?;
            let target = s.constant(eps);
            let loss = s.mse(pred, target)?;
            report.losses.push(s.value(loss).item()?);
            s.param_grads(loss)?
        };
        opt.step(&mut model.store, &grads)?;
    }
    Ok((model, report))
}
