use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Conv2d, ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Video latent space of the diffusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CodecConfig {
    /// Latents are the pixels.
    #[default]
    Identity,
    /// A small convolutional autoencoder halving each spatial side.
    TinyAe { latent_channels: usize, steps: usize, lr: f64 },
}

impl CodecConfig {
    pub fn latent_channels(&self) -> usize {
        match self {
            CodecConfig::Identity => 1,
            CodecConfig::TinyAe { latent_channels, .. } => *latent_channels,
        }
    }

    pub fn downsample(&self) -> usize {
        match self {
            CodecConfig::Identity => 1,
            CodecConfig::TinyAe { .. } => 2,
        }
    }
}

#[derive(Clone, Debug)]
struct TinyAe {
    enc: [Conv2d; 2],
    dec: [Conv2d; 2],
}

#[derive(Clone, Debug)]
pub struct VideoCodec {
    pub config: CodecConfig,
    pub store: ParamStore,
    ae: Option<TinyAe>,
}

impl VideoCodec {
    pub fn new<R: Rng + ?Sized>(config: &CodecConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let ae = match config {
            CodecConfig::Identity => None,
            CodecConfig::TinyAe { latent_channels, .. } => Some(TinyAe {
                enc: [
                    Conv2d::strided3(&mut store, "codec.enc.0", 1, 8, (2, 2), rng),
                    Conv2d::same3(&mut store, "codec.enc.1", 8, *latent_channels, rng),
                ],
                dec: [
                    Conv2d::same3(&mut store, "codec.dec.0", *latent_channels, 8, rng),
                    Conv2d::same3(&mut store, "codec.dec.1", 8, 1, rng),
                ],
            }),
        };
        Self {
            config: config.clone(),
            store,
            ae,
        }
    }

    fn encode_var(&self, s: &mut Session, x: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let ae = self.ae.as_ref().expect("tiny AE");
        let h = ae.enc[0].forward(s, x)?;
        let h = s.silu(h)?;
        ae.enc[1].forward(s, h)
    }

    fn decode_var(&self, s: &mut Session, z: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
        let ae = self.ae.as_ref().expect("tiny AE");
        let h = s.upsample(z, 2, 2)?;
        let h = ae.dec[0].forward(s, h)?;
        let h = s.silu(h)?;
        ae.dec[1].forward(s, h)
    }

    /// Frames `[F, 1, H, W]` to latents.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        if self.ae.is_none() {
            return Ok(video.clone());
        }
        let mut s = Session::inference(&self.store);
        let x = s.constant(video.clone());
        let z = self.encode_var(&mut s, x)?;
        Ok(s.value(z).clone())
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        if self.ae.is_none() {
            return Ok(latents.clone());
        }
        let mut s = Session::inference(&self.store);
        let z = s.constant(latents.clone());
        let x = self.decode_var(&mut s, z)?;
        Ok(s.value(x).clone())
    }

    /// Fit the autoencoder on random batches of `frames` `[N, 1, H, W]`.
    /// Returns the per-step reconstruction losses; a no-op for the identity codec.
    pub fn fit<R: Rng + ?Sized>(&mut self, frames: &Tensor, batch: usize, rng: &mut R) -> Result<Vec<f64>> {
        let CodecConfig::TinyAe { steps, lr, .. } = self.config else {
            return Ok(Vec::new());
        };
        let mut opt = Adam::new(&self.store, AdamConfig::with_lr(lr));
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let picks: Vec<Tensor> = (0..batch).map(|_| frames.frame(rng.random_range(0..frames.frames()))).collect();
            let x = Tensor::stack(&picks)?;
            let grads = {
                let mut s = Session::training(&self.store);
                let xv = s.constant(x);
                let z = self.encode_var(&mut s, xv)?;
                let y = self.decode_var(&mut s, z)?;
                let loss = s.mse(y, xv)?;
                losses.push(s.value(loss).item()?);
                s.param_grads(loss)?
            };
            opt.step(&mut self.store, &grads)?;
        }
        Ok(losses)
    }
}
