//! Stage II: compress frozen condition embeddings into discrete tokens.
//!
//! The encoder halves height and width alternately, once per factor of two
//! in the compression rate, so an `h x w` embedding becomes `h * w / rate`
//! token vectors per frame.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamId, ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::quant::{vq_straight_through, Dequant, EmaCodebook, FsqSpec, TokenGrid, VqCodebook, DEFAULT_BETA};
use crate::rng;
use crate::tensor::Tensor;

pub const RATES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    #[default]
    Fsq,
    /// A learned codebook with `prod(levels)` entries of dimension `levels.len()`.
    Vq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsqAeConfig {
    pub rate: usize,
    pub levels: Vec<u32>,
    pub quantizer: Quantizer,
    pub dequant: Dequant,
    pub vq_beta: f64,
    /// EMA codebook updates for the VQ bottleneck; off when `None`.
    pub vq_ema_decay: Option<f64>,
    pub width: usize,
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
}

impl Default for FsqAeConfig {
    fn default() -> Self {
        Self {
            rate: 8,
            levels: vec![5, 5, 5, 5],
            quantizer: Quantizer::Fsq,
            dequant: Dequant::Normalized,
            vq_beta: DEFAULT_BETA,
            vq_ema_decay: None,
            width: 32,
            steps: 1500,
            batch_frames: 32,
            lr: 2e-3,
        }
    }
}

impl FsqAeConfig {
    pub fn spec(&self) -> Result<FsqSpec> {
        FsqSpec::new(self.levels.clone()).map_err(|e| Error::Config(format!("fsq levels: {e}")))
    }

    pub fn vocab_size(&self) -> Result<u32> {
        Ok(self.spec()?.vocab_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if !self.rate.is_power_of_two() {
            return Err(Error::Config(format!("compression rate {} is not a power of two", self.rate)));
        }
        if self.width == 0 || self.batch_frames == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("fsqae width, batch_frames and lr must be positive".into()));
        }
        if let Some(d) = self.vq_ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("vq_ema_decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Strides of the downsampling convs, height first.
    fn strides(&self) -> Vec<(usize, usize)> {
        (0..self.rate.trailing_zeros()).map(|i| if i % 2 == 0 { (2, 1) } else { (1, 2) }).collect()
    }

    /// Token grid side lengths for an `h x w` embedding.
    pub fn token_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut th, mut tw) = (h, w);
        for (sh, sw) in self.strides() {
            if th % sh != 0 || tw % sw != 0 {
                return Err(Error::Config(format!(
                    "compression rate {} does not divide a {h}x{w} embedding",
                    self.rate
                )));
            }
            th /= sh;
            tw /= sw;
        }
        Ok((th, tw))
    }
}

/// Autoencoder with an FSQ (or VQ) bottleneck over per-frame embeddings.
#[derive(Clone, Debug)]
pub struct FsqAutoencoder {
    pub config: FsqAeConfig,
    pub store: ParamStore,
    /// `[D_e, h, w]` of one embedding frame.
    embed_shape: [usize; 3],
    spec: FsqSpec,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    codebook: Option<ParamId>,
}

/// Loss curves of a Stage-II run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct FsqAeReport {
    /// Reconstruction MSE per step.
    pub losses: Vec<f64>,
    /// Total objective per step, including VQ terms.
    pub objective: Vec<f64>,
}

impl FsqAutoencoder {
    pub fn new<R: Rng + ?Sized>(config: &FsqAeConfig, embed_shape: [usize; 3], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [de, h, w] = embed_shape;
        config.token_grid(h, w)?;
        let spec = config.spec()?;
        let d = spec.channels();
        let wd = config.width;
        let mut store = ParamStore::new();
        let enc_in = Conv2d::same3(&mut store, "enc.in", de, wd, rng);
        let enc_down = config
            .strides()
            .iter()
            .enumerate()
            .map(|(i, &st)| Conv2d::strided3(&mut store, &format!("enc.down.{i}"), wd, wd, st, rng))
            .collect();
        let enc_out = Conv2d::pointwise(&mut store, "enc.out", wd, d, rng);
        let dec_in = Conv2d::same3(&mut store, "dec.in", d, wd, rng);
        let dec_up = (0..config.strides().len())
            .map(|i| Conv2d::same3(&mut store, &format!("dec.up.{i}"), wd, wd, rng))
            .collect();
        let dec_out = Conv2d::same3(&mut store, "dec.out", wd, de, rng);
        let codebook = match config.quantizer {
            Quantizer::Fsq => None,
            Quantizer::Vq => {
                let book = VqCodebook::uniform(spec.vocab_size() as usize, d, rng);
                Some(store.add("vq.codebook", book.entries().clone()))
            }
        };
        Ok(Self {
            config: config.clone(),
            store,
            embed_shape,
            spec,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
            codebook,
        })
    }

    pub fn embed_shape(&self) -> [usize; 3] {
        self.embed_shape
    }

    pub fn vocab_size(&self) -> u32 {
        self.spec.vocab_size()
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.config
            .token_grid(self.embed_shape[1], self.embed_shape[2])
            .expect("checked at construction")
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (h, w) = self.token_grid();
        h * w
    }

    fn check_input(&self, e: &Tensor) -> Result<()> {
        if e.rank() != 4 || e.shape()[1..] != self.embed_shape {
            return Err(Error::shape(format!(
                "embeddings {:?}, autoencoder expects [F, {}, {}, {}]",
                e.shape(),
                self.embed_shape[0],
                self.embed_shape[1],
                self.embed_shape[2]
            )));
        }
        Ok(())
    }

    /// Pre-quantization latents `[N, h', w', d]`.
    fn encode_latent(&self, s: &mut Session, e: Var) -> Result<Var> {
        let mut h = self.enc_in.forward(s, e)?;
        h = s.silu(h)?;
        for conv in &self.enc_down {
            h = conv.forward(s, h)?;
            h = s.silu(h)?;
        }
        let z = self.enc_out.forward(s, h)?;
        s.permute(z, &[0, 2, 3, 1])
    }

    /// Quantized latents `[N, h', w', d]` back to embeddings.
    fn decode_latent(&self, s: &mut Session, q: Var) -> Result<Var> {
        let q = s.permute(q, &[0, 3, 1, 2])?;
        let mut h = self.dec_in.forward(s, q)?;
        h = s.silu(h)?;
        for (conv, &(fh, fw)) in self.dec_up.iter().zip(self.config.strides().iter().rev()) {
            h = s.upsample(h, fh, fw)?;
            h = conv.forward(s, h)?;
            h = s.silu(h)?;
        }
        self.dec_out.forward(s, h)
    }

    /// Quantize on the tape. Returns quantized latents, packed indices and
    /// the VQ auxiliary loss (absent for FSQ).
    fn quantize(&self, s: &mut Session, z: Var, book: Option<Var>) -> Result<(Var, Vec<u32>, Option<Var>)> {
        match self.config.quantizer {
            Quantizer::Fsq => {
                let indices = self.spec.quantize_packed(s.value(z))?;
                let q = self.spec.straight_through(s, z, self.config.dequant)?;
                Ok((q, indices, None))
            }
            Quantizer::Vq => {
                let shape = s.shape(z).to_vec();
                let d = self.spec.channels();
                let flat = s.reshape(z, &[shape.iter().product::<usize>() / d, d])?;
                let book = book.ok_or_else(|| Error::state("VQ bottleneck without a codebook"))?;
                let (q, idx, aux) = vq_straight_through(s, flat, book, self.config.vq_beta)?;
                let q = s.reshape(q, &shape)?;
                Ok((q, idx.into_iter().map(|i| i as u32).collect(), Some(aux)))
            }
        }
    }

    fn codebook_var(&self, s: &mut Session, trainable: bool) -> Option<Var> {
        self.codebook.map(|id| {
            if trainable {
                s.param(id)
            } else {
                s.constant(self.store.get(id).clone())
            }
        })
    }

    /// Per-frame packed token indices of `e` `[F, D_e, h, w]`.
    pub fn encode_tokens(&self, e: &Tensor) -> Result<TokenGrid> {
        self.check_input(e)?;
        let mut s = Session::inference(&self.store);
        let x = s.constant(e.clone());
        let z = self.encode_latent(&mut s, x)?;
        let book = self.codebook_var(&mut s, false);
        let (_, indices, _) = self.quantize(&mut s, z, book)?;
        TokenGrid::new(self.tokens_per_frame(), indices)
    }

    /// Dequantized latents `[F, h', w', d]` for a token grid.
    fn lookup(&self, tokens: &TokenGrid) -> Result<Tensor> {
        if tokens.tokens_per_frame() != self.tokens_per_frame() {
            return Err(Error::shape(format!(
                "{} tokens per frame, autoencoder emits {}",
                tokens.tokens_per_frame(),
                self.tokens_per_frame()
            )));
        }
        let vocab = self.vocab_size();
        if let Some(bad) = tokens.indices().iter().find(|&&i| i >= vocab) {
            return Err(Error::arg(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let d = self.spec.channels();
        let mut data = Vec::with_capacity(tokens.indices().len() * d);
        for &i in tokens.indices() {
            match self.codebook {
                None => data.extend(self.spec.dequantize(&self.spec.unpack(i)?, self.config.dequant)?),
                Some(id) => {
                    let book = self.store.get(id);
                    data.extend_from_slice(&book.data()[i as usize * d..(i as usize + 1) * d]);
                }
            }
        }
        let (h, w) = self.token_grid();
        Tensor::new([tokens.frames(), h, w, d], data)
    }

    /// Embeddings `[F, D_e, h, w]` reconstructed from tokens.
    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<Tensor> {
        let q = self.lookup(tokens)?;
        if tokens.frames() == 0 {
            let [de, h, w] = self.embed_shape;
            return Ok(Tensor::zeros([0, de, h, w]));
        }
        let mut s = Session::inference(&self.store);
        let q = s.constant(q);
        let y = self.decode_latent(&mut s, q)?;
        Ok(s.value(y).clone())
    }

    /// Mean squared reconstruction error of `e` through the quantized bottleneck.
    pub fn reconstruction_mse(&self, e: &Tensor) -> Result<f64> {
        let back = self.decode_tokens(&self.encode_tokens(e)?)?;
        back.mse(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.to_named();
        let [de, h, w] = self.embed_shape;
        entries.push(("meta.embed_shape".into(), Tensor::new([3], vec![de as f64, h as f64, w as f64])?));
        checkpoint::write(path, &entries)
    }

    pub fn load(path: &Path, config: &FsqAeConfig) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let meta = checkpoint::find(&entries, "meta.embed_shape")?;
        if meta.len() != 3 {
            return Err(Error::Format("meta.embed_shape must hold three values".into()));
        }
        let m = meta.data();
        let shape = [m[0] as usize, m[1] as usize, m[2] as usize];
        let mut model = Self::new(config, shape, &mut rng::stream(0, 0))?;
        let params: Vec<_> = entries.into_iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
        model.store.load_named(&params)?;
        Ok(model)
    }
}

/// Train the autoencoder on embedding frames `[N, D_e, h, w]` produced by
/// the frozen Stage-I encoder.
pub fn train_fsqae(embeddings: &Tensor, config: &FsqAeConfig, seed: u64) -> Result<(FsqAutoencoder, FsqAeReport)> {
    if embeddings.rank() != 4 || embeddings.frames() == 0 {
        return Err(Error::state(format!("no embedding frames to train on ({:?})", embeddings.shape())));
    }
    let shape = [embeddings.dim(1), embeddings.dim(2), embeddings.dim(3)];
    let mut model = FsqAutoencoder::new(config, shape, &mut rng::stream(seed, 300))?;
    let mut batch_rng = rng::stream(seed, 301);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(config.lr));
    let mut ema = match (model.codebook, config.vq_ema_decay) {
        (Some(id), Some(decay)) => Some(EmaCodebook::new(model.store.get(id), decay)?),
        _ => None,
    };
    let mut report = FsqAeReport::default();
    let n = embeddings.frames();
    for _ in 0..config.steps {
        let picks: Vec<Tensor> = (0..config.batch_frames.min(n).max(1))
            .map(|_| embeddings.frame(batch_rng.random_range(0..n)))
            .collect();
        let x = Tensor::stack(&picks)?;
        let (grads, latents, indices) = {
            let mut s = Session::training(&model.store);
            let xv = s.constant(x);
            let z = model.encode_latent(&mut s, xv)?;
            let book = model.codebook_var(&mut s, ema.is_none());
            let (q, indices, aux) = model.quantize(&mut s, z, book)?;
            let y = model.decode_latent(&mut s, q)?;
            let recon = s.mse(y, xv)?;
            report.losses.push(s.value(recon).item()?);
            let loss = match aux {
                Some(aux) => s.add(recon, aux)?,
                None => recon,
            };
            report.objective.push(s.value(loss).item()?);
            let latents = ema.as_ref().map(|_| s.value(z).clone());
            (s.param_grads(loss)?, latents, indices)
        };
        opt.step(&mut model.store, &grads)?;
        if let (Some(ema), Some(z), Some(id)) = (ema.as_mut(), latents, model.codebook) {
            let d = model.spec.channels();
            let z = z.clone().reshape([z.len() / d, d])?;
            let idx: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
            ema.update(model.store.get_mut(id), &z, &idx)?;
        }
    }
    Ok((model, report))
}
