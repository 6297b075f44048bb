//! Stage III: autoregressive translation from gloss sentences to token grids.
//!
//! The sequence fed to the causal backbone is the gloss prefix followed by
//! one mixed hidden state per frame. The prediction for frame `i` is read at
//! the position just before it, so frame 0 depends on the prefix alone and
//! frame `F` carries the stop decision.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, AttentionBlock, Embedding, LayerNorm, Linear, ParamStore, Session};
use crate::optim::{Adam, AdamConfig};
use crate::quant::TokenGrid;
use crate::rng;
use crate::tensor::Tensor;

const CONTINUE: usize = 0;
const STOP: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorConfig {
    pub d_model: usize,
    pub layers: usize,
    /// Width of each token embedding before the frame mixer.
    pub token_dim: usize,
    /// Width of each head's attention.
    pub head_dim: usize,
    pub max_positions: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Scheduled-sampling replacement ratio for input tokens.
    pub sched_sampling: f64,
    pub eval_every: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            token_dim: 16,
            head_dim: 32,
            max_positions: 128,
            steps: 600,
            batch: 8,
            lr: 1e-3,
            sched_sampling: 0.4,
            eval_every: 100,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.token_dim == 0 || self.head_dim == 0 {
            return Err(Error::Config("translator widths and depth must be positive".into()));
        }
        if self.max_positions < 2 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("translator max_positions, batch and lr out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.sched_sampling) {
            return Err(Error::Config(format!("sched_sampling {} outside [0, 1]", self.sched_sampling)));
        }
        Ok(())
    }
}

/// Replace each token independently with probability `r` by a uniform draw
/// from the vocabulary. The draw may equal the original token. Returns the
/// corrupted grid and the number of draws made.
pub fn scheduled_sampling_corrupt<R: Rng + ?Sized>(grid: &TokenGrid, r: f64, vocab: u32, rng: &mut R) -> Result<(TokenGrid, usize)> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::arg(format!("sampling ratio {r} outside [0, 1]")));
    }
    if vocab == 0 {
        return Err(Error::arg("empty vocabulary"));
    }
    let mut drawn = 0;
    let indices = grid
        .indices()
        .iter()
        .map(|&t| {
            if r > 0.0 && rng.random_bool(r) {
                drawn += 1;
                rng.random_range(0..vocab)
            } else {
                t
            }
        })
        .collect();
    Ok((TokenGrid::new(grid.tokens_per_frame(), indices)?, drawn))
}

/// One training pair: gloss ids and the Stage-II tokens of the sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub glosses: Vec<usize>,
    pub tokens: TokenGrid,
}

#[derive(Clone, Debug)]
struct Block {
    attn: AttentionBlock,
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            attn: AttentionBlock::new(store, &format!("{name}.attn"), d, rng),
            norm: LayerNorm::new(store, &format!("{name}.mlp_norm"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, rng),
        }
    }

    fn forward(&self, s: &mut Session, x: Var, mask: Var) -> Result<Var> {
        let x = self.attn.forward(s, x, None, Some(mask))?;
        let h = self.norm.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.add(x, h)
    }
}

/// One token position's head: a narrow causal attention over the backbone
/// states, then a projection to vocabulary logits.
#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    out: Linear,
}

impl Head {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, dh: usize, vocab: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, dh, rng),
            k: Linear::new(store, &format!("{name}.k"), d, dh, rng),
            v: Linear::new(store, &format!("{name}.v"), d, dh, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dh, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, vocab, rng),
        }
    }

    /// `h` is `[B, N, D]`; returns `[P, V]` logits at the flat rows `predict`.
    /// Keys and values span every position, everything after the attention
    /// is row-wise and so only runs where a prediction is read.
    fn forward(&self, s: &mut Session, h: Var, flat_h: Var, mask: Var, predict: &[usize]) -> Result<Var> {
        let q = self.q.forward(s, h)?;
        let k = self.k.forward(s, h)?;
        let v = self.v.forward(s, h)?;
        let a = s.attention(q, k, v, Some(mask))?;
        let sh = s.shape(a).to_vec();
        let a = s.reshape(a, &[sh[0] * sh[1], sh[2]])?;
        let a = s.gather(a, predict)?;
        let a = self.proj.forward(s, a)?;
        let x = s.add(flat_h, a)?;
        self.out.forward(s, x)
    }
}

/// Teacher-forced outputs for one sentence: `F + 1` rows per head.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogits {
    /// One `[F + 1, vocab]` tensor per token position.
    pub tokens: Vec<Tensor>,
    /// `[F + 1, 2]` continue/stop logits.
    pub stop: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_frames: usize,
    pub decoding: Decoding,
    /// Never stop before `max_frames`.
    pub suppress_eos: bool,
}

impl GenerateOptions {
    pub fn greedy(max_frames: usize) -> Self {
        Self {
            max_frames,
            decoding: Decoding::Greedy,
            suppress_eos: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub config: TranslatorConfig,
    pub store: ParamStore,
    vocab: u32,
    tokens_per_frame: usize,
    glosses: usize,
    gloss_emb: Embedding,
    pos_emb: Embedding,
    tok_emb: Embedding,
    mixer: Linear,
    mixer_norm: LayerNorm,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    heads: Vec<Head>,
    stop: Linear,
}

/// Indices needed to lay one batch out as `[B, N, D]`.
struct Layout {
    batch: usize,
    len: usize,
    /// Row of each position in `[gloss rows; frame rows; zero row]`.
    rows: Vec<usize>,
    positions: Vec<usize>,
    /// Flat `b * len + n` of every prediction, grouped by sequence.
    predict: Vec<usize>,
}

impl Translator {
    pub fn new(config: &TranslatorConfig, vocab: u32, tokens_per_frame: usize, glosses: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab == 0 || tokens_per_frame == 0 || glosses == 0 {
            return Err(Error::Config("translator needs a vocabulary, tokens and glosses".into()));
        }
        let mut r = rng::stream(seed, 400);
        let rng = &mut r;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let v = vocab as usize;
        let gloss_emb = Embedding::new(&mut store, "gloss", glosses, d, rng);
        let pos_emb = Embedding::new(&mut store, "pos", config.max_positions, d, rng);
        let tok_emb = Embedding::new(&mut store, "token", v, config.token_dim, rng);
        let mixer = Linear::new(&mut store, "mixer", tokens_per_frame * config.token_dim, d, rng);
        let mixer_norm = LayerNorm::new(&mut store, "mixer.norm", d);
        let blocks = (0..config.layers).map(|i| Block::new(&mut store, &format!("block.{i}"), d, rng)).collect();
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let heads = (0..tokens_per_frame)
            .map(|k| Head::new(&mut store, &format!("head.{k}"), d, config.head_dim, v, rng))
            .collect();
        let stop = Linear::new(&mut store, "stop", d, 2, rng);
        Ok(Self {
            config: config.clone(),
            store,
            vocab,
            tokens_per_frame,
            glosses,
            gloss_emb,
            pos_emb,
            tok_emb,
            mixer,
            mixer_norm,
            blocks,
            final_norm,
            heads,
            stop,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn glosses(&self) -> usize {
        self.glosses
    }

    fn check(&self, glosses: &[usize], inputs: &TokenGrid) -> Result<()> {
        if glosses.is_empty() {
            return Err(Error::arg("empty sentence"));
        }
        if let Some(g) = glosses.iter().find(|&&g| g >= self.glosses) {
            return Err(Error::arg(format!("gloss {g} outside lexicon of {}", self.glosses)));
        }
        if inputs.tokens_per_frame() != self.tokens_per_frame {
            return Err(Error::shape(format!(
                "{} tokens per frame, translator expects {}",
                inputs.tokens_per_frame(),
                self.tokens_per_frame
            )));
        }
        if let Some(t) = inputs.indices().iter().find(|&&t| t >= self.vocab) {
            return Err(Error::arg(format!("token {t} outside vocabulary of {}", self.vocab)));
        }
        if glosses.len() + inputs.frames() > self.config.max_positions {
            return Err(Error::arg(format!(
                "{} positions exceed the limit of {}",
                glosses.len() + inputs.frames(),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn layout(&self, items: &[(&[usize], &TokenGrid)]) -> Layout {
        let batch = items.len();
        let len = items.iter().map(|(g, t)| g.len() + t.frames()).max().unwrap_or(1);
        let total_glosses: usize = items.iter().map(|(g, _)| g.len()).sum();
        let total_frames: usize = items.iter().map(|(_, t)| t.frames()).sum();
        let zero_row = total_glosses + total_frames;
        let mut rows = Vec::with_capacity(batch * len);
        let mut positions = Vec::with_capacity(batch * len);
        let mut predict = Vec::new();
        let (mut g_off, mut f_off) = (0, total_glosses);
        for (b, (g, t)) in items.iter().enumerate() {
            for n in 0..len {
                rows.push(if n < g.len() {
                    g_off + n
                } else if n < g.len() + t.frames() {
                    f_off + n - g.len()
                } else {
                    zero_row
                });
                positions.push(n);
            }
            for i in 0..=t.frames() {
                predict.push(b * len + g.len() - 1 + i);
            }
            g_off += g.len();
            f_off += t.frames();
        }
        Layout {
            batch,
            len,
            rows,
            positions,
            predict,
        }
    }

    /// Backbone states at every prediction position, `[P, D]`, plus head
    /// logits `[P, V]` per token position and stop logits `[P, 2]`.
    fn forward(&self, s: &mut Session, items: &[(&[usize], &TokenGrid)]) -> Result<(Vec<Var>, Var)> {
        for (g, t) in items {
            self.check(g, t)?;
        }
        let lay = self.layout(items);
        let d = self.config.d_model;
        let k = self.tokens_per_frame;

        let gloss_ids: Vec<usize> = items.iter().flat_map(|(g, _)| g.iter().copied()).collect();
        let gloss_rows = self.gloss_emb.forward(s, &gloss_ids)?;
        let token_ids: Vec<usize> = items
            .iter()
            .flat_map(|(_, t)| t.indices().iter().map(|&i| i as usize))
            .collect();
        let frames = token_ids.len() / k;
        let mut parts = vec![gloss_rows];
        if frames > 0 {
            let tok = self.tok_emb.forward(s, &token_ids)?;
            let tok = s.reshape(tok, &[frames, k * self.config.token_dim])?;
            let m = self.mixer.forward(s, tok)?;
            let m = self.mixer_norm.forward(s, m)?;
            parts.push(s.gelu(m)?);
        }
        parts.push(s.constant(Tensor::zeros([1, d])));
        let table = s.concat(&parts, 0)?;
        let x = s.gather(table, &lay.rows)?;
        let pos = self.pos_emb.forward(s, &lay.positions)?;
        let x = s.add(x, pos)?;
        let mut h = s.reshape(x, &[lay.batch, lay.len, d])?;
        let mask = s.constant(causal_mask(lay.batch, lay.len));
        for block in &self.blocks {
            h = block.forward(s, h, mask)?;
        }
        let h = self.final_norm.forward(s, h)?;

        let flat = s.reshape(h, &[lay.batch * lay.len, d])?;
        let rows = s.gather(flat, &lay.predict)?;
        let mut head_logits = Vec::with_capacity(k);
        for head in &self.heads {
            head_logits.push(head.forward(s, h, rows, mask, &lay.predict)?);
        }
        let stop = self.stop.forward(s, rows)?;
        Ok((head_logits, stop))
    }

    /// Teacher-forced logits for frames `0..=F` of one sentence.
    pub fn logits(&self, glosses: &[usize], inputs: &TokenGrid) -> Result<FrameLogits> {
        let mut s = Session::inference(&self.store);
        let (heads, stop) = self.forward(&mut s, &[(glosses, inputs)])?;
        Ok(FrameLogits {
            tokens: heads.iter().map(|&h| s.value(h).clone()).collect(),
            stop: s.value(stop).clone(),
        })
    }

    /// The training objective on the tape: mean over sequences of
    /// `1 / (F + 1) * sum_i CE_i`, where `CE_i` sums the cross-entropy of
    /// every head with a target at frame `i` (tokens for `i < F`, the stop
    /// head always).
    fn objective(&self, s: &mut Session, items: &[(&[usize], &TokenGrid, &TokenGrid)]) -> Result<Var> {
        for (_, input, target) in items {
            if input.frames() != target.frames() || input.tokens_per_frame() != target.tokens_per_frame() {
                return Err(Error::shape("input and target grids differ in shape"));
            }
            if let Some(t) = target.indices().iter().find(|&&t| t >= self.vocab) {
                return Err(Error::arg(format!("target token {t} outside vocabulary of {}", self.vocab)));
            }
        }
        let pairs: Vec<(&[usize], &TokenGrid)> = items.iter().map(|(g, i, _)| (*g, *i)).collect();
        let (heads, stop) = self.forward(s, &pairs)?;
        let b = items.len() as f64;
        let mut weights = Vec::new();
        let mut stop_targets = Vec::new();
        let mut head_weights = Vec::new();
        let mut head_targets: Vec<Vec<usize>> = vec![Vec::new(); self.tokens_per_frame];
        for (_, _, target) in items {
            let f = target.frames();
            let w = 1.0 / (b * (f + 1) as f64);
            for i in 0..=f {
                weights.push(w);
                stop_targets.push(if i < f { CONTINUE } else { STOP });
                head_weights.push(if i < f { w } else { 0.0 });
                for (k, col) in head_targets.iter_mut().enumerate() {
                    col.push(if i < f { target.frame(i)[k] as usize } else { 0 });
                }
            }
        }
        let mut loss = s.weighted_cross_entropy(stop, &stop_targets, &weights)?;
        for (k, &logits) in heads.iter().enumerate() {
            let ce = s.weighted_cross_entropy(logits, &head_targets[k], &head_weights)?;
            loss = s.add(loss, ce)?;
        }
        Ok(loss)
    }

    /// Teacher-forced loss of `(glosses, input grid, target grid)` triples.
    pub fn loss(&self, items: &[(&[usize], &TokenGrid, &TokenGrid)]) -> Result<f64> {
        let mut s = Session::inference(&self.store);
        let l = self.objective(&mut s, items)?;
        s.value(l).item()
    }

    /// Fraction of target tokens whose teacher-forced argmax is correct.
    pub fn token_accuracy(&self, examples: &[Example]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in examples {
            let out = self.logits(&ex.glosses, &ex.tokens)?;
            for (k, logits) in out.tokens.iter().enumerate() {
                for i in 0..ex.tokens.frames() {
                    let row = &logits.data()[i * self.vocab as usize..(i + 1) * self.vocab as usize];
                    hit += (argmax(row) == ex.tokens.frame(i)[k] as usize) as usize;
                    total += 1;
                }
            }
        }
        Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
    }

    /// Frame-by-frame decoding until the stop head fires or `max_frames`.
    pub fn generate(&self, glosses: &[usize], options: &GenerateOptions) -> Result<TokenGrid> {
        let limit = options.max_frames.min(self.config.max_positions.saturating_sub(glosses.len()));
        let mut rng = match options.decoding {
            Decoding::TopK { seed, .. } => Some(rng::stream(seed, 401)),
            Decoding::Greedy => None,
        };
        let mut frames: Vec<u32> = Vec::new();
        let k = self.tokens_per_frame;
        let v = self.vocab as usize;
        loop {
            let done = TokenGrid::new(k, frames.clone())?;
            if done.frames() >= limit {
                return Ok(done);
            }
            let out = self.logits(glosses, &done)?;
            let f = done.frames();
            let stop_row = &out.stop.data()[f * 2..f * 2 + 2];
            let stop = match (&options.decoding, rng.as_mut()) {
                (Decoding::TopK { k, .. }, Some(r)) => pick(stop_row, (*k).min(2), r) == STOP,
                _ => argmax(stop_row) == STOP,
            };
            if stop && !options.suppress_eos {
                return Ok(done);
            }
            for logits in &out.tokens {
                let row = &logits.data()[f * v..(f + 1) * v];
                let t = match (&options.decoding, rng.as_mut()) {
                    (Decoding::TopK { k, .. }, Some(r)) => pick(row, *k, r),
                    _ => argmax(row),
                };
                frames.push(t as u32);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.store.to_named();
        let meta = [self.vocab as f64, self.tokens_per_frame as f64, self.glosses as f64];
        entries.push(("meta.dims".into(), Tensor::new([3], meta.to_vec())?));
        checkpoint::write(path, &entries)
    }

    pub fn load(path: &Path, config: &TranslatorConfig) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let meta = checkpoint::find(&entries, "meta.dims")?;
        if meta.len() != 3 {
            return Err(Error::Format("meta.dims must hold three values".into()));
        }
        let m = meta.data();
        let mut model = Self::new(config, m[0] as u32, m[1] as usize, m[2] as usize, 0)?;
        let params: Vec<_> = entries.into_iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
        model.store.load_named(&params)?;
        Ok(model)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sample among the `k` largest logits in proportion to their softmax.
fn pick(row: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let top = row[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| (row[i] - top).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (&i, &wi) in order.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    order[order.len() - 1]
}

/// Training curves of a Stage-III run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TranslatorReport {
    pub losses: Vec<f64>,
    /// `(step, teacher-forced token accuracy)` on clean inputs.
    pub accuracy: Vec<(usize, f64)>,
    /// Scheduled-sampling draws over input tokens seen.
    pub replaced_tokens: usize,
    pub input_tokens: usize,
}

pub fn train_translator(
    examples: &[Example],
    vocab: u32,
    glosses: usize,
    config: &TranslatorConfig,
    seed: u64,
) -> Result<(Translator, TranslatorReport)> {
    let first = examples.first().ok_or_else(|| Error::state("no translation examples"))?;
    let k = first.tokens.tokens_per_frame();
    let mut model = Translator::new(config, vocab, k, glosses, seed)?;
    let mut batch_rng = rng::stream(seed, 402);
    let mut corrupt_rng = rng::stream(seed, 403);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(config.lr));
    let mut report = TranslatorReport::default();
    for step in 0..config.steps {
        let picks: Vec<&Example> = (0..config.batch)
            .map(|_| &examples[batch_rng.random_range(0..examples.len())])
            .collect();
        let mut inputs = Vec::with_capacity(picks.len());
        for ex in &picks {
            let (grid, drawn) = scheduled_sampling_corrupt(&ex.tokens, config.sched_sampling, vocab, &mut corrupt_rng)?;
            report.replaced_tokens += drawn;
            report.input_tokens += grid.indices().len();
            inputs.push(grid);
        }
        let items: Vec<(&[usize], &TokenGrid, &TokenGrid)> = picks
            .iter()
            .zip(&inputs)
            .map(|(ex, input)| (ex.glosses.as_slice(), input, &ex.tokens))
            .collect();
        let grads = {
            let mut s = Session::training(&model.store);
            let loss = model.objective(&mut s, &items)?;
            report.losses.push(s.value(loss).item()?);
            s.param_grads(loss)?
        };
        opt.step(&mut model.store, &grads)?;
        if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || step + 1 == config.steps) {
            report.accuracy.push((step + 1, model.token_accuracy(examples)?));
        }
    }
    Ok((model, report))
}
