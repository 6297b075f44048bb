//! Three-stage training, inference, evaluation and sweeps.
//!
//! Every stage writes into `<root>/<stage>-<hash>/`, where the hash covers
//! the part of the configuration the stage depends on. A stage refuses to
//! run until its upstream stage has a checkpoint with the expected hash.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::corpus::{
    build_corpus, keypoint_std, load_corpus, perturb_spatial, perturb_temporal, render_conditions, render_video,
    save_corpus, Corpus, CorpusParams, Sample, SpatialMode,
};
use crate::diffusion::{condition_augment, train_diffusion, DiffusionConfig, DiffusionModel, EMBED_SIDE};
use crate::error::{Error, Result};
use crate::fsqae::{train_fsqae, FsqAeConfig, FsqAutoencoder, Quantizer};
use crate::metrics::{dtw_frames, psnr};
use crate::quant::{codebook_usage, FsqSpec, TokenGrid};
use crate::rng;
use crate::tensor::Tensor;
use crate::translator::{train_translator, Decoding, Example, GenerateOptions, Translator, TranslatorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sentences at the end of the corpus kept out of every training stage.
    pub holdout: usize,
    /// Sentences used by the video and corrupted-condition evaluations.
    pub sentences: usize,
    pub max_frames: usize,
    pub decoding: Decoding,
    /// Frame corruption probability for the robustness evaluation.
    pub corrupt_p: f64,
    pub sigmas: Vec<f64>,
    pub drop_ratios: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout: 20,
            sentences: 10,
            max_frames: 64,
            decoding: Decoding::Greedy,
            corrupt_p: 0.05,
            sigmas: vec![0.0, 0.05, 0.1, 0.2],
            drop_ratios: vec![0.0, 0.1, 0.2, 0.4],
        }
    }
}

/// Per-stage training seeds; unset stages use the experiment seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSeeds {
    pub diffusion: Option<u64>,
    pub fsqae: Option<u64>,
    pub translator: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Training seed shared by all stages; the corpus has its own.
    pub seed: u64,
    pub seeds: StageSeeds,
    pub corpus: CorpusParams,
    pub diffusion: DiffusionConfig,
    pub fsqae: FsqAeConfig,
    pub translator: TranslatorConfig,
    pub eval: EvalConfig,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.diffusion.validate()?;
        self.fsqae.validate()?;
        self.translator.validate()?;
        if self.eval.holdout == 0 || self.eval.holdout >= self.corpus.sentences {
            return Err(Error::Config(format!(
                "eval.holdout {} must be in 1..{}",
                self.eval.holdout, self.corpus.sentences
            )));
        }
        if self.eval.sentences == 0 || self.eval.max_frames == 0 {
            return Err(Error::Config("eval.sentences and eval.max_frames must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.corrupt_p) {
            return Err(Error::Config(format!("eval.corrupt_p {} outside [0, 1]", self.eval.corrupt_p)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        let s = &self.seeds;
        match stage {
            Stage::Corpus => None,
            Stage::Diffusion => s.diffusion,
            Stage::FsqAe => s.fsqae,
            Stage::Translator => s.translator,
        }
        .unwrap_or(self.seed)
    }

    /// Hash of everything `stage` and its upstream stages depend on.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![serde_json::to_value(&self.corpus).expect("serializes")];
        if stage >= Stage::Diffusion {
            parts.push(serde_json::json!(self.seed_for(Stage::Diffusion)));
            parts.push(serde_json::json!(self.eval.holdout));
            parts.push(serde_json::to_value(&self.diffusion).expect("serializes"));
        }
        if stage >= Stage::FsqAe {
            parts.push(serde_json::json!(self.seed_for(Stage::FsqAe)));
            parts.push(serde_json::to_value(&self.fsqae).expect("serializes"));
        }
        if stage >= Stage::Translator {
            parts.push(serde_json::json!(self.seed_for(Stage::Translator)));
            parts.push(serde_json::to_value(&self.translator).expect("serializes"));
        }
        sha256_hex(&serde_json::to_vec(&parts).expect("serializes"))
    }

    /// Where this configuration departs from full-scale training.
    pub fn deviations(&self) -> Vec<String> {
        vec![
            format!(
                "stage I: {} steps, {} clips of {} frames, lr {} (full scale: 50000 steps, batch 2, lr 1e-5)",
                self.diffusion.train_steps, self.diffusion.batch_clips, self.diffusion.clip_frames, self.diffusion.lr
            ),
            format!(
                "stage II: {} steps, batch {} frames, lr {} (full scale: 50000 steps, batch 16, lr 5e-5)",
                self.fsqae.steps, self.fsqae.batch_frames, self.fsqae.lr
            ),
            format!(
                "stage III: {} steps, batch {}, lr {}, d_model {}, {} layers (full scale: 50000 steps, batch 16, lr 1e-6, pretrained language-model backbone)",
                self.translator.steps, self.translator.batch, self.translator.lr, self.translator.d_model, self.translator.layers
            ),
            "text encoder: learned gloss embedding table instead of a pretrained text encoder".into(),
            format!(
                "corpus: synthetic, {} glosses, {} sentences, {}px video",
                self.corpus.glosses, self.corpus.sentences, self.corpus.video_size
            ),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Corpus,
    Diffusion,
    FsqAe,
    Translator,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Corpus, Stage::Diffusion, Stage::FsqAe, Stage::Translator];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Diffusion => "diffusion",
            Stage::FsqAe => "fsqae",
            Stage::Translator => "translator",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Corpus => None,
            Stage::Diffusion => Some(Stage::Corpus),
            Stage::FsqAe => Some(Stage::Diffusion),
            Stage::Translator => Some(Stage::FsqAe),
        }
    }

    fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::Corpus => "manifest.json",
            Stage::Diffusion => "diffusion.svip",
            Stage::FsqAe => "fsqae.svip",
            Stage::Translator => "translator.svip",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub config_hash: String,
    pub upstream_hash: Option<String>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub deviations: Vec<String>,
}

/// Training corpus and held-out samples.
pub fn split(corpus: &Corpus, holdout: usize) -> Result<(Corpus, Vec<Sample>)> {
    let n = corpus.samples.len();
    if holdout >= n {
        return Err(Error::Config(format!("holdout {holdout} leaves no training sentences out of {n}")));
    }
    let train = Corpus {
        samples: corpus.samples[..n - holdout].to_vec(),
        ..corpus.clone()
    };
    Ok((train, corpus.samples[n - holdout..].to_vec()))
}

/// An output root holding stage directories.
pub struct Workspace {
    root: PathBuf,
    reuse: bool,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

impl Workspace {
    /// With `reuse`, a stage whose directory already holds a checkpoint of
    /// the same hash is not retrained.
    pub fn new(root: impl Into<PathBuf>, reuse: bool) -> Self {
        Self {
            root: root.into(),
            reuse,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, config: &ExperimentConfig, stage: Stage) -> PathBuf {
        self.root.join(format!("{}-{}", stage.name(), &config.stage_hash(stage)[..16]))
    }

    pub fn checkpoint_path(&self, config: &ExperimentConfig, stage: Stage) -> PathBuf {
        self.stage_dir(config, stage).join(stage.checkpoint_file())
    }

    fn lock(&self, dir: &Path) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock map");
        locks.entry(dir.to_path_buf()).or_default().clone()
    }

    /// The record of a finished stage, checked against `config`.
    pub fn require(&self, config: &ExperimentConfig, stage: Stage) -> Result<StageRecord> {
        let dir = self.stage_dir(config, stage);
        let meta = dir.join("stage.json");
        let text = fs::read_to_string(&meta)
            .map_err(|_| Error::state(format!("stage `{}` has not been run ({})", stage.name(), dir.display())))?;
        let record: StageRecord = serde_json::from_str(&text)?;
        if !record.checkpoint.exists() {
            return Err(Error::state(format!(
                "stage `{}` checkpoint {} is missing",
                stage.name(),
                record.checkpoint.display()
            )));
        }
        let want = config.stage_hash(stage);
        if record.config_hash != want {
            return Err(Error::Compatibility(format!(
                "stage `{}` was trained under config {}, expected {}",
                stage.name(),
                &record.config_hash[..16.min(record.config_hash.len())],
                &want[..16]
            )));
        }
        Ok(record)
    }

    fn run_stage<F>(&self, config: &ExperimentConfig, stage: Stage, train: F) -> Result<StageRecord>
    where
        F: FnOnce(&Path) -> Result<serde_json::Value>,
    {
        let run = || -> Result<StageRecord> {
            config.validate()?;
            let dir = self.stage_dir(config, stage);
            let lock = self.lock(&dir);
            let _guard = lock.lock().expect("stage lock");
            if self.reuse {
                if let Ok(record) = self.require(config, stage) {
                    return Ok(record);
                }
            }
            let upstream_hash = match stage.upstream() {
                Some(up) => Some(self.require(config, up)?.config_hash),
                None => None,
            };
            fs::create_dir_all(&dir)?;
            let _ = fs::remove_file(dir.join("stage.json"));
            info!("stage {} -> {}", stage.name(), dir.display());
            let start = Instant::now();
            let metrics = train(&dir)?;
            let record = StageRecord {
                name: stage.name().into(),
                config_hash: config.stage_hash(stage),
                upstream_hash,
                checkpoint: dir.join(stage.checkpoint_file()),
                metrics: dir.join("metrics.json"),
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            fs::write(&record.metrics, serde_json::to_string_pretty(&metrics)?)?;
            fs::write(dir.join("stage.json"), serde_json::to_string_pretty(&record)?)?;
            Ok(record)
        };
        run().map_err(|e| e.in_stage(stage.name()))
    }

    pub fn gen_corpus(&self, config: &ExperimentConfig) -> Result<StageRecord> {
        self.run_stage(config, Stage::Corpus, |dir| {
            let corpus = build_corpus(&config.corpus)?;
            save_corpus(&corpus, dir)?;
            let frames: usize = corpus.samples.iter().map(|s| s.poses.frames()).sum();
            Ok(serde_json::json!({ "sentences": corpus.samples.len(), "frames": frames }))
        })
    }

    pub fn load_corpus(&self, config: &ExperimentConfig) -> Result<Corpus> {
        let record = self.require(config, Stage::Corpus)?;
        load_corpus(record.checkpoint.parent().expect("stage dir"))
    }

    pub fn train_diffusion(&self, config: &ExperimentConfig) -> Result<StageRecord> {
        self.run_stage(config, Stage::Diffusion, |dir| {
            let corpus = self.load_corpus(config)?;
            let (train, _) = split(&corpus, config.eval.holdout)?;
            let (model, report) = train_diffusion(&train, &config.diffusion, config.seed_for(Stage::Diffusion))?;
            model.save(&dir.join(Stage::Diffusion.checkpoint_file()))?;
            Ok(serde_json::to_value(&report)?)
        })
    }

    pub fn load_diffusion(&self, config: &ExperimentConfig) -> Result<DiffusionModel> {
        let record = self.require(config, Stage::Diffusion)?;
        DiffusionModel::load(&record.checkpoint, &config.diffusion)
    }

    pub fn train_fsqae(&self, config: &ExperimentConfig) -> Result<StageRecord> {
        self.run_stage(config, Stage::FsqAe, |dir| {
            let corpus = self.load_corpus(config)?;
            let stage1 = self.load_diffusion(config)?;
            let (train, held) = split(&corpus, config.eval.holdout)?;
            let embed = |samples: &[Sample]| -> Result<Tensor> {
                let e = samples
                    .iter()
                    .map(|s| stage1.embed_conditions(&s.conditions))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::cat_frames(&e)
            };
            let train_e = embed(&train.samples)?;
            let held_e = embed(&held)?;
            let (ae, report) = train_fsqae(&train_e, &config.fsqae, config.seed_for(Stage::FsqAe))?;
            ae.save(&dir.join(Stage::FsqAe.checkpoint_file()))?;
            let usage = codebook_usage(ae.encode_tokens(&train_e)?.indices(), ae.vocab_size());
            Ok(serde_json::json!({
                "losses": report.losses,
                "objective": report.objective,
                "train_mse": ae.reconstruction_mse(&train_e)?,
                "heldout_mse": ae.reconstruction_mse(&held_e)?,
                "usage": usage,
            }))
        })
    }

    pub fn load_fsqae(&self, config: &ExperimentConfig) -> Result<FsqAutoencoder> {
        let record = self.require(config, Stage::FsqAe)?;
        FsqAutoencoder::load(&record.checkpoint, &config.fsqae)
    }

    pub fn train_translator(&self, config: &ExperimentConfig) -> Result<StageRecord> {
        self.run_stage(config, Stage::Translator, |dir| {
            let corpus = self.load_corpus(config)?;
            let stage1 = self.load_diffusion(config)?;
            let ae = self.load_fsqae(config)?;
            let (train, _) = split(&corpus, config.eval.holdout)?;
            let examples = train
                .samples
                .iter()
                .map(|s| {
                    Ok(Example {
                        glosses: s.sentence.clone(),
                        tokens: ae.encode_tokens(&stage1.embed_conditions(&s.conditions)?)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (model, report) =
                train_translator(&examples, ae.vocab_size(), corpus.params.glosses, &config.translator, config.seed_for(Stage::Translator))?;
            model.save(&dir.join(Stage::Translator.checkpoint_file()))?;
            Ok(serde_json::to_value(&report)?)
        })
    }

    pub fn load_translator(&self, config: &ExperimentConfig) -> Result<Translator> {
        let record = self.require(config, Stage::Translator)?;
        Translator::load(&record.checkpoint, &config.translator)
    }

    /// Corpus, Stage I, Stage II and Stage III in order; writes
    /// `manifest-<hash>.json` under the root.
    pub fn run_pipeline(&self, config: &ExperimentConfig) -> Result<StageManifest> {
        config.validate()?;
        let stages = vec![
            self.gen_corpus(config)?,
            self.train_diffusion(config)?,
            self.train_fsqae(config)?,
            self.train_translator(config)?,
        ];
        let manifest = StageManifest {
            config_hash: config.hash(),
            config: config.clone(),
            stages,
            deviations: config.deviations(),
        };
        fs::create_dir_all(&self.root)?;
        fs::write(
            self.root.join(format!("manifest-{}.json", &manifest.config_hash[..16])),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    pub fn load_stack(&self, config: &ExperimentConfig) -> Result<Stack> {
        Stack::new(
            config,
            self.load_diffusion(config)?,
            self.load_fsqae(config)?,
            self.load_translator(config)?,
        )
    }
}

/// Train every stage under `root` from scratch.
pub fn run_pipeline(config: &ExperimentConfig, root: &Path) -> Result<StageManifest> {
    Workspace::new(root, false).run_pipeline(config)
}

/// The three trained models, checked against each other.
pub struct Stack {
    pub config: ExperimentConfig,
    pub diffusion: DiffusionModel,
    pub fsqae: FsqAutoencoder,
    pub translator: Translator,
}

impl Stack {
    pub fn new(config: &ExperimentConfig, diffusion: DiffusionModel, fsqae: FsqAutoencoder, translator: Translator) -> Result<Self> {
        if translator.vocab_size() != fsqae.vocab_size() || translator.tokens_per_frame() != fsqae.tokens_per_frame() {
            return Err(Error::Compatibility(format!(
                "translator emits {} x {} tokens, autoencoder expects {} x {}",
                translator.tokens_per_frame(),
                translator.vocab_size(),
                fsqae.tokens_per_frame(),
                fsqae.vocab_size()
            )));
        }
        let want = [diffusion.config.embed_dim, EMBED_SIDE, EMBED_SIDE];
        if fsqae.embed_shape() != want {
            return Err(Error::Compatibility(format!(
                "autoencoder embeddings {:?}, diffusion expects {want:?}",
                fsqae.embed_shape()
            )));
        }
        if translator.glosses() != config.corpus.glosses {
            return Err(Error::Compatibility(format!(
                "translator knows {} glosses, corpus has {}",
                translator.glosses(),
                config.corpus.glosses
            )));
        }
        Ok(Self {
            config: config.clone(),
            diffusion,
            fsqae,
            translator,
        })
    }

    pub fn generate_tokens(&self, sentence: &[usize]) -> Result<TokenGrid> {
        self.translator.generate(
            sentence,
            &GenerateOptions {
                max_frames: self.config.eval.max_frames,
                decoding: self.config.eval.decoding.clone(),
                suppress_eos: false,
            },
        )
    }

    /// `[F, D_e, 8, 8]` embeddings of a token grid; zero frames for an empty grid.
    pub fn decode(&self, tokens: &TokenGrid) -> Result<Tensor> {
        if tokens.frames() == 0 {
            let mut shape = vec![0];
            shape.extend(self.fsqae.embed_shape());
            return Ok(Tensor::zeros(shape));
        }
        self.fsqae.decode_tokens(tokens)
    }
}

/// Intermediates of one text-to-video run.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub tokens: TokenGrid,
    pub embeddings: Tensor,
    /// `[F, 1, H, W]` pixels in `[0, 1]`.
    pub video: Tensor,
}

impl Inference {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.tokens.write(&dir.join("tokens.bin"))?;
        checkpoint::write(&dir.join("embeddings.svip"), &[("embeddings".into(), self.embeddings.clone())])?;
        checkpoint::write(&dir.join("video.svip"), &[("video".into(), self.video.clone())])?;
        Ok(())
    }
}

/// Text to tokens to embeddings to video. `reference` is `[1, H, W]`.
pub fn infer(stack: &Stack, sentence: &[usize], reference: &Tensor, seed: u64) -> Result<Inference> {
    let tokens = stack.generate_tokens(sentence)?;
    let embeddings = stack.decode(&tokens)?;
    let video = if tokens.frames() == 0 {
        let mut shape = vec![0];
        shape.extend(reference.shape().iter().copied());
        Tensor::zeros(shape)
    } else {
        let d = &stack.config.diffusion;
        stack.diffusion.sample(reference, &embeddings, d.ddim_steps, d.guidance, seed)?
    };
    Ok(Inference {
        tokens,
        embeddings,
        video,
    })
}

/// Mean normalized DTW between decoded generated tokens and the Stage-I
/// embeddings of the true conditions. An empty generation is scored as a
/// single all-zero frame.
pub fn translation_dtw(stack: &Stack, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("no sentences to evaluate"));
    }
    let mut total = 0.0;
    for s in samples {
        let truth = stack.diffusion.embed_conditions(&s.conditions)?;
        let mut generated = stack.decode(&stack.generate_tokens(&s.sentence)?)?;
        if generated.frames() == 0 {
            let mut shape = vec![1];
            shape.extend(stack.fsqae.embed_shape());
            generated = Tensor::zeros(shape);
        }
        total += dtw_frames(&generated, &truth)?.normalized;
    }
    Ok(total / samples.len() as f64)
}

fn head_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let f = a.frames().min(b.frames());
    if f == 0 {
        return Ok(0.0);
    }
    psnr(&a.narrow_frames(0, f)?, &b.narrow_frames(0, f)?)
}

/// Per-sentence PSNR of generated video against the sentence's own
/// rendering and against a different sentence by the same signer, over the
/// frames both cover.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VideoEval {
    pub matched: Vec<f64>,
    pub mismatched: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn video_eval(stack: &Stack, corpus: &Corpus, samples: &[Sample], seed: u64) -> Result<VideoEval> {
    let mut out = VideoEval::default();
    for (i, s) in samples.iter().enumerate() {
        let other = (1..samples.len())
            .map(|k| &samples[(i + k) % samples.len()])
            .find(|o| o.sentence != s.sentence)
            .ok_or_else(|| Error::arg("video evaluation needs two distinct sentences"))?;
        let video = infer(stack, &s.sentence, &s.reference, seed)?.video;
        let wrong = corpus.sample_for(&other.sentence, s.identity)?.video;
        out.matched.push(head_psnr(&video, &s.video)?);
        out.mismatched.push(head_psnr(&video, &wrong)?);
    }
    Ok(out)
}

/// Mean pixel MSE of videos generated from conditions in which each frame
/// was replaced by a random corpus frame with probability `p`.
pub fn corrupted_generation_mse(model: &DiffusionModel, corpus: &Corpus, samples: &[Sample], p: f64, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::arg("no sentences to evaluate"));
    }
    let donors: Vec<&[f64]> = corpus
        .samples
        .iter()
        .flat_map(|s| (0..s.conditions.frames()).map(move |i| s.conditions.frame_data(i)))
        .collect();
    let mut corrupt_rng = rng::stream(seed, 500);
    let mut total = 0.0;
    for s in samples {
        let (conditions, _) = condition_augment(&s.conditions, p, &donors, &mut corrupt_rng)?;
        let e = model.embed_conditions(&conditions)?;
        let video = model.sample(&s.reference, &e, model.config.ddim_steps, model.config.guidance, seed)?;
        total += video.mse(&s.video)?;
    }
    Ok(total / samples.len() as f64)
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment_id: String,
    pub metric: String,
    pub perturbation_axis: String,
    pub level: f64,
    pub value: f64,
    pub seed: u64,
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Normalized DTW between Stage-I embeddings of perturbed and clean poses,
/// and PSNR of the re-rendered video, per perturbation level. Spatial noise
/// is scaled by the corpus keypoint spread; temporal levels are the
/// fraction of edited frames. PSNR is reported for the spatial axis only,
/// where frame counts are preserved; `+inf` marks an unperturbed level.
pub fn order_preserving(
    model: &DiffusionModel,
    corpus: &Corpus,
    samples: &[Sample],
    sigmas: &[f64],
    drop_ratios: &[f64],
    seed: u64,
    experiment_id: &str,
) -> Result<Vec<Row>> {
    if samples.is_empty() {
        return Err(Error::arg("no sentences to evaluate"));
    }
    let std = keypoint_std(corpus.samples.iter().map(|s| &s.poses));
    let mode = SpatialMode::VarianceScaled(std);
    let size = corpus.params.cond_size;
    let clean: Vec<Tensor> = samples
        .iter()
        .map(|s| model.embed_conditions(&s.conditions))
        .collect::<Result<_>>()?;
    let row = |metric: &str, axis: &str, level: f64, value: f64| Row {
        experiment_id: experiment_id.to_string(),
        metric: metric.into(),
        perturbation_axis: axis.into(),
        level,
        value,
        seed,
    };
    let mut rows = Vec::new();
    for &sigma in sigmas {
        let (mut dtw, mut pixel) = (0.0, 0.0);
        for (k, (s, e)) in samples.iter().zip(&clean).enumerate() {
            // The same draws at every level, scaled by sigma.
            let mut r = rng::stream(seed, 600 + k as u64);
            let poses = perturb_spatial(&s.poses, sigma, &mode, &mut r)?;
            let pe = model.embed_conditions(&render_conditions(&poses, size)?)?;
            dtw += dtw_frames(&pe, e)?.normalized;
            let video = render_video(&poses, &corpus.identities[s.identity], corpus.params.video_size)?;
            pixel += psnr(&video, &s.video)?;
        }
        let n = samples.len() as f64;
        rows.push(row("dtw", "spatial", sigma, dtw / n));
        rows.push(row("psnr", "spatial", sigma, pixel / n));
    }
    for &p in drop_ratios {
        let mut dtw = 0.0;
        for (k, (s, e)) in samples.iter().zip(&clean).enumerate() {
            let mut r = rng::stream(seed, 700 + k as u64);
            let poses = perturb_temporal(&s.poses, p, &mut r)?;
            let pe = model.embed_conditions(&render_conditions(&poses, size)?)?;
            dtw += dtw_frames(&pe, e)?.normalized;
        }
        rows.push(row("dtw", "temporal", p, dtw / samples.len() as f64));
    }
    Ok(rows)
}

/// Translation DTW on held-out and training sentences, video PSNR against
/// matched and mismatched renderings, and the order-preserving rows.
pub fn evaluate(ws: &Workspace, config: &ExperimentConfig, seed: u64) -> Result<Vec<Row>> {
    let corpus = ws.load_corpus(config)?;
    let stack = ws.load_stack(config)?;
    let (train, held) = split(&corpus, config.eval.holdout)?;
    let n = config.eval.sentences;
    let id = config.hash()[..16].to_string();
    let row = |metric: &str, value: f64| Row {
        experiment_id: id.clone(),
        metric: metric.into(),
        perturbation_axis: "none".into(),
        level: 0.0,
        value,
        seed,
    };
    let picked: Vec<Sample> = train.samples.iter().take(n).cloned().collect();
    let video = video_eval(&stack, &corpus, &picked, seed)?;
    let mut rows = vec![
        row("dtw_heldout", translation_dtw(&stack, &held)?),
        row("dtw_train", translation_dtw(&stack, &picked)?),
        row("psnr_matched", median(&video.matched)),
        row("psnr_mismatched", median(&video.mismatched)),
    ];
    let probe: Vec<Sample> = held.iter().take(n).cloned().collect();
    rows.extend(order_preserving(
        &stack.diffusion,
        &corpus,
        &probe,
        &config.eval.sigmas,
        &config.eval.drop_ratios,
        seed,
        &id,
    )?);
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Compression,
    CondAug,
    SchedSampling,
    FsqVsVq,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Compression => "compression",
            SweepAxis::CondAug => "cond_aug",
            SweepAxis::SchedSampling => "sched_sampling",
            SweepAxis::FsqVsVq => "fsq_vs_vq",
        }
    }

    /// Standard levels: compression rates, augmentation probabilities,
    /// sampling ratios, or codebook sizes as powers of two.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepAxis::Compression => vec![1.0, 2.0, 4.0, 8.0, 16.0],
            SweepAxis::CondAug => vec![0.0, 1e-3, 1e-2, 1e-1],
            SweepAxis::SchedSampling => vec![0.2, 0.4, 0.6, 0.8, 1.0],
            SweepAxis::FsqVsVq => (7..=12).map(f64::from).collect(),
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compression" => Ok(SweepAxis::Compression),
            "cond_aug" => Ok(SweepAxis::CondAug),
            "sched_sampling" => Ok(SweepAxis::SchedSampling),
            "fsq_vs_vq" => Ok(SweepAxis::FsqVsVq),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        }
    }
}

fn sweep_point(ws: &Workspace, base: &ExperimentConfig, axis: SweepAxis, level: f64, seed: u64) -> Result<Vec<Row>> {
    let mut config = base.clone();
    // Only stages the axis reaches are reseeded; upstream checkpoints are shared.
    match axis {
        SweepAxis::Compression => {
            config.seeds.fsqae = Some(seed);
            config.seeds.translator = Some(seed);
        }
        SweepAxis::SchedSampling => config.seeds.translator = Some(seed),
        SweepAxis::CondAug => config.seeds.diffusion = Some(seed),
        SweepAxis::FsqVsVq => config.seeds.fsqae = Some(seed),
    }
    let row = |config: &ExperimentConfig, metric: &str, value: f64| Row {
        experiment_id: config.hash()[..16].to_string(),
        metric: metric.into(),
        perturbation_axis: axis.name().into(),
        level,
        value,
        seed,
    };
    match axis {
        SweepAxis::Compression | SweepAxis::SchedSampling => {
            if axis == SweepAxis::Compression {
                if level < 1.0 || level.fract() != 0.0 {
                    return Err(Error::Config(format!("compression rate {level} is not a positive integer")));
                }
                config.fsqae.rate = level as usize;
            } else {
                config.translator.sched_sampling = level;
            }
            ws.run_pipeline(&config)?;
            let corpus = ws.load_corpus(&config)?;
            let stack = ws.load_stack(&config)?;
            let (train, held) = split(&corpus, config.eval.holdout)?;
            let picked: Vec<Sample> = train.samples.iter().take(config.eval.sentences).cloned().collect();
            Ok(vec![
                row(&config, "dtw_heldout", translation_dtw(&stack, &held)?),
                row(&config, "dtw_train", translation_dtw(&stack, &picked)?),
            ])
        }
        SweepAxis::CondAug => {
            config.diffusion.cond_aug_p = level;
            ws.gen_corpus(&config)?;
            ws.train_diffusion(&config)?;
            let corpus = ws.load_corpus(&config)?;
            let model = ws.load_diffusion(&config)?;
            let (_, held) = split(&corpus, config.eval.holdout)?;
            let probe: Vec<Sample> = held.into_iter().take(config.eval.sentences).collect();
            let mse = corrupted_generation_mse(&model, &corpus, &probe, config.eval.corrupt_p, seed)?;
            Ok(vec![row(&config, "corrupted_mse", mse)])
        }
        SweepAxis::FsqVsVq => {
            if !(1.0..=31.0).contains(&level) || level.fract() != 0.0 {
                return Err(Error::Config(format!("codebook exponent {level} is not an integer in 1..=31")));
            }
            config.fsqae.levels = FsqSpec::for_vocab_bits(level as u32)?.levels().to_vec();
            let mut rows = Vec::new();
            for (name, q) in [("fsq", Quantizer::Fsq), ("vq", Quantizer::Vq)] {
                let mut c = config.clone();
                c.fsqae.quantizer = q;
                ws.gen_corpus(&c)?;
                ws.train_diffusion(&c)?;
                let record = ws.train_fsqae(&c)?;
                let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(&record.metrics)?)?;
                let get = |k: &str| metrics[k].as_f64().ok_or_else(|| Error::Format(format!("metrics lack `{k}`")));
                rows.push(row(&c, &format!("{name}_usage"), get("usage")?));
                rows.push(row(&c, &format!("{name}_recon_mse"), get("heldout_mse")?));
            }
            Ok(rows)
        }
    }
}

/// Run every `(level, seed)` point on up to `workers` threads. Upstream
/// stages shared between points are trained once. Rows come back sorted by
/// level, seed and metric.
pub fn run_sweep(
    ws: &Workspace,
    base: &ExperimentConfig,
    axis: SweepAxis,
    grid: &[f64],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<Row>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid and seed list must be nonempty".into()));
    }
    base.validate()?;
    let points: Vec<(f64, u64)> = grid.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<Vec<Row>>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, points.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(level, seed)) = points.get(i) else { break };
                info!("sweep {} level {level} seed {seed}", axis.name());
                let r = sweep_point(ws, base, axis, level, seed);
                results.lock().expect("results").push(r);
            });
        }
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("results") {
        rows.extend(r?);
    }
    rows.sort_by(|a, b| {
        a.level
            .total_cmp(&b.level)
            .then(a.seed.cmp(&b.seed))
            .then(a.metric.cmp(&b.metric))
    });
    Ok(rows)
}
