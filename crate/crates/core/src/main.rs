use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use signtok::checkpoint;
use signtok::pipeline::{self, infer, run_sweep, write_rows, ExperimentConfig, Inference, SweepAxis, Workspace};
use signtok::quant::TokenGrid;
use signtok::{Error, Result};

#[derive(Parser)]
#[command(name = "signtok", version, about = "Discrete condition tokens for toy sign-language video generation")]
struct Cli {
    /// Output root for stage directories.
    #[arg(long, env = "SIGNTOK_OUT", default_value = "signtok-out", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Skip stages whose checkpoint already matches the config.
    #[arg(long)]
    reuse: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus.
    GenCorpus(StageArgs),
    /// Train Stage I, the conditional video diffusion model.
    TrainDiffusion(StageArgs),
    /// Train Stage II, the quantized embedding autoencoder.
    TrainFsqae(StageArgs),
    /// Train Stage III, the gloss-to-token translator.
    TrainTranslator(StageArgs),
    /// Run every stage in order and write a manifest.
    RunPipeline(StageArgs),
    /// Translate a gloss sentence into a token file.
    Translate {
        #[command(flatten)]
        config: ConfigArg,
        /// Space-separated gloss ids, e.g. "3 7 1".
        #[arg(long)]
        sentence: String,
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long, default_value = "tokens.bin")]
        tokens: PathBuf,
    },
    /// Generate video from a token file.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value_t = 0)]
        identity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sample")]
        dir: PathBuf,
    },
    /// Sentence to tokens to embeddings to video, keeping every intermediate.
    Infer {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        sentence: String,
        #[arg(long, default_value_t = 0)]
        identity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "inference")]
        dir: PathBuf,
    },
    /// Translation DTW, video PSNR and order-preserving rows as CSV.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report.csv")]
        report: PathBuf,
    },
    /// Sweep one axis over a grid and seeds, writing tidy CSV.
    RunSweep {
        #[command(flatten)]
        config: ConfigArg,
        /// compression, cond_aug, sched_sampling or fsq_vs_vq.
        #[arg(long)]
        axis: String,
        /// Comma-separated levels; the axis default when omitted.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "sweep.csv")]
        report: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad {what} `{s}`"))))
        .collect()
}

fn sentence(text: &str) -> Result<Vec<usize>> {
    let s: Vec<usize> = parse_list(text, "gloss id")?;
    if s.is_empty() {
        return Err(Error::Config("empty sentence".into()));
    }
    Ok(s)
}

fn reference(ws: &Workspace, config: &ExperimentConfig, identity: usize) -> Result<signtok::Tensor> {
    let corpus = ws.load_corpus(config)?;
    let id = corpus
        .identities
        .get(identity)
        .ok_or_else(|| Error::Config(format!("identity {identity} out of range")))?;
    signtok::corpus::render_reference(id, corpus.params.video_size)
}

fn under(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out;
    match cli.command {
        Command::GenCorpus(a) => {
            let r = Workspace::new(&root, a.reuse).gen_corpus(&a.config.load()?)?;
            println!("{}", r.checkpoint.display());
        }
        Command::TrainDiffusion(a) => {
            let r = Workspace::new(&root, a.reuse).train_diffusion(&a.config.load()?)?;
            println!("{}", r.checkpoint.display());
        }
        Command::TrainFsqae(a) => {
            let r = Workspace::new(&root, a.reuse).train_fsqae(&a.config.load()?)?;
            println!("{}", r.checkpoint.display());
        }
        Command::TrainTranslator(a) => {
            let r = Workspace::new(&root, a.reuse).train_translator(&a.config.load()?)?;
            println!("{}", r.checkpoint.display());
        }
        Command::RunPipeline(a) => {
            let m = Workspace::new(&root, a.reuse).run_pipeline(&a.config.load()?)?;
            for s in &m.stages {
                println!("{}\t{:.1}s\t{}", s.name, s.wall_time_s, s.checkpoint.display());
            }
        }
        Command::Translate {
            config,
            sentence: text,
            max_frames,
            tokens,
        } => {
            let mut config = config.load()?;
            if let Some(m) = max_frames {
                config.eval.max_frames = m;
            }
            let ws = Workspace::new(&root, true);
            let stack = ws.load_stack(&config)?;
            let grid = stack.generate_tokens(&sentence(&text)?)?;
            let path = under(&root, &tokens);
            grid.write(&path)?;
            println!("{} frames -> {}", grid.frames(), path.display());
        }
        Command::Sample {
            config,
            tokens,
            identity,
            seed,
            dir,
        } => {
            let config = config.load()?;
            let ws = Workspace::new(&root, true);
            let stack = ws.load_stack(&config)?;
            let grid = TokenGrid::read(&under(&root, &tokens))?;
            let embeddings = stack.decode(&grid)?;
            if grid.frames() == 0 {
                return Err(Error::arg("token file holds no frames"));
            }
            let d = &config.diffusion;
            let video = stack
                .diffusion
                .sample(&reference(&ws, &config, identity)?, &embeddings, d.ddim_steps, d.guidance, seed)?;
            let dir = under(&root, &dir);
            std::fs::create_dir_all(&dir)?;
            checkpoint::write(&dir.join("video.svip"), &[("video".into(), video)])?;
            println!("{}", dir.display());
        }
        Command::Infer {
            config,
            sentence: text,
            identity,
            seed,
            dir,
        } => {
            let config = config.load()?;
            let ws = Workspace::new(&root, true);
            let stack = ws.load_stack(&config)?;
            let out: Inference = infer(&stack, &sentence(&text)?, &reference(&ws, &config, identity)?, seed)?;
            let dir = under(&root, &dir);
            out.write(&dir)?;
            println!("{} frames -> {}", out.tokens.frames(), dir.display());
        }
        Command::Evaluate { config, seed, report } => {
            let config = config.load()?;
            let rows = pipeline::evaluate(&Workspace::new(&root, true), &config, seed)?;
            let path = under(&root, &report);
            write_rows(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::RunSweep {
            config,
            axis,
            grid,
            seeds,
            workers,
            report,
        } => {
            let config = config.load()?;
            let axis: SweepAxis = axis.parse()?;
            let grid = match grid {
                Some(g) => parse_list(&g, "grid level")?,
                None => axis.default_grid(),
            };
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let rows = run_sweep(&Workspace::new(&root, true), &config, axis, &grid, &seeds, workers)?;
            let path = under(&root, &report);
            write_rows(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
