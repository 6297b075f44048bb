use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};
use signtok::pipeline::{
    evaluate, infer, read_rows, run_sweep, write_rows, ExperimentConfig, Stack, Stage, SweepAxis, Workspace,
};
use signtok::quant::TokenGrid;
use signtok::Error;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.corpus.sentences = 30;
    c.diffusion.train_steps = 5;
    c.diffusion.ddim_steps = 4;
    c.fsqae.steps = 5;
    c.translator.steps = 30;
    c.translator.d_model = 16;
    c.translator.layers = 1;
    c.eval.holdout = 5;
    c.eval.sentences = 2;
    c.eval.max_frames = 6;
    c
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let e = ExperimentConfig::from_json(r#"{"translator": {"stpes": 5}}"#).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(e.exit_code(), 2);
    let partial = ExperimentConfig::from_json(r#"{"translator": {"steps": 5}}"#).unwrap();
    assert_eq!(partial.translator.steps, 5);
    assert_eq!(partial.fsqae, ExperimentConfig::default().fsqae);
    let e = ExperimentConfig::from_json(r#"{"eval": {"holdout": 0}}"#).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
}

#[test]
fn stage_hashes_cover_only_upstream_settings() {
    let base = tiny();
    assert_eq!(base.hash(), tiny().hash());
    let mut later = base.clone();
    later.translator.sched_sampling = 1.0;
    assert_eq!(base.stage_hash(Stage::FsqAe), later.stage_hash(Stage::FsqAe));
    assert_ne!(base.stage_hash(Stage::Translator), later.stage_hash(Stage::Translator));
    assert_ne!(base.hash(), later.hash());

    let mut earlier = base.clone();
    earlier.diffusion.lr *= 2.0;
    for stage in [Stage::Diffusion, Stage::FsqAe, Stage::Translator] {
        assert_ne!(base.stage_hash(stage), earlier.stage_hash(stage));
    }
    assert_eq!(base.stage_hash(Stage::Corpus), earlier.stage_hash(Stage::Corpus));

    // An explicit stage seed equal to the experiment seed is the same run.
    let mut seeded = base.clone();
    seeded.seeds.translator = Some(base.seed);
    assert_eq!(base.stage_hash(Stage::Translator), seeded.stage_hash(Stage::Translator));
    seeded.seeds.translator = Some(base.seed + 1);
    assert_ne!(base.stage_hash(Stage::Translator), seeded.stage_hash(Stage::Translator));
    assert_eq!(base.stage_hash(Stage::FsqAe), seeded.stage_hash(Stage::FsqAe));
}

#[test]
fn reruns_produce_hash_equal_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = tiny();
    let ma = signtok::pipeline::run_pipeline(&config, a.path()).unwrap();
    signtok::pipeline::run_pipeline(&config, b.path()).unwrap();
    assert_eq!(ma.stages.len(), 4);
    assert!(!ma.deviations.is_empty());
    let (wa, wb) = (Workspace::new(a.path(), true), Workspace::new(b.path(), true));
    for stage in Stage::ALL {
        assert_eq!(
            digest(&wa.checkpoint_path(&config, stage)),
            digest(&wb.checkpoint_path(&config, stage)),
            "{}",
            stage.name()
        );
    }
    let manifest = a.path().join(format!("manifest-{}.json", &config.hash()[..16]));
    assert!(manifest.exists());
}

#[test]
fn stage_two_refuses_without_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), false);
    let config = tiny();
    let e = ws.train_fsqae(&config).unwrap_err();
    assert!(e.to_string().contains("fsqae"), "{e}");
    ws.gen_corpus(&config).unwrap();
    ws.train_diffusion(&config).unwrap();
    std::fs::remove_file(ws.checkpoint_path(&config, Stage::Diffusion)).unwrap();
    let e = ws.train_fsqae(&config).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("stage `fsqae` failed"), "{e}");
    assert!(e.to_string().contains("missing"), "{e}");
    assert!(!ws.checkpoint_path(&config, Stage::FsqAe).exists());
}

#[test]
fn tampered_upstream_hash_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), false);
    let config = tiny();
    ws.gen_corpus(&config).unwrap();
    ws.train_diffusion(&config).unwrap();
    let meta = ws.stage_dir(&config, Stage::Diffusion).join("stage.json");
    let text = std::fs::read_to_string(&meta).unwrap();
    let hash = config.stage_hash(Stage::Diffusion);
    std::fs::write(&meta, text.replace(&hash, &"0".repeat(64))).unwrap();
    let e = ws.train_fsqae(&config).unwrap_err();
    assert_eq!(e.exit_code(), 4, "{e}");
}

#[test]
fn reuse_skips_matching_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny();
    let ws = Workspace::new(dir.path(), true);
    ws.gen_corpus(&config).unwrap();
    let first = ws.train_diffusion(&config).unwrap();
    let again = ws.train_diffusion(&config).unwrap();
    assert_eq!(first, again);
}

#[test]
fn stack_rejects_checkpoints_from_other_configs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), true);
    let config = tiny();
    let mut coarse = tiny();
    coarse.fsqae.rate = 4;
    ws.run_pipeline(&config).unwrap();
    ws.run_pipeline(&coarse).unwrap();
    let e = Stack::new(
        &config,
        ws.load_diffusion(&config).unwrap(),
        ws.load_fsqae(&coarse).unwrap(),
        ws.load_translator(&config).unwrap(),
    )
    .err()
    .unwrap();
    assert!(matches!(e, Error::Compatibility(_)), "{e}");
    let mut wider = config.clone();
    wider.corpus.glosses += 2;
    let e = Stack::new(
        &wider,
        ws.load_diffusion(&config).unwrap(),
        ws.load_fsqae(&config).unwrap(),
        ws.load_translator(&config).unwrap(),
    )
    .err()
    .unwrap();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn inference_plumbs_frames_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), true);
    let config = tiny();
    ws.run_pipeline(&config).unwrap();
    let stack = ws.load_stack(&config).unwrap();
    let corpus = ws.load_corpus(&config).unwrap();
    let a = &corpus.identities[0];
    let b = &corpus.identities[1];
    let size = corpus.params.video_size;
    let ref_a = signtok::corpus::render_reference(a, size).unwrap();
    let ref_b = signtok::corpus::render_reference(b, size).unwrap();

    let one = infer(&stack, &[4], &ref_a, 0).unwrap();
    assert!(one.tokens.frames() > 0);
    assert_eq!(one.video.frames(), one.tokens.frames());
    assert_eq!(one.embeddings.frames(), one.tokens.frames());
    assert!(one.tokens.frames() <= config.eval.max_frames);

    let sa = infer(&stack, &[3, 7, 1], &ref_a, 5).unwrap();
    let sb = infer(&stack, &[3, 7, 1], &ref_b, 5).unwrap();
    assert_eq!(sa.tokens, sb.tokens);
    assert_ne!(sa.video, sb.video);
    assert_eq!(sa, infer(&stack, &[3, 7, 1], &ref_a, 5).unwrap());

    let out = dir.path().join("inference");
    sa.write(&out).unwrap();
    assert_eq!(TokenGrid::read(&out.join("tokens.bin")).unwrap(), sa.tokens);
    assert!(out.join("embeddings.svip").exists());
    assert!(out.join("video.svip").exists());
}

#[test]
fn evaluation_rows_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), true);
    let config = tiny();
    ws.run_pipeline(&config).unwrap();
    let rows = evaluate(&ws, &config, 3).unwrap();
    for metric in ["dtw_heldout", "dtw_train", "psnr_matched", "psnr_mismatched"] {
        assert_eq!(rows.iter().filter(|r| r.metric == metric).count(), 1, "{metric}");
    }
    let spatial = rows.iter().filter(|r| r.perturbation_axis == "spatial" && r.metric == "dtw").count();
    let temporal = rows.iter().filter(|r| r.perturbation_axis == "temporal" && r.metric == "dtw").count();
    assert_eq!(spatial, config.eval.sigmas.len());
    assert_eq!(temporal, config.eval.drop_ratios.len());
    assert!(rows.iter().all(|r| r.seed == 3 && r.experiment_id == config.hash()[..16]));
    let path = dir.path().join("report.csv");
    write_rows(&path, &rows).unwrap();
    let back = read_rows(&path).unwrap();
    assert_eq!(back.len(), rows.len());
    for (x, y) in back.iter().zip(&rows) {
        assert_eq!((&x.metric, &x.perturbation_axis, x.level, x.seed), (&y.metric, &y.perturbation_axis, y.level, y.seed));
        assert!(x.value == y.value || (x.value.is_infinite() && y.value.is_infinite()));
    }
}

#[test]
fn sweep_axes_use_the_standard_grids() {
    assert_eq!(SweepAxis::Compression.default_grid(), vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    assert_eq!(SweepAxis::SchedSampling.default_grid(), vec![0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(SweepAxis::FsqVsVq.default_grid(), (7..=12).map(f64::from).collect::<Vec<_>>());
    assert!("cond_aug".parse::<SweepAxis>().is_ok());
    assert_eq!("sideways".parse::<SweepAxis>().unwrap_err().exit_code(), 2);
}

#[test]
fn sweep_shares_upstream_stages_and_sorts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(dir.path(), true);
    let config = tiny();
    let rows = run_sweep(&ws, &config, SweepAxis::SchedSampling, &[1.0, 0.2], &[1, 0], 2).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    let keys: Vec<(f64, u64)> = rows.iter().map(|r| (r.level, r.seed)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    assert!(rows.iter().all(|r| r.perturbation_axis == "sched_sampling"));
    let count = |prefix: &str| {
        std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
            .count()
    };
    assert_eq!(count("diffusion-"), 1);
    assert_eq!(count("fsqae-"), 1);
    assert_eq!(count("translator-"), 4);

    let e = run_sweep(&ws, &config, SweepAxis::Compression, &[1.5], &[0], 1).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

fn cli(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_signtok"))
        .args(args)
        .env("SIGNTOK_OUT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, serde_json::to_string(&tiny()).unwrap()).unwrap();
    let cfg = config.to_str().unwrap();

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fsqae": {"rat": 2}}"#).unwrap();
    assert_eq!(cli(&root, &["run-pipeline", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(cli(&root, &["run-sweep", "--axis", "sideways"]).status.code(), Some(2));

    let out = cli(&root, &["train-fsqae", "--config", cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fsqae"));

    assert_eq!(cli(&root, &["run-pipeline", "--config", cfg]).status.code(), Some(0));
    assert!(root.join(format!("manifest-{}.json", &tiny().hash()[..16])).exists());
    let out = cli(&root, &["translate", "--config", cfg, "--sentence", "3 7 1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = TokenGrid::read(&root.join("tokens.bin")).unwrap();
    assert_eq!(grid.tokens_per_frame(), 8);
    assert_eq!(cli(&root, &["translate", "--config", cfg, "--sentence", "3 x"]).status.code(), Some(2));

    let ws = Workspace::new(&root, true);
    let meta = ws.stage_dir(&tiny(), Stage::FsqAe).join("stage.json");
    let text = std::fs::read_to_string(&meta).unwrap();
    std::fs::write(&meta, text.replace(&tiny().stage_hash(Stage::FsqAe), &"f".repeat(64))).unwrap();
    assert_eq!(cli(&root, &["translate", "--config", cfg, "--sentence", "3 7 1"]).status.code(), Some(4));
}
