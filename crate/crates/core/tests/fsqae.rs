mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use signtok::corpus::{build_corpus, CorpusParams};
use signtok::diffusion::{DiffusionConfig, DiffusionModel};
use signtok::fsqae::{train_fsqae, FsqAeConfig, FsqAutoencoder, Quantizer, RATES};
use signtok::quant::TokenGrid;
use signtok::{Error, Tensor};

use common::{fsq_code_by_thresholds, radix_index};

/// Embeddings of a small corpus under a freshly initialised (frozen) encoder,
/// split into training and held-out sentences.
fn embeddings() -> (Tensor, Tensor) {
    let corpus = build_corpus(&CorpusParams {
        seed: 21,
        sentences: 40,
        ..Default::default()
    })
    .unwrap();
    let stage1 = DiffusionModel::init(&DiffusionConfig::default(), 21).unwrap();
    let e: Vec<Tensor> = corpus
        .samples
        .iter()
        .map(|s| stage1.embed_conditions(&s.conditions).unwrap())
        .collect();
    (Tensor::cat_frames(&e[..26]).unwrap(), Tensor::cat_frames(&e[26..]).unwrap())
}

fn quick(rate: usize) -> FsqAeConfig {
    FsqAeConfig {
        rate,
        steps: 300,
        ..Default::default()
    }
}

fn variance(x: &Tensor) -> f64 {
    let m = x.mean();
    x.map(|v| (v - m).powi(2)).mean()
}

#[test]
fn token_count_halves_as_rate_doubles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counts: Vec<usize> = RATES
        .iter()
        .map(|&rate| {
            let ae = FsqAutoencoder::new(&quick(rate), [8, 8, 8], &mut rng).unwrap();
            ae.tokens_per_frame()
        })
        .collect();
    assert_eq!(counts, vec![64, 32, 16, 8, 4]);
    for w in counts.windows(2) {
        assert_eq!(w[0], 2 * w[1]);
    }
    assert!(FsqAutoencoder::new(&quick(3), [8, 8, 8], &mut rng).is_err());
    assert!(FsqAutoencoder::new(&quick(128), [8, 8, 8], &mut rng).is_err());
}

#[test]
fn zero_embeddings_give_a_constant_grid_at_init() {
    let ae = FsqAutoencoder::new(&FsqAeConfig::default(), [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tokens = ae.encode_tokens(&Tensor::zeros([3, 8, 8, 8])).unwrap();
    // Zero biases at init: every latent is 0, the middle code on each channel.
    assert!(tokens.indices().iter().all(|&t| t == radix_index(&[2, 2, 2, 2], &[5, 5, 5, 5])));
    assert_eq!(tokens.frames(), 3);
    assert_eq!(tokens.tokens_per_frame(), 8);
}

#[test]
fn shape_and_vocabulary_errors() {
    let ae = FsqAutoencoder::new(&FsqAeConfig::default(), [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(matches!(ae.encode_tokens(&Tensor::zeros([2, 4, 8, 8])), Err(Error::Shape(_))));
    let bad = TokenGrid::new(8, vec![625; 8]).unwrap();
    assert!(matches!(ae.decode_tokens(&bad), Err(Error::Argument(_))));
    let wrong_width = TokenGrid::new(4, vec![0; 4]).unwrap();
    assert!(matches!(ae.decode_tokens(&wrong_width), Err(Error::Shape(_))));
    assert!(matches!(train_fsqae(&Tensor::zeros([0, 8, 8, 8]), &quick(8), 0), Err(Error::State(_))));
}

#[test]
fn zero_tokens_decode_to_finite_embeddings() {
    let ae = FsqAutoencoder::new(&FsqAeConfig::default(), [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let grid = TokenGrid::new(8, vec![0; 5 * 8]).unwrap();
    let e = ae.decode_tokens(&grid).unwrap();
    assert_eq!(e.shape(), &[5, 8, 8, 8]);
    assert!(e.data().iter().all(|v| v.is_finite()));
    assert_eq!(ae.decode_tokens(&grid).unwrap(), e);
}

/// `[C, H, W]` 3x3 convolution with zero padding 1.
fn conv3(x: &[f64], c: usize, h: usize, w: usize, weight: &Tensor, bias: &Tensor, stride: (usize, usize)) -> (Vec<f64>, usize, usize) {
    let out_c = weight.dim(0);
    let oh = (h - 1) / stride.0 + 1;
    let ow = (w - 1) / stride.1 + 1;
    let wd = weight.data();
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for r in 0..oh {
            for q in 0..ow {
                let mut acc = bias.data()[o];
                for i in 0..c {
                    for kr in 0..3 {
                        for kq in 0..3 {
                            let (y, x_) = ((r * stride.0 + kr) as isize - 1, (q * stride.1 + kq) as isize - 1);
                            if y < 0 || x_ < 0 || y >= h as isize || x_ >= w as isize {
                                continue;
                            }
                            acc += wd[((o * c + i) * 3 + kr) * 3 + kq] * x[(i * h + y as usize) * w + x_ as usize];
                        }
                    }
                }
                out[(o * oh + r) * ow + q] = acc;
            }
        }
    }
    (out, oh, ow)
}

fn silu(v: &mut [f64]) {
    for x in v {
        *x /= 1.0 + (-*x).exp();
    }
}

/// Encoder forward pass and quantization written out from the raw weights.
fn oracle_tokens(ae: &FsqAutoencoder, frame: &[f64]) -> Vec<u32> {
    let p: std::collections::HashMap<String, Tensor> = ae.store.to_named().into_iter().collect();
    let [mut c, mut h, mut w] = ae.embed_shape();
    let (mut x, nh, nw) = conv3(frame, c, h, w, &p["enc.in.weight"], &p["enc.in.bias"], (1, 1));
    silu(&mut x);
    c = p["enc.in.weight"].dim(0);
    (h, w) = (nh, nw);
    let mut i = 0;
    while let Some(wt) = p.get(&format!("enc.down.{i}.weight")) {
        let stride = if i % 2 == 0 { (2, 1) } else { (1, 2) };
        let (y, nh, nw) = conv3(&x, c, h, w, wt, &p[&format!("enc.down.{i}.bias")], stride);
        x = y;
        silu(&mut x);
        (h, w) = (nh, nw);
        i += 1;
    }
    let (wt, b) = (&p["enc.out.weight"], &p["enc.out.bias"]);
    let d = wt.dim(0);
    let levels = &ae.config.levels;
    let mut tokens = Vec::new();
    for pos in 0..h * w {
        let codes: Vec<u32> = (0..d)
            .map(|o| {
                let z = b.data()[o] + (0..c).map(|k| wt.data()[o * c + k] * x[k * h * w + pos]).sum::<f64>();
                fsq_code_by_thresholds(z, levels[o])
            })
            .collect();
        tokens.push(radix_index(&codes, levels));
    }
    tokens
}

#[test]
fn trained_autoencoder_reconstructs_and_matches_reference_forward() {
    let (train, held) = embeddings();
    let (ae, report) = train_fsqae(&train, &quick(8), 5).unwrap();
    assert_eq!(report.losses.len(), 300);

    let mse = ae.reconstruction_mse(&held).unwrap();
    let var = variance(&held);
    assert!(mse < 0.05, "held-out mse {mse}");
    assert!(mse < 0.25 * var, "held-out mse {mse} vs variance {var}");

    let frames = held.narrow_frames(0, 100.min(held.frames())).unwrap();
    assert_eq!(frames.frames(), 100);
    let grid = ae.encode_tokens(&frames).unwrap();
    assert_eq!(ae.encode_tokens(&frames).unwrap(), grid);
    assert!(grid.indices().iter().all(|&t| t < 625));
    for f in 0..frames.frames() {
        assert_eq!(grid.frame(f), oracle_tokens(&ae, frames.frame_data(f)).as_slice(), "frame {f}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fsqae.svip");
    ae.save(&path).unwrap();
    let back = FsqAutoencoder::load(&path, &quick(8)).unwrap();
    assert_eq!(back.encode_tokens(&frames).unwrap(), grid);
    assert_eq!(back.decode_tokens(&grid).unwrap(), ae.decode_tokens(&grid).unwrap());
    assert!(FsqAutoencoder::load(&path, &quick(4)).is_err());
}

#[test]
fn reconstruction_loss_descends_over_windows() {
    let (train, _) = embeddings();
    let (_, report) = train_fsqae(&train, &quick(8), 6).unwrap();
    let windows: Vec<f64> = report.losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "windowed losses {windows:?}");
    }
}

#[test]
fn uncompressed_rate_and_vq_variants_train() {
    let (train, held) = embeddings();
    for config in [
        quick(1),
        FsqAeConfig {
            quantizer: Quantizer::Vq,
            ..quick(8)
        },
        FsqAeConfig {
            quantizer: Quantizer::Vq,
            vq_ema_decay: Some(0.99),
            ..quick(8)
        },
    ] {
        let (ae, report) = train_fsqae(&train, &config, 7).unwrap();
        let l = &report.losses;
        let head = l[..20].iter().sum::<f64>() / 20.0;
        let tail = l[l.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{config:?}: {head} -> {tail}");
        let grid = ae.encode_tokens(&held).unwrap();
        assert_eq!(grid.tokens_per_frame(), 64 / config.rate);
        assert!(grid.indices().iter().all(|&t| t < 625));
        assert_eq!(ae.decode_tokens(&grid).unwrap().shape(), held.shape());
    }
}
