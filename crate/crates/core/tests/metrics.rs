mod common;

use common::dtw_brute_force;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signtok::metrics::{dtw, dtw_frames, frame_psnr, psnr, psnr_from_mse, ssim};
use signtok::Tensor;

fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn dtw_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..250 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let dim = rng.random_range(1..=3);
        let a = random_seq(&mut rng, n, dim);
        let b = random_seq(&mut rng, m, dim);
        let r = dtw(&a, &b).unwrap();
        let (cost, len) = dtw_brute_force(&a, &b);
        assert_eq!(r.cost, cost);
        assert_eq!(r.path.len(), len);
        assert_eq!(r.normalized, cost / len as f64);
    }
}

#[test]
fn dtw_path_is_monotone_and_anchored() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = random_seq(&mut rng, 9, 2);
    let b = random_seq(&mut rng, 5, 2);
    let r = dtw(&a, &b).unwrap();
    assert_eq!(r.path.first(), Some(&(0, 0)));
    assert_eq!(r.path.last(), Some(&(8, 4)));
    for w in r.path.windows(2) {
        let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(di <= 1 && dj <= 1 && di + dj >= 1);
    }
}

#[test]
fn dtw_symmetric_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
        let a = random_seq(&mut rng, n, 3);
        let b = random_seq(&mut rng, m, 3);
        let (ab, ba) = (dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
        assert!((ab.cost - ba.cost).abs() <= 1e-12 * ab.cost.max(1.0));
    }
}

#[test]
fn dtw_ignores_frame_duplication() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let a = random_seq(&mut rng, 7, 4);
    let doubled: Vec<Vec<f64>> = a.iter().flat_map(|f| [f.clone(), f.clone()]).collect();
    assert_eq!(dtw(&a, &doubled).unwrap().normalized, 0.0);
    let t = Tensor::new([7, 2, 2], a.concat()).unwrap();
    assert_eq!(dtw_frames(&t, &t).unwrap().cost, 0.0);
}

#[test]
fn psnr_consistency_and_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mse = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
        assert_eq!(frame_psnr(&x, &y), 10.0 * (1.0 / mse).log10());
        assert_eq!(frame_psnr(&x, &y), psnr_from_mse(mse));
    }
    let x = Tensor::from_fn([3, 1, 32, 32], |i| (i % 13) as f64 / 20.0);
    assert!((psnr(&x, &x.map(|v| v + 0.1)).unwrap() - 20.0).abs() < 1e-9);
    assert!(psnr(&x, &Tensor::zeros([3, 1, 32, 31])).is_err());
}

#[test]
fn ssim_orderings() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = Tensor::from_fn([2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let neg = x.map(|v| 1.0 - v);
    let same = ssim(&x, &x).unwrap();
    assert!((same - 1.0).abs() < 1e-12);
    let s_neg = ssim(&x, &neg).unwrap();
    assert!(s_neg < same && s_neg >= -1.0);
    let noisy = x.map(|v| (v + 0.05).min(1.0));
    assert!(ssim(&x, &noisy).unwrap() > s_neg);
}
