mod common;

use common::{fsq_code_by_thresholds, nearest_brute_force, radix_index};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use signtok::nn::{ParamStore, Session};
use signtok::optim::{Adam, AdamConfig};
use signtok::quant::{codebook_usage, quantize_scalar, representative_latent, Dequant, FsqSpec, VqCodebook};
use signtok::{Error, Tensor};

fn spec625() -> FsqSpec {
    FsqSpec::new(vec![5, 5, 5, 5]).unwrap()
}

#[test]
fn exhaustive_bijection_at_625() {
    let spec = spec625();
    for mode in [Dequant::Raw, Dequant::Normalized] {
        for index in 0..625 {
            let codes = spec.unpack(index).unwrap();
            assert_eq!(radix_index(&codes, spec.levels()), index);
            let values = spec.dequantize(&codes, mode).unwrap();
            let z: Vec<f64> = values
                .iter()
                .zip(spec.levels())
                .map(|(&v, &l)| representative_latent(v, l, mode))
                .collect();
            let back = spec.pack(&spec.quantize(&z).unwrap()).unwrap();
            assert_eq!(back, index, "mode {mode:?}");
        }
    }
}

#[test]
fn scalar_codes_match_threshold_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 2.0).unwrap();
    for _ in 0..1000 {
        let z: f64 = normal.sample(&mut rng);
        assert_eq!(quantize_scalar(z, 5).unwrap(), fsq_code_by_thresholds(z, 5), "z = {z}");
    }
    for level in [2, 3, 4, 7, 8] {
        for _ in 0..200 {
            let z: f64 = normal.sample(&mut rng);
            assert_eq!(quantize_scalar(z, level).unwrap(), fsq_code_by_thresholds(z, level));
        }
    }
}

#[test]
fn packed_quantize_matches_per_vector_oracle() {
    let spec = spec625();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let z = Tensor::randn([50, 4], 2.0, &mut rng);
    let packed = spec.quantize_packed(&z).unwrap();
    for (row, &idx) in z.data().chunks(4).zip(&packed) {
        let codes: Vec<u32> = row.iter().map(|&v| fsq_code_by_thresholds(v, 5)).collect();
        assert_eq!(idx, radix_index(&codes, spec.levels()));
    }
    assert!(spec.quantize_packed(&Tensor::zeros([2, 3])).is_err());
}

#[test]
fn straight_through_forward_and_gradient() {
    let spec = FsqSpec::new(vec![5]).unwrap();
    let store = ParamStore::new();
    let mut s = Session::training(&store);
    let z = s.variable(Tensor::new([1, 1], vec![0.0]).unwrap());
    let q = spec.straight_through(&mut s, z, Dequant::Raw).unwrap();
    let loss = s.sum(q).unwrap();
    let g = s.backward(loss).unwrap();
    assert!((g.get(z).unwrap().data()[0] - 1.0).abs() < 1e-12);
    assert_eq!(s.value(q).data(), &[2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let zs = Tensor::randn([25, 4], 2.0, &mut rng);
    let spec = spec625();
    for mode in [Dequant::Raw, Dequant::Normalized] {
        let mut s = Session::inference(&store);
        let z = s.constant(zs.clone());
        let q = spec.straight_through(&mut s, z, mode).unwrap();
        for (row, out) in zs.data().chunks(4).zip(s.value(q).data().chunks(4)) {
            let codes = spec.quantize(row).unwrap();
            assert_eq!(spec.dequantize(&codes, mode).unwrap(), out.to_vec());
        }
    }
}

#[test]
fn straight_through_training_reduces_loss() {
    let spec = FsqSpec::new(vec![5]).unwrap();
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new([1, 1], vec![-3.0]).unwrap());
    let mut opt = Adam::new(&store, AdamConfig::with_lr(0.05));
    let target = 0.5;
    let loss_at = |store: &ParamStore| {
        let mut s = Session::inference(store);
        let x = s.param(w);
        let q = spec.straight_through(&mut s, x, Dequant::Normalized).unwrap();
        let t = s.constant(Tensor::full([1, 1], target));
        let l = s.mse(q, t).unwrap();
        s.value(l).item().unwrap()
    };
    let first = loss_at(&store);
    for _ in 0..100 {
        let grads = {
            let mut s = Session::training(&store);
            let x = s.param(w);
            let q = spec.straight_through(&mut s, x, Dequant::Normalized).unwrap();
            let t = s.constant(Tensor::full([1, 1], target));
            let l = s.mse(q, t).unwrap();
            s.param_grads(l).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
    }
    let last = loss_at(&store);
    assert!(last < first, "{first} -> {last}");
    assert_eq!(last, 0.0);
}

#[test]
fn pack_unpack_exhaustive_bijection() {
    let spec = spec625();
    let mut seen = vec![false; 625];
    for a in 0..5 {
        for b in 0..5 {
            for c in 0..5 {
                for d in 0..5 {
                    let idx = spec.pack(&[a, b, c, d]).unwrap();
                    assert!(!seen[idx as usize]);
                    seen[idx as usize] = true;
                    assert_eq!(spec.unpack(idx).unwrap(), vec![a, b, c, d]);
                }
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn vq_exact_entry_and_two_point_book() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut book = VqCodebook::new(Tensor::randn([10, 3], 1.0, &mut rng)).unwrap();
    let z = book.entry(7).to_vec();
    let out = book.quantize(&z, 0.25).unwrap();
    assert_eq!((out.index, out.commitment), (7, 0.0));

    let book = VqCodebook::new(Tensor::new([2, 1], vec![0.0, 1.0]).unwrap()).unwrap();
    assert_eq!(book.nearest(&[0.4]).unwrap(), 0);
    assert!(matches!(
        VqCodebook::new(Tensor::zeros([0, 1])).unwrap().nearest(&[0.0]),
        Err(Error::State(_))
    ));
}

#[test]
fn vq_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let entries = Tensor::randn([64, 4], 1.0, &mut rng);
    let rows: Vec<Vec<f64>> = entries.data().chunks(4).map(<[f64]>::to_vec).collect();
    let mut book = VqCodebook::new(entries).unwrap();
    let zs = Tensor::randn([500, 4], 1.5, &mut rng);
    let mut last = vec![0u64; 64];
    for z in zs.data().chunks(4) {
        assert_eq!(book.quantize(z, 0.25).unwrap().index, nearest_brute_force(&rows, z));
        assert!(book.usage_counts().iter().zip(&last).all(|(a, b)| a >= b));
        last = book.usage_counts().to_vec();
    }
    assert_eq!(last.iter().sum::<u64>(), 500);
}

#[test]
fn usage_degenerate_and_full_streams() {
    let all: Vec<u32> = (0..625).collect();
    assert_eq!(codebook_usage(&all, 625), 1.0);
    assert_eq!(codebook_usage(&[17; 100], 625), 1.0 / 625.0);
}

#[test]
fn fsq_usage_on_dispersed_gaussian_stream() {
    let spec = spec625();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let z = Tensor::randn([10_000, 4], 3.0, &mut rng);
    let usage = codebook_usage(&spec.quantize_packed(&z).unwrap(), 625);
    assert!(usage >= 0.97, "usage {usage}");
}
