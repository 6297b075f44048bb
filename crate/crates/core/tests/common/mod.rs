//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signtok::autodiff::{Tape, Var};
use signtok::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with a small floor so that near-zero gradients compare
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare analytic gradients of `f` against central finite differences at
/// `points` random coordinates of every input. The output is reduced with
/// fixed random weights so every output element contributes. Returns the
/// worst relative error seen.
pub fn gradcheck<F>(inputs: &[Tensor], points: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars).expect("forward");
        t.value(out).shape().to_vec()
    };
    let weights = Tensor::from_fn(probe.clone(), |_| rng.random_range(0.5..1.5));
    let eval = |xs: &[Tensor], grad: bool| -> (f64, Option<Vec<Tensor>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), grad)).collect();
        let out = f(&mut t, &vars).expect("forward");
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w).unwrap();
        let loss = t.sum(prod).unwrap();
        let value = t.value(loss).item().unwrap();
        if !grad {
            return (value, None);
        }
        let g = t.backward(loss).expect("backward");
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
            .collect();
        (value, Some(grads))
    };
    let (_, analytic) = eval(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for _ in 0..points {
            let j = rng.random_range(0..x.len());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// FSQ code by counting bin thresholds in latent space: code `k` covers
/// `logit((k - 1/2) / (L - 1)) .. logit((k + 1/2) / (L - 1))`.
pub fn fsq_code_by_thresholds(z: f64, level: u32) -> u32 {
    let l = (level - 1) as f64;
    (0..level - 1)
        .filter(|&k| {
            let u: f64 = (k as f64 + 0.5) / l;
            let t = (u / (1.0 - u)).ln();
            // At an exact threshold sigmoid gives k + 1/2; ties go to the even code.
            z > t || (z == t && (k + 1) % 2 == 0)
        })
        .count() as u32
}

/// Mixed-radix index computed from the place values directly.
pub fn radix_index(codes: &[u32], levels: &[u32]) -> u32 {
    (0..codes.len())
        .map(|i| codes[i] * levels[i + 1..].iter().product::<u32>())
        .sum()
}

/// Nearest codebook row by explicit distance list and a stable min.
pub fn nearest_brute_force(book: &[Vec<f64>], z: &[f64]) -> usize {
    let dists: Vec<f64> = book
        .iter()
        .map(|e| e.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).unwrap()
}

/// Exhaustive DTW: enumerate every monotone path from (0, 0) to (n-1, m-1)
/// and keep the lexicographically smallest (cost, length).
pub fn dtw_brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, usize) {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
        let dist = a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let cost = cost + dist;
        let len = len + 1;
        if i == a.len() - 1 && j == b.len() - 1 {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, cost, len, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, cost, len, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, cost, len, best);
        }
    }
    let mut best = (f64::INFINITY, usize::MAX);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best
}
