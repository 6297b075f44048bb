use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PoseSequence, JOINTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Noise std is `sigma` for every coordinate.
    Absolute,
    /// Noise std is `sigma * std_k`, with `std_k` the dataset std of coordinate `k`.
    VarianceScaled(Vec<f64>),
}

/// Per-coordinate standard deviation of keypoints over a set of sequences,
/// `JOINTS * 2` values.
pub fn keypoint_std<'a>(seqs: impl IntoIterator<Item = &'a PoseSequence>) -> Vec<f64> {
    let width = JOINTS * 2;
    let (mut n, mut sum, mut sq) = (0usize, vec![0.0; width], vec![0.0; width]);
    for s in seqs {
        for row in s.joints.data().chunks(width) {
            n += 1;
            for k in 0..width {
                sum[k] += row[k];
                sq[k] += row[k] * row[k];
            }
        }
    }
    let n = n.max(1) as f64;
    (0..width)
        .map(|k| (sq[k] / n - (sum[k] / n).powi(2)).max(0.0).sqrt())
        .collect()
}

/// Add i.i.d. Gaussian noise to every keypoint coordinate, clipped to `[0, 1]`.
pub fn perturb_spatial<R: Rng + ?Sized>(poses: &PoseSequence, sigma: f64, mode: &SpatialMode, rng: &mut R) -> Result<PoseSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!("spatial sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(poses.clone());
    }
    let width = JOINTS * 2;
    let scales = match mode {
        SpatialMode::Absolute => vec![1.0; width],
        SpatialMode::VarianceScaled(s) if s.len() == width => s.clone(),
        SpatialMode::VarianceScaled(s) => {
            return Err(Error::arg(format!("{} keypoint stds for {width} coordinates", s.len())))
        }
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut joints = poses.joints.clone();
    for (i, v) in joints.data_mut().iter_mut().enumerate() {
        *v = (*v + sigma * scales[i % width] * normal.sample(rng)).clamp(0.0, 1.0);
    }
    PoseSequence::new(joints, poses.hands.clone())
}

/// Delete, repeat or duplicate `ceil(p F)` randomly chosen frames.
///
/// Repeat holds a frame for one extra step; duplicate inserts a copy of it
/// at a random position. At least one frame always survives.
pub fn perturb_temporal<R: Rng + ?Sized>(poses: &PoseSequence, p: f64, rng: &mut R) -> Result<PoseSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("temporal ratio {p} outside [0, 1]")));
    }
    let f = poses.frames();
    let n = (p * f as f64).ceil() as usize;
    if n == 0 {
        return Ok(poses.clone());
    }
    let chosen = rand::seq::index::sample(rng, f, n.min(f));
    let mut op = vec![0u8; f]; // 0 keep, 1 delete, 2 repeat, 3 duplicate
    for i in chosen.iter() {
        op[i] = rng.random_range(1..=3);
    }
    let mut order: Vec<usize> = Vec::with_capacity(f + n);
    let mut dupes = Vec::new();
    for (i, &o) in op.iter().enumerate() {
        match o {
            1 => {}
            2 => order.extend([i, i]),
            3 => {
                order.push(i);
                dupes.push(i);
            }
            _ => order.push(i),
        }
    }
    if order.is_empty() {
        order.push(chosen.index(0));
    }
    for i in dupes {
        let at = rng.random_range(0..=order.len());
        order.insert(at, i);
    }
    poses.select(&order)
}
