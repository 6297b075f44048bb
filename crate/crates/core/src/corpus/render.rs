use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PoseSequence, COND_CHANNELS, HAND_PARAMS, JOINTS, LEFT_WRIST, REST_POSE, RIGHT_WRIST};
use crate::error::Result;
use crate::tensor::Tensor;

/// Signer appearance. Enters only the video, never the conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub intensity: f64,
    pub offset: [f64; 2],
    /// Blob standard deviation as a fraction of the frame side.
    pub blob: f64,
    pub background: f64,
}

impl Identity {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            intensity: rng.random_range(0.6..1.0),
            offset: [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)],
            blob: rng.random_range(0.05..0.08),
            background: rng.random_range(0.0..0.15),
        }
    }
}

/// Pose heatmaps (sigma one cell) plus hand-parameter patches around the wrists.
pub fn render_conditions(poses: &PoseSequence, size: usize) -> Result<Tensor> {
    let f = poses.frames();
    let plane = size * size;
    let mut out = vec![0.0; f * COND_CHANNELS * plane];
    let s = size as f64;
    for t in 0..f {
        let base = t * COND_CHANNELS * plane;
        for j in 0..JOINTS {
            let [x, y] = poses.joint(t, j);
            let (cx, cy) = (x * s - 0.5, y * s - 0.5);
            let ch = &mut out[base + j * plane..base + (j + 1) * plane];
            for r in 0..size {
                for c in 0..size {
                    let d2 = (c as f64 - cx).powi(2) + (r as f64 - cy).powi(2);
                    ch[r * size + c] = (-d2 / 2.0).exp();
                }
            }
        }
        for k in 0..HAND_PARAMS {
            let wrist = if k < HAND_PARAMS / 2 { LEFT_WRIST } else { RIGHT_WRIST };
            let [x, y] = poses.joint(t, wrist);
            let (cx, cy) = ((x * s) as isize, (y * s) as isize);
            let value = poses.hand(t)[k].clamp(0.0, 1.0);
            let ch = base + (JOINTS + k) * plane;
            for r in cy - 1..=cy + 1 {
                for c in cx - 1..=cx + 1 {
                    if (0..size as isize).contains(&r) && (0..size as isize).contains(&c) {
                        out[ch + r as usize * size + c as usize] = value;
                    }
                }
            }
        }
    }
    Tensor::new([f, COND_CHANNELS, size, size], out)
}

fn draw_frame(joints: &[[f64; 2]], hands: &[f64], id: &Identity, size: usize, out: &mut [f64]) {
    let s = size as f64;
    let half = HAND_PARAMS / 2;
    for r in 0..size {
        for c in 0..size {
            let (px, py) = ((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
            let mut v: f64 = 0.0;
            for (j, p) in joints.iter().enumerate() {
                let mut sigma = id.blob;
                if j == LEFT_WRIST || j == RIGHT_WRIST {
                    let h = if j == LEFT_WRIST { &hands[..half] } else { &hands[half..] };
                    sigma *= 0.7 + 0.6 * h.iter().sum::<f64>() / h.len() as f64;
                }
                let d2 = (px - p[0] - id.offset[0]).powi(2) + (py - p[1] - id.offset[1]).powi(2);
                v = v.max((-d2 / (2.0 * sigma * sigma)).exp());
            }
            out[r * size + c] = (id.background + id.intensity * v).min(1.0);
        }
    }
}

/// Gray-scale frames `[F, 1, size, size]` in `[0, 1]`.
pub fn render_video(poses: &PoseSequence, id: &Identity, size: usize) -> Result<Tensor> {
    let f = poses.frames();
    let mut out = vec![0.0; f * size * size];
    for t in 0..f {
        let joints: Vec<[f64; 2]> = (0..JOINTS).map(|j| poses.joint(t, j)).collect();
        draw_frame(&joints, poses.hand(t), id, size, &mut out[t * size * size..(t + 1) * size * size]);
    }
    Tensor::new([f, 1, size, size], out)
}

/// The identity's rest-pose frame `[1, size, size]`.
pub fn render_reference(id: &Identity, size: usize) -> Result<Tensor> {
    let mut out = vec![0.0; size * size];
    draw_frame(&REST_POSE, &[0.5; HAND_PARAMS], id, size, &mut out);
    Tensor::new([1, size, size], out)
}
