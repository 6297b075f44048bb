//! Deterministic synthetic signing corpus.

mod io;
mod perturb;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use io::{load_corpus, read_sample, save_corpus, Manifest, SentenceRecord};
pub use perturb::{keypoint_std, perturb_spatial, perturb_temporal, SpatialMode};
pub use render::{render_conditions, render_reference, render_video, Identity};

pub const JOINTS: usize = 8;
pub const HAND_PARAMS: usize = 4;
/// Pose heatmaps followed by hand-parameter maps.
pub const COND_CHANNELS: usize = JOINTS + HAND_PARAMS;
pub const LEFT_WRIST: usize = 6;
pub const RIGHT_WRIST: usize = 7;

/// Canonical rest pose: head, neck, shoulders, elbows, wrists.
pub const REST_POSE: [[f64; 2]; JOINTS] = [
    [0.50, 0.18],
    [0.50, 0.32],
    [0.34, 0.36],
    [0.66, 0.36],
    [0.28, 0.54],
    [0.72, 0.54],
    [0.36, 0.70],
    [0.64, 0.70],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub seed: u64,
    pub glosses: usize,
    pub sentences: usize,
    pub max_sentence_len: usize,
    pub identities: usize,
    pub min_gloss_frames: usize,
    pub max_gloss_frames: usize,
    /// Largest per-frame joint displacement inside a gloss.
    pub delta_max: f64,
    pub blend_frames: usize,
    pub cond_size: usize,
    pub video_size: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            seed: 0,
            glosses: 10,
            sentences: 200,
            max_sentence_len: 3,
            identities: 4,
            min_gloss_frames: 4,
            max_gloss_frames: 12,
            delta_max: 0.08,
            blend_frames: 2,
            cond_size: 16,
            video_size: 32,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.glosses < 2 {
            return bad("glosses must be >= 2");
        }
        if self.sentences == 0 || self.max_sentence_len == 0 || self.identities == 0 {
            return bad("sentences, max_sentence_len and identities must be positive");
        }
        if self.min_gloss_frames == 0 || self.min_gloss_frames > self.max_gloss_frames {
            return bad("gloss frame range is empty");
        }
        if !(self.delta_max > 0.0) {
            return bad("delta_max must be positive");
        }
        if self.cond_size < 4 || self.video_size < 8 {
            return bad("rasters too small");
        }
        Ok(())
    }
}

/// Per-frame keypoints `[F, J, 2]` in `[0, 1]` and hand parameters `[F, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub joints: Tensor,
    pub hands: Tensor,
}

impl PoseSequence {
    pub fn new(joints: Tensor, hands: Tensor) -> Result<Self> {
        let f = joints.frames();
        if joints.shape() != [f, JOINTS, 2] || hands.shape() != [f, HAND_PARAMS] || f == 0 {
            return Err(Error::shape(format!(
                "pose sequence {:?} / {:?}",
                joints.shape(),
                hands.shape()
            )));
        }
        joints.check_finite("pose joints")?;
        Ok(Self { joints, hands })
    }

    pub fn frames(&self) -> usize {
        self.joints.frames()
    }

    pub fn joint(&self, f: usize, j: usize) -> [f64; 2] {
        let d = self.joints.data();
        let o = (f * JOINTS + j) * 2;
        [d[o], d[o + 1]]
    }

    pub fn hand(&self, f: usize) -> &[f64] {
        self.hands.frame_data(f)
    }

    /// Frames in the given order (indices may repeat).
    pub fn select(&self, order: &[usize]) -> Result<Self> {
        let j: Vec<Tensor> = order.iter().map(|&i| self.joints.frame(i)).collect();
        let h: Vec<Tensor> = order.iter().map(|&i| self.hands.frame(i)).collect();
        Self::new(Tensor::stack(&j)?, Tensor::stack(&h)?)
    }

    pub fn concat(parts: &[PoseSequence]) -> Result<Self> {
        let j: Vec<Tensor> = parts.iter().map(|p| p.joints.clone()).collect();
        let h: Vec<Tensor> = parts.iter().map(|p| p.hands.clone()).collect();
        Self::new(Tensor::cat_frames(&j)?, Tensor::cat_frames(&h)?)
    }

    /// Largest Euclidean joint displacement between consecutive frames.
    pub fn max_displacement(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for f in 1..self.frames() {
            for j in 0..JOINTS {
                let (a, b) = (self.joint(f - 1, j), self.joint(f, j));
                worst = worst.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sentence: Vec<usize>,
    pub identity: usize,
    pub poses: PoseSequence,
    /// `[F, COND_CHANNELS, cond_size, cond_size]`.
    pub conditions: Tensor,
    /// `[F, 1, video_size, video_size]`.
    pub video: Tensor,
    /// `[1, video_size, video_size]`, the identity's rest pose.
    pub reference: Tensor,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub params: CorpusParams,
    pub gloss_trajectories: Vec<PoseSequence>,
    pub identities: Vec<Identity>,
    pub samples: Vec<Sample>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smooth path through `points` sampled at `frames` evenly spaced times.
fn interpolate(points: &[Vec<f64>], frames: usize) -> Vec<Vec<f64>> {
    let segs = points.len() - 1;
    (0..frames)
        .map(|f| {
            let u = if frames == 1 { 0.0 } else { f as f64 / (frames - 1) as f64 * segs as f64 };
            let k = (u.floor() as usize).min(segs - 1);
            let t = smoothstep(u - k as f64);
            points[k].iter().zip(&points[k + 1]).map(|(a, b)| a + (b - a) * t).collect()
        })
        .collect()
}

fn gloss_trajectory<R: Rng>(params: &CorpusParams, rng: &mut R) -> Result<PoseSequence> {
    let frames = rng.random_range(params.min_gloss_frames..=params.max_gloss_frames);
    let width = JOINTS * 2 + HAND_PARAMS;
    let mobility = |j: usize| match j {
        0 | 1 => 0.04,
        2 | 3 => 0.05,
        _ => 0.2,
    };
    let controls: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut v = Vec::with_capacity(width);
            for (j, rest) in REST_POSE.iter().enumerate() {
                for &c in rest {
                    v.push(c + rng.random_range(-1.0..1.0) * mobility(j));
                }
            }
            for _ in 0..HAND_PARAMS {
                v.push(rng.random_range(0.0..1.0));
            }
            v
        })
        .collect();
    let mut path = interpolate(&controls, frames);
    let joints_of = |p: &Vec<Vec<f64>>| {
        Tensor::new([p.len(), JOINTS, 2], p.iter().flat_map(|r| r[..JOINTS * 2].to_vec()).collect())
    };
    let hands_of = |p: &Vec<Vec<f64>>| Tensor::new([p.len(), HAND_PARAMS], p.iter().flat_map(|r| r[JOINTS * 2..].to_vec()).collect());
    let raw = PoseSequence::new(joints_of(&path)?, hands_of(&path)?)?;
    let d = raw.max_displacement();
    if d > params.delta_max {
        // Shrink motion about the first frame; keypoints stay inside the hull of the path.
        let s = params.delta_max / d * (1.0 - 1e-9);
        let first = path[0].clone();
        for row in path.iter_mut().skip(1) {
            for (v, f0) in row[..JOINTS * 2].iter_mut().zip(&first) {
                *v = f0 + (*v - f0) * s;
            }
        }
    }
    for row in path.iter_mut() {
        for v in row.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    PoseSequence::new(joints_of(&path)?, hands_of(&path)?)
}

/// `blend` linearly interpolated frames strictly between `a`'s last frame and `b`'s first.
fn blend(a: &PoseSequence, b: &PoseSequence, blend: usize) -> Result<Option<PoseSequence>> {
    if blend == 0 {
        return Ok(None);
    }
    let (la, lb) = (a.frames() - 1, 0);
    let mut joints = Vec::new();
    let mut hands = Vec::new();
    for k in 1..=blend {
        let t = k as f64 / (blend + 1) as f64;
        let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + (q - p) * t).collect() };
        joints.push(Tensor::new([JOINTS, 2], mix(a.joints.frame_data(la), b.joints.frame_data(lb)))?);
        hands.push(Tensor::new([HAND_PARAMS], mix(a.hand(la), b.hand(lb)))?);
    }
    Ok(Some(PoseSequence::new(Tensor::stack(&joints)?, Tensor::stack(&hands)?)?))
}

/// Pose sequence of a gloss sentence: the gloss trajectories joined by blends.
pub fn sentence_poses(trajectories: &[PoseSequence], sentence: &[usize], blend_frames: usize) -> Result<PoseSequence> {
    if sentence.is_empty() {
        return Err(Error::arg("empty sentence"));
    }
    let mut parts: Vec<PoseSequence> = Vec::new();
    for (k, &g) in sentence.iter().enumerate() {
        let traj = trajectories
            .get(g)
            .ok_or_else(|| Error::arg(format!("gloss {g} out of range")))?;
        if k > 0 {
            if let Some(b) = blend(&trajectories[sentence[k - 1]], traj, blend_frames)? {
                parts.push(b);
            }
        }
        parts.push(traj.clone());
    }
    PoseSequence::concat(&parts)
}

impl Corpus {
    pub fn sample_for(&self, sentence: &[usize], identity: usize) -> Result<Sample> {
        let id = self
            .identities
            .get(identity)
            .ok_or_else(|| Error::arg(format!("identity {identity} out of range")))?;
        let poses = sentence_poses(&self.gloss_trajectories, sentence, self.params.blend_frames)?;
        Ok(Sample {
            sentence: sentence.to_vec(),
            identity,
            conditions: render_conditions(&poses, self.params.cond_size)?,
            video: render_video(&poses, id, self.params.video_size)?,
            reference: render_reference(id, self.params.video_size)?,
            poses,
        })
    }
}

pub fn build_corpus(params: &CorpusParams) -> Result<Corpus> {
    params.validate()?;
    let mut g_rng = rng::stream(params.seed, 1);
    let gloss_trajectories = (0..params.glosses)
        .map(|_| gloss_trajectory(params, &mut g_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut i_rng = rng::stream(params.seed, 2);
    let identities = (0..params.identities).map(|_| Identity::random(&mut i_rng)).collect();
    let mut corpus = Corpus {
        params: params.clone(),
        gloss_trajectories,
        identities,
        samples: Vec::with_capacity(params.sentences),
    };
    let mut s_rng = rng::stream(params.seed, 3);
    for _ in 0..params.sentences {
        let len = s_rng.random_range(1..=params.max_sentence_len);
        let sentence: Vec<usize> = (0..len).map(|_| s_rng.random_range(0..params.glosses)).collect();
        let identity = s_rng.random_range(0..params.identities);
        let sample = corpus.sample_for(&sentence, identity)?;
        corpus.samples.push(sample);
    }
    Ok(corpus)
}
