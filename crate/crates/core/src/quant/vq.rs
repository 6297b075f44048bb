use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::Tensor;

/// Commitment weight used by the learned-codebook baseline.
pub const DEFAULT_BETA: f64 = 0.25;

/// A learned codebook `[K, d]` with per-entry usage counters.
#[derive(Clone, Debug)]
pub struct VqCodebook {
    entries: Tensor,
    usage: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqOutput {
    pub index: usize,
    pub vector: Vec<f64>,
    /// `beta * ||z - e||^2 / d`.
    pub commitment: f64,
}

impl VqCodebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.rank() != 2 {
            return Err(Error::shape(format!("codebook must be [K, d], got {:?}", entries.shape())));
        }
        entries.check_finite("codebook")?;
        let k = entries.dim(0);
        Ok(Self {
            entries,
            usage: vec![0; k],
        })
    }

    /// The conventional `U(-1/K, 1/K)` initialisation.
    pub fn uniform<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / size.max(1) as f64;
        Self::new(Tensor::uniform([size, dim], bound, rng)).expect("rank-2 finite init")
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.data()[i * d..(i + 1) * d]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the nearest entry in squared L2, ties to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> Result<usize> {
        if self.size() == 0 {
            return Err(Error::state("empty codebook"));
        }
        if z.len() != self.dim() {
            return Err(Error::shape(format!("vector of {} for codebook dim {}", z.len(), self.dim())));
        }
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.data().chunks(self.dim()).enumerate() {
            let d: f64 = e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// Nearest-entry lookup that also bumps the usage counter.
    pub fn quantize(&mut self, z: &[f64], beta: f64) -> Result<VqOutput> {
        let index = self.nearest(z)?;
        self.usage[index] += 1;
        let vector = self.entry(index).to_vec();
        let sq: f64 = vector.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(VqOutput {
            index,
            vector,
            commitment: beta * sq / z.len() as f64,
        })
    }
}

/// Differentiable VQ over rows of `z` `[N, d]` against `codebook` `[K, d]`.
///
/// Returns the straight-through quantized rows, the chosen indices and
/// `||sg(z) - e||^2 + beta * ||z - sg(e)||^2` (both as means).
pub fn vq_straight_through(s: &mut Session, z: Var, codebook: Var, beta: f64) -> Result<(Var, Vec<usize>, Var)> {
    let table = VqCodebook::new(s.value(codebook).clone())?;
    let zs = s.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != table.dim() {
        return Err(Error::shape(format!("VQ input {zs:?} for codebook {:?}", table.entries().shape())));
    }
    let indices = s
        .value(z)
        .data()
        .chunks(zs[1])
        .map(|row| table.nearest(row))
        .collect::<Result<Vec<_>>>()?;
    let picked = s.gather(codebook, &indices)?;
    let z_sg = s.detach(z);
    let e_sg = s.detach(picked);
    let codebook_loss = s.mse(picked, z_sg)?;
    let commit = s.mse(z, e_sg)?;
    let commit = s.scale(commit, beta)?;
    let aux = s.add(codebook_loss, commit)?;
    let value = s.value(picked).clone();
    let q = s.straight_through(z, value)?;
    Ok((q, indices, aux))
}

/// Exponential-moving-average codebook updates, used in place of the
/// codebook loss term when enabled.
#[derive(Clone, Debug)]
pub struct EmaCodebook {
    decay: f64,
    cluster: Vec<f64>,
    sums: Vec<f64>,
}

impl EmaCodebook {
    pub const EPS: f64 = 1e-5;

    pub fn new(entries: &Tensor, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::arg(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            decay,
            cluster: vec![1.0; entries.dim(0)],
            sums: entries.data().to_vec(),
        })
    }

    /// Fold in the rows `z` `[N, d]` assigned to `indices` and rewrite `entries`.
    pub fn update(&mut self, entries: &mut Tensor, z: &Tensor, indices: &[usize]) -> Result<()> {
        let (k, d) = (entries.dim(0), entries.dim(1));
        if k != self.cluster.len() || z.rank() != 2 || z.dim(1) != d || z.dim(0) != indices.len() {
            return Err(Error::shape("EMA update shapes"));
        }
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (row, &i) in z.data().chunks(d).zip(indices) {
            counts[i] += 1.0;
            for (acc, v) in sums[i * d..(i + 1) * d].iter_mut().zip(row) {
                *acc += v;
            }
        }
        let a = self.decay;
        for (c, n) in self.cluster.iter_mut().zip(&counts) {
            *c = a * *c + (1.0 - a) * n;
        }
        for (s, v) in self.sums.iter_mut().zip(&sums) {
            *s = a * *s + (1.0 - a) * v;
        }
        let total: f64 = self.cluster.iter().sum();
        let out = entries.data_mut();
        for i in 0..k {
            let smoothed = (self.cluster[i] + Self::EPS) / (total + k as f64 * Self::EPS) * total;
            for j in 0..d {
                out[i * d + j] = self.sums[i * d + j] / smoothed;
            }
        }
        Ok(())
    }
}

/// Fraction of the `vocab` entries that occur at least once in `indices`.
pub fn codebook_usage(indices: &[u32], vocab: u32) -> f64 {
    if vocab == 0 {
        return 0.0;
    }
    let mut seen = vec![false; vocab as usize];
    for &i in indices {
        if let Some(s) = seen.get_mut(i as usize) {
            *s = true;
        }
    }
    seen.iter().filter(|&&s| s).count() as f64 / vocab as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = VqCodebook::new(Tensor::new([3, 1], vec![1.0, -1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(cb.nearest(&[0.0]).unwrap(), 0);
        assert_eq!(cb.nearest(&[0.9]).unwrap(), 0);
        assert_eq!(cb.nearest(&[-0.2]).unwrap(), 1);
    }

    #[test]
    fn empty_codebook_is_state_error() {
        let cb = VqCodebook::new(Tensor::zeros([0, 2])).unwrap();
        assert!(matches!(cb.nearest(&[0.0, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn quantize_counts_usage_and_commitment() {
        let mut cb = VqCodebook::new(Tensor::new([2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap()).unwrap();
        let out = cb.quantize(&[1.8, 2.4], 0.25).unwrap();
        assert_eq!(out.index, 1);
        assert!((out.commitment - 0.25 * (0.04 + 0.16) / 2.0).abs() < 1e-12);
        cb.quantize(&[0.1, 0.0], 0.25).unwrap();
        cb.quantize(&[2.0, 2.0], 0.25).unwrap();
        assert_eq!(cb.usage_counts(), &[1, 2]);
    }

    #[test]
    fn usage_fraction() {
        assert_eq!(codebook_usage(&[0, 1, 1, 3], 4), 0.75);
        assert_eq!(codebook_usage(&[], 4), 0.0);
    }

    #[test]
    fn straight_through_gradients_split() {
        let mut store = ParamStore::new();
        let cb = store.add("cb", Tensor::new([2, 1], vec![0.0, 1.0]).unwrap());
        let mut s = Session::training(&store);
        let z = s.variable(Tensor::new([1, 1], vec![0.8]).unwrap());
        let c = s.param(cb);
        let (q, idx, aux) = vq_straight_through(&mut s, z, c, 0.25).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(s.value(q).data(), &[1.0]);
        let qs = s.sum(q).unwrap();
        let total = s.add(qs, aux).unwrap();
        let g = s.backward(total).unwrap();
        // dq/dz = 1, d(beta (z - e)^2)/dz = 2 * 0.25 * (0.8 - 1)
        assert!((g.get(z).unwrap().data()[0] - (1.0 - 0.1)).abs() < 1e-12);
        // codebook row 1 gets 2 * (1 - 0.8), row 0 nothing
        let gc = g.get(c).unwrap().data();
        assert!((gc[1] - 0.4).abs() < 1e-12 && gc[0] == 0.0);
    }
}
