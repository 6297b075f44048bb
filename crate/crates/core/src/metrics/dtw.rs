use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DtwResult {
    /// Sum of per-step L2 costs along the optimal path.
    pub cost: f64,
    /// `cost / path.len()`.
    pub normalized: f64,
    pub path: Vec<(usize, usize)>,
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with steps (i-1, j), (i, j-1), (i-1, j-1) and L2
/// step cost. Among equal-cost alignments the shortest path is chosen, so
/// the normalized distance is well defined.
pub fn dtw<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("dtw of an empty sequence"));
    }
    let (n, m) = (a.len(), b.len());
    if let Some(bad) = a.iter().map(|x| x.as_ref().len()).chain(b.iter().map(|x| x.as_ref().len())).find(|&d| d != a[0].as_ref().len()) {
        return Err(Error::shape(format!("dtw vectors of width {bad} and {}", a[0].as_ref().len())));
    }
    // (cost, steps) per cell, compared lexicographically.
    let mut acc = vec![(f64::INFINITY, usize::MAX); n * m];
    let mut from = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = l2(a[i].as_ref(), b[j].as_ref());
            if i == 0 && j == 0 {
                acc[0] = (c, 1);
                continue;
            }
            let mut best = (f64::INFINITY, usize::MAX);
            let mut dir = 0;
            // Diagonal first so it wins exact ties.
            for (k, (pi, pj)) in [(1usize, 1usize), (1, 0), (0, 1)].into_iter().enumerate() {
                if i < pi || j < pj {
                    continue;
                }
                let cand = acc[(i - pi) * m + (j - pj)];
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                    dir = k as u8;
                }
            }
            acc[i * m + j] = (c + best.0, best.1 + 1);
            from[i * m + j] = dir;
        }
    }
    let (cost, steps) = acc[n * m - 1];
    let mut path = Vec::with_capacity(steps);
    let (mut i, mut j) = (n - 1, m - 1);
    path.push((i, j));
    while (i, j) != (0, 0) {
        match from[i * m + j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => i -= 1,
            _ => j -= 1,
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult {
        cost,
        normalized: cost / steps as f64,
        path,
    })
}

/// DTW between two frame-major tensors, each frame flattened to a vector.
pub fn dtw_frames(a: &Tensor, b: &Tensor) -> Result<DtwResult> {
    let fa: Vec<&[f64]> = (0..a.frames()).map(|i| a.frame_data(i)).collect();
    let fb: Vec<&[f64]> = (0..b.frames()).map(|i| b.frame_data(i)).collect();
    dtw(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell() {
        let r = dtw(&[[0.0]], &[[3.0]]).unwrap();
        assert_eq!((r.cost, r.normalized, r.path.len()), (3.0, 3.0, 1));
    }

    #[test]
    fn identical_is_zero() {
        let a = [[1.0, 2.0], [3.0, 4.0], [0.0, 1.0]];
        let r = dtw(&a, &a).unwrap();
        assert_eq!(r.normalized, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn empty_rejected() {
        let e: [[f64; 1]; 0] = [];
        assert!(dtw(&e, &[[1.0]]).is_err());
    }
}
