use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::Tensor;

/// Per-channel quantization levels. The codebook is the Cartesian product
/// of the channels, so `vocab_size = prod(levels)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FsqSpec {
    levels: Vec<u32>,
}

/// How a channel code is turned back into a continuous value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dequant {
    /// The code itself, in `[0, L - 1]`.
    Raw,
    /// `2 * code / (L - 1) - 1`, in `[-1, 1]`.
    #[default]
    Normalized,
}

impl FsqSpec {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::arg("FSQ needs at least one channel"));
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::arg(format!("FSQ level {l} < 2")));
        }
        let vocab = levels.iter().try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        match vocab {
            Some(v) if v <= u32::MAX as u64 => Ok(Self { levels }),
            _ => Err(Error::arg("FSQ vocabulary does not fit in u32")),
        }
    }

    /// Levels used for the codebook-size sweep, one entry per power of two
    /// from 2^7 to 2^12. Every factorisation is exact.
    pub fn for_vocab_bits(bits: u32) -> Result<Self> {
        let levels = match bits {
            7 => vec![8, 4, 4],
            8 => vec![4, 4, 4, 4],
            9 => vec![8, 8, 8],
            10 => vec![8, 8, 4, 4],
            11 => vec![8, 8, 8, 4],
            12 => vec![8, 8, 8, 8],
            _ => return Err(Error::arg(format!("no level table for 2^{bits}"))),
        };
        Self::new(levels)
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels.len()
    }

    pub fn vocab_size(&self) -> u32 {
        self.levels.iter().product()
    }

    /// Quantize one `d`-dimensional latent vector into channel codes.
    pub fn quantize(&self, z: &[f64]) -> Result<Vec<u32>> {
        if z.len() != self.channels() {
            return Err(Error::shape(format!(
                "latent of {} values for {} FSQ channels",
                z.len(),
                self.channels()
            )));
        }
        z.iter()
            .zip(&self.levels)
            .map(|(&v, &l)| quantize_scalar(v, l))
            .collect()
    }

    /// Quantize every vector along the last axis of `z`, returning packed indices.
    pub fn quantize_packed(&self, z: &Tensor) -> Result<Vec<u32>> {
        let d = self.channels();
        if z.shape().last() != Some(&d) {
            return Err(Error::shape(format!(
                "FSQ input {:?} does not end in {d} channels",
                z.shape()
            )));
        }
        z.data()
            .chunks(d)
            .map(|v| self.pack(&self.quantize(v)?))
            .collect()
    }

    pub fn dequantize(&self, codes: &[u32], mode: Dequant) -> Result<Vec<f64>> {
        if codes.len() != self.channels() {
            return Err(Error::shape("code count differs from FSQ channels"));
        }
        codes
            .iter()
            .zip(&self.levels)
            .map(|(&c, &l)| dequantize_scalar(c, l, mode))
            .collect()
    }

    /// Mixed-radix packing, most significant channel first:
    /// `index = sum_i codes[i] * prod_{j > i} L_j`.
    pub fn pack(&self, codes: &[u32]) -> Result<u32> {
        if codes.len() != self.channels() {
            return Err(Error::arg(format!(
                "{} codes for {} channels",
                codes.len(),
                self.channels()
            )));
        }
        let mut index = 0u32;
        for (&c, &l) in codes.iter().zip(&self.levels) {
            if c >= l {
                return Err(Error::arg(format!("code {c} out of range for level {l}")));
            }
            index = index * l + c;
        }
        Ok(index)
    }

    pub fn unpack(&self, index: u32) -> Result<Vec<u32>> {
        if index >= self.vocab_size() {
            return Err(Error::arg(format!(
                "index {index} out of range for vocabulary {}",
                self.vocab_size()
            )));
        }
        let mut codes = vec![0; self.channels()];
        let mut rest = index;
        for (slot, &l) in codes.iter_mut().zip(&self.levels).rev() {
            *slot = rest % l;
            rest /= l;
        }
        Ok(codes)
    }

    /// Straight-through FSQ on the tape over the last axis of `z`.
    pub fn straight_through(&self, s: &mut Session, z: Var, mode: Dequant) -> Result<Var> {
        s.fsq(z, &self.levels, mode == Dequant::Normalized)
    }
}

/// `(L - 1) * sigmoid(z)`, the bounded pre-rounding value.
pub fn bound(z: f64, level: u32) -> f64 {
    (level - 1) as f64 * crate::autodiff::sigmoid(z)
}

/// `round((L - 1) * sigmoid(z))`, ties to even.
pub fn quantize_scalar(z: f64, level: u32) -> Result<u32> {
    if !z.is_finite() {
        return Err(Error::NonFinite("fsq_quantize input".into()));
    }
    if level < 2 {
        return Err(Error::arg(format!("FSQ level {level} < 2")));
    }
    Ok(bound(z, level).round_ties_even() as u32)
}

pub fn dequantize_scalar(code: u32, level: u32, mode: Dequant) -> Result<f64> {
    if code >= level {
        return Err(Error::arg(format!("code {code} out of range for level {level}")));
    }
    Ok(match mode {
        Dequant::Raw => code as f64,
        Dequant::Normalized => 2.0 * code as f64 / (level - 1) as f64 - 1.0,
    })
}

/// A finite latent whose quantization is `value`'s code: the logit of the
/// bin centre, with the saturated end bins pulled inside `(0, 1)`.
pub fn representative_latent(value: f64, level: u32, mode: Dequant) -> f64 {
    let code = match mode {
        Dequant::Raw => value,
        Dequant::Normalized => (value + 1.0) * (level - 1) as f64 / 2.0,
    };
    let u = (code / (level - 1) as f64).clamp(1e-9, 1.0 - 1e-9);
    (u / (1.0 - u)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_spec() -> FsqSpec {
        FsqSpec::new(vec![5, 5, 5, 5]).unwrap()
    }

    #[test]
    fn vocab_of_four_channels_at_five_levels() {
        assert_eq!(default_spec().vocab_size(), 625);
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(FsqSpec::new(vec![]).is_err());
        assert!(FsqSpec::new(vec![5, 1]).is_err());
    }

    #[test]
    fn zero_maps_to_middle_code() {
        assert_eq!(quantize_scalar(0.0, 5).unwrap(), 2);
    }

    #[test]
    fn saturation_bounds() {
        assert_eq!(quantize_scalar(-10.0, 5).unwrap(), 0);
        assert_eq!(quantize_scalar(10.0, 5).unwrap(), 4);
        assert_eq!(quantize_scalar(-1e12, 5).unwrap(), 0);
        assert_eq!(quantize_scalar(1e12, 5).unwrap(), 4);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(quantize_scalar(f64::NAN, 5), Err(Error::NonFinite(_))));
        assert!(matches!(quantize_scalar(f64::INFINITY, 5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ties_round_to_even() {
        // (L - 1) * sigmoid(z) = 2.5 exactly needs sigmoid(z) = 0.5 at L = 6.
        assert_eq!(quantize_scalar(0.0, 6).unwrap(), 2);
    }

    #[test]
    fn pack_extremes_and_mixed_radix() {
        let s = default_spec();
        assert_eq!(s.pack(&[0, 0, 0, 0]).unwrap(), 0);
        assert_eq!(s.pack(&[4, 4, 4, 4]).unwrap(), 624);
        assert_eq!(s.pack(&[1, 2, 3, 4]).unwrap(), 194);
        assert!(s.pack(&[5, 0, 0, 0]).is_err());
        assert!(s.unpack(625).is_err());
    }

    #[test]
    fn dequantize_round_trips_at_saturation() {
        for mode in [Dequant::Raw, Dequant::Normalized] {
            for code in [0, 2, 4] {
                let v = dequantize_scalar(code, 5, mode).unwrap();
                let z = representative_latent(v, 5, mode);
                assert_eq!(quantize_scalar(z, 5).unwrap(), code);
            }
        }
        assert!(dequantize_scalar(5, 5, Dequant::Raw).is_err());
    }

    #[test]
    fn sweep_tables_are_exact_powers_of_two() {
        for bits in 7..=12 {
            assert_eq!(FsqSpec::for_vocab_bits(bits).unwrap().vocab_size(), 1 << bits);
        }
    }

    proptest! {
        #[test]
        fn codes_stay_in_range(z in -1e12f64..1e12, level in 2u32..16) {
            prop_assert!(quantize_scalar(z, level).unwrap() < level);
        }

        #[test]
        fn quantization_is_monotone(a in -50f64..50.0, b in -50f64..50.0, level in 2u32..16) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(quantize_scalar(lo, level).unwrap() <= quantize_scalar(hi, level).unwrap());
        }

        #[test]
        fn unpack_then_pack_is_identity(levels in proptest::collection::vec(2u32..9, 1..6), seed in any::<u32>()) {
            let spec = FsqSpec::new(levels).unwrap();
            let idx = seed % spec.vocab_size();
            prop_assert_eq!(spec.pack(&spec.unpack(idx).unwrap()).unwrap(), idx);
        }
    }
}
