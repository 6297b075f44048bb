//! Per-frame token grids and their on-disk form.
//!
//! ```text
//! "SVTK" | frames: u32 | tokens_per_frame: u32 | indices: u32 x frames * tokens_per_frame
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVTK";

/// Packed token indices, `frames x tokens_per_frame`, row-major by frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    tokens_per_frame: usize,
    indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(tokens_per_frame: usize, indices: Vec<u32>) -> Result<Self> {
        if tokens_per_frame == 0 {
            return Err(Error::arg("tokens_per_frame must be positive"));
        }
        if indices.len() % tokens_per_frame != 0 {
            return Err(Error::shape(format!(
                "{} indices do not fill frames of {tokens_per_frame}",
                indices.len()
            )));
        }
        Ok(Self {
            tokens_per_frame,
            indices,
        })
    }

    pub fn from_frames(frames: &[Vec<u32>]) -> Result<Self> {
        let k = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != k) {
            return Err(Error::shape("ragged token frames"));
        }
        Self::new(k, frames.concat())
    }

    pub fn frames(&self) -> usize {
        self.indices.len() / self.tokens_per_frame
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn frame(&self, i: usize) -> &[u32] {
        &self.indices[i * self.tokens_per_frame..(i + 1) * self.tokens_per_frame]
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[u32]> {
        self.indices.chunks(self.tokens_per_frame)
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.indices.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tokens_per_frame as u32).to_le_bytes());
        for &i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a token file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (frames, k) = (word(4), word(8));
        let n = frames
            .checked_mul(k)
            .ok_or_else(|| Error::Format("token count overflow".into()))?;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::Format(format!(
                "token file holds {} bytes, header promises {}",
                bytes.len(),
                12 + 4 * n
            )));
        }
        let indices = bytes[12..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(k, indices).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let g = TokenGrid::from_frames(&[vec![1, 2, 3], vec![624, 0, 7]]).unwrap();
        let back = TokenGrid::decode(&g.encode()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.frame(1), &[624, 0, 7]);
    }

    #[test]
    fn rejects_short_payload() {
        let g = TokenGrid::new(2, vec![1, 2]).unwrap();
        let bytes = g.encode();
        assert!(TokenGrid::decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(TokenGrid::new(2, vec![1]).is_err());
    }
}
