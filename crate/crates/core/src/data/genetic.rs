//! Nucleotide sequences: one-hot encoding, mutation-style augmentation and
//! sinusoidal positional encoding of genetic embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingMap, Modality};
use crate::error::{Error, Result};

/// Width of the padded one-hot tensor.
pub const MAX_WIDTH: usize = 720;

/// One-hot channel order.
pub const CHANNELS: [u8; 4] = *b"ACTG";

/// A string over `{A, C, T, G, N}`, `N` marking an unknown base.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GeneticSequence(Vec<u8>);

impl GeneticSequence {
    /// Parses a sequence; lowercase bases are accepted and upper-cased.
    pub fn parse(s: &str) -> Result<Self> {
        let mut bases = Vec::with_capacity(s.len());
        for c in s.chars() {
            let u = c.to_ascii_uppercase();
            match u {
                'A' | 'C' | 'T' | 'G' | 'N' => bases.push(u as u8),
                _ => return Err(Error::InvalidBase(c)),
            }
        }
        Ok(Self(bases))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl std::fmt::Display for GeneticSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // bases are ASCII by construction
        f.write_str(std::str::from_utf8(&self.0).unwrap_or_default())
    }
}

impl std::str::FromStr for GeneticSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

fn channel_of(base: u8) -> Option<usize> {
    CHANNELS.iter().position(|&c| c == base)
}

/// A `4 × 1 × width` one-hot tensor (channel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotGenetic {
    pub width: usize,
    pub data: Vec<f32>,
}

impl OneHotGenetic {
    pub fn get(&self, channel: usize, position: usize) -> f32 {
        self.data[channel * self.width + position]
    }

    pub fn column(&self, position: usize) -> [f32; 4] {
        std::array::from_fn(|c| self.get(c, position))
    }

    /// Reads the bases back; all-zero columns become `N` and trailing
    /// padding is dropped.
    pub fn decode(&self) -> GeneticSequence {
        let mut out: Vec<u8> = (0..self.width)
            .map(|w| {
                let col = self.column(w);
                col.iter()
                    .position(|&v| v == 1.0)
                    .map(|c| CHANNELS[c])
                    .unwrap_or(b'N')
            })
            .collect();
        while out.last() == Some(&b'N') {
            out.pop();
        }
        GeneticSequence(out)
    }

    pub fn into_embedding(self) -> EmbeddingMap {
        EmbeddingMap {
            modality: Modality::Genetic,
            depth: 4,
            height: 1,
            width: self.width,
            data: self.data,
        }
    }
}

/// Right-pads and one-hot encodes a sequence. Sequences longer than
/// `max_width` are rejected rather than truncated.
pub fn encode_genetic(seq: &GeneticSequence, max_width: usize) -> Result<OneHotGenetic> {
    if seq.len() > max_width {
        return Err(Error::SequenceOverflow {
            len: seq.len(),
            max_width,
        });
    }
    let mut data = vec![0.0f32; 4 * max_width];
    for (i, &b) in seq.as_bytes().iter().enumerate() {
        if let Some(c) = channel_of(b) {
            data[c * max_width + i] = 1.0;
        }
    }
    Ok(OneHotGenetic {
        width: max_width,
        data,
    })
}

/// Random substitutions, insertions and deletions.
///
/// Each known base is substituted with probability `sub_rate` by a uniformly
/// chosen different base; `N` positions are never substituted. Then
/// `n_insert` random bases are inserted at uniform positions, and finally
/// `n_delete` uniformly chosen positions are removed, so the output length is
/// `max(len + n_insert - n_delete, 0)`.
pub fn augment_genetic(
    seq: &GeneticSequence,
    sub_rate: f64,
    n_insert: usize,
    n_delete: usize,
    seed: u64,
) -> Result<GeneticSequence> {
    if !(0.0..=1.0).contains(&sub_rate) {
        return Err(Error::InvalidArgument(format!(
            "substitution rate {sub_rate} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bases = seq.as_bytes().to_vec();
    if sub_rate > 0.0 {
        for b in bases.iter_mut() {
            let Some(c) = channel_of(*b) else { continue };
            if rng.random::<f64>() < sub_rate {
                let shift = rng.random_range(1..4);
                *b = CHANNELS[(c + shift) % 4];
            }
        }
    }
    for _ in 0..n_insert {
        let pos = rng.random_range(0..=bases.len());
        bases.insert(pos, CHANNELS[rng.random_range(0..4)]);
    }
    if n_delete >= bases.len() {
        bases.clear();
    } else {
        for _ in 0..n_delete {
            let pos = rng.random_range(0..bases.len());
            bases.remove(pos);
        }
    }
    Ok(GeneticSequence(bases))
}

/// Transformer-style sinusoid at position `w` and channel `d` of `depth`.
pub fn positional_value(w: usize, d: usize, depth: usize) -> f64 {
    let i2 = (d / 2 * 2) as f64;
    let angle = w as f64 / 10000f64.powf(i2 / depth as f64);
    if d.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Adds `strength · PE(w, d)` to every entry of a genetic embedding.
pub fn add_positional_encoding(e: &EmbeddingMap, strength: f64) -> Result<EmbeddingMap> {
    if e.modality != Modality::Genetic {
        return Err(Error::InvalidArgument(
            "positional encoding applies to genetic embeddings only".into(),
        ));
    }
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding strength {strength} must be finite and non-negative"
        )));
    }
    let mut out = e.clone();
    for d in 0..e.depth {
        for h in 0..e.height {
            for w in 0..e.width {
                let v = e.get(d, h, w) as f64 + strength * positional_value(w, d, e.depth);
                out.set(d, h, w, v as f32);
            }
        }
    }
    Ok(out)
}
