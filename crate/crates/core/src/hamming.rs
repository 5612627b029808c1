//! Bit-packed binary codes, Hamming kernels and collision census.
//!
//! A code of length `l` occupies `ceil(l / 64)` words; bit `k` lives at bit
//! `k % 64` of word `k / 64`. A `+1` sign is stored as bit 1 and `-1` as bit 0.
//! Bits past `l` in the last word are always zero, so word-wise equality is
//! code equality.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Longest supported code.
pub const MAX_BITS: usize = 4096;

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

#[inline]
fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

fn check_len(bits: usize) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::domain(format!(
            "code length {bits} outside 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

/// A single binary hash code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitCode {
    words: Vec<u64>,
    len: usize,
}

impl BitCode {
    /// All-zero code (every sign `-1`).
    pub fn zeros(len: usize) -> Result<Self> {
        check_len(len)?;
        Ok(Self {
            words: vec![0; words_for(len)],
            len,
        })
    }

    /// Build from raw words. Bits beyond `len` must be clear.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        check_len(len)?;
        if words.len() != words_for(len) {
            return Err(Error::domain(format!(
                "{} words cannot hold a {len}-bit code",
                words.len()
            )));
        }
        if words[words.len() - 1] & !tail_mask(len) != 0 {
            return Err(Error::domain("bits set beyond code length"));
        }
        Ok(Self { words, len })
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        let mut code = Self::zeros(bits.len())?;
        for (k, &b) in bits.iter().enumerate() {
            if b {
                code.words[k / 64] |= 1 << (k % 64);
            }
        }
        Ok(code)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn bit(&self, k: usize) -> bool {
        assert!(k < self.len, "bit {k} out of range for {}-bit code", self.len);
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    /// Flip every valid bit.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let last = words.len() - 1;
        words[last] &= tail_mask(self.len);
        Self {
            words,
            len: self.len,
        }
    }

    /// Back to the `{-1, +1}` sign convention.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len)
            .map(|k| if self.bit(k) { 1 } else { -1 })
            .collect()
    }
}

/// Pack a `{-1, +1}` sign vector.
pub fn pack_code(signs: &[f64]) -> Result<BitCode> {
    let mut code = BitCode::zeros(signs.len())?;
    for (k, &s) in signs.iter().enumerate() {
        if s == 1.0 {
            code.words[k / 64] |= 1 << (k % 64);
        } else if s != -1.0 {
            return Err(Error::domain(format!(
                "sign {s} at position {k} is not -1 or +1"
            )));
        }
    }
    Ok(code)
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits.
pub fn hamming(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.len != b.len {
        return Err(Error::domain(format!(
            "code length mismatch: {} vs {}",
            a.len, b.len
        )));
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// Code-level normalized Hamming distance `2 * hamming / l`, in `[0, 2]`.
pub fn nhd_codes(a: &BitCode, b: &BitCode) -> Result<f64> {
    Ok(2.0 * f64::from(hamming(a, b)?) / a.len as f64)
}

/// A database of equal-length codes stored contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodeSet {
    bits: usize,
    stride: usize,
    words: Vec<u64>,
}

impl PackedCodeSet {
    pub fn new(bits: usize) -> Result<Self> {
        check_len(bits)?;
        Ok(Self {
            bits,
            stride: words_for(bits),
            words: Vec::new(),
        })
    }

    pub fn from_codes(bits: usize, codes: &[BitCode]) -> Result<Self> {
        let mut set = Self::new(bits)?;
        for c in codes {
            set.push(c)?;
        }
        Ok(set)
    }

    /// Build from `n * ceil(bits/64)` raw words.
    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<Self> {
        check_len(bits)?;
        let stride = words_for(bits);
        if words.len() % stride != 0 {
            return Err(Error::domain("word count is not a multiple of the row stride"));
        }
        let mask = tail_mask(bits);
        if words.chunks_exact(stride).any(|row| row[stride - 1] & !mask != 0) {
            return Err(Error::domain("bits set beyond code length"));
        }
        Ok(Self {
            bits,
            stride,
            words,
        })
    }

    pub fn push(&mut self, code: &BitCode) -> Result<()> {
        if code.len != self.bits {
            return Err(Error::domain(format!(
                "cannot add a {}-bit code to a {}-bit set",
                code.len, self.bits
            )));
        }
        self.words.extend_from_slice(&code.words);
        Ok(())
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.words.len() / self.stride
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    #[inline]
    pub fn words_per_code(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.words[i * self.stride..(i + 1) * self.stride]
    }

    pub fn all_words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> BitCode {
        BitCode {
            words: self.row_words(i).to_vec(),
            len: self.bits,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u64]> {
        self.words.chunks_exact(self.stride)
    }

    /// Multiplicity of every distinct code, in order of first appearance.
    pub fn group_sizes(&self) -> Vec<u64> {
        let mut slot: HashMap<&[u64], usize> = HashMap::with_capacity(self.len());
        let mut sizes = Vec::new();
        for row in self.iter() {
            let next = sizes.len();
            let s = *slot.entry(row).or_insert(next);
            if s == next {
                sizes.push(0);
            }
            sizes[s] += 1;
        }
        sizes
    }
}

/// Number of colliding pairs and total pairs.
pub(crate) fn collision_counts(set: &PackedCodeSet) -> Result<(u128, u128)> {
    let n = set.len() as u128;
    if n < 2 {
        return Err(Error::domain(
            "collision probability is undefined for fewer than two codes",
        ));
    }
    let colliding = set
        .group_sizes()
        .into_iter()
        .map(|k| u128::from(k) * u128::from(k.saturating_sub(1)) / 2)
        .sum();
    Ok((colliding, n * (n - 1) / 2))
}

/// Fraction of unordered pairs whose codes are identical.
///
/// Computed by grouping identical codes, so it runs in expected linear time.
pub fn collision_probability(set: &PackedCodeSet) -> Result<f64> {
    let (colliding, total) = collision_counts(set)?;
    Ok(colliding as f64 / total as f64)
}

/// Sample statistics of uniform random code pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomCodeStats {
    pub mean_nhd: f64,
    pub std_nhd: f64,
    pub collision_rate: f64,
}

/// Draw `n_pairs` pairs of independent uniform `bits`-bit codes.
///
/// For uniform codes the NHD is `(2/l) * Binomial(l, 1/2)`: mean 1, standard
/// deviation `1/sqrt(l)`, and a pair collides with probability `2^-l`.
pub fn random_code_stats(bits: usize, n_pairs: u64, seed: u64) -> Result<RandomCodeStats> {
    check_len(bits)?;
    if n_pairs == 0 {
        return Err(Error::domain("n_pairs must be at least 1"));
    }
    let stride = words_for(bits);
    let mask = tail_mask(bits);
    let mut rng = rng_for(seed, stream::RANDOM_CODES, bits as u64);
    let mut a = vec![0u64; stride];
    let mut b = vec![0u64; stride];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut collisions = 0u64;
    let scale = 2.0 / bits as f64;
    for _ in 0..n_pairs {
        rng.fill(&mut a[..]);
        rng.fill(&mut b[..]);
        a[stride - 1] &= mask;
        b[stride - 1] &= mask;
        let h = hamming_words(&a, &b);
        if h == 0 {
            collisions += 1;
        }
        let d = scale * f64::from(h);
        sum += d;
        sum_sq += d * d;
    }
    let n = n_pairs as f64;
    let mean = sum / n;
    let var = if n_pairs > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(RandomCodeStats {
        mean_nhd: mean,
        std_nhd: var.sqrt(),
        collision_rate: collisions as f64 / n,
    })
}
