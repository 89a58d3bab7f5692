//! Seeded channel perturbations: random shuffling and random masking.
//!
//! All randomness comes from [`SplitMix64`], a 64-bit generator with fixed
//! constants, so a seed yields the same permutation on every platform:
//!
//! ```text
//! state += 0x9E37_79B9_7F4A_7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! out = z ^ (z >> 31)
//! ```
//!
//! Bounded draws use rejection sampling, so Fisher–Yates is exactly uniform
//! over all `C!` orderings (up to the generator's quality).

use rand_core::{impls, RngCore, SeedableRng};

use crate::codec::HighDimRep;
use crate::error::{Error, Result};

/// Per-sample seed θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShuffleSeed(pub u64);

impl std::str::FromStr for ShuffleSeed {
    type Err = Error;

    /// Accepts decimal or `0x`-prefixed hexadecimal.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16)
        } else {
            s.parse::<u64>()
        };
        parsed
            .map(ShuffleSeed)
            .map_err(|e| Error::invalid(format!("bad seed '{s}': {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// Uniform `f64` in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Derive an independent stream for a labelled sub-task.
    pub fn fork(&mut self, label: u64) -> SplitMix64 {
        SplitMix64::new(self.next() ^ label.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }
}

impl RngCore for SplitMix64 {
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        impls::fill_bytes_via_next(self, dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand_core::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl SeedableRng for SplitMix64 {
    type Seed = [u8; 8];

    fn from_seed(seed: [u8; 8]) -> Self {
        Self::new(u64::from_le_bytes(seed))
    }

    fn seed_from_u64(state: u64) -> Self {
        Self::new(state)
    }
}

/// Bijection on channel indices: output channel `i` takes input channel `mapping[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelPermutation {
    mapping: Vec<usize>,
}

impl ChannelPermutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::invalid("mapping is not a permutation"));
        }
        Ok(Self { mapping })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mapping: (0..channels).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &src) in self.mapping.iter().enumerate() {
            inv[src] = i;
        }
        Self { mapping: inv }
    }
}

/// Deterministic Fisher–Yates permutation of `channels` indices.
pub fn permutation_from_seed(seed: ShuffleSeed, channels: usize) -> ChannelPermutation {
    let mut rng = SplitMix64::new(seed.0);
    let mut mapping: Vec<usize> = (0..channels).collect();
    for i in (1..channels).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        mapping.swap(i, j);
    }
    ChannelPermutation { mapping }
}

/// `s(r; θ)`: reorder channels according to `perm`.
pub fn shuffle_channels(rep: &HighDimRep, perm: &ChannelPermutation) -> Result<HighDimRep> {
    let (c, h, w) = rep.shape();
    if perm.len() != c {
        return Err(Error::invalid(format!(
            "permutation over {} channels applied to {c}-channel representation",
            perm.len()
        )));
    }
    let mut out = HighDimRep::zeros(c, h, w);
    for (i, &src) in perm.mapping.iter().enumerate() {
        out.plane_mut(i).copy_from_slice(rep.plane(src));
    }
    Ok(out)
}

/// Channel indices zeroed by [`mask_channels`]: `round(ratio·C)` indices
/// drawn without replacement by a seeded partial shuffle, returned sorted.
pub fn masked_channel_set(seed: ShuffleSeed, channels: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let count = (ratio * channels as f64).round() as usize;
    let mut rng = SplitMix64::new(seed.0);
    let mut idx: Vec<usize> = (0..channels).collect();
    for i in 0..count.min(channels) {
        let j = i + rng.below((channels - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `m(r; θ)`: zero a seeded subset of channels.
pub fn mask_channels(rep: &HighDimRep, seed: ShuffleSeed, ratio: f64) -> Result<HighDimRep> {
    let chosen = masked_channel_set(seed, rep.channels(), ratio)?;
    let mut out = rep.clone();
    for c in chosen {
        out.plane_mut(c).fill(0.0);
    }
    Ok(out)
}
