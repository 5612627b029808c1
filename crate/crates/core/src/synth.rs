//! Seeded hierarchical fine-grained synthetic data.
//!
//! Coarse classes are far apart; each contains several fine classes whose
//! centers sit close together. Every sample is a small grid of local features
//! around its fine center. One position per fine class carries an extra
//! offset in a class-specific direction, so the most discriminative cue is
//! local and rare rather than global.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::csa::LocalFeatureMap;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_coarse: usize,
    pub fines_per_coarse: usize,
    pub samples_per_fine: usize,
    pub channels: usize,
    pub positions: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    pub rare_patch_strength: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The benchmark used throughout the acceptance suite (N = 1024).
    pub fn standard() -> Self {
        Self {
            n_coarse: 8,
            fines_per_coarse: 4,
            samples_per_fine: 32,
            channels: 16,
            positions: 9,
            coarse_spread: 10.0,
            fine_spread: 2.0,
            noise_sigma: 0.5,
            rare_patch_strength: 4.0,
            seed: 7,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_coarse * self.fines_per_coarse * self.samples_per_fine
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_coarse,
            self.fines_per_coarse,
            self.samples_per_fine,
            self.channels,
            self.positions,
        ];
        if counts.contains(&0) {
            return Err(Error::domain("all synthetic counts must be at least 1"));
        }
        if !(self.coarse_spread > 0.0 && self.fine_spread > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::domain("spreads and noise must be positive"));
        }
        if !(self.fine_spread < self.coarse_spread) {
            return Err(Error::domain("fine_spread must be smaller than coarse_spread"));
        }
        if !(self.rare_patch_strength >= 0.0) {
            return Err(Error::domain("rare_patch_strength must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<LocalFeatureMap>,
    pub fine_labels: Vec<u32>,
    pub coarse_labels: Vec<u32>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, LocalFeatureMap::channels)
    }

    pub fn positions(&self) -> usize {
        self.samples.first().map_or(0, LocalFeatureMap::positions)
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Round through `f32` so a dataset survives its on-disk format unchanged.
#[inline]
fn storable(x: f64) -> f64 {
    f64::from(x as f32)
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let c = spec.channels;
    let p = spec.positions;
    let mut rng = rng_for(spec.seed, stream::SYNTH_CENTERS, 0);

    struct Fine {
        center: Vec<f64>,
        rare_offset: Vec<f64>,
        rare_position: usize,
        coarse: u32,
    }
    let mut fines = Vec::with_capacity(spec.n_coarse * spec.fines_per_coarse);
    for k in 0..spec.n_coarse {
        let coarse_center = gaussian(&mut rng, c, spec.coarse_spread);
        for _ in 0..spec.fines_per_coarse {
            let center: Vec<f64> = coarse_center
                .iter()
                .zip(gaussian(&mut rng, c, spec.fine_spread))
                .map(|(a, b)| a + b)
                .collect();
            let dir = gaussian(&mut rng, c, 1.0);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let rare_offset = dir.iter().map(|x| spec.rare_patch_strength * x / norm).collect();
            let rare_position = rng.gen_range(0..p);
            fines.push(Fine {
                center,
                rare_offset,
                rare_position,
                coarse: k as u32,
            });
        }
    }

    let n = spec.n_samples();
    let mut samples = Vec::with_capacity(n);
    let mut fine_labels = Vec::with_capacity(n);
    let mut coarse_labels = Vec::with_capacity(n);
    for (f, fine) in fines.iter().enumerate() {
        for s in 0..spec.samples_per_fine {
            let idx = (f * spec.samples_per_fine + s) as u64;
            let mut srng = rng_for(spec.seed, stream::SYNTH_SAMPLES, idx);
            let mut data = Vec::with_capacity(p * c);
            for pos in 0..p {
                for ch in 0..c {
                    let noise: f64 = srng.sample(StandardNormal);
                    let mut x = fine.center[ch] + spec.noise_sigma * noise;
                    if pos == fine.rare_position {
                        x += fine.rare_offset[ch];
                    }
                    data.push(storable(x));
                }
            }
            samples.push(LocalFeatureMap::new(c, p, data)?);
            fine_labels.push(f as u32);
            coarse_labels.push(fine.coarse);
        }
    }

    // Interleave classes so dataset order carries no label information.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(SynthDataset {
        samples: order.iter().map(|&i| samples[i].clone()).collect(),
        fine_labels: order.iter().map(|&i| fine_labels[i]).collect(),
        coarse_labels: order.iter().map(|&i| coarse_labels[i]).collect(),
    })
}

/// Add i.i.d. Gaussian noise of scale `sigma_aug` to every local feature.
pub fn augment(sample: &LocalFeatureMap, sigma_aug: f64, seed: u64) -> Result<LocalFeatureMap> {
    if !(sigma_aug >= 0.0) {
        return Err(Error::domain("sigma_aug must be non-negative"));
    }
    let mut out = sample.clone();
    if sigma_aug == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, stream::AUGMENT, 0);
    for x in out.as_mut_slice() {
        *x += sigma_aug * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}
