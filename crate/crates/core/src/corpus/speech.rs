//! Prototype-plus-noise stand-in for acoustic features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One fixed random vector per phoneme, `n_phonemes × dim`.
pub fn phoneme_prototypes(n_phonemes: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n_phonemes, dim], 1.0, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DurationRange {
    pub min: usize,
    pub max: usize,
}

impl Default for DurationRange {
    fn default() -> Self {
        DurationRange { min: 1, max: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub frames: Tensor,
    /// Index into the input phoneme sequence for every frame.
    pub alignment: Vec<usize>,
}

/// Each phoneme emits a seeded-uniform run of frames equal to its prototype
/// plus isotropic Gaussian noise.
pub fn synthesize_speech(phonemes: &[usize], prototypes: &Tensor, noise_sigma: f64, durations: DurationRange, seed: u64) -> Result<Synthesized> {
    if durations.min == 0 || durations.min > durations.max {
        return Err(Error::Config(format!(
            "frame durations {}..={} are invalid",
            durations.min, durations.max
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be finite and non-negative")));
    }
    let dim = prototypes.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::new();
    let mut alignment = Vec::new();
    for (pos, &p) in phonemes.iter().enumerate() {
        if p >= prototypes.rows() {
            return Err(Error::UnknownPhoneme(p));
        }
        let run = rng.gen_range(durations.min..=durations.max);
        for _ in 0..run {
            for &v in prototypes.row(p) {
                let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push(v + n);
            }
            alignment.push(pos);
        }
    }
    Ok(Synthesized {
        frames: Tensor::matrix(alignment.len(), dim, data)?,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_unit_duration_reproduces_prototypes() {
        let protos = phoneme_prototypes(5, 4, 1);
        let s = synthesize_speech(&[2, 0, 4], &protos, 0.0, DurationRange { min: 1, max: 1 }, 3).unwrap();
        assert_eq!(s.frames.rows(), 3);
        for (i, p) in [2, 0, 4].into_iter().enumerate() {
            assert_eq!(s.frames.row(i), protos.row(p));
        }
        assert_eq!(s.alignment, vec![0, 1, 2]);
    }

    #[test]
    fn frame_count_respects_duration_bounds() {
        let protos = phoneme_prototypes(5, 4, 1);
        for seed in 0..50 {
            let s = synthesize_speech(&[1, 2, 3], &protos, 0.3, DurationRange::default(), seed).unwrap();
            assert!((3..=12).contains(&s.frames.rows()));
        }
    }

    #[test]
    fn same_seed_same_frames() {
        let protos = phoneme_prototypes(5, 4, 1);
        let a = synthesize_speech(&[1, 2, 3], &protos, 0.3, DurationRange::default(), 9).unwrap();
        let b = synthesize_speech(&[1, 2, 3], &protos, 0.3, DurationRange::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_phoneme_is_rejected() {
        let protos = phoneme_prototypes(5, 4, 1);
        assert!(matches!(
            synthesize_speech(&[7], &protos, 0.0, DurationRange::default(), 0),
            Err(Error::UnknownPhoneme(7))
        ));
    }
}
