//! Frame-level alignment corruption and the single-pass denoising decode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{best_path_decode, collapse, ctc_loss, Alignment, CtcLoss, PosteriorGrid, TokenSequence, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            sub_rate: 0.0,
            del_rate: 0.0,
            ins_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.sub_rate, self.del_rate, self.ins_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("noise rates must lie in [0, 1]"));
        }
        if rates.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::invalid("noise rates sum above 1"));
        }
        Ok(())
    }
}

/// Corrupts each frame independently: substitution by a uniform label from
/// tokens and blank, deletion to blank, or a copy of the previous frame's
/// clean label. Frame count is preserved.
pub fn corrupt_alignment<R: Rng + ?Sized>(
    clean: &Alignment,
    spec: &NoiseSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Alignment> {
    spec.validate()?;
    let classes = vocab.ctc_classes();
    if let Some(&bad) = clean.0.iter().find(|&&z| z >= classes) {
        return Err(Error::invalid(format!("alignment label {bad} outside tokens and blank")));
    }
    let mut out = clean.0.clone();
    for t in 0..out.len() {
        let u: f64 = rng.random();
        if u < spec.sub_rate {
            out[t] = rng.random_range(0..classes);
        } else if u < spec.sub_rate + spec.del_rate {
            out[t] = vocab.blank();
        } else if u < spec.sub_rate + spec.del_rate + spec.ins_rate && t > 0 {
            out[t] = clean.0[t - 1];
        }
    }
    Ok(Alignment(out))
}

/// CTC loss of the denoiser's frame grid against the target.
pub fn align_denoise_loss(decoder_grid: &PosteriorGrid, target: &TokenSequence) -> Result<CtcLoss> {
    ctc_loss(decoder_grid, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutcome {
    pub tokens: TokenSequence,
    pub decoder_calls: usize,
}

/// Argmax alignment of the encoder grid, one denoiser pass over it, then
/// best-path decoding of the denoiser's grid.
pub fn denoise_decode<F>(encoder_grid: &PosteriorGrid, vocab: &Vocab, decoder: F) -> Result<DenoiseOutcome>
where
    F: FnOnce(&Alignment) -> Result<PosteriorGrid>,
{
    let alignment = encoder_grid.argmax_alignment();
    let refined = decoder(&alignment)?;
    if refined.frames() != encoder_grid.frames() {
        return Err(Error::shape(format!(
            "denoiser returned {} frames for {}",
            refined.frames(),
            encoder_grid.frames()
        )));
    }
    let tokens = best_path_decode(&refined).tokens;
    debug_assert_eq!(tokens, collapse(&refined.argmax_alignment(), vocab)?);
    Ok(DenoiseOutcome {
        tokens,
        decoder_calls: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_is_identity() {
        let v = Vocab::new(4).unwrap();
        let z = Alignment(vec![0, 0, 4, 1, 1, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt_alignment(&z, &NoiseSpec::clean(), &v, &mut rng).unwrap(), z);
    }

    #[test]
    fn full_substitution_stays_in_support() {
        let v = Vocab::new(1).unwrap();
        let spec = NoiseSpec {
            sub_rate: 1.0,
            ..NoiseSpec::clean()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = corrupt_alignment(&Alignment(vec![0; 50]), &spec, &v, &mut rng).unwrap();
        assert_eq!(out.0.len(), 50);
        assert!(out.0.iter().all(|&z| z == 0 || z == v.blank()));
        assert!(out.0.contains(&v.blank()));
    }

    #[test]
    fn rates_are_validated() {
        let spec = NoiseSpec {
            sub_rate: 0.6,
            del_rate: 0.5,
            ..NoiseSpec::clean()
        };
        assert!(spec.validate().is_err());
    }
}
