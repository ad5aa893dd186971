//! Differentiable stand-in vocoders mapping mel batches to waveforms.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Vocoder {
    fn n_mels(&self) -> usize;
    fn hop(&self) -> usize;
    /// `[b, n_mels, frames]` -> `[b, frames * hop]`.
    fn vocode(&self, mel: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VocoderConfig {
    Bypass { n_mels: usize },
    SineBank { n_mels: usize, hop: usize, sample_rate: f64 },
}

impl VocoderConfig {
    pub fn build(&self) -> Box<dyn Vocoder + Send + Sync> {
        match *self {
            VocoderConfig::Bypass { n_mels } => Box::new(BypassVocoder { n_mels }),
            VocoderConfig::SineBank {
                n_mels,
                hop,
                sample_rate,
            } => Box::new(SineBankVocoder::new(n_mels, hop, sample_rate)),
        }
    }
}

fn check_mel(mel: &Tensor, n_mels: usize) -> Result<(usize, usize)> {
    match *mel.shape() {
        [b, m, f] if m == n_mels && f > 0 => Ok((b, f)),
        _ => Err(Error::Geometry(format!(
            "vocoder expects [b, {n_mels}, frames], got {:?}",
            mel.shape()
        ))),
    }
}

/// Emits the mel frames themselves, frame-major; hop equals `n_mels`.
#[derive(Clone, Debug)]
pub struct BypassVocoder {
    pub n_mels: usize,
}

impl Vocoder for BypassVocoder {
    fn n_mels(&self) -> usize {
        self.n_mels
    }

    fn hop(&self) -> usize {
        self.n_mels
    }

    fn vocode(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, f) = check_mel(mel, self.n_mels)?;
        Ok(mel.permute(&[0, 2, 1]).reshape(&[b, f * self.n_mels]))
    }
}

/// Fixed sinusoid bank at mel-spaced centre frequencies, each partial
/// amplitude-modulated by `exp(mel)` per frame with continuous phase.
#[derive(Clone, Debug)]
pub struct SineBankVocoder {
    n_mels: usize,
    hop: usize,
    omega: Vec<f64>,
    cos_basis: Tensor,
    sin_basis: Tensor,
}

impl SineBankVocoder {
    pub fn new(n_mels: usize, hop: usize, sample_rate: f64) -> Self {
        let nyq = sample_rate / 2.0;
        let mel_max = crate::data::mel::hz_to_mel(nyq * 0.9);
        let mel_min = crate::data::mel::hz_to_mel(60.0);
        let omega: Vec<f64> = (0..n_mels)
            .map(|m| {
                let mel = mel_min + (mel_max - mel_min) * (m as f64 + 0.5) / n_mels as f64;
                2.0 * std::f64::consts::PI * crate::data::mel::mel_to_hz(mel) / sample_rate
            })
            .collect();
        let basis = |f: fn(f64) -> f64| {
            let mut d = Vec::with_capacity(n_mels * hop);
            for &w in &omega {
                for n in 0..hop {
                    d.push(f(w * n as f64) / n_mels as f64);
                }
            }
            Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n_mels, hop]), d).unwrap())
        };
        Self {
            n_mels,
            hop,
            cos_basis: basis(f64::cos),
            sin_basis: basis(f64::sin),
            omega,
        }
    }

    fn phase_tables(&self, frames: usize) -> (Tensor, Tensor) {
        let mut s = Vec::with_capacity(self.n_mels * frames);
        let mut c = Vec::with_capacity(self.n_mels * frames);
        for &w in &self.omega {
            for f in 0..frames {
                let phi = w * (f * self.hop) as f64;
                s.push(phi.sin());
                c.push(phi.cos());
            }
        }
        let shape = [1, self.n_mels, frames];
        (
            Tensor::constant(ArrayD::from_shape_vec(IxDyn(&shape), s).unwrap()),
            Tensor::constant(ArrayD::from_shape_vec(IxDyn(&shape), c).unwrap()),
        )
    }
}

impl Vocoder for SineBankVocoder {
    fn n_mels(&self) -> usize {
        self.n_mels
    }

    fn hop(&self) -> usize {
        self.hop
    }

    fn vocode(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, f) = check_mel(mel, self.n_mels)?;
        let amp = mel.exp();
        let (sin_phi, cos_phi) = self.phase_tables(f);
        // sin(phi + wn) = sin(phi) cos(wn) + cos(phi) sin(wn)
        let rows = |t: Tensor| t.permute(&[0, 2, 1]).reshape(&[b * f, self.n_mels]);
        let a_s = rows(amp.mul(&sin_phi));
        let a_c = rows(amp.mul(&cos_phi));
        let wave = a_s
            .matmul(&self.cos_basis)
            .add(&a_c.matmul(&self.sin_basis));
        Ok(wave.reshape(&[b, f * self.hop]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn bypass_flattens_frames() {
        let v = BypassVocoder { n_mels: 3 };
        let mel = Tensor::from_vec(&[1, 3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let w = v.vocode(&mel).unwrap();
        assert_eq!(w.to_vec(), vec![1., 3., 5., 2., 4., 6.]);
    }

    #[test]
    fn sine_bank_length_and_determinism() {
        let v = SineBankVocoder::new(8, 256, 22050.0);
        let mut rng = SeededRng::new(0);
        let mel = Tensor::constant(rng.normal_array(&[2, 8, 64]));
        let a = v.vocode(&mel).unwrap();
        assert_eq!(a.shape(), &[2, 16384]);
        assert_eq!(a.value(), v.vocode(&mel).unwrap().value());
        let wrong = Tensor::constant(rng.normal_array(&[2, 7, 4]));
        assert!(matches!(v.vocode(&wrong), Err(Error::Geometry(_))));
    }

    #[test]
    fn sine_bank_phase_is_continuous_across_frames() {
        // Constant amplitude on one partial yields a pure sinusoid.
        let n_mels = 4;
        let v = SineBankVocoder::new(n_mels, 32, 8000.0);
        let mut data = vec![f64::NEG_INFINITY; n_mels * 3];
        for f in 0..3 {
            data[2 * 3 + f] = 0.0;
        }
        let mel = Tensor::from_vec(&[1, n_mels, 3], data);
        let w = v.vocode(&mel).unwrap().to_vec();
        let omega = v.omega[2];
        for (n, s) in w.iter().enumerate() {
            assert!((s - (omega * n as f64).sin() / n_mels as f64).abs() < 1e-9);
        }
    }
}
