//! WAV ingestion and log-mel extraction.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelScale {
    Slaney,
    Htk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Natural-log floor applied to mel energies.
    pub log_floor: f64,
    pub scale: MelScale,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            win: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
            scale: MelScale::Slaney,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop >= 1 && self.hop <= self.win && self.win <= self.n_fft) {
            return Err(Error::Config(format!(
                "mel config needs hop <= win <= n_fft, got {} / {} / {}",
                self.hop, self.win, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.sample_rate == 0 || self.log_floor <= 0.0 {
            return Err(Error::Config("mel config sizes and floor must be positive".into()));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config("mel config needs 0 <= fmin < fmax <= nyquist".into()));
        }
        Ok(())
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop)
    }

    pub fn playback_seconds(&self, frames: usize) -> f64 {
        (frames * self.hop) as f64 / self.sample_rate as f64
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

fn htk_hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn htk_mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank `[n_mels, n_fft/2 + 1]`; Slaney variant is
/// area-normalized.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let (to_mel, to_hz): (fn(f64) -> f64, fn(f64) -> f64) = match cfg.scale {
        MelScale::Slaney => (hz_to_mel, mel_to_hz),
        MelScale::Htk => (htk_hz_to_mel, htk_mel_to_hz),
    };
    let bins = cfg.n_fft / 2 + 1;
    let lo = to_mel(cfg.fmin);
    let hi = to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let fft_hz: Vec<f64> = (0..bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    Array2::from_shape_fn((cfg.n_mels, bins), |(m, k)| {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = fft_hz[k];
        let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
        match cfg.scale {
            MelScale::Slaney => w * 2.0 / (r - l),
            MelScale::Htk => w,
        }
    })
}

/// Reusable extractor holding the filterbank, window and FFT plan.
pub struct MelExtractor {
    cfg: MelConfig,
    fb: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let offset = (cfg.n_fft - cfg.win) / 2;
        let mut window = vec![0.0; cfg.n_fft];
        for n in 0..cfg.win {
            window[offset + n] =
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.win as f64).cos();
        }
        Ok(Self {
            cfg: cfg.clone(),
            fb: mel_filterbank(cfg),
            window,
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// `[n_mels, ceil(len / hop)]` natural-log mel energies. Frame `i` is
    /// centred at sample `i * hop + hop / 2`; samples outside the signal are
    /// zero.
    pub fn extract(&self, wave: &[f64]) -> Result<Array2<f64>> {
        if wave.is_empty() {
            return Err(Error::Empty("waveform"));
        }
        if wave.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        let cfg = &self.cfg;
        let frames = cfg.frames_for(wave.len());
        let bins = cfg.n_fft / 2 + 1;
        let lead = (cfg.n_fft - cfg.hop) as isize / 2;
        let mut mag = Array2::<f64>::zeros((bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for f in 0..frames {
            let start = (f * cfg.hop) as isize - lead;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let s = if idx >= 0 && (idx as usize) < wave.len() {
                    wave[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex::new(s * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                mag[[k, f]] = buf[k].norm();
            }
        }
        let floor = cfg.log_floor;
        Ok(self.fb.dot(&mag).mapv(|v| v.max(floor).ln()))
    }
}

pub fn wav_to_logmel(wave: &[f64], sample_rate: u32, cfg: &MelConfig) -> Result<Array2<f64>> {
    let extractor = MelExtractor::new(cfg)?;
    if sample_rate == cfg.sample_rate {
        extractor.extract(wave)
    } else {
        extractor.extract(&resample_linear(wave, sample_rate, cfg.sample_rate)?)
    }
}

/// Linear-interpolation resampler.
pub fn resample_linear(wave: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if wave.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    if from == 0 || to == 0 {
        return Err(Error::Audio("sample rate must be positive".into()));
    }
    let out_len = ((wave.len() as u64 * to as u64).div_ceil(from as u64)) as usize;
    let ratio = from as f64 / to as f64;
    Ok((0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = wave[j.min(wave.len() - 1)];
            let b = wave[(j + 1).min(wave.len() - 1)];
            a + (b - a) * frac
        })
        .collect())
}

/// Reads a PCM WAV file as mono samples in [-1, 1] plus its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Audio(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
    }
    .map_err(|e| Error::Audio(e.to_string()))?;
    let mono = samples
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, wave: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio(e.to_string()))?;
    for &s in wave {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| Error::Audio(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Audio(e.to_string()))
}
