//! Synthetic multi-speaker spectrogram corpus.
//!
//! An utterance of content `c` by speaker `k` is
//! `base + B * env_ku + traj_c`, where `B` is the zero-mean envelope basis,
//! `env_ku` the speaker's envelope coefficients plus a small per-utterance
//! offset and `traj_c` a per-bin zero-mean phone trajectory. Removing
//! per-bin time means therefore leaves exactly `traj_c`. With zero jitter
//! the envelope embedder returns exactly the speaker's registered vector.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::corpus::{Corpus, Normalizer, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::networks::speaker::{envelope_basis, EnvelopeEmbedder, SpeakerEmbedding};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_speakers: usize,
    pub n_contents: usize,
    pub frames: usize,
    pub n_mels: usize,
    pub d_spk: usize,
    pub n_phones: usize,
    pub phone_min_frames: usize,
    pub phone_max_frames: usize,
    pub envelope_gain: f64,
    pub content_amp: f64,
    pub base_level: f64,
    /// Minimum Euclidean distance between registered speaker vectors.
    pub speaker_margin: f64,
    /// Per-coordinate std of the per-utterance envelope offset, in units of
    /// the registered (unit-norm) speaker vector.
    pub utterance_jitter: f64,
    /// Cosine orders above `d_spk` carrying a speaker-specific band
    /// pattern that the envelope embedder does not see.
    pub band_orders: usize,
    pub band_gain: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            n_contents: 12,
            frames: 32,
            n_mels: 16,
            d_spk: 6,
            n_phones: 10,
            phone_min_frames: 3,
            phone_max_frames: 7,
            envelope_gain: 2.0,
            content_amp: 1.0,
            base_level: -4.0,
            speaker_margin: 0.5,
            utterance_jitter: 0.15,
            band_orders: 0,
            band_gain: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.n_contents == 0 || self.frames < 2 || self.n_phones == 0 {
            return Err(Error::Config("synthetic corpus sizes must be positive, frames >= 2".into()));
        }
        if self.d_spk == 0 || self.d_spk + self.band_orders >= self.n_mels {
            return Err(Error::Config("synthetic corpus needs 0 < d_spk + band_orders < n_mels".into()));
        }
        if self.phone_min_frames == 0 || self.phone_min_frames > self.phone_max_frames {
            return Err(Error::Config("phone duration range is empty".into()));
        }
        if self.envelope_gain <= 0.0 || self.content_amp <= 0.0 {
            return Err(Error::Config("envelope gain and content amplitude must be positive".into()));
        }
        if !(self.utterance_jitter >= 0.0) {
            return Err(Error::Config("utterance jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerSpec {
    pub id: usize,
    /// Envelope coefficients on the cosine basis (raw, pre-normalization units).
    pub envelope: Vec<f64>,
    /// Coefficients on the band orders (raw units).
    pub band: Vec<f64>,
    pub embedding: SpeakerEmbedding,
}

/// Generator state needed by oracles: speaker registry, content
/// trajectories (in normalized units) and the envelope basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRegistry {
    pub config: SyntheticConfig,
    pub speakers: Vec<SyntheticSpeakerSpec>,
    /// `[n_mels, frames]` per content id, after corpus normalization.
    pub trajectories: Vec<Array2<f64>>,
}

impl SyntheticRegistry {
    pub fn basis(&self) -> Array2<f64> {
        envelope_basis(self.config.n_mels, self.config.d_spk).expect("validated geometry")
    }

    pub fn embedder(&self) -> EnvelopeEmbedder {
        EnvelopeEmbedder::new(self.basis())
    }

    pub fn speaker_embedding(&self, id: usize) -> Result<&SpeakerEmbedding> {
        self.speakers
            .get(id)
            .map(|s| &s.embedding)
            .ok_or_else(|| Error::Corpus(format!("unknown speaker {id}")))
    }

    pub fn trajectory(&self, content: usize) -> Result<&Array2<f64>> {
        self.trajectories
            .get(content)
            .ok_or(Error::UnknownContent(content))
    }

    /// Whether conversion experiments are possible.
    pub fn conversion_capable(&self) -> bool {
        self.speakers.len() >= 2
    }
}

fn sample_speakers(cfg: &SyntheticConfig, rng: &mut SeededRng) -> Result<Vec<SyntheticSpeakerSpec>> {
    const MAX_ATTEMPTS: usize = 10_000;
    let mut speakers: Vec<SyntheticSpeakerSpec> = Vec::with_capacity(cfg.n_speakers);
    let mut attempts = 0;
    while speakers.len() < cfg.n_speakers {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Corpus(format!(
                "could not place {} speakers at margin {}",
                cfg.n_speakers, cfg.speaker_margin
            )));
        }
        let raw: Vec<f64> = (0..cfg.d_spk).map(|_| rng.normal()).collect();
        let emb = SpeakerEmbedding::new(raw)?;
        let far = speakers.iter().all(|s| {
            let d2: f64 = s
                .embedding
                .as_slice()
                .iter()
                .zip(emb.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            d2.sqrt() >= cfg.speaker_margin
        });
        if far {
            speakers.push(SyntheticSpeakerSpec {
                id: speakers.len(),
                envelope: emb.as_slice().iter().map(|v| v * cfg.envelope_gain).collect(),
                band: Vec::new(),
                embedding: emb,
            });
        }
    }
    Ok(speakers)
}

fn smooth_pattern(n_mels: usize, amp: f64, rng: &mut SeededRng) -> Array1<f64> {
    let mut p = Array1::zeros(n_mels);
    for _ in 0..2 {
        let centre = rng.uniform() * n_mels as f64;
        let width = 1.0 + rng.uniform() * n_mels as f64 / 6.0;
        let height = rng.normal();
        for (f, v) in p.iter_mut().enumerate() {
            *v += height * (-((f as f64 - centre) / width).powi(2)).exp();
        }
    }
    p * amp
}

fn sample_trajectory(
    cfg: &SyntheticConfig,
    phones: &[Array1<f64>],
    rng: &mut SeededRng,
) -> Array2<f64> {
    let mut raw = Array2::zeros((cfg.n_mels, cfg.frames));
    let mut t = 0;
    let mut prev = usize::MAX;
    while t < cfg.frames {
        let mut ph = rng.below(phones.len());
        if phones.len() > 1 && ph == prev {
            ph = (ph + 1) % phones.len();
        }
        prev = ph;
        let dur = rng.int_inclusive(cfg.phone_min_frames, cfg.phone_max_frames);
        for f in t..(t + dur).min(cfg.frames) {
            raw.column_mut(f).assign(&phones[ph]);
        }
        t += dur;
    }
    // Short moving average for co-articulated transitions.
    let mut traj = raw.clone();
    for f in 0..cfg.frames {
        let lo = f.saturating_sub(1);
        let hi = (f + 1).min(cfg.frames - 1);
        let mean = raw.slice(ndarray::s![.., lo..=hi]).mean_axis(Axis(1)).unwrap();
        traj.column_mut(f).assign(&mean);
    }
    let mean = traj.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
    traj - &mean
}

/// Renders every speaker x content pair, then min-max normalizes the corpus
/// to [-1, 1]. All records are tagged `Split::Train`.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticConfig,
    rng: &mut SeededRng,
) -> Result<(Corpus, SyntheticRegistry)> {
    cfg.validate()?;
    let mut speakers = sample_speakers(cfg, rng)?;
    for spk in &mut speakers {
        spk.band = (0..cfg.band_orders).map(|_| cfg.band_gain * rng.normal()).collect();
    }
    let phones: Vec<Array1<f64>> = (0..cfg.n_phones)
        .map(|_| smooth_pattern(cfg.n_mels, cfg.content_amp, rng))
        .collect();
    let trajectories: Vec<Array2<f64>> = (0..cfg.n_contents)
        .map(|_| sample_trajectory(cfg, &phones, rng))
        .collect();
    let full = envelope_basis(cfg.n_mels, cfg.d_spk + cfg.band_orders)?;
    let basis = full.slice(ndarray::s![.., ..cfg.d_spk]).to_owned();
    let band_basis = full.slice(ndarray::s![.., cfg.d_spk..]).to_owned();
    let mut records = Vec::with_capacity(cfg.n_speakers * cfg.n_contents);
    for spk in &speakers {
        for (c, traj) in trajectories.iter().enumerate() {
            let coeffs: Array1<f64> = spk
                .envelope
                .iter()
                .map(|v| v + cfg.envelope_gain * cfg.utterance_jitter * rng.normal())
                .collect();
            let band = band_basis.dot(&Array1::from(spk.band.clone()));
            let env = (basis.dot(&coeffs) + band + cfg.base_level).insert_axis(Axis(1));
            records.push(UtteranceRecord {
                mel: (traj + &env).into_dyn(),
                speaker: spk.id,
                content: c,
                split: Split::Train,
            });
        }
    }
    let normalizer = Normalizer::fit(records.iter().map(|r| &r.mel))?;
    for r in &mut records {
        r.mel = normalizer.apply(&r.mel);
    }
    let trajectories = trajectories
        .into_iter()
        .map(|t| t * normalizer.scale())
        .collect();
    Ok((
        Corpus {
            records,
            normalizer: Some(normalizer),
        },
        SyntheticRegistry {
            config: cfg.clone(),
            speakers,
            trajectories,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::speaker::SpeakerEmbedder;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_speakers: 4,
            n_contents: 3,
            frames: 16,
            n_mels: 12,
            d_spk: 4,
            ..Default::default()
        }
    }

    #[test]
    fn embedder_recovers_registered_vectors_without_jitter() {
        let cfg = SyntheticConfig {
            utterance_jitter: 0.0,
            ..small()
        };
        let (corpus, reg) = generate_synthetic_corpus(&cfg, &mut SeededRng::new(3)).unwrap();
        let emb = reg.embedder();
        for r in &corpus.records {
            let e = emb.embed(&r.mel).unwrap();
            let want = reg.speaker_embedding(r.speaker).unwrap();
            for (a, b) in e.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jittered_utterances_stay_close_to_their_speaker() {
        let (corpus, reg) = generate_synthetic_corpus(&small(), &mut SeededRng::new(3)).unwrap();
        let emb = reg.embedder();
        for r in &corpus.records {
            let e = emb.embed(&r.mel).unwrap();
            let own = e.dot(reg.speaker_embedding(r.speaker).unwrap());
            assert!(own > 0.6, "cosine to own speaker {own}");
            assert!(own < 1.0 - 1e-6);
        }
    }

    #[test]
    fn normalized_to_unit_range() {
        let (corpus, _) = generate_synthetic_corpus(&small(), &mut SeededRng::new(4)).unwrap();
        let (lo, hi) = corpus
            .records
            .iter()
            .flat_map(|r| r.mel.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        assert!((lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impossible_margin_is_an_error() {
        let cfg = SyntheticConfig {
            n_speakers: 50,
            d_spk: 2,
            speaker_margin: 1.5,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_corpus(&cfg, &mut SeededRng::new(0)),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn single_speaker_corpus_is_flagged() {
        let cfg = SyntheticConfig {
            n_speakers: 1,
            ..small()
        };
        let (corpus, reg) = generate_synthetic_corpus(&cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(corpus.records.len(), 3);
        assert!(!reg.conversion_capable());
    }
}
