//! Flat `key = value` training configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{ScheduleKind, ScheduleSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{ContentEncoderConfig, DenoiserConfig, DiscDomain, DiscriminatorConfig, InputNorm, SubDiscKind, VocoderConfig};
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Teacher,
    Fastvoicegrad,
    Adcd,
    Direct,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::Fastvoicegrad => "fastvoicegrad",
            TrainMode::Adcd => "adcd",
            TrainMode::Direct => "direct",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocoderKind {
    Bypass,
    SineBank,
}

/// Every tunable of a training run. Defaults are desk-scale; optimizer and
/// loss weights keep their full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub epochs: usize,
    /// Autoencoder epochs for the teacher content encoder (teacher mode).
    pub encoder_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_prime: usize,
    pub lambda_fm: f64,
    pub lambda_dist: f64,
    pub lambda_inv: f64,
    pub lambda_align: f64,
    /// fastvoicegrad mode: train a fresh content encoder instead of
    /// reusing the frozen teacher encoder.
    pub content_trainable: bool,
    pub reconversion: bool,
    pub inverse: bool,
    pub strict_conditioning: bool,
    pub crop_frames: usize,
    pub n_mels: usize,
    pub d_spk: usize,
    pub hidden: usize,
    pub layers: usize,
    pub downsample_stages: usize,
    pub kernel: usize,
    pub time_dim: usize,
    pub d_content: usize,
    pub content_hidden: usize,
    pub content_layers: usize,
    pub teacher_content_hidden: usize,
    pub teacher_content_layers: usize,
    pub disc_domain: DiscDomain,
    pub disc_channels: usize,
    pub disc_layers: usize,
    pub vocoder: VocoderKind,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainMode::Adcd,
            epochs: 10,
            encoder_epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            diffusion_steps: 50,
            beta_start: 1e-3,
            beta_end: 0.4,
            t_prime: 48,
            lambda_fm: 2.0,
            lambda_dist: 45.0,
            lambda_inv: 22.5,
            lambda_align: 1.0,
            content_trainable: false,
            reconversion: true,
            inverse: true,
            strict_conditioning: false,
            crop_frames: 32,
            n_mels: 16,
            d_spk: 6,
            hidden: 32,
            layers: 6,
            downsample_stages: 2,
            kernel: 5,
            time_dim: 16,
            d_content: 8,
            content_hidden: 32,
            content_layers: 3,
            teacher_content_hidden: 32,
            teacher_content_layers: 3,
            disc_domain: DiscDomain::Mel,
            disc_channels: 16,
            disc_layers: 3,
            vocoder: VocoderKind::Bypass,
            hop: 256,
            sample_rate: 22050,
        }
    }
}

fn parse_like(template: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = || Error::Config(format!("cannot parse {key} = {raw:?}"));
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_prime: 950,
            n_mels: 80,
            d_spk: 256,
            hidden: 512,
            layers: 12,
            time_dim: 128,
            d_content: 256,
            content_hidden: 512,
            teacher_content_hidden: 512,
            crop_frames: 64,
            disc_domain: DiscDomain::Waveform,
            disc_channels: 32,
            vocoder: VocoderKind::SineBank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps (T) must be >= 1".into()));
        }
        if self.t_prime == 0 || self.t_prime > self.diffusion_steps {
            return Err(Error::Config(format!(
                "t_prime must lie in 1..={}, got {}",
                self.diffusion_steps, self.t_prime
            )));
        }
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(Error::Config("batch_size and crop_frames must be positive".into()));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        self.weights().validate()?;
        self.schedule().build()?;
        self.denoiser().validate()?;
        self.student_content().validate()?;
        self.teacher_content().validate()?;
        self.discriminator().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_fm: self.lambda_fm,
            lambda_dist: self.lambda_dist,
            lambda_inv: self.lambda_inv,
            lambda_align: self.lambda_align,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            n_mels: self.n_mels,
            hidden: self.hidden,
            layers: self.layers,
            downsample_stages: self.downsample_stages,
            kernel: self.kernel,
            d_spk: self.d_spk,
            d_content: self.d_content,
            time_dim: self.time_dim,
        }
    }

    pub fn student_content(&self) -> ContentEncoderConfig {
        ContentEncoderConfig {
            n_mels: self.n_mels,
            hidden: self.content_hidden,
            layers: self.content_layers,
            kernel: self.kernel,
            d_content: self.d_content,
            input_norm: InputNorm::Global,
        }
    }

    pub fn teacher_content(&self) -> ContentEncoderConfig {
        ContentEncoderConfig {
            n_mels: self.n_mels,
            hidden: self.teacher_content_hidden,
            layers: self.teacher_content_layers,
            kernel: self.kernel,
            d_content: self.d_content,
            input_norm: InputNorm::PerBin,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        let base = match self.disc_domain {
            DiscDomain::Mel => DiscriminatorConfig::mel(self.n_mels),
            DiscDomain::Waveform => DiscriminatorConfig {
                subs: vec![
                    SubDiscKind::Period(2),
                    SubDiscKind::Period(3),
                    SubDiscKind::Resolution {
                        n_fft: 4 * self.vocoder_hop(),
                        hop: self.vocoder_hop(),
                    },
                ],
                ..DiscriminatorConfig::waveform(self.n_mels)
            },
        };
        DiscriminatorConfig {
            channels: self.disc_channels,
            layers: self.disc_layers,
            kernel: self.kernel,
            ..base
        }
    }

    pub fn vocoder_hop(&self) -> usize {
        match self.vocoder {
            VocoderKind::Bypass => self.n_mels,
            VocoderKind::SineBank => self.hop,
        }
    }

    pub fn vocoder_config(&self) -> VocoderConfig {
        match self.vocoder {
            VocoderKind::Bypass => VocoderConfig::Bypass { n_mels: self.n_mels },
            VocoderKind::SineBank => VocoderConfig::SineBank {
                n_mels: self.n_mels,
                hop: self.hop,
                sample_rate: self.sample_rate as f64,
            },
        }
    }

    /// Applies `key = value` overrides; unknown keys are rejected.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        apply_overrides(self, pairs)
    }

    pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = Self::parse_text(&std::fs::read_to_string(path)?)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key = value` lines sorted by key.
    pub fn to_text(&self) -> String {
        key_values(self)
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Sets fields of any flat serde struct from textual `key = value` pairs,
/// parsing each value like the field's current value.
pub fn apply_overrides<'a, T: Serialize + DeserializeOwned>(
    target: &mut T,
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let mut obj = match serde_json::to_value(&*target)? {
        Value::Object(m) => m,
        _ => return Err(Error::Config("overrides need a flat struct".into())),
    };
    for (key, raw) in pairs {
        let template = obj
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        let v = parse_like(template, key, raw.trim())?;
        obj.insert(key.to_string(), v);
    }
    *target = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}

/// Field names and textual values of a flat serde struct, sorted by name.
pub fn key_values<T: Serialize>(value: &T) -> Vec<(String, String)> {
    let Value::Object(obj) = serde_json::to_value(value).expect("serializable") else {
        return Vec::new();
    };
    obj.into_iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            (k, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply([("mode", "direct"), ("learning_rate", "0.001"), ("reconversion", "false")])
            .unwrap();
        let pairs = TrainConfig::parse_text(&cfg.to_text()).unwrap();
        let mut back = TrainConfig::default();
        back.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply([("no_such_key", "1")]).is_err());
        assert!(cfg.apply([("batch_size", "-3")]).is_err());
        assert!(cfg.apply([("mode", "sideways")]).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = TrainConfig {
            diffusion_steps: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            t_prime: 51,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn paper_preset_echoes_quoted_values() {
        let p = TrainConfig::paper();
        assert_eq!((p.batch_size, p.diffusion_steps, p.t_prime), (32, 1000, 950));
        assert_eq!((p.learning_rate, p.adam_beta1, p.adam_beta2), (2e-4, 0.5, 0.9));
        assert_eq!((p.lambda_fm, p.lambda_dist, p.lambda_inv), (2.0, 45.0, 22.5));
        assert_eq!((p.n_mels, p.hidden, p.layers, p.content_layers), (80, 512, 12, 3));
        p.validate().unwrap();
    }
}
