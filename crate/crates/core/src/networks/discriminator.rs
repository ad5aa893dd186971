//! Multi-scale / multi-period / multi-resolution discriminators.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Padding, VarStore, WnConv1d};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscDomain {
    Mel,
    Waveform,
}

impl DiscDomain {
    pub fn name(self) -> &'static str {
        match self {
            DiscDomain::Mel => "mel",
            DiscDomain::Waveform => "waveform",
        }
    }
}

/// A discriminator input tagged with its domain.
#[derive(Clone, Debug)]
pub enum Signal {
    /// `[b, n_mels, frames]`
    Mel(Tensor),
    /// `[b, samples]`
    Waveform(Tensor),
}

impl Signal {
    pub fn domain(&self) -> DiscDomain {
        match self {
            Signal::Mel(_) => DiscDomain::Mel,
            Signal::Waveform(_) => DiscDomain::Waveform,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            Signal::Mel(t) | Signal::Waveform(t) => t,
        }
    }

    pub fn detach(&self) -> Signal {
        match self {
            Signal::Mel(t) => Signal::Mel(t.detach()),
            Signal::Waveform(t) => Signal::Waveform(t.detach()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubDiscKind {
    /// Mel input average-pooled in time by the given factor.
    MelScale(usize),
    /// Waveform folded into `period` interleaved phases.
    Period(usize),
    /// Waveform STFT magnitude.
    Resolution { n_fft: usize, hop: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub domain: DiscDomain,
    pub subs: Vec<SubDiscKind>,
    pub channels: usize,
    /// Hidden conv layers per sub-discriminator; each one is a feature tap.
    pub layers: usize,
    pub kernel: usize,
    pub n_mels: usize,
}

impl DiscriminatorConfig {
    pub fn mel(n_mels: usize) -> Self {
        Self {
            domain: DiscDomain::Mel,
            subs: vec![SubDiscKind::MelScale(1), SubDiscKind::MelScale(2)],
            channels: 32,
            layers: 3,
            kernel: 5,
            n_mels,
        }
    }

    pub fn waveform(n_mels: usize) -> Self {
        Self {
            domain: DiscDomain::Waveform,
            subs: vec![
                SubDiscKind::Period(2),
                SubDiscKind::Period(3),
                SubDiscKind::Resolution { n_fft: 64, hop: 16 },
            ],
            channels: 16,
            layers: 3,
            kernel: 5,
            n_mels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subs.is_empty() || self.layers == 0 || self.channels == 0 {
            return Err(Error::Config("discriminator needs sub-discriminators and layers".into()));
        }
        for sub in &self.subs {
            let ok = match (self.domain, sub) {
                (DiscDomain::Mel, SubDiscKind::MelScale(f)) => *f >= 1,
                (DiscDomain::Waveform, SubDiscKind::Period(p)) => *p >= 1,
                (DiscDomain::Waveform, SubDiscKind::Resolution { n_fft, hop }) => *n_fft >= 2 && *hop >= 1,
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "sub-discriminator {sub:?} invalid for {} domain",
                    self.domain.name()
                )));
            }
        }
        Ok(())
    }

    pub fn tap_count(&self) -> usize {
        self.subs.len() * self.layers
    }
}

/// Scores and ordered intermediate features for one input.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub scores: Vec<Tensor>,
    pub features: Vec<Tensor>,
}

pub trait Discriminator {
    fn domain(&self) -> DiscDomain;
    fn discriminate(&self, x: &Signal) -> Result<DiscOutput>;
}

#[derive(Clone, Debug)]
struct SubNet {
    kind: SubDiscKind,
    convs: Vec<WnConv1d>,
    head: WnConv1d,
    stft: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct MultiDiscriminator {
    cfg: DiscriminatorConfig,
    pub vs: VarStore,
    subs: Vec<SubNet>,
}

fn stft_kernel(n_fft: usize) -> Tensor {
    let bins = n_fft / 2 + 1;
    let mut data = vec![0.0; 2 * bins * n_fft];
    for k in 0..bins {
        for n in 0..n_fft {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos();
            let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
            data[k * n_fft + n] = w * ang.cos();
            data[(bins + k) * n_fft + n] = -w * ang.sin();
        }
    }
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[2 * bins, 1, n_fft]), data).unwrap())
}

impl MultiDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new(true);
        let subs = cfg
            .subs
            .iter()
            .enumerate()
            .map(|(si, &kind)| {
                let c0 = match kind {
                    SubDiscKind::MelScale(_) => cfg.n_mels,
                    SubDiscKind::Period(_) => 1,
                    SubDiscKind::Resolution { n_fft, .. } => n_fft / 2 + 1,
                };
                let convs = (0..cfg.layers)
                    .map(|l| {
                        let c_in = if l == 0 { c0 } else { cfg.channels };
                        WnConv1d::new(&mut vs, rng, &format!("sub{si}.conv{l}"), c_in, cfg.channels, cfg.kernel, Padding::Zeros)
                    })
                    .collect();
                let head = WnConv1d::new(&mut vs, rng, &format!("sub{si}.head"), cfg.channels, 1, 3, Padding::Zeros);
                let stft = match kind {
                    SubDiscKind::Resolution { n_fft, .. } => Some(stft_kernel(n_fft)),
                    _ => None,
                };
                SubNet {
                    kind,
                    convs,
                    head,
                    stft,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            vs,
            subs,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn prepare(&self, sub: &SubNet, x: &Tensor) -> Result<Tensor> {
        Ok(match sub.kind {
            SubDiscKind::MelScale(f) => {
                if x.ndim() != 3 || x.shape()[1] != self.cfg.n_mels {
                    return Err(Error::Shape {
                        expected: vec![0, self.cfg.n_mels, 0],
                        actual: x.shape().to_vec(),
                    });
                }
                let len = x.shape()[2];
                let extra = len.div_ceil(f) * f - len;
                let x = if extra > 0 { x.pad_replicate_last(0, extra) } else { x.clone() };
                x.avg_pool_last(f)
            }
            SubDiscKind::Period(p) => {
                let (b, len) = wave_dims(x)?;
                let extra = len.div_ceil(p) * p - len;
                let x = if extra > 0 { x.pad_zeros_last(0, extra) } else { x.clone() };
                let frames = (len + extra) / p;
                x.reshape(&[b, frames, p])
                    .permute(&[0, 2, 1])
                    .reshape(&[b * p, 1, frames])
            }
            SubDiscKind::Resolution { n_fft, hop } => {
                let (b, len) = wave_dims(x)?;
                let half = n_fft / 2;
                let x = x.reshape(&[b, 1, len]).pad_zeros_last(half, half);
                let spec = x.conv1d(sub.stft.as_ref().unwrap(), None, hop, (0, 0));
                let bins = n_fft / 2 + 1;
                let re = spec.narrow(1, 0, bins);
                let im = spec.narrow(1, bins, bins);
                re.sqr().add(&im.sqr()).add_scalar(1e-9).sqrt()
            }
        })
    }
}

fn wave_dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [b, len] if len > 0 => Ok((b, len)),
        _ => Err(Error::Shape {
            expected: vec![0, 0],
            actual: x.shape().to_vec(),
        }),
    }
}

impl Discriminator for MultiDiscriminator {
    fn domain(&self) -> DiscDomain {
        self.cfg.domain
    }

    fn discriminate(&self, x: &Signal) -> Result<DiscOutput> {
        if x.domain() != self.cfg.domain {
            return Err(Error::Domain {
                expected: self.cfg.domain.name(),
                actual: x.domain().name(),
            });
        }
        let mut scores = Vec::with_capacity(self.subs.len());
        let mut features = Vec::with_capacity(self.cfg.tap_count());
        for sub in &self.subs {
            let mut h = self.prepare(sub, x.tensor())?;
            for conv in &sub.convs {
                h = conv.forward(&self.vs, &h).leaky_relu(0.2);
                features.push(h.clone());
            }
            scores.push(sub.head.forward(&self.vs, &h));
        }
        Ok(DiscOutput { scores, features })
    }
}
