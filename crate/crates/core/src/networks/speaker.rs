//! Speaker embeddings and the embedders that produce them.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Padding, VarStore, WnConv1d};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Unit-norm speaker vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Empty("speaker embedding"));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::NonFinite("speaker embedding norm".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &SpeakerEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Stacks embeddings into a `[b, d]` constant tensor.
    pub fn batch(embs: &[&SpeakerEmbedding]) -> Tensor {
        let d = embs.first().map_or(0, |e| e.dim());
        let data: Vec<f64> = embs.iter().flat_map(|e| e.0.iter().copied()).collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[embs.len(), d]), data).unwrap())
    }
}

/// Maps one utterance `[n_mels, frames]` to a speaker embedding.
pub trait SpeakerEmbedder {
    fn embed(&self, mel: &ArrayD<f64>) -> Result<SpeakerEmbedding>;
}

/// Orthonormal cosine basis over mel bins with the constant term excluded,
/// `[n_mels, d]`. Column `k` is the DCT-II vector of order `k + 1`.
pub fn envelope_basis(n_mels: usize, d: usize) -> Result<Array2<f64>> {
    if d == 0 || d >= n_mels {
        return Err(Error::Config(format!(
            "envelope basis needs 0 < d < n_mels, got d={d}, n_mels={n_mels}"
        )));
    }
    let scale = (2.0 / n_mels as f64).sqrt();
    Ok(Array2::from_shape_fn((n_mels, d), |(f, k)| {
        scale * (std::f64::consts::PI * (k + 1) as f64 * (f as f64 + 0.5) / n_mels as f64).cos()
    }))
}

/// Projects the utterance's time-averaged spectrum onto a fixed envelope
/// basis. On the synthetic corpus this recovers the registered speaker
/// vector exactly.
#[derive(Clone, Debug)]
pub struct EnvelopeEmbedder {
    basis: Array2<f64>,
}

impl EnvelopeEmbedder {
    pub fn new(basis: Array2<f64>) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }
}

impl SpeakerEmbedder for EnvelopeEmbedder {
    fn embed(&self, mel: &ArrayD<f64>) -> Result<SpeakerEmbedding> {
        let mel = mel
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape {
                expected: vec![self.basis.nrows(), 0],
                actual: mel.shape().to_vec(),
            })?;
        if mel.ncols() == 0 {
            return Err(Error::Empty("utterance"));
        }
        if mel.nrows() != self.basis.nrows() {
            return Err(Error::Shape {
                expected: vec![self.basis.nrows(), mel.ncols()],
                actual: mel.shape().to_vec(),
            });
        }
        let mean = mel.mean_axis(Axis(1)).unwrap();
        SpeakerEmbedding::new(self.basis.t().dot(&mean).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvEmbedderConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub d_spk: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredEmbedder {
    config: ConvEmbedderConfig,
    blocks: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Mean-pooled convolutional embedder trained with a speaker
/// classification proxy; for corpora without registered vectors.
#[derive(Clone, Debug)]
pub struct ConvSpeakerEmbedder {
    cfg: ConvEmbedderConfig,
    pub vs: VarStore,
    convs: Vec<WnConv1d>,
    proj: Linear,
}

impl ConvSpeakerEmbedder {
    pub fn new(cfg: &ConvEmbedderConfig, rng: &mut SeededRng) -> Result<Self> {
        if cfg.layers == 0 || cfg.d_spk == 0 || cfg.hidden == 0 {
            return Err(Error::Config("speaker embedder sizes must be positive".into()));
        }
        let mut vs = VarStore::new(true);
        let convs = (0..cfg.layers)
            .map(|i| {
                let c_in = if i == 0 { cfg.n_mels } else { cfg.hidden };
                WnConv1d::new(&mut vs, rng, &format!("conv{i}"), c_in, cfg.hidden, 3, Padding::Replicate)
            })
            .collect();
        let proj = Linear::new(&mut vs, rng, "proj", cfg.hidden, cfg.d_spk, None);
        Ok(Self {
            cfg: cfg.clone(),
            vs,
            convs,
            proj,
        })
    }

    pub fn config(&self) -> &ConvEmbedderConfig {
        &self.cfg
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = StoredEmbedder {
            config: self.cfg.clone(),
            blocks: self
                .vs
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.to_vec()))
                .collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredEmbedder = serde_json::from_str(text)?;
        let mut e = Self::new(&stored.config, &mut SeededRng::new(0))?;
        let arrays = stored
            .blocks
            .iter()
            .map(|(n, shape, v)| {
                ArrayD::from_shape_vec(IxDyn(shape), v.clone())
                    .map(|a| (n.as_str(), a))
                    .map_err(|_| Error::Geometry(format!("block {n} has inconsistent size")))
            })
            .collect::<Result<Vec<_>>>()?;
        e.vs.load_blocks(arrays.iter().map(|(n, a)| (*n, a)))?;
        e.vs.set_trainable(false);
        Ok(e)
    }

    /// Un-normalized embeddings for a `[b, n_mels, frames]` batch.
    fn raw(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&self.vs, &h).leaky_relu(0.2);
        }
        let b = h.shape()[0];
        let pooled = h.mean_keepdim(2).reshape(&[b, self.cfg.hidden]);
        self.proj.forward(&self.vs, &pooled)
    }

    /// Trains against speaker labels with a softmax head over embedding
    /// similarities to learned per-speaker centroids.
    pub fn train(
        &mut self,
        mels: &[ArrayD<f64>],
        labels: &[usize],
        steps: usize,
        batch: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<f64>> {
        if mels.is_empty() || mels.len() != labels.len() {
            return Err(Error::Empty("speaker embedder training set"));
        }
        if let Some(m) = mels.iter().find(|m| m.shape() != mels[0].shape()) {
            return Err(Error::Shape {
                expected: mels[0].shape().to_vec(),
                actual: m.shape().to_vec(),
            });
        }
        let n_classes = labels.iter().max().unwrap() + 1;
        let mut head = VarStore::new(true);
        let centroids = head.add(
            "centroids",
            crate::nn::normal_init(rng, &[self.cfg.d_spk, n_classes], 1.0),
        );
        let adam_cfg = AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = Adam::new(adam_cfg, &self.vs);
        let mut head_opt = Adam::new(adam_cfg, &head);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.below(mels.len())).collect();
            let views: Vec<_> = idx.iter().map(|&i| mels[i].view()).collect();
            let x = Tensor::constant(ndarray::stack(Axis(0), &views).expect("equal shapes"));
            let e = self.raw(&x);
            let e = e.div(&e.sqr().sum_keepdim(1).add_scalar(1e-12).sqrt());
            let logits = e.matmul(head.get(centroids)).mul_scalar(5.0);
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&logits, &targets);
            losses.push(loss.item());
            let grads = loss.backward();
            opt.step(&mut self.vs, &grads);
            head_opt.step(&mut head, &grads);
        }
        Ok(losses)
    }
}

/// Mean softmax cross-entropy of `[b, classes]` logits.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Tensor {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let max = Tensor::constant(
        logits
            .value()
            .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .insert_axis(Axis(1))
            .into_dyn(),
    );
    let shifted = logits.sub(&max);
    let log_z = shifted.exp().sum_keepdim(1).ln();
    let log_probs = shifted.sub(&log_z);
    let mut onehot = ArrayD::zeros(IxDyn(&[b, c]));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    log_probs
        .mul(&Tensor::constant(onehot))
        .sum_all()
        .mul_scalar(-1.0 / b as f64)
}

impl SpeakerEmbedder for ConvSpeakerEmbedder {
    fn embed(&self, mel: &ArrayD<f64>) -> Result<SpeakerEmbedding> {
        if mel.ndim() != 2 || mel.shape()[0] != self.cfg.n_mels {
            return Err(Error::Shape {
                expected: vec![self.cfg.n_mels, 0],
                actual: mel.shape().to_vec(),
            });
        }
        if mel.shape()[1] == 0 {
            return Err(Error::Empty("utterance"));
        }
        let x = Tensor::constant(mel.clone().insert_axis(Axis(0)));
        SpeakerEmbedding::new(self.raw(&x).to_vec())
    }
}
