//! Convolutional content encoders.
//!
//! The trainable student encoder removes the utterance's global mean and then
//! stacks `conv -> GLU -> instance norm` blocks. The frozen teacher encoder
//! uses the same body but removes per-bin utterance means at the input,
//! which strips static speaker colouring before any features are computed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Padding, VarStore, WnConv1d};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub trait ContentEncoding {
    /// `x`: `[b, n_mels, frames]` -> `[b, d_content, frames]`.
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn output_dim(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// Subtract one scalar mean per utterance.
    Global,
    /// Subtract one mean per mel bin per utterance.
    PerBin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentEncoderConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub d_content: usize,
    pub input_norm: InputNorm,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            hidden: 512,
            layers: 3,
            kernel: 5,
            d_content: 256,
            input_norm: InputNorm::Global,
        }
    }
}

impl ContentEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.kernel == 0 || self.d_content == 0 {
            return Err(Error::Config("content encoder sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let first = WnConv1d::param_count(self.n_mels, 2 * self.hidden, self.kernel);
        let rest = (self.layers - 1) * WnConv1d::param_count(self.hidden, 2 * self.hidden, self.kernel);
        first + rest + WnConv1d::param_count(self.hidden, self.d_content, 1)
    }
}

#[derive(Clone, Debug)]
pub struct ContentEncoder {
    cfg: ContentEncoderConfig,
    pub vs: VarStore,
    blocks: Vec<WnConv1d>,
    output: WnConv1d,
}

impl ContentEncoder {
    pub fn new(cfg: &ContentEncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new(true);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let c_in = if i == 0 { cfg.n_mels } else { cfg.hidden };
                WnConv1d::new(
                    &mut vs,
                    rng,
                    &format!("block{i}"),
                    c_in,
                    2 * cfg.hidden,
                    cfg.kernel,
                    Padding::Replicate,
                )
            })
            .collect();
        let output = WnConv1d::new(&mut vs, rng, "out", cfg.hidden, cfg.d_content, 1, Padding::Zeros);
        Ok(Self {
            cfg: cfg.clone(),
            vs,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &ContentEncoderConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.vs.num_params()
    }
}

pub(crate) fn remove_input_stats(x: &Tensor, norm: InputNorm) -> Tensor {
    match norm {
        InputNorm::Global => x.sub(&x.mean_keepdim(2).mean_keepdim(1)),
        InputNorm::PerBin => x.sub(&x.mean_keepdim(2)),
    }
}

impl ContentEncoding for ContentEncoder {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 3 || x.shape()[1] != self.cfg.n_mels {
            return Err(Error::Shape {
                expected: vec![0, self.cfg.n_mels, 0],
                actual: x.shape().to_vec(),
            });
        }
        if x.shape()[0] == 0 || x.shape()[2] == 0 {
            return Err(Error::Empty("content encoder input"));
        }
        let mut h = remove_input_stats(x, self.cfg.input_norm);
        for block in &self.blocks {
            h = block.forward(&self.vs, &h).glu(1).instance_norm(1e-5);
        }
        Ok(self.output.forward(&self.vs, &h))
    }

    fn output_dim(&self) -> usize {
        self.cfg.d_content
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ContentEncoderConfig {
        ContentEncoderConfig {
            n_mels: 6,
            hidden: 8,
            layers,
            kernel: 5,
            d_content: 4,
            input_norm: InputNorm::Global,
        }
    }

    #[test]
    fn invariant_to_global_gain_shift() {
        let mut rng = SeededRng::new(0);
        let enc = ContentEncoder::new(&cfg(3), &mut rng).unwrap();
        let x = Tensor::constant(rng.normal_array(&[2, 6, 20]));
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x.add_scalar(3.7)).unwrap();
        let max = (a.value() - b.value()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(max < 1e-4, "{max}");
    }

    #[test]
    fn per_bin_norm_removes_static_offsets() {
        let mut rng = SeededRng::new(1);
        let enc = ContentEncoder::new(
            &ContentEncoderConfig {
                input_norm: InputNorm::PerBin,
                ..cfg(2)
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::constant(rng.normal_array(&[1, 6, 12]));
        let offset = Tensor::constant(rng.normal_array(&[1, 6, 1]));
        let a = enc.encode(&x).unwrap();
        let b = enc.encode(&x.add(&offset)).unwrap();
        let max = (a.value() - b.value()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(max < 1e-9);
    }

    #[test]
    fn preserves_frame_count() {
        let mut rng = SeededRng::new(2);
        let enc = ContentEncoder::new(&cfg(3), &mut rng).unwrap();
        for f in [1usize, 7, 14] {
            let x = Tensor::constant(rng.normal_array(&[1, 6, f]));
            assert_eq!(enc.encode(&x).unwrap().shape(), &[1, 4, f]);
        }
        let empty = Tensor::zeros(&[1, 6, 0]);
        assert!(matches!(enc.encode(&empty), Err(Error::Empty(_))));
    }

    #[test]
    fn param_count_matches_closed_form() {
        for layers in [1, 3, 6] {
            let c = cfg(layers);
            let enc = ContentEncoder::new(&c, &mut SeededRng::new(4)).unwrap();
            assert_eq!(enc.num_params(), c.param_count());
        }
    }
}
