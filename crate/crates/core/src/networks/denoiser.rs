//! Conditional 1-D U-Net noise predictor used for both teacher and student.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Padding, VarStore, WnConv1d};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Predicts the noise component of a diffused mel batch.
pub trait EpsilonPredictor {
    /// `x_t`: `[b, n_mels, frames]`, `t`: one step index per row,
    /// `s`: `[b, d_spk]`, `p`: `[b, d_content, frames]`.
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], s: &Tensor, p: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub downsample_stages: usize,
    pub kernel: usize,
    pub d_spk: usize,
    pub d_content: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            hidden: 512,
            layers: 12,
            downsample_stages: 2,
            kernel: 5,
            d_spk: 256,
            d_content: 256,
            time_dim: 128,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = 2 * (self.downsample_stages + 1);
        if self.layers == 0 || self.layers % levels != 0 {
            return Err(Error::Config(format!(
                "denoiser layers ({}) must be a positive multiple of {levels}",
                self.layers
            )));
        }
        if self.hidden == 0 || self.kernel == 0 || self.n_mels == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("denoiser sizes must be positive, time_dim even".into()));
        }
        Ok(())
    }

    fn blocks_per_level(&self) -> usize {
        self.layers / (2 * (self.downsample_stages + 1))
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        let block = Linear::param_count(h, h)
            + Linear::param_count(self.d_spk, 2 * h)
            + WnConv1d::param_count(self.d_content, 2 * h, 1)
            + WnConv1d::param_count(h, 2 * h, self.kernel);
        WnConv1d::param_count(self.n_mels, h, 1)
            + Linear::param_count(self.time_dim, h)
            + self.layers * block
            + WnConv1d::param_count(h, self.n_mels, 1)
    }
}

#[derive(Clone, Debug)]
struct GatedBlock {
    time: Linear,
    speaker: Linear,
    content: WnConv1d,
    conv: WnConv1d,
}

impl GatedBlock {
    fn new(vs: &mut VarStore, rng: &mut SeededRng, name: &str, cfg: &DenoiserConfig) -> Self {
        let h = cfg.hidden;
        Self {
            time: Linear::new(vs, rng, &format!("{name}.time"), h, h, None),
            speaker: Linear::new(vs, rng, &format!("{name}.spk"), cfg.d_spk, 2 * h, Some(0.1)),
            content: WnConv1d::new(vs, rng, &format!("{name}.cnt"), cfg.d_content, 2 * h, 1, Padding::Zeros),
            conv: WnConv1d::new(vs, rng, &format!("{name}.conv"), h, 2 * h, cfg.kernel, Padding::Zeros),
        }
    }

    /// `h + GLU(conv(film_p(film_s(h + time))))`.
    fn forward(&self, vs: &VarStore, h: &Tensor, temb: &Tensor, s: &Tensor, p: &Tensor) -> Tensor {
        let (b, c, _) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let tb = self.time.forward(vs, temb).reshape(&[b, c, 1]);
        let a = h.add(&tb);
        let ss = self.speaker.forward(vs, s).reshape(&[b, 2 * c, 1]);
        let a = film(&a, &ss, c);
        let pp = self.content.forward(vs, p);
        let a = film(&a, &pp, c);
        h.add(&self.conv.forward(vs, &a).glu(1))
    }
}

/// `a * (1 + gamma) + beta` with `[gamma; beta]` stacked on the channel axis.
fn film(a: &Tensor, cond: &Tensor, c: usize) -> Tensor {
    let gamma = cond.narrow(1, 0, c);
    let beta = cond.narrow(1, c, c);
    a.mul(&gamma.add_scalar(1.0)).add(&beta)
}

/// Sinusoidal embedding of integer step indices, `[b, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let row_start = data.len();
        data.resize(row_start + dim, 0.0);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            data[row_start + i] = arg.sin();
            data[row_start + half + i] = arg.cos();
        }
    }
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[t.len(), dim]), data).unwrap())
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    pub vs: VarStore,
    input: WnConv1d,
    time: Linear,
    down: Vec<Vec<GatedBlock>>,
    up: Vec<Vec<GatedBlock>>,
    output: WnConv1d,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new(true);
        let h = cfg.hidden;
        let input = WnConv1d::new(&mut vs, rng, "in", cfg.n_mels, h, 1, Padding::Zeros);
        let time = Linear::new(&mut vs, rng, "time", cfg.time_dim, h, None);
        let per = cfg.blocks_per_level();
        let levels = cfg.downsample_stages + 1;
        let down = (0..levels)
            .map(|l| {
                (0..per)
                    .map(|i| GatedBlock::new(&mut vs, rng, &format!("down{l}.{i}"), cfg))
                    .collect()
            })
            .collect();
        let up = (0..levels)
            .rev()
            .map(|l| {
                (0..per)
                    .map(|i| GatedBlock::new(&mut vs, rng, &format!("up{l}.{i}"), cfg))
                    .collect()
            })
            .collect();
        let output = WnConv1d::new(&mut vs, rng, "out", h, cfg.n_mels, 1, Padding::Zeros);
        Ok(Self {
            cfg: cfg.clone(),
            vs,
            input,
            time,
            down,
            up,
            output,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.vs.num_params()
    }

    fn check_inputs(&self, x_t: &Tensor, t: &[usize], s: &Tensor, p: &Tensor) -> Result<()> {
        let [b, m, f] = x_t.shape() else {
            return Err(Error::Shape {
                expected: vec![0, self.cfg.n_mels, 0],
                actual: x_t.shape().to_vec(),
            });
        };
        let (b, m, f) = (*b, *m, *f);
        if m != self.cfg.n_mels || f == 0 {
            return Err(Error::Shape {
                expected: vec![b, self.cfg.n_mels, f.max(1)],
                actual: x_t.shape().to_vec(),
            });
        }
        if t.len() != b {
            return Err(Error::Shape {
                expected: vec![b],
                actual: vec![t.len()],
            });
        }
        if s.shape() != [b, self.cfg.d_spk] {
            return Err(Error::Shape {
                expected: vec![b, self.cfg.d_spk],
                actual: s.shape().to_vec(),
            });
        }
        if p.shape() != [b, self.cfg.d_content, f] {
            return Err(Error::Shape {
                expected: vec![b, self.cfg.d_content, f],
                actual: p.shape().to_vec(),
            });
        }
        Ok(())
    }
}

impl EpsilonPredictor for Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], s: &Tensor, p: &Tensor) -> Result<Tensor> {
        self.check_inputs(x_t, t, s, p)?;
        let vs = &self.vs;
        let frames = x_t.shape()[2];
        let multiple = 1usize << self.cfg.downsample_stages;
        let padded = frames.div_ceil(multiple) * multiple;
        let extra = padded - frames;
        let pad = |x: &Tensor| {
            if extra == 0 {
                x.clone()
            } else if extra < frames {
                x.pad_reflect_last(0, extra)
            } else {
                x.pad_replicate_last(0, extra)
            }
        };
        let x = pad(x_t);
        let mut p_level = pad(p);

        let temb = self
            .time
            .forward(vs, &timestep_embedding(t, self.cfg.time_dim))
            .leaky_relu(0.2);
        let mut h = self.input.forward(vs, &x);
        let mut skips = Vec::new();
        let mut contents = Vec::new();
        for (level, blocks) in self.down.iter().enumerate() {
            for block in blocks {
                h = block.forward(vs, &h, &temb, s, &p_level);
            }
            contents.push(p_level.clone());
            if level + 1 < self.down.len() {
                skips.push(h.clone());
                h = h.avg_pool_last(2);
                p_level = p_level.avg_pool_last(2);
            }
        }
        for (i, blocks) in self.up.iter().enumerate() {
            let level = self.down.len() - 1 - i;
            if i > 0 {
                h = h.repeat_last(2).add(&skips.pop().unwrap());
            }
            for block in blocks {
                h = block.forward(vs, &h, &temb, s, &contents[level]);
            }
        }
        let out = self.output.forward(vs, &h);
        Ok(if extra == 0 { out } else { out.narrow(2, 0, frames) })
    }
}
