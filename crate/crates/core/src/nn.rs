//! Parameter storage and the handful of layers the networks are built from.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named parameter blocks of one network.
///
/// Leaves are rebuilt whenever values change, so a store is either fully
/// trainable (leaves are `var`s) or fully frozen (leaves are constants).
#[derive(Clone, Debug)]
pub struct VarStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: bool,
}

impl VarStore {
    pub fn new(trainable: bool) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable,
        }
    }

    fn leaf(&self, value: ArrayD<f64>) -> Tensor {
        if self.trainable {
            Tensor::var(value)
        } else {
            Tensor::constant(value)
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(self.leaf(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable == self.trainable {
            return;
        }
        self.trainable = trainable;
        let values: Vec<_> = self.tensors.iter().map(|t| t.value().clone()).collect();
        self.tensors = values.into_iter().map(|v| self.leaf(v)).collect();
    }

    /// Copy with new leaf tensors. A plain clone shares leaves, so
    /// gradients of the copy and the original would coincide.
    pub fn fork(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| self.leaf(t.value().clone())).collect(),
            trainable: self.trainable,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<f64>) {
        assert_eq!(value.shape(), self.tensors[id.0].shape());
        self.tensors[id.0] = self.leaf(value);
    }

    pub fn value_by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].value())
    }

    /// Replaces every block from `(name, value)` pairs; names and shapes
    /// must match exactly.
    pub fn load_blocks<'a>(
        &mut self,
        blocks: impl IntoIterator<Item = (&'a str, &'a ArrayD<f64>)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.names.len()];
        for (name, value) in blocks {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Geometry(format!("unexpected parameter block {name}")))?;
            if value.shape() != self.tensors[i].shape() {
                return Err(Error::Geometry(format!(
                    "block {name}: expected shape {:?}, got {:?}",
                    self.tensors[i].shape(),
                    value.shape()
                )));
            }
            self.tensors[i] = self.leaf(value.clone());
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Geometry(format!(
                "missing parameter block {}",
                self.names[i]
            )));
        }
        Ok(())
    }

    pub fn copy_from(&mut self, other: &VarStore) -> Result<()> {
        self.load_blocks(other.iter().map(|(n, t)| (n, t.value())))
    }

    /// Per-block gradient L2 norms (zero where nothing reached the block).
    pub fn grad_norms(&self, grads: &Gradients) -> Vec<(String, f64)> {
        self.iter()
            .map(|(n, t)| {
                let g = grads
                    .get(t)
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                (n.to_string(), g)
            })
            .collect()
    }
}

pub fn normal_init(rng: &mut SeededRng, shape: &[usize], std: f64) -> ArrayD<f64> {
    rng.normal_array(shape).mapv(|v| v * std)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

/// Weight-normalized 1-D convolution with "same" output length.
#[derive(Clone, Debug)]
pub struct WnConv1d {
    v: ParamId,
    g: ParamId,
    b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl WnConv1d {
    pub fn new(
        vs: &mut VarStore,
        rng: &mut SeededRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: Padding,
    ) -> Self {
        Self::with_stride(vs, rng, name, c_in, c_out, kernel, 1, padding)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_stride(
        vs: &mut VarStore,
        rng: &mut SeededRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let std = 1.0 / ((c_in * kernel) as f64).sqrt();
        let v = normal_init(rng, &[c_out, c_in, kernel], std);
        let g = weight_norms(&v);
        Self {
            v: vs.add(format!("{name}.v"), v),
            g: vs.add(format!("{name}.g"), g),
            b: vs.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out]))),
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        }
    }

    /// Parameter count: direction `v`, per-channel gain `g` and bias.
    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel + 2 * c_out
    }

    pub fn weight(&self, vs: &VarStore) -> Tensor {
        let v = vs.get(self.v);
        let norm = v.sqr().sum_keepdim(2).sum_keepdim(1).add_scalar(1e-12).sqrt();
        let g = vs.get(self.g).reshape(&[self.c_out, 1, 1]);
        v.mul(&g.div(&norm))
    }

    pub fn forward(&self, vs: &VarStore, x: &Tensor) -> Tensor {
        let total = self.kernel - 1;
        let (left, right) = (total / 2, total - total / 2);
        let w = self.weight(vs);
        let b = vs.get(self.b);
        match self.padding {
            Padding::Zeros => x.conv1d(&w, Some(b), self.stride, (left, right)),
            Padding::Replicate => {
                let xp = if total > 0 {
                    x.pad_replicate_last(left, right)
                } else {
                    x.clone()
                };
                xp.conv1d(&w, Some(b), self.stride, (0, 0))
            }
        }
    }
}

fn weight_norms(v: &ArrayD<f64>) -> ArrayD<f64> {
    let c_out = v.shape()[0];
    let per = v.len() / c_out;
    let flat = v.as_standard_layout();
    let data = flat.as_slice().unwrap();
    let norms: Vec<f64> = (0..c_out)
        .map(|o| {
            data[o * per..(o + 1) * per]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[c_out]), norms).unwrap()
}

/// Dense layer on `[batch, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        vs: &mut VarStore,
        rng: &mut SeededRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: Option<f64>,
    ) -> Self {
        let std = std.unwrap_or(1.0 / (d_in as f64).sqrt());
        Self {
            w: vs.add(format!("{name}.w"), normal_init(rng, &[d_in, d_out], std)),
            b: vs.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out]))),
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, vs: &VarStore, x: &Tensor) -> Tensor {
        x.matmul(vs.get(self.w)).add(vs.get(self.b))
    }
}
