//! Adam over a [`VarStore`].

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::VarStore;
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, vs: &VarStore) -> Self {
        let zeros: Vec<_> = vs
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.value().raw_dim()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every block in `vs`; blocks without a gradient see a
    /// zero gradient.
    pub fn step(&mut self, vs: &mut VarStore, grads: &Gradients) {
        assert_eq!(self.m.len(), vs.len(), "optimizer/store mismatch");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let updates: Vec<ArrayD<f64>> = vs
            .iter()
            .enumerate()
            .map(|(i, (_, t))| {
                let g = grads.get_or_zeros(t);
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                ndarray::Zip::from(&mut *m)
                    .and(&mut *v)
                    .and(&g)
                    .for_each(|m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    });
                let mut new = t.value().clone();
                ndarray::Zip::from(&mut new)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                    });
                new
            })
            .collect();
        let ids: Vec<_> = (0..vs.len()).collect();
        for (i, new) in ids.into_iter().zip(updates) {
            vs.set_value(crate::nn::ParamId::from_index(i), new);
        }
    }

    /// `(name, first moment, second moment)` blocks for checkpointing.
    pub fn state_blocks<'a>(&'a self, vs: &'a VarStore) -> Vec<(String, &'a ArrayD<f64>)> {
        let mut out = Vec::with_capacity(2 * vs.len());
        for (i, name) in vs.names().iter().enumerate() {
            out.push((format!("{name}.adam_m"), &self.m[i]));
            out.push((format!("{name}.adam_v"), &self.v[i]));
        }
        out
    }

    pub fn load_state(
        &mut self,
        vs: &VarStore,
        step: u64,
        lookup: impl Fn(&str) -> Option<ArrayD<f64>>,
    ) -> Result<()> {
        for (i, name) in vs.names().iter().enumerate() {
            for (suffix, slot) in [("adam_m", &mut self.m[i]), ("adam_v", &mut self.v[i])] {
                let key = format!("{name}.{suffix}");
                let arr = lookup(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer block {key}")))?;
                if arr.shape() != slot.shape() {
                    return Err(Error::Geometry(format!("optimizer block {key} shape")));
                }
                *slot = arr;
            }
        }
        self.step = step;
        Ok(())
    }
}
