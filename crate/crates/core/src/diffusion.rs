//! Noise schedule and the forward-diffusion / reverse-step kernels.
//!
//! Step indices are 1-based at this API (`1..=T`) and 0-based in storage.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description of a schedule; the schedule itself is rebuilt
/// from it on load.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// A diffused sample together with the noise that produced it.
#[derive(Clone, Debug)]
pub struct DiffusedSample {
    pub x_t: ArrayD<f64>,
    pub t: usize,
    pub epsilon: ArrayD<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            kind,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` for one step index.
    pub fn forward_diffuse(
        &self,
        x0: &ArrayD<f64>,
        t: usize,
        epsilon: &ArrayD<f64>,
    ) -> Result<DiffusedSample> {
        self.check_step(t)?;
        check_shape(x0.shape(), epsilon.shape())?;
        let ab = self.alpha_bar(t);
        let x_t = x0 * ab.sqrt() + epsilon * (1.0 - ab).sqrt();
        Ok(DiffusedSample {
            x_t,
            t,
            epsilon: epsilon.clone(),
        })
    }

    /// Reverse-diffusion mean:
    /// `(x_t - (1 - a_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(a_t)`.
    pub fn reverse_step(
        &self,
        x_t: &ArrayD<f64>,
        t: usize,
        eps_pred: &ArrayD<f64>,
    ) -> Result<ArrayD<f64>> {
        self.check_step(t)?;
        check_shape(x_t.shape(), eps_pred.shape())?;
        let (c_x, c_eps) = self.reverse_coefficients(t);
        Ok(x_t * c_x - eps_pred * c_eps)
    }

    /// `(1/sqrt(a_t), (1 - a_t) / (sqrt(1 - abar_t) sqrt(a_t)))`.
    pub fn reverse_coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        let inv_sqrt_a = 1.0 / a.sqrt();
        (inv_sqrt_a, (1.0 - a) / (1.0 - ab).sqrt() * inv_sqrt_a)
    }

    fn per_batch(&self, batch: usize, ndim: usize, t: &[usize], f: impl Fn(usize) -> f64) -> Result<Tensor> {
        if t.len() != batch {
            return Err(Error::Shape {
                expected: vec![batch],
                actual: vec![t.len()],
            });
        }
        for &ti in t {
            self.check_step(ti)?;
        }
        let mut shape = vec![1; ndim];
        shape[0] = batch;
        let data: Vec<f64> = t.iter().map(|&ti| f(ti)).collect();
        Ok(Tensor::constant(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()))
    }

    /// Batched, differentiable forward diffusion with one step index per row.
    pub fn diffuse(&self, x0: &Tensor, t: &[usize], epsilon: &Tensor) -> Result<Tensor> {
        check_shape(x0.shape(), epsilon.shape())?;
        let b = x0.shape()[0];
        let nd = x0.ndim();
        let c0 = self.per_batch(b, nd, t, |ti| self.alpha_bar(ti).sqrt())?;
        let c1 = self.per_batch(b, nd, t, |ti| (1.0 - self.alpha_bar(ti)).sqrt())?;
        Ok(x0.mul(&c0).add(&epsilon.mul(&c1)))
    }

    /// Batched, differentiable reverse step with one step index per row.
    pub fn denoise_step(&self, x_t: &Tensor, t: &[usize], eps_pred: &Tensor) -> Result<Tensor> {
        check_shape(x_t.shape(), eps_pred.shape())?;
        let b = x_t.shape()[0];
        let nd = x_t.ndim();
        let cx = self.per_batch(b, nd, t, |ti| self.reverse_coefficients(ti).0)?;
        let ce = self.per_batch(b, nd, t, |ti| self.reverse_coefficients(ti).1)?;
        Ok(x_t.mul(&cx).sub(&eps_pred.mul(&ce)))
    }

    /// `sqrt(abar_t)` per row, shaped for broadcasting over `ndim` axes.
    pub fn sqrt_alpha_bar_weights(&self, t: &[usize], ndim: usize) -> Result<Tensor> {
        self.per_batch(t.len(), ndim, t, |ti| self.alpha_bar(ti).sqrt())
    }
}
