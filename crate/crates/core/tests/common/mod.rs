#![allow(dead_code)]

use ndarray::ArrayD;
use vcdistill::nn::VarStore;
use vcdistill::{SeededRng, Tensor};

pub const H: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||)`, 0 when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Analytic and central-difference gradients of scalar `f` at `x`.
pub fn input_grads(x: &ArrayD<f64>, f: impl Fn(&Tensor) -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let xv = Tensor::var(x.clone());
    let analytic = f(&xv).backward().get_or_zeros(&xv).iter().copied().collect();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_slice_mut().unwrap()[i] += H;
        m.as_slice_mut().unwrap()[i] -= H;
        let fp = f(&Tensor::constant(p)).item();
        let fm = f(&Tensor::constant(m)).item();
        numeric.push((fp - fm) / (2.0 * H));
    }
    (analytic, numeric)
}

fn with_block_value(vs: &VarStore, block: &str, flat: usize, delta: f64) -> VarStore {
    let mut out = vs.clone();
    let blocks: Vec<(String, ArrayD<f64>)> = vs
        .iter()
        .map(|(n, t)| {
            let mut v = t.value().clone();
            if n == block {
                v.as_slice_mut().unwrap()[flat] += delta;
            }
            (n.to_string(), v)
        })
        .collect();
    out.load_blocks(blocks.iter().map(|(n, v)| (n.as_str(), v))).unwrap();
    out
}

/// Analytic and central-difference gradients for `per_block` random
/// entries of every parameter block. `f` evaluates the loss with the
/// given store.
pub fn param_grads(
    vs: &VarStore,
    per_block: usize,
    rng: &mut SeededRng,
    mut f: impl FnMut(&VarStore) -> Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let grads = f(vs).backward();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, t) in vs.iter() {
        let g = grads.get_or_zeros(t);
        for _ in 0..per_block.min(t.len()) {
            let i = rng.below(t.len());
            analytic.push(g.as_slice().unwrap()[i]);
            let fp = f(&with_block_value(vs, name, i, H)).item();
            let fm = f(&with_block_value(vs, name, i, -H)).item();
            numeric.push((fp - fm) / (2.0 * H));
        }
    }
    (analytic, numeric)
}

pub fn randn(rng: &mut SeededRng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    rng.normal_array(shape) * scale
}
