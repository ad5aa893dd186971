//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tensor`] is an immutable, reference-counted value that remembers the
//! operation that produced it. Calling [`Tensor::backward`] on a result walks
//! the recorded graph in reverse topological order and returns the gradients
//! of every leaf created with [`Tensor::var`].
//!
//! Shape errors inside the primitive ops are programmer errors and panic, in
//! the same way `ndarray` arithmetic does. Public model-level APIs validate
//! shapes up front and return [`crate::Error`] instead.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayD, Axis, Ix2, IxDyn, Zip};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &[Tensor], &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> + Send + Sync>;

struct Inner {
    id: usize,
    value: ArrayD<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients of leaf tensors, keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<usize, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.map.get(&t.0.id)
    }

    /// Gradient of `t`, or zeros of the right shape if nothing reached it.
    pub fn get_or_zeros(&self, t: &Tensor) -> ArrayD<f64> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(t.value().raw_dim()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn sum_to_shape(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

impl Tensor {
    fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor(Arc::new(Inner {
                id: fresh_id(),
                value,
                requires_grad,
                parents,
                backward: Some(backward),
            }))
        } else {
            Tensor::constant(value)
        }
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf whose gradient is collected by [`Tensor::backward`].
    pub fn var(value: ArrayD<f64>) -> Tensor {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length"))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(ArrayD::ones(IxDyn(shape)))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        if self.requires_grad() {
            Tensor::constant(self.0.value.clone())
        } else {
            self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }

    /// Gradients of every `var` leaf with respect to the sum of this tensor.
    pub fn backward(&self) -> Gradients {
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, ArrayD<f64>> = HashMap::new();
        pending.insert(self.0.id, ArrayD::ones(self.0.value.raw_dim()));
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    grads.map.insert(node.0.id, g);
                }
                Some(f) => {
                    let parent_grads = f(&g, &node.0.parents, &node.0.value);
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape());
                        match pending.get_mut(&p.0.id) {
                            Some(acc) => *acc += &pg,
                            None => {
                                pending.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        grads
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.requires_grad() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(
        &self,
        other: &Tensor,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>)
            + Send
            + Sync
            + 'static,
    ) -> Tensor {
        Tensor::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, ps, _| {
                let a = ps[0].value();
                let b = ps[1].value();
                let (ga, gb) = backward(g, a, b);
                vec![
                    ps[0].requires_grad().then(|| sum_to_shape(ga, a.shape())),
                    ps[1].requires_grad().then(|| sum_to_shape(gb, b.shape())),
                ]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = self.value() + other.value();
        self.binary(other, v, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = self.value() - other.value();
        self.binary(other, v, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = self.value() * other.value();
        self.binary(other, v, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = self.value() / other.value();
        self.binary(other, v, |g, a, b| {
            let ga = g / b;
            let gb = -(g * a) / (b * b);
            (ga, gb)
        })
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>
            + Send
            + Sync
            + 'static,
    ) -> Tensor {
        Tensor::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, ps, out| vec![Some(backward(g, ps[0].value(), out))]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(-self.value(), |g, _, _| -g)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value() + c, |g, _, _| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.unary(self.value() * c, move |g, _, _| g * c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(self.value().mapv(f64::exp), |g, _, out| g * out)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(self.value().mapv(f64::ln), |g, x, _| g / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(self.value().mapv(f64::sqrt), |g, _, out| g / &(out * 2.0))
    }

    pub fn sqr(&self) -> Tensor {
        self.unary(self.value().mapv(|v| v * v), |g, x, _| g * &(x * 2.0))
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        self.unary(self.value().mapv(f64::abs), |g, x, _| {
            let mut out = g.clone();
            Zip::from(&mut out).and(x).for_each(|o, &v| *o *= v.signum() * (v != 0.0) as u8 as f64);
            out
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            self.value().mapv(|v| 1.0 / (1.0 + (-v).exp())),
            |g, _, out| {
                let mut r = g.clone();
                Zip::from(&mut r).and(out).for_each(|r, &y| *r *= y * (1.0 - y));
                r
            },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(self.value().mapv(f64::tanh), |g, _, out| {
            let mut r = g.clone();
            Zip::from(&mut r).and(out).for_each(|r, &y| *r *= 1.0 - y * y);
            r
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            self.value().mapv(|v| if v >= 0.0 { v } else { slope * v }),
            move |g, x, _| {
                let mut r = g.clone();
                Zip::from(&mut r)
                    .and(x)
                    .for_each(|r, &v| *r *= if v >= 0.0 { 1.0 } else { slope });
                r
            },
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(v, |g, x, _| ArrayD::from_elem(x.raw_dim(), g.sum()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_keepdim(&self, axis: usize) -> Tensor {
        let v = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.unary(v, |g, x, _| g.broadcast(x.raw_dim()).unwrap().to_owned())
    }

    pub fn mean_keepdim(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_keepdim(axis).mul_scalar(1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        self.unary(v, |g, x, _| {
            g.as_standard_layout()
                .into_owned()
                .into_shape_with_order(x.raw_dim())
                .unwrap()
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self
            .value()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.unary(v, move |g, _, _| {
            g.clone()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned()
        })
    }

    /// Explicit broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(), shape))
            .to_owned();
        self.unary(v, |g, x, _| sum_to_shape(g.clone(), x.shape()))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .value()
            .slice_axis(Axis(axis), (start..start + len).into())
            .to_owned();
        self.unary(v, move |g, x, _| {
            let mut full = ArrayD::zeros(x.raw_dim());
            full.slice_axis_mut(Axis(axis), (start..start + len).into())
                .assign(g);
            full
        })
    }

    pub fn cat(tensors: &[Tensor], axis: usize) -> Tensor {
        let views: Vec<_> = tensors.iter().map(|t| t.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("cat shapes");
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Tensor::from_op(
            v,
            tensors.to_vec(),
            Box::new(move |g, ps, _| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(ps)
                    .map(|(&n, p)| {
                        let piece = p.requires_grad().then(|| {
                            g.slice_axis(Axis(axis), (offset..offset + n).into())
                                .to_owned()
                        });
                        offset += n;
                        piece
                    })
                    .collect()
            }),
        )
    }

    /// Reflect-pad the last axis (edge sample not repeated).
    pub fn pad_reflect_last(&self, left: usize, right: usize) -> Tensor {
        let l = *self.shape().last().unwrap();
        assert!(left < l && right < l, "reflect pad larger than input");
        let src_index = move |i: usize| -> usize {
            if i < left {
                left - i
            } else if i < left + l {
                i - left
            } else {
                let k = i - left - l;
                l - 2 - k
            }
        };
        self.gather_last(l + left + right, src_index)
    }

    /// Replicate-pad the last axis.
    pub fn pad_replicate_last(&self, left: usize, right: usize) -> Tensor {
        let l = *self.shape().last().unwrap();
        let src_index = move |i: usize| -> usize { i.saturating_sub(left).min(l - 1) };
        self.gather_last(l + left + right, src_index)
    }

    pub fn pad_zeros_last(&self, left: usize, right: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        let l = *shape.last().unwrap();
        let last = shape.len() - 1;
        shape[last] = l + left + right;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(last), (left..left + l).into())
            .assign(self.value());
        self.unary(v, move |g, _, _| {
            g.slice_axis(Axis(last), (left..left + l).into()).to_owned()
        })
    }

    /// Output position `i` of the last axis reads input position `src(i)`.
    fn gather_last(&self, out_len: usize, src: impl Fn(usize) -> usize) -> Tensor {
        let l = *self.shape().last().unwrap();
        let index: Vec<usize> = (0..out_len).map(&src).collect();
        let rows = self.len() / l;
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().unwrap();
        let mut out = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &xs[r * l..(r + 1) * l];
            out.extend(index.iter().map(|&j| row[j]));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.unary(v, move |g, x, _| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; x.len()];
            for r in 0..rows {
                let grow = &gs[r * out_len..(r + 1) * out_len];
                let xrow = &mut gx[r * l..(r + 1) * l];
                for (i, &j) in index.iter().enumerate() {
                    xrow[j] += grow[i];
                }
            }
            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
        })
    }

    /// Mean over non-overlapping windows of `factor` along the last axis.
    pub fn avg_pool_last(&self, factor: usize) -> Tensor {
        if factor == 1 {
            return self.clone();
        }
        let mut shape = self.shape().to_vec();
        let l = shape.pop().unwrap();
        assert_eq!(l % factor, 0, "avg_pool_last: {l} not divisible by {factor}");
        let mut split = shape.clone();
        split.push(l / factor);
        split.push(factor);
        let last = split.len() - 1;
        let pooled = self.reshape(&split).mean_keepdim(last);
        shape.push(l / factor);
        pooled.reshape(&shape)
    }

    /// Nearest-neighbour upsampling along the last axis.
    pub fn repeat_last(&self, factor: usize) -> Tensor {
        if factor == 1 {
            return self.clone();
        }
        let mut shape = self.shape().to_vec();
        let l = shape.pop().unwrap();
        let mut expanded = shape.clone();
        expanded.push(l);
        expanded.push(1);
        let mut target = shape.clone();
        target.push(l);
        target.push(factor);
        shape.push(l * factor);
        self.reshape(&expanded).broadcast_to(&target).reshape(&shape)
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as2(self.value());
        let b = as2(other.value());
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps, _| {
                let g = as2(g);
                let a = as2(ps[0].value());
                let b = as2(ps[1].value());
                vec![
                    ps[0].requires_grad().then(|| g.dot(&b.t()).into_dyn()),
                    ps[1].requires_grad().then(|| a.t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// 1-D convolution (cross-correlation) with zero padding.
    ///
    /// `self`: `[batch, c_in, len]`, `weight`: `[c_out, c_in, k]`,
    /// `bias`: `[c_out]`. Output length is `(len + pl + pr - k) / stride + 1`.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: (usize, usize),
    ) -> Tensor {
        let (b, c_in, len) = dims3(self.shape());
        let (c_out, wc_in, k) = dims3(weight.shape());
        assert_eq!(c_in, wc_in, "conv1d channel mismatch");
        let padded = len + pad.0 + pad.1;
        assert!(padded >= k, "conv1d input shorter than kernel");
        let l_out = (padded - k) / stride + 1;
        let geom = ConvGeom {
            b,
            c_in,
            len,
            k,
            stride,
            pad_left: pad.0,
            l_out,
        };
        let col = im2col(self.value(), &geom);
        let w2 = weight
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c_out, c_in * k))
            .unwrap();
        let mut y = Array2::<f64>::zeros((c_out, b * l_out));
        general_mat_mul(1.0, &w2, &col, 0.0, &mut y);
        let mut out = y
            .into_shape_with_order((c_out, b, l_out))
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        if let Some(bias) = bias {
            let bv = bias.value().view().into_shape_with_order((1, c_out, 1)).unwrap();
            out += &bv;
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Tensor::from_op(
            out.into_dyn(),
            parents,
            Box::new(move |g, ps, _| {
                // g: [b, c_out, l_out] -> [c_out, b * l_out]
                let g2 = g
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((c_out, b * l_out))
                    .unwrap();
                let gx = ps[0].requires_grad().then(|| {
                    let w2 = ps[1]
                        .value()
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((c_out, c_in * k))
                        .unwrap();
                    let mut gcol = Array2::<f64>::zeros((c_in * k, b * l_out));
                    general_mat_mul(1.0, &w2.t(), &g2, 0.0, &mut gcol);
                    col2im(&gcol, &geom)
                });
                let gw = ps[1].requires_grad().then(|| {
                    let col = im2col(ps[0].value(), &geom);
                    let mut gw = Array2::<f64>::zeros((c_out, c_in * k));
                    general_mat_mul(1.0, &g2, &col.t(), 0.0, &mut gw);
                    gw.into_shape_with_order((c_out, c_in, k)).unwrap().into_dyn()
                });
                let mut grads = vec![gx, gw];
                if ps.len() == 3 {
                    grads.push(ps[2].requires_grad().then(|| g2.sum_axis(Axis(1)).into_dyn()));
                }
                grads
            }),
        )
    }

    // ---- composites ----

    /// Gated linear unit over `axis`: first half times sigmoid of second half.
    pub fn glu(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis];
        assert_eq!(n % 2, 0, "glu needs an even split");
        let a = self.narrow(axis, 0, n / 2);
        let gate = self.narrow(axis, n / 2, n / 2).sigmoid();
        a.mul(&gate)
    }

    /// Zero mean, unit variance over the last axis.
    pub fn instance_norm(&self, eps: f64) -> Tensor {
        let last = self.ndim() - 1;
        let centered = self.sub(&self.mean_keepdim(last));
        let var = centered.sqr().mean_keepdim(last);
        centered.div(&var.add_scalar(eps).sqrt())
    }

    /// Mean absolute value of all elements.
    pub fn mean_abs(&self) -> Tensor {
        self.abs().mean_all()
    }
}

struct ConvGeom {
    b: usize,
    c_in: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad_left: usize,
    l_out: usize,
}

/// `[b, c_in, len]` -> `[c_in * k, b * l_out]`, with implicit zero padding.
fn im2col(x: &ArrayD<f64>, g: &ConvGeom) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let cols = g.b * g.l_out;
    let mut col = vec![0.0; g.c_in * g.k * cols];
    for c in 0..g.c_in {
        for kk in 0..g.k {
            let row = (c * g.k + kk) * cols;
            for bi in 0..g.b {
                let src = &xs[(bi * g.c_in + c) * g.len..(bi * g.c_in + c + 1) * g.len];
                let dst = &mut col[row + bi * g.l_out..row + (bi + 1) * g.l_out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let pos = (o * g.stride + kk) as isize - g.pad_left as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.c_in * g.k, cols), col).unwrap()
}

fn col2im(gcol: &Array2<f64>, g: &ConvGeom) -> ArrayD<f64> {
    let gcol = gcol.as_standard_layout();
    let gs = gcol.as_slice().unwrap();
    let cols = g.b * g.l_out;
    let mut gx = vec![0.0; g.b * g.c_in * g.len];
    for c in 0..g.c_in {
        for kk in 0..g.k {
            let row = (c * g.k + kk) * cols;
            for bi in 0..g.b {
                let dst = &mut gx[(bi * g.c_in + c) * g.len..(bi * g.c_in + c + 1) * g.len];
                let src = &gs[row + bi * g.l_out..row + (bi + 1) * g.l_out];
                for (o, &v) in src.iter().enumerate() {
                    let pos = (o * g.stride + kk) as isize - g.pad_left as isize;
                    if pos >= 0 && (pos as usize) < g.len {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.b, g.c_in, g.len]), gx).unwrap()
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected 2-D array, got {:?}", a.shape()))
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [a, b, c] => (a, b, c),
        _ => panic!("expected 3-D shape, got {shape:?}"),
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        Tensor::add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        Tensor::sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        Tensor::mul(self, rhs)
    }
}

/// Slices `[b, ..]` rows `idx` out of a batch (constant op).
pub fn select_rows(x: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let views: Vec<_> = idx.iter().map(|&i| x.slice_axis(Axis(0), (i..i + 1).into())).collect();
    ndarray::concatenate(Axis(0), &views).expect("select_rows")
}

/// Gather rows along axis 0 with gradient support.
impl Tensor {
    pub fn index_rows(&self, idx: &[usize]) -> Tensor {
        let v = select_rows(self.value(), idx);
        let idx = idx.to_vec();
        self.unary(v, move |g, x, _| {
            let mut gx = ArrayD::zeros(x.raw_dim());
            for (row, &i) in idx.iter().enumerate() {
                let mut dst = gx.slice_axis_mut(Axis(0), (i..i + 1).into());
                dst += &g.slice_axis(Axis(0), (row..row + 1).into());
            }
            gx
        })
    }

    /// Row `i` of a 2-D tensor as a constant vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.value()
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(s![i, ..])
            .to_vec()
    }
}
