//! Reverse-mode automatic differentiation on dynamic-rank `ndarray` tensors.
//!
//! A [`Tape`] records every operation eagerly (a Wengert list); [`Tape::backward`]
//! walks the list in reverse and accumulates gradients into each node. Nodes are
//! referenced by [`Var`] handles, so graphs are built with plain method calls:
//!
//! ```
//! use icam_core::autodiff::Tape;
//! use ndarray::ArrayD;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 3.0));
//! let y = tape.mean_sq(x); // mean(x^2) = 9
//! tape.backward(y);
//! assert_eq!(tape.grad(x).unwrap()[[0, 0]], 2.0 * 3.0 / 4.0);
//! ```
//!
//! The element type is generic over [`Scalar`] so the same graph code runs in
//! `f32` for training and `f64` for finite-difference gradient checks. All
//! reductions are accumulated in a fixed order, which keeps results
//! bit-reproducible across runs and thread counts.

pub mod kernels;

use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Floating-point element type usable by the tape (`f32` or `f64`).
pub trait Scalar:
    ndarray::NdFloat + ndarray::LinalgScalar + num_traits::Float + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Exp(Var),
    AddBias { x: Var, b: Var },
    MulBias { x: Var, g: Var },
    LeakyRelu { x: Var, slope: F },
    Sigmoid(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool2d { x: Var, k: usize },
    SmoothPool2x2(Var),
    SpatialMean(Var),
    UpsampleNearest { x: Var, factor: usize },
    ConcatChannels(Var, Var),
    Reshape(Var),
    InstanceNorm { x: Var, inv_std: Array2<F> },
    LayerNorm { x: Var, inv_std: Array1<F> },
    SumAll(Var),
    MeanAbs(Var),
    MeanSq(Var),
    BceWithLogitsMean { logits: Var, targets: Var, weights: Option<Var> },
    SmoothL1Mean { pred: Var, target: Var, beta: F },
    GaussianKlMean { mean: Var, log_var: Var },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Eagerly-evaluated computation graph with reverse-mode gradients.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: IndexMap<String, (Var, bool)>,
}

const NORM_EPS: f64 = 1e-5;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: IndexMap::new() }
    }

    fn push(&mut self, value: ArrayD<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input leaf.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable data (targets, noise draws, frozen activations).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Bind a named parameter from `store` onto the tape. Repeated binds of
    /// the same name return the same node, so components sharing weights
    /// accumulate into one gradient. `trainable = false` keeps the parameter's
    /// value on the graph (gradients still flow *through* ops that use it)
    /// without spending time materialising its own gradient.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str, trainable: bool) -> Var {
        if let Some(&(var, was_trainable)) = self.params.get(name) {
            assert_eq!(
                was_trainable, trainable,
                "parameter {name} bound with conflicting trainability on one tape"
            );
            return var;
        }
        let value = store.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let var = self.push(value, trainable, Op::Leaf);
        self.params.insert(name.to_string(), (var, trainable));
        var
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Cut the graph: returns a constant leaf holding a copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Gradients of all trainable parameters bound on this tape, in binding
    /// order. Parameters that never influenced the root get zeros.
    pub fn param_grads(&self) -> Vec<(String, ArrayD<F>)> {
        self.params
            .iter()
            .filter(|(_, &(_, trainable))| trainable)
            .map(|(name, &(var, _))| {
                let node = &self.nodes[var.0];
                let g = node
                    .grad
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(node.value.raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.exp());
        let rg = self.rg(a);
        self.push(value, rg, Op::Exp(a))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = F::from_f64(slope);
        let value = self.nodes[x.0].value.mapv(|v| if v >= F::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, rg, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| {
            // numerically symmetric form
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(value, rg, Op::Sigmoid(x))
    }

    // ---- broadcast over channel axis ----

    /// `x + b` with `b: [C]` broadcast over axis 1 of `x` (`[N,C]` or `[N,C,H,W]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.ndim(), 1);
        assert_eq!(xv.shape()[1], bv.len(), "add_bias: channel mismatch");
        let value = xv + &broadcast_channel(bv, xv.shape());
        let rg = self.rg(x) || self.rg(b);
        self.push(value, rg, Op::AddBias { x, b })
    }

    /// `x * g` with `g: [C]` broadcast over axis 1 of `x`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        assert_eq!(gv.ndim(), 1);
        assert_eq!(xv.shape()[1], gv.len(), "mul_bias: channel mismatch");
        let value = xv * &broadcast_channel(gv, xv.shape());
        let rg = self.rg(x) || self.rg(g);
        self.push(value, rg, Op::MulBias { x, g })
    }

    // ---- linear algebra / convolution ----

    /// `a [M,K] . b [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::MatMul(a, b))
    }

    /// Convolution, `x: [N,IC,H,W]`, `w: [OC,IC,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let value = kernels::conv2d_forward(&xv, &wv, stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(value, rg, Op::Conv2d { x, w, stride, pad })
    }

    /// Transposed convolution, `x: [N,IC,H,W]`, `w: [IC,OC,K,K]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let value = kernels::conv_transpose2d_forward(&xv, &wv, stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(value, rg, Op::ConvTranspose2d { x, w, stride, pad })
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let value = kernels::avg_pool2d(&xv, k).into_dyn();
        let rg = self.rg(x);
        self.push(value, rg, Op::AvgPool2d { x, k })
    }

    /// Size-preserving 2x2 stride-1 average pool (replicate border).
    pub fn smooth_pool2x2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let value = kernels::smooth_pool2x2(&xv).into_dyn();
        let rg = self.rg(x);
        self.push(value, rg, Op::SmoothPool2x2(x))
    }

    /// Mean over the two spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = kernels::dims4(&xv);
        let inv = F::from_f64(1.0 / (h * w) as f64);
        let mut out = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] =
                    xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter().copied().sum::<F>()
                        * inv;
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::SpatialMean(x))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let value = kernels::upsample_nearest(&xv, factor).into_dyn();
        let rg = self.rg(x);
        self.push(value, rg, Op::UpsampleNearest { x, factor })
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_channels: incompatible shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(value.as_standard_layout().to_owned(), rg, Op::ConcatChannels(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: element count mismatch")
            .to_owned();
        let rg = self.rg(x);
        self.push(value, rg, Op::Reshape(x))
    }

    // ---- normalisation ----

    /// Instance normalisation: standardise each `(n, c)` slice over its
    /// spatial extent (no affine; pair with [`Tape::mul_bias`]/[`Tape::add_bias`]).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = kernels::dims4(&xv);
        let m = F::from_f64((h * w) as f64);
        let eps = F::from_f64(NORM_EPS);
        let mut out = ndarray::Array4::<F>::zeros((n, c, h, w));
        let mut inv_std = Array2::<F>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let sl = xv.index_axis(Axis(0), ni);
                let sl = sl.index_axis(Axis(0), ci);
                let mean = sl.iter().copied().sum::<F>() / m;
                let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
                let istd = F::one() / (var + eps).sqrt();
                inv_std[[ni, ci]] = istd;
                let mut dst = out.index_axis_mut(Axis(0), ni);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                dst.assign(&sl.mapv(|v| (v - mean) * istd));
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), rg, Op::InstanceNorm { x, inv_std })
    }

    /// Layer normalisation: standardise each sample over all its features.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.shape()[0];
        let m = F::from_f64((xv.len() / n) as f64);
        let eps = F::from_f64(NORM_EPS);
        let mut out = ArrayD::<F>::zeros(xv.raw_dim());
        let mut inv_std = Array1::<F>::zeros(n);
        for ni in 0..n {
            let sl = xv.index_axis(Axis(0), ni);
            let mean = sl.iter().copied().sum::<F>() / m;
            let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[ni] = istd;
            out.index_axis_mut(Axis(0), ni).assign(&sl.mapv(|v| (v - mean) * istd));
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::LayerNorm { x, inv_std })
    }

    // ---- reductions / losses ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = scalar_arr(self.nodes[x.0].value.iter().copied().sum::<F>());
        let rg = self.rg(x);
        self.push(value, rg, Op::SumAll(x))
    }

    /// `mean(|x|)` — the L1 penalty used for maps and reconstructions.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.nodes[x.0].value.len() as f64);
        let value = scalar_arr(self.nodes[x.0].value.iter().map(|v| v.abs()).sum::<F>() / n);
        let rg = self.rg(x);
        self.push(value, rg, Op::MeanAbs(x))
    }

    /// `mean(x^2)` — the L2 half of the reconstruction penalty.
    pub fn mean_sq(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.nodes[x.0].value.len() as f64);
        let value = scalar_arr(self.nodes[x.0].value.iter().map(|&v| v * v).sum::<F>() / n);
        let rg = self.rg(x);
        self.push(value, rg, Op::MeanSq(x))
    }

    /// Numerically stable binary cross-entropy on logits, mean-reduced.
    /// Optional per-element weights multiply each term (mean still over count).
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var, weights: Option<Var>) -> Var {
        let z = &self.nodes[logits.0].value;
        let t = &self.nodes[targets.0].value;
        assert_eq!(z.shape(), t.shape(), "bce: shape mismatch");
        let w = weights.map(|w| &self.nodes[w.0].value);
        if let Some(w) = w {
            assert_eq!(z.shape(), w.shape(), "bce: weight shape mismatch");
        }
        let n = F::from_f64(z.len() as f64);
        let mut acc = F::zero();
        for (i, (&zi, &ti)) in z.iter().zip(t.iter()).enumerate() {
            let term = zi.max(F::zero()) - ti * zi + (F::one() + (-zi.abs()).exp()).ln();
            let wi = w.map_or(F::one(), |w| w.as_slice().unwrap()[i]);
            acc = acc + wi * term;
        }
        let value = scalar_arr(acc / n);
        let rg = self.rg(logits);
        self.push(value, rg, Op::BceWithLogitsMean { logits, targets, weights })
    }

    /// Smooth-L1 (Huber) loss with threshold `beta`, mean-reduced.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: Var, beta: f64) -> Var {
        let beta = F::from_f64(beta);
        let p = &self.nodes[pred.0].value;
        let t = &self.nodes[target.0].value;
        assert_eq!(p.shape(), t.shape(), "smooth_l1: shape mismatch");
        let n = F::from_f64(p.len() as f64);
        let half = F::from_f64(0.5);
        let mut acc = F::zero();
        for (&pi, &ti) in p.iter().zip(t.iter()) {
            let d = pi - ti;
            acc = acc
                + if d.abs() < beta { half * d * d / beta } else { d.abs() - half * beta };
        }
        let value = scalar_arr(acc / n);
        let rg = self.rg(pred);
        self.push(value, rg, Op::SmoothL1Mean { pred, target, beta })
    }

    /// KL divergence of `N(mean, exp(log_var))` from `N(0, I)`, summed over
    /// latent dimensions and averaged over the batch (axis 0).
    pub fn gaussian_kl_mean(&mut self, mean: Var, log_var: Var) -> Var {
        let mu = &self.nodes[mean.0].value;
        let lv = &self.nodes[log_var.0].value;
        assert_eq!(mu.shape(), lv.shape(), "kl: shape mismatch");
        let n = F::from_f64(mu.shape()[0] as f64);
        let half = F::from_f64(0.5);
        let mut acc = F::zero();
        for (&m, &l) in mu.iter().zip(lv.iter()) {
            acc = acc + half * (m * m + l.exp() - F::one() - l);
        }
        let value = scalar_arr(acc / n);
        let rg = self.rg(mean) || self.rg(log_var);
        self.push(value, rg, Op::GaussianKlMean { mean, log_var })
    }

    /// Weighted sum of scalar nodes — the total objective.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = F::zero();
        let mut rg = false;
        let terms: Vec<(Var, F)> =
            terms.iter().map(|&(v, w)| (v, F::from_f64(w))).collect();
        for &(v, w) in &terms {
            assert_eq!(self.nodes[v.0].value.len(), 1, "weighted_sum: non-scalar term");
            acc = acc + self.scalar(v) * w;
            rg = rg || self.rg(v);
        }
        self.push(scalar_arr(acc), rg, Op::WeightedSum(terms))
    }

    // ---- backward ----

    /// Accumulate `d root / d node` into every node that requires gradients.
    /// `root` must be a scalar. Gradients are retained on the tape (including
    /// interior nodes) until it is dropped.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward: root must be a scalar");
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one());
        accumulate(&mut self.nodes[root.0].grad, seed);
        for i in (0..=root.0).rev() {
            let (parents, this) = self.nodes.split_at_mut(i);
            let node = &this[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            let contribs = backward_op(node, g, parents);
            for (var, contrib) in contribs {
                debug_assert!(var.0 < i, "tape not topologically ordered");
                accumulate(&mut parents[var.0].grad, contrib);
            }
        }
    }

    /// Check that a value is finite; used by the trainer to abort cleanly.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.as_f64().is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains a non-finite value")))
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar_arr<F: Scalar>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn accumulate<F: Scalar>(slot: &mut Option<ArrayD<F>>, contrib: ArrayD<F>) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

/// Broadcast a `[C]` vector over axis 1 of an array with shape `like`.
fn broadcast_channel<F: Scalar>(b: &ArrayD<F>, like: &[usize]) -> ArrayD<F> {
    let mut shape = vec![1; like.len()];
    shape[1] = b.len();
    b.view()
        .into_shape_with_order(IxDyn(&shape))
        .unwrap()
        .broadcast(IxDyn(like))
        .unwrap()
        .to_owned()
}

/// Sum an array over every axis except the channel axis (axis 1) -> `[C]`.
fn reduce_to_channel<F: Scalar>(g: &ArrayD<F>) -> ArrayD<F> {
    let mut r = g.to_owned();
    while r.ndim() > 2 {
        let last = r.ndim() - 1;
        r = r.sum_axis(Axis(last));
    }
    r.sum_axis(Axis(0)).into_dyn()
}

/// Gradient contributions of one node to its parents. `parents` is the tape
/// prefix strictly before the node, so parent values are readable here.
fn backward_op<F: Scalar>(
    node: &Node<F>,
    g: &ArrayD<F>,
    parents: &[Node<F>],
) -> Vec<(Var, ArrayD<F>)> {
    let rg = |v: Var| parents[v.0].requires_grad;
    let val = |v: Var| &parents[v.0].value;
    let gs = |g: &ArrayD<F>| *g.iter().next().unwrap(); // scalar gradient
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                out.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                out.push((*b, g.mapv(|v| -v)));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                out.push((*a, g * val(*b)));
            }
            if rg(*b) {
                out.push((*b, g * val(*a)));
            }
        }
        Op::Scale(a, k) => {
            if rg(*a) {
                out.push((*a, g.mapv(|v| v * *k)));
            }
        }
        Op::Exp(a) => {
            if rg(*a) {
                out.push((*a, g * &node.value));
            }
        }
        Op::AddBias { x, b } => {
            if rg(*x) {
                out.push((*x, g.clone()));
            }
            if rg(*b) {
                out.push((*b, reduce_to_channel(g)));
            }
        }
        Op::MulBias { x, g: gain } => {
            if rg(*x) {
                out.push((*x, g * &broadcast_channel(val(*gain), g.shape())));
            }
            if rg(*gain) {
                out.push((*gain, reduce_to_channel(&(g * val(*x)))));
            }
        }
        Op::LeakyRelu { x, slope } => {
            if rg(*x) {
                let dx = ndarray::Zip::from(g)
                    .and(val(*x))
                    .map_collect(|&gi, &xi| if xi >= F::zero() { gi } else { gi * *slope });
                out.push((*x, dx));
            }
        }
        Op::Sigmoid(x) => {
            if rg(*x) {
                let dx = ndarray::Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&gi, &yi| gi * yi * (F::one() - yi));
                out.push((*x, dx));
            }
        }
        Op::MatMul(a, b) => {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if rg(*a) {
                let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                out.push((*a, gv.dot(&bv.t()).into_dyn()));
            }
            if rg(*b) {
                let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                out.push((*b, av.t().dot(&gv).into_dyn()));
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let xv = val(*x).view().into_dimensionality::<Ix4>().unwrap();
            let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (dx, dw) =
                kernels::conv2d_backward(&xv, &wv, &gv, *stride, *pad, rg(*x), rg(*w));
            if let Some(dx) = dx {
                out.push((*x, dx.into_dyn()));
            }
            if let Some(dw) = dw {
                out.push((*w, dw.into_dyn()));
            }
        }
        Op::ConvTranspose2d { x, w, stride, pad } => {
            let xv = val(*x).view().into_dimensionality::<Ix4>().unwrap();
            let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (dx, dw) =
                kernels::conv_transpose2d_backward(&xv, &wv, &gv, *stride, *pad, rg(*x), rg(*w));
            if let Some(dx) = dx {
                out.push((*x, dx.into_dyn()));
            }
            if let Some(dw) = dw {
                out.push((*w, dw.into_dyn()));
            }
        }
        Op::AvgPool2d { x, k } => {
            if rg(*x) {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                out.push((*x, kernels::avg_pool2d_backward(&gv, *k).into_dyn()));
            }
        }
        Op::SmoothPool2x2(x) => {
            if rg(*x) {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                out.push((*x, kernels::smooth_pool2x2_backward(&gv).into_dyn()));
            }
        }
        Op::SpatialMean(x) => {
            if rg(*x) {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let inv = F::from_f64(1.0 / (h * w) as f64);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array4::<F>::zeros((xs[0], xs[1], h, w));
                for ni in 0..xs[0] {
                    for ci in 0..xs[1] {
                        let gval = gv[[ni, ci]] * inv;
                        dx.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .mapv_inplace(|_| gval);
                    }
                }
                out.push((*x, dx.into_dyn()));
            }
        }
        Op::UpsampleNearest { x, factor } => {
            if rg(*x) {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                out.push((*x, kernels::upsample_nearest_backward(&gv, *factor).into_dyn()));
            }
        }
        Op::ConcatChannels(a, b) => {
            let ca = val(*a).shape()[1];
            if rg(*a) {
                out.push((*a, g.slice_axis(Axis(1), (0..ca).into()).to_owned()));
            }
            if rg(*b) {
                let cb = val(*b).shape()[1];
                out.push((*b, g.slice_axis(Axis(1), (ca..ca + cb).into()).to_owned()));
            }
        }
        Op::Reshape(x) => {
            if rg(*x) {
                let shape = val(*x).raw_dim();
                out.push((*x, g.to_shape(shape).unwrap().to_owned()));
            }
        }
        Op::InstanceNorm { x, inv_std } => {
            if rg(*x) {
                let xhat = node.value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = kernels::dims4(&gv);
                let m = F::from_f64((h * w) as f64);
                let mut dx = ndarray::Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gsl = gv.index_axis(Axis(0), ni);
                        let gsl = gsl.index_axis(Axis(0), ci);
                        let xsl = xhat.index_axis(Axis(0), ni);
                        let xsl = xsl.index_axis(Axis(0), ci);
                        let g_mean = gsl.iter().copied().sum::<F>() / m;
                        let gx_mean =
                            gsl.iter().zip(xsl.iter()).map(|(&a, &b)| a * b).sum::<F>() / m;
                        let istd = inv_std[[ni, ci]];
                        let mut dsl = dx.index_axis_mut(Axis(0), ni);
                        let mut dsl = dsl.index_axis_mut(Axis(0), ci);
                        ndarray::Zip::from(&mut dsl).and(&gsl).and(&xsl).for_each(
                            |d, &gi, &xi| {
                                *d = istd * (gi - g_mean - xi * gx_mean);
                            },
                        );
                    }
                }
                out.push((*x, dx.into_dyn()));
            }
        }
        Op::LayerNorm { x, inv_std } => {
            if rg(*x) {
                let xhat = &node.value;
                let n = xhat.shape()[0];
                let m = F::from_f64((xhat.len() / n) as f64);
                let mut dx = ArrayD::<F>::zeros(xhat.raw_dim());
                for ni in 0..n {
                    let gsl = g.index_axis(Axis(0), ni);
                    let xsl = xhat.index_axis(Axis(0), ni);
                    let g_mean = gsl.iter().copied().sum::<F>() / m;
                    let gx_mean = gsl.iter().zip(xsl.iter()).map(|(&a, &b)| a * b).sum::<F>() / m;
                    let istd = inv_std[ni];
                    let mut dsl = dx.index_axis_mut(Axis(0), ni);
                    ndarray::Zip::from(&mut dsl).and(&gsl).and(&xsl).for_each(|d, &gi, &xi| {
                        *d = istd * (gi - g_mean - xi * gx_mean);
                    });
                }
                out.push((*x, dx));
            }
        }
        Op::SumAll(x) => {
            if rg(*x) {
                out.push((*x, ArrayD::from_elem(val(*x).raw_dim(), gs(g))));
            }
        }
        Op::MeanAbs(x) => {
            if rg(*x) {
                let scale = gs(g) * F::from_f64(1.0 / val(*x).len() as f64);
                out.push((
                    *x,
                    val(*x).mapv(|v| {
                        if v > F::zero() {
                            scale
                        } else if v < F::zero() {
                            -scale
                        } else {
                            F::zero()
                        }
                    }),
                ));
            }
        }
        Op::MeanSq(x) => {
            if rg(*x) {
                let scale = gs(g) * F::from_f64(2.0 / val(*x).len() as f64);
                out.push((*x, val(*x).mapv(|v| v * scale)));
            }
        }
        Op::BceWithLogitsMean { logits, targets, weights } => {
            if rg(*logits) {
                let z = val(*logits);
                let t = val(*targets);
                let scale = gs(g) * F::from_f64(1.0 / z.len() as f64);
                let mut dz = ndarray::Zip::from(z).and(t).map_collect(|&zi, &ti| {
                    let sig = if zi >= F::zero() {
                        F::one() / (F::one() + (-zi).exp())
                    } else {
                        let e = zi.exp();
                        e / (F::one() + e)
                    };
                    (sig - ti) * scale
                });
                if let Some(w) = weights {
                    dz = &dz * val(*w);
                }
                out.push((*logits, dz));
            }
        }
        Op::SmoothL1Mean { pred, target, beta } => {
            if rg(*pred) {
                let p = val(*pred);
                let t = val(*target);
                let scale = gs(g) * F::from_f64(1.0 / p.len() as f64);
                let dp = ndarray::Zip::from(p).and(t).map_collect(|&pi, &ti| {
                    let d = pi - ti;
                    let slope = if d.abs() < *beta {
                        d / *beta
                    } else if d > F::zero() {
                        F::one()
                    } else {
                        -F::one()
                    };
                    slope * scale
                });
                out.push((*pred, dp));
            }
        }
        Op::GaussianKlMean { mean, log_var } => {
            let n = F::from_f64(val(*mean).shape()[0] as f64);
            let half = F::from_f64(0.5);
            let scale = gs(g) / n;
            if rg(*mean) {
                out.push((*mean, val(*mean).mapv(|m| m * scale)));
            }
            if rg(*log_var) {
                out.push((*log_var, val(*log_var).mapv(|l| half * (l.exp() - F::one()) * scale)));
            }
        }
        Op::WeightedSum(terms) => {
            for &(v, w) in terms {
                if rg(v) {
                    out.push((v, scalar_arr(gs(g) * w)));
                }
            }
        }
    }
    out
}

/// Named parameter tensors, ordered by insertion.
#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    params: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Names matching a `component.` prefix, e.g. every generator weight.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.params.keys().filter(move |n| n.starts_with(prefix))
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
struct AdamSlot<F: Scalar> {
    m: ArrayD<F>,
    v: ArrayD<F>,
    t: u64,
}

/// Adam optimizer with optional per-prefix learning-rate overrides; moments
/// are kept per parameter and can be exported for checkpointing.
#[derive(Clone)]
pub struct Adam<F: Scalar> {
    lr: f64,
    lr_overrides: Vec<(String, f64)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: IndexMap<String, AdamSlot<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, lr_overrides: Vec::new(), beta1, beta2, eps: 1e-8, slots: IndexMap::new() }
    }

    /// Parameters whose name starts with `prefix` use `lr` instead of the default.
    pub fn with_lr_override(mut self, prefix: &str, lr: f64) -> Self {
        self.lr_overrides.push((prefix.to_string(), lr));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_overrides
            .iter()
            .find(|(p, _)| name.starts_with(p))
            .map_or(self.lr, |&(_, lr)| lr)
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(String, ArrayD<F>)]) {
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer step on unknown parameter {name}"));
            let lr = F::from_f64(self.lr_for(name));
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let b1 = F::from_f64(self.beta1);
            let b2 = F::from_f64(self.beta2);
            let one = F::one();
            slot.m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (one - b1) * g);
            slot.v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let bc1 = F::from_f64(1.0 - self.beta1.powi(slot.t as i32));
            let bc2 = F::from_f64(1.0 - self.beta2.powi(slot.t as i32));
            let eps = F::from_f64(self.eps);
            ndarray::Zip::from(param).and(&slot.m).and(&slot.v).for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    /// Moment tensors for checkpointing, flattened to `(kind, param, tensor)`.
    pub fn export_slots(&self) -> Vec<(String, u64, ArrayD<F>, ArrayD<F>)> {
        self.slots
            .iter()
            .map(|(name, s)| (name.clone(), s.t, s.m.clone(), s.v.clone()))
            .collect()
    }

    pub fn import_slot(&mut self, name: &str, t: u64, m: ArrayD<F>, v: ArrayD<F>) {
        self.slots.insert(name.to_string(), AdamSlot { m, v, t });
    }
}

/// SGD with classical momentum (`v = mu*v + g; p -= lr*v`).
#[derive(Clone)]
pub struct SgdMomentum<F: Scalar> {
    lr: f64,
    momentum: f64,
    velocity: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: IndexMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(String, ArrayD<F>)]) {
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer step on unknown parameter {name}"));
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let mu = F::from_f64(self.momentum);
            vel.zip_mut_with(grad, |v, &g| *v = mu * *v + g);
            let lr = F::from_f64(self.lr);
            param.zip_mut_with(vel, |p, &v| *p = *p - lr * v);
        }
    }
}

pub mod gradcheck {
    //! Central-difference gradient checking against tape gradients.

    use ndarray::ArrayD;

    /// Central difference of a scalar function at one flat coordinate.
    pub fn central_diff(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        flat_index: usize,
        h: f64,
    ) -> f64 {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[flat_index] += h;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[flat_index] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// Relative error with an absolute floor so that near-zero pairs compare
    /// on absolute terms instead of blowing up.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Compare an analytic gradient against central differences at the given
    /// flat coordinates; returns the worst relative error or a description of
    /// the first non-finite value encountered.
    pub fn check_grad(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        coords: &[usize],
        h: f64,
    ) -> Result<f64, String> {
        assert_eq!(x.shape(), analytic.shape());
        let an = analytic.as_slice().expect("analytic gradient must be standard layout");
        let mut worst = 0.0f64;
        for &idx in coords {
            let fd = central_diff(f, x, idx, h);
            if !fd.is_finite() || !an[idx].is_finite() {
                return Err(format!("non-finite gradient at {idx}: fd={fd}, analytic={}", an[idx]));
            }
            worst = worst.max(relative_error(fd, an[idx]));
        }
        Ok(worst)
    }

    /// Deterministic, roughly uniform selection of `count` flat coordinates.
    pub fn sample_coords(len: usize, count: usize) -> Vec<usize> {
        let count = count.min(len);
        (0..count).map(|i| i * len / count).collect()
    }
}
