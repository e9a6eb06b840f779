//! Layer primitives shared by the execution engine: parameters with gradient
//! accumulators, channel selections (prefix slices or index gathers), and the
//! activation / pooling / linear kernels. Convolution and batch norm live in
//! their own modules.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::norm::BnLayer;
use crate::tensor::{Shape, Tensor};

/// What a parameter tensor is, for reporting and selective updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

/// A learnable tensor paired with its gradient accumulator.
///
/// The gradient always has the same shape as the value and is zeroed exactly
/// when an optimizer step completes or on an explicit reset.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<E> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub role: ParamRole,
}

impl<E: Element> ParamTensor<E> {
    pub fn new(value: Tensor<E>, role: ParamRole) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamTensor { value, grad, role }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(E::zero());
    }
}

/// Active channels of one tensor dimension during a sliced forward pass.
///
/// `Prefix(n)` is the contiguous slice `0..n`; `Gather` executes the same
/// selection through an explicit index map (pre-sorting semantics, used by
/// the latency benchmark).
#[derive(Clone, Copy, Debug)]
pub enum Sel<'a> {
    Prefix(usize),
    Gather(&'a [u32]),
}

impl Sel<'_> {
    #[inline]
    pub fn len(&self) -> usize {
        match self {
            Sel::Prefix(n) => *n,
            Sel::Gather(idx) => idx.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Storage index backing packed position `i`.
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Sel::Prefix(_) => i,
            Sel::Gather(idx) => idx[i] as usize,
        }
    }
}

/// Elementwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Relu6,
}

impl ActKind {
    #[inline]
    pub fn apply<E: Element>(&self, x: E) -> E {
        let zero = E::zero();
        match self {
            ActKind::Relu => {
                if x > zero {
                    x
                } else {
                    zero
                }
            }
            ActKind::Relu6 => {
                let six = E::from_f64(6.0);
                if x <= zero {
                    zero
                } else if x >= six {
                    six
                } else {
                    x
                }
            }
        }
    }

    /// Derivative mask at pre-activation value `x`. Flat regions (including
    /// the kinks) get gradient 0.
    #[inline]
    pub fn mask<E: Element>(&self, x: E) -> E {
        let zero = E::zero();
        match self {
            ActKind::Relu => {
                if x > zero {
                    E::one()
                } else {
                    zero
                }
            }
            ActKind::Relu6 => {
                if x > zero && x < E::from_f64(6.0) {
                    E::one()
                } else {
                    zero
                }
            }
        }
    }
}

pub fn activation_forward<E: Element>(input: &Tensor<E>, kind: ActKind) -> Tensor<E> {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = kind.apply(*v);
    }
    out
}

pub fn activation_backward<E: Element>(
    saved_input: &Tensor<E>,
    grad_out: &Tensor<E>,
    kind: ActKind,
) -> Tensor<E> {
    let mut grad_in = grad_out.clone();
    for (g, x) in grad_in.data_mut().iter_mut().zip(saved_input.data()) {
        *g = *g * kind.mask(*x);
    }
    grad_in
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

/// Byproducts of a max-pool forward needed for its backward.
pub struct PoolSaved {
    pub input_shape: Shape,
    pub argmax: Vec<u32>,
}

pub fn pool_forward<E: Element>(
    input: &Tensor<E>,
    pool: &PoolLayer,
) -> Result<(Tensor<E>, PoolSaved)> {
    let s = input.shape();
    match pool.kind {
        PoolKind::GlobalAvg => {
            let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, 1, 1));
            let scale = E::one() / E::from_usize(s.spatial());
            for b in 0..s.batch {
                for c in 0..s.channels {
                    let base = input.offset(b, c, 0, 0);
                    let mut acc = E::zero();
                    for i in 0..s.spatial() {
                        acc += input.data()[base + i];
                    }
                    *out.at_mut(b, c, 0, 0) = acc * scale;
                }
            }
            Ok((
                out,
                PoolSaved {
                    input_shape: s,
                    argmax: Vec::new(),
                },
            ))
        }
        PoolKind::Max => {
            let k = pool.window;
            let st = pool.stride;
            if k > s.height || k > s.width {
                return Err(Error::Dimension {
                    at: String::from("max_pool"),
                    detail: alloc::format!(
                        "window {k} larger than input {}x{}",
                        s.height,
                        s.width
                    ),
                });
            }
            let h_out = (s.height - k) / st + 1;
            let w_out = (s.width - k) / st + 1;
            let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, h_out, w_out));
            let mut argmax = vec![0u32; out.shape().numel()];
            let mut oi = 0;
            for b in 0..s.batch {
                for c in 0..s.channels {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let mut best = E::neg_infinity();
                            let mut best_at = 0usize;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = input.offset(b, c, oy * st + ky, ox * st + kx);
                                    let v = input.data()[idx];
                                    if v > best {
                                        best = v;
                                        best_at = idx;
                                    }
                                }
                            }
                            out.data_mut()[oi] = best;
                            argmax[oi] = best_at as u32;
                            oi += 1;
                        }
                    }
                }
            }
            Ok((
                out,
                PoolSaved {
                    input_shape: s,
                    argmax,
                },
            ))
        }
    }
}

pub fn pool_backward<E: Element>(
    saved: &PoolSaved,
    grad_out: &Tensor<E>,
    pool: &PoolLayer,
) -> Tensor<E> {
    let mut grad_in = Tensor::zeros(saved.input_shape);
    match pool.kind {
        PoolKind::GlobalAvg => {
            let s = saved.input_shape;
            let scale = E::one() / E::from_usize(s.spatial());
            for b in 0..s.batch {
                for c in 0..s.channels {
                    let g = grad_out.at(b, c, 0, 0) * scale;
                    let base = grad_in.offset(b, c, 0, 0);
                    for i in 0..s.spatial() {
                        grad_in.data_mut()[base + i] += g;
                    }
                }
            }
        }
        PoolKind::Max => {
            for (oi, g) in grad_out.data().iter().enumerate() {
                grad_in.data_mut()[saved.argmax[oi] as usize] += *g;
            }
        }
    }
    grad_in
}

/// Fully connected classifier head. The input is a flattened feature map;
/// weight columns are laid out channel-major (`channel * spatial + s`) so
/// channel slicing and reordering act on contiguous column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<E> {
    pub weight: ParamTensor<E>, // (out_features, in_channels * spatial, 1, 1)
    pub bias: Option<ParamTensor<E>>,
    pub in_channels: usize,
    pub spatial: usize,
    pub out_features: usize,
    pub name: String,
}

impl<E: Element> LinearLayer<E> {
    pub fn in_features(&self) -> usize {
        self.in_channels * self.spatial
    }

    /// Forward over the first `in_sel` channel blocks. Output is
    /// `(batch, out_features, 1, 1)`.
    pub fn forward(&self, input: &Tensor<E>, in_sel: Sel) -> Result<Tensor<E>> {
        let s = input.shape();
        let n_in = in_sel.len();
        if s.channels != n_in || s.spatial() != self.spatial {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: alloc::format!(
                    "linear expects {} channels x {} spatial, got {} x {}",
                    n_in,
                    self.spatial,
                    s.channels,
                    s.spatial()
                ),
            });
        }
        let mut out = Tensor::zeros(Shape::new(s.batch, self.out_features, 1, 1));
        let w = self.weight.value.data();
        let in_feat = self.in_features();
        for b in 0..s.batch {
            for o in 0..self.out_features {
                let mut acc = match &self.bias {
                    Some(bias) => bias.value.data()[o],
                    None => E::zero(),
                };
                let row = &w[o * in_feat..(o + 1) * in_feat];
                for ci in 0..n_in {
                    let col_base = in_sel.index(ci) * self.spatial;
                    let x_base = input.offset(b, ci, 0, 0);
                    for sp in 0..self.spatial {
                        acc += row[col_base + sp] * input.data()[x_base + sp];
                    }
                }
                *out.at_mut(b, o, 0, 0) = acc;
            }
        }
        Ok(out)
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    /// Backward supports prefix selections only (training never gathers).
    pub fn backward(&mut self, saved_input: &Tensor<E>, grad_out: &Tensor<E>, n_in: usize) -> Tensor<E> {
        let s = saved_input.shape();
        debug_assert_eq!(s.channels, n_in);
        let in_feat = self.in_features();
        let mut grad_in = Tensor::zeros(s);
        for b in 0..s.batch {
            for o in 0..self.out_features {
                let g = grad_out.at(b, o, 0, 0);
                if let Some(bias) = &mut self.bias {
                    bias.grad.data_mut()[o] += g;
                }
                let row_base = o * in_feat;
                for ci in 0..n_in {
                    let col_base = row_base + ci * self.spatial;
                    let x_base = saved_input.offset(b, ci, 0, 0);
                    for sp in 0..self.spatial {
                        self.weight.grad.data_mut()[col_base + sp] +=
                            g * saved_input.data()[x_base + sp];
                        grad_in.data_mut()[x_base + sp] +=
                            g * self.weight.value.data()[col_base + sp];
                    }
                }
            }
        }
        grad_in
    }
}

/// One materialized layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<E> {
    Conv(crate::conv::ConvLayer<E>),
    Bn(BnLayer<E>),
    Act(ActKind),
    Pool(PoolLayer),
    Linear(LinearLayer<E>),
}

impl<E: Element> Layer<E> {
    /// Visit every parameter tensor of this layer.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut ParamTensor<E>)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            Layer::Bn(bn) => {
                for bank in &mut bn.banks {
                    f(&mut bank.gamma);
                    f(&mut bank.beta);
                }
            }
            Layer::Linear(l) => {
                f(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(b);
                }
            }
            Layer::Act(_) | Layer::Pool(_) => {}
        }
    }
}
