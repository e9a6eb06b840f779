//! 2D convolution kernels, forward and backward, with channel slicing.
//!
//! Accumulation is sequential in a fixed order (batch, output channel, output
//! row, input channel, kernel row, kernel column) so results are
//! bit-deterministic for identical inputs. The sliced entry points accept
//! either contiguous prefix selections or explicit index gathers; gathers
//! read the same weights through an index map and reproduce the prefix
//! arithmetic exactly, only the memory access pattern differs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{ParamRole, ParamTensor, Sel};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<E> {
    /// Weight layout `(out_channels, in_channels / groups, k, k)`.
    pub weight: ParamTensor<E>,
    /// Per-output-channel bias, `(out_channels, 1, 1, 1)`.
    pub bias: Option<ParamTensor<E>>,
    pub stride: usize,
    pub padding: usize,
    /// `true` for depthwise convolution (groups == channels). General grouped
    /// convolution is supported by the free function but not by slicing.
    pub depthwise: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub name: String,
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Standalone convolution over full channel ranges with arbitrary `groups`.
/// `weight` is `(out, in/groups, k, k)`.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    let ws = weight.shape();
    let is = input.shape();
    if groups == 0 || stride == 0 {
        return Err(Error::Invalid(String::from("stride and groups must be >= 1")));
    }
    if is.channels != ws.channels * groups || ws.batch % groups != 0 {
        return Err(Error::Dimension {
            at: String::from("conv2d"),
            detail: alloc::format!(
                "input channels {} incompatible with weight {}x{} at groups {}",
                is.channels,
                ws.batch,
                ws.channels,
                groups
            ),
        });
    }
    if is.height + 2 * padding < ws.height || is.width + 2 * padding < ws.width {
        return Err(Error::Dimension {
            at: String::from("conv2d"),
            detail: String::from("kernel larger than padded input"),
        });
    }
    let out_per_group = ws.batch / groups;
    let in_per_group = ws.channels;
    let h_out = conv_out_dim(is.height, ws.height, stride, padding);
    let w_out = conv_out_dim(is.width, ws.width, stride, padding);
    let mut out = Tensor::zeros(Shape::new(is.batch, ws.batch, h_out, w_out));
    for b in 0..is.batch {
        for o in 0..ws.batch {
            let g = o / out_per_group;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = match bias {
                        Some(t) => t.data()[o],
                        None => E::zero(),
                    };
                    for i in 0..in_per_group {
                        let ic = g * in_per_group + i;
                        for ky in 0..ws.height {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= is.height as isize {
                                continue;
                            }
                            for kx in 0..ws.width {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= is.width as isize {
                                    continue;
                                }
                                acc += weight.at(o, i, ky, kx)
                                    * input.at(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(b, o, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

impl<E: Element> ConvLayer<E> {
    fn check_input(&self, input: &Tensor<E>, n_in: usize) -> Result<()> {
        let s = input.shape();
        if s.channels != n_in {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: alloc::format!("expected {} input channels, got {}", n_in, s.channels),
            });
        }
        if s.height + 2 * self.padding < self.kernel || s.width + 2 * self.padding < self.kernel {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: String::from("kernel larger than padded input"),
            });
        }
        Ok(())
    }

    /// Sliced forward. For depthwise layers the two selections must be the
    /// same length; packed position `i` convolves input channel `i` with the
    /// filter at storage index `out_sel.index(i)`.
    pub fn forward(&self, input: &Tensor<E>, out_sel: Sel, in_sel: Sel) -> Result<Tensor<E>> {
        self.check_input(input, in_sel.len())?;
        let is = input.shape();
        let k = self.kernel;
        let st = self.stride;
        let p = self.padding;
        let h_out = conv_out_dim(is.height, k, st, p);
        let w_out = conv_out_dim(is.width, k, st, p);
        let n_out = out_sel.len();
        let mut out = Tensor::zeros(Shape::new(is.batch, n_out, h_out, w_out));
        let w = self.weight.value.data();
        let x = input.data();
        let in_stride = if self.depthwise { 1 } else { self.in_channels };

        if self.depthwise && out_sel.len() != in_sel.len() {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: String::from("depthwise selection must match input selection"),
            });
        }

        let mut row_acc: Vec<E> = vec![E::zero(); w_out];
        for b in 0..is.batch {
            for po in 0..n_out {
                let o = out_sel.index(po);
                let bias_v = match &self.bias {
                    Some(t) => t.value.data()[o],
                    None => E::zero(),
                };
                let w_out_base = o * in_stride * k * k;
                for oy in 0..h_out {
                    for v in row_acc.iter_mut() {
                        *v = bias_v;
                    }
                    let in_range = if self.depthwise { po..po + 1 } else { 0..in_sel.len() };
                    for pi in in_range {
                        let wi = if self.depthwise { 0 } else { in_sel.index(pi) };
                        let w_base = w_out_base + wi * k * k;
                        let x_chan = input.offset(b, pi, 0, 0);
                        for ky in 0..k {
                            let iy = (oy * st + ky) as isize - p as isize;
                            if iy < 0 || iy >= is.height as isize {
                                continue;
                            }
                            let x_row = x_chan + iy as usize * is.width;
                            for kx in 0..k {
                                let wv = w[w_base + ky * k + kx];
                                // valid ox range: 0 <= ox*st + kx - p < width
                                let lo_num = p as isize - kx as isize;
                                let ox_lo = if lo_num <= 0 {
                                    0
                                } else {
                                    ((lo_num as usize) + st - 1) / st
                                };
                                let hi_num = is.width as isize + p as isize - kx as isize;
                                if hi_num <= 0 {
                                    continue;
                                }
                                let ox_hi = ((hi_num as usize - 1) / st + 1).min(w_out);
                                // ox_lo guarantees ox_lo*st + kx >= p
                                let mut ix = ox_lo * st + kx - p;
                                for ox in ox_lo..ox_hi {
                                    row_acc[ox] += wv * x[x_row + ix];
                                    ix += st;
                                }
                            }
                        }
                    }
                    let out_base = out.offset(b, po, oy, 0);
                    out.data_mut()[out_base..out_base + w_out].copy_from_slice(&row_acc);
                }
            }
        }
        Ok(out)
    }

    /// Backward for prefix selections: accumulates weight/bias gradients for
    /// the active slice and returns the gradient w.r.t. the sliced input.
    pub fn backward(
        &mut self,
        saved_input: &Tensor<E>,
        grad_out: &Tensor<E>,
        n_out: usize,
        n_in: usize,
    ) -> Tensor<E> {
        let is = saved_input.shape();
        let os = grad_out.shape();
        debug_assert_eq!(os.channels, n_out);
        debug_assert_eq!(is.channels, n_in);
        let k = self.kernel;
        let st = self.stride;
        let p = self.padding;
        let in_stride = if self.depthwise { 1 } else { self.in_channels };
        let mut grad_in = Tensor::zeros(is);
        for b in 0..is.batch {
            for o in 0..n_out {
                let w_out_base = o * in_stride * k * k;
                let mut bias_acc = E::zero();
                for oy in 0..os.height {
                    for ox in 0..os.width {
                        let g = grad_out.at(b, o, oy, ox);
                        bias_acc += g;
                        let in_range = if self.depthwise { o..o + 1 } else { 0..n_in };
                        for i in in_range {
                            let wi = if self.depthwise { 0 } else { i };
                            let w_base = w_out_base + wi * k * k;
                            for ky in 0..k {
                                let iy = (oy * st + ky) as isize - p as isize;
                                if iy < 0 || iy >= is.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * st + kx) as isize - p as isize;
                                    if ix < 0 || ix >= is.width as isize {
                                        continue;
                                    }
                                    let xi =
                                        saved_input.offset(b, i, iy as usize, ix as usize);
                                    let widx = w_base + ky * k + kx;
                                    self.weight.grad.data_mut()[widx] +=
                                        g * saved_input.data()[xi];
                                    grad_in.data_mut()[xi] += g * self.weight.value.data()[widx];
                                }
                            }
                        }
                    }
                }
                if let Some(bias) = &mut self.bias {
                    bias.grad.data_mut()[o] += bias_acc;
                }
            }
        }
        grad_in
    }
}

/// Build a conv layer with zeroed parameters (initialization happens at
/// network build time).
pub fn conv_layer<E: Element>(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
    with_bias: bool,
    name: String,
) -> ConvLayer<E> {
    let in_per_group = if depthwise { 1 } else { in_channels };
    let weight = ParamTensor::new(
        Tensor::zeros(Shape::new(out_channels, in_per_group, kernel, kernel)),
        ParamRole::ConvWeight,
    );
    let bias = with_bias.then(|| {
        ParamTensor::new(
            Tensor::zeros(Shape::new(out_channels, 1, 1, 1)),
            ParamRole::ConvBias,
        )
    });
    ConvLayer {
        weight,
        bias,
        stride,
        padding,
        depthwise,
        in_channels,
        out_channels,
        kernel,
        name,
    }
}
