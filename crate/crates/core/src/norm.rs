//! Batch normalization with switchable per-width parameter banks.
//!
//! Each bank holds private gamma/beta and running statistics; convolution
//! weights are the only parameters shared across widths. Training at one
//! width touches exactly one bank, which keeps the bank-isolation invariant
//! checkable bit-for-bit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{ParamRole, ParamTensor, Sel};
use crate::tensor::Tensor;

/// One width's private normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<E> {
    pub gamma: ParamTensor<E>, // (channels, 1, 1, 1)
    pub beta: ParamTensor<E>,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
}

impl<E: Element> BnState<E> {
    pub fn identity(channels: usize) -> Self {
        BnState {
            gamma: ParamTensor::new(
                Tensor::filled(crate::tensor::Shape::new(channels, 1, 1, 1), E::one()),
                ParamRole::BnGamma,
            ),
            beta: ParamTensor::new(
                Tensor::zeros(crate::tensor::Shape::new(channels, 1, 1, 1)),
                ParamRole::BnBeta,
            ),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<E> {
    pub banks: Vec<BnState<E>>,
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub name: String,
}

/// Values captured by a training-mode forward, consumed by backward.
pub struct BnSaved<E> {
    pub input: Tensor<E>,
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

pub fn bn_layer<E: Element>(channels: usize, banks: usize, name: String) -> BnLayer<E> {
    BnLayer {
        banks: (0..banks).map(|_| BnState::identity(channels)).collect(),
        channels,
        momentum: 0.1,
        epsilon: 1e-5,
        name,
    }
}

impl<E: Element> BnLayer<E> {
    pub fn check_bank(&self, bank: usize) -> Result<()> {
        if bank >= self.banks.len() {
            return Err(Error::IndexOutOfRange {
                at: self.name.clone(),
                index: bank,
                limit: self.banks.len(),
            });
        }
        Ok(())
    }

    /// Training-mode forward over the active channel prefix: normalizes by
    /// batch statistics (biased variance) and updates the bank's running
    /// stats by exponential moving average.
    pub fn forward_train(
        &mut self,
        input: &Tensor<E>,
        bank: usize,
        n: usize,
    ) -> Result<(Tensor<E>, BnSaved<E>)> {
        self.check_bank(bank)?;
        let s = input.shape();
        if s.channels != n || n > self.channels {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: alloc::format!("expected {} channels, got {}", n, s.channels),
            });
        }
        let count = s.batch * s.spatial();
        if count == 0 {
            return Err(Error::Numeric {
                at: self.name.clone(),
                detail: String::from("empty batch"),
            });
        }
        let eps = E::from_f64(self.epsilon);
        let m = E::from_f64(self.momentum);
        let inv_count = E::one() / E::from_usize(count);
        let state = &mut self.banks[bank];
        let mut out = Tensor::zeros(s);
        let mut means = vec![E::zero(); n];
        let mut inv_stds = vec![E::zero(); n];
        for c in 0..n {
            let mut sum = E::zero();
            for b in 0..s.batch {
                let base = input.offset(b, c, 0, 0);
                for i in 0..s.spatial() {
                    sum += input.data()[base + i];
                }
            }
            let mean = sum * inv_count;
            let mut var_sum = E::zero();
            for b in 0..s.batch {
                let base = input.offset(b, c, 0, 0);
                for i in 0..s.spatial() {
                    let d = input.data()[base + i] - mean;
                    var_sum += d * d;
                }
            }
            let var = var_sum * inv_count;
            let stabilized = var + eps;
            if stabilized <= E::zero() {
                return Err(Error::Numeric {
                    at: self.name.clone(),
                    detail: String::from("non-positive variance after epsilon stabilization"),
                });
            }
            let inv_std = E::one() / stabilized.sqrt();
            let g = state.gamma.value.data()[c];
            let bta = state.beta.value.data()[c];
            for b in 0..s.batch {
                let base = input.offset(b, c, 0, 0);
                for i in 0..s.spatial() {
                    out.data_mut()[base + i] = (input.data()[base + i] - mean) * inv_std * g + bta;
                }
            }
            state.running_mean[c] = (E::one() - m) * state.running_mean[c] + m * mean;
            state.running_var[c] = (E::one() - m) * state.running_var[c] + m * var;
            means[c] = mean;
            inv_stds[c] = inv_std;
        }
        Ok((
            out,
            BnSaved {
                input: input.clone(),
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// Eval-mode forward using the bank's running statistics. `sel` addresses
    /// bank entries; the input is packed to `sel.len()` channels.
    pub fn forward_eval(&self, input: &Tensor<E>, bank: usize, sel: Sel) -> Result<Tensor<E>> {
        self.check_bank(bank)?;
        let s = input.shape();
        let n = sel.len();
        if s.channels != n || n > self.channels {
            return Err(Error::Dimension {
                at: self.name.clone(),
                detail: alloc::format!("expected {} channels, got {}", n, s.channels),
            });
        }
        let eps = E::from_f64(self.epsilon);
        let state = &self.banks[bank];
        let mut out = Tensor::zeros(s);
        for pc in 0..n {
            let c = sel.index(pc);
            let stabilized = state.running_var[c] + eps;
            if stabilized <= E::zero() {
                return Err(Error::Numeric {
                    at: self.name.clone(),
                    detail: String::from("non-positive running variance"),
                });
            }
            let inv_std = E::one() / stabilized.sqrt();
            let g = state.gamma.value.data()[c];
            let bta = state.beta.value.data()[c];
            let mean = state.running_mean[c];
            for b in 0..s.batch {
                let base = input.offset(b, pc, 0, 0);
                for i in 0..s.spatial() {
                    out.data_mut()[base + i] = (input.data()[base + i] - mean) * inv_std * g + bta;
                }
            }
        }
        Ok(out)
    }

    /// Training-mode backward. Accumulates gamma/beta gradients on the bank
    /// and returns the input gradient.
    pub fn backward(
        &mut self,
        saved: &BnSaved<E>,
        grad_out: &Tensor<E>,
        bank: usize,
        n: usize,
    ) -> Tensor<E> {
        let s = saved.input.shape();
        let count = E::from_usize(s.batch * s.spatial());
        let state = &mut self.banks[bank];
        let mut grad_in = Tensor::zeros(s);
        for c in 0..n {
            let mean = saved.mean[c];
            let inv_std = saved.inv_std[c];
            let g = state.gamma.value.data()[c];
            let mut sum_g = E::zero();
            let mut sum_gx = E::zero();
            for b in 0..s.batch {
                let base = saved.input.offset(b, c, 0, 0);
                for i in 0..s.spatial() {
                    let go = grad_out.data()[base + i];
                    let xhat = (saved.input.data()[base + i] - mean) * inv_std;
                    sum_g += go;
                    sum_gx += go * xhat;
                }
            }
            state.beta.grad.data_mut()[c] += sum_g;
            state.gamma.grad.data_mut()[c] += sum_gx;
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            for b in 0..s.batch {
                let base = saved.input.offset(b, c, 0, 0);
                for i in 0..s.spatial() {
                    let go = grad_out.data()[base + i];
                    let xhat = (saved.input.data()[base + i] - mean) * inv_std;
                    grad_in.data_mut()[base + i] = g * inv_std * (go - mean_g - xhat * mean_gx);
                }
            }
        }
        grad_in
    }
}
