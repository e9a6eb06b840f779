//! SGD with momentum (no dampening) and L2 weight decay.
//!
//! Update rule, per parameter element, with decay added to the raw gradient:
//!
//! ```text
//! g <- grad + weight_decay * p
//! v <- momentum * v + g
//! p <- p - lr * v
//! ```
//!
//! The parameter step equals the updated velocity (lookahead-style momentum:
//! the iterate itself plays the role of the lookahead point, so on a constant
//! gradient the second step is `(1 + momentum) * g`). Gradients are zeroed
//! when the step completes.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::layers::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Momentum is applied in the lookahead (velocity-step) form; the flag is
    /// part of the training configuration surface.
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers, one per parameter tensor, in visiting order.
#[derive(Debug, Clone, Default)]
pub struct SgdState<E> {
    buffers: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new() -> Self {
        SgdState {
            buffers: Vec::new(),
        }
    }

    /// Apply one step to a sequence of parameters. The caller must visit
    /// parameters in the same order on every step.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut ParamTensor<E>>,
        cfg: &SgdConfig,
    ) where
        E: 'a,
    {
        let lr = E::from_f64(cfg.lr);
        let momentum = E::from_f64(cfg.momentum);
        let decay = E::from_f64(cfg.weight_decay);
        for (slot, param) in params.enumerate() {
            if self.buffers.len() <= slot {
                self.buffers.push(vec![E::zero(); param.value.data().len()]);
            }
            let buf = &mut self.buffers[slot];
            assert_eq!(
                buf.len(),
                param.value.data().len(),
                "optimizer state does not match parameter layout"
            );
            let value = param.value.data_mut();
            let grad = param.grad.data_mut();
            for i in 0..value.len() {
                let g = grad[i] + decay * value[i];
                let v = momentum * buf[i] + g;
                buf[i] = v;
                value[i] = value[i] - lr * v;
                grad[i] = E::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ParamRole;
    use crate::tensor::{Shape, Tensor};

    fn param(v: f64) -> ParamTensor<f64> {
        ParamTensor::new(
            Tensor::filled(Shape::new(1, 1, 1, 1), v),
            ParamRole::ConvWeight,
        )
    }

    #[test]
    fn vanilla_sgd_is_p_minus_lr_g() {
        let mut p = param(1.0);
        p.grad.data_mut()[0] = 0.5;
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
        };
        state.step(core::iter::once(&mut p), &cfg);
        assert!((p.value.data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert_eq!(p.grad.data()[0], 0.0, "gradient zeroed after step");
    }

    #[test]
    fn momentum_second_delta_is_1_9_g() {
        // Unrolled by hand: v1 = g, delta1 = g; v2 = 0.9 g + g = 1.9 g,
        // delta2 = 1.9 g.
        let g = 0.25;
        let mut p = param(0.0);
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
        };
        p.grad.data_mut()[0] = g;
        state.step(core::iter::once(&mut p), &cfg);
        let after1 = p.value.data()[0];
        assert!((after1 - (-g)).abs() < 1e-12);
        p.grad.data_mut()[0] = g;
        state.step(core::iter::once(&mut p), &cfg);
        let delta2 = p.value.data()[0] - after1;
        assert!((delta2 - (-(1.9 * g))).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_adds_lambda_p_to_gradient() {
        let mut p = param(2.0);
        p.grad.data_mut()[0] = 0.5;
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.01,
        };
        state.step(core::iter::once(&mut p), &cfg);
        // unrolled: g = 0.5 + 0.01 * 2.0 = 0.52, p = 2.0 - 0.1 * 0.52
        assert!((p.value.data()[0] - (2.0 - 0.1 * 0.52)).abs() < 1e-15);
    }

    #[test]
    fn two_step_decay_momentum_unrolled() {
        // lr 0.5, momentum 0.5, decay 0.1, grad 1.0 both steps, p0 = 1.0
        // step1: g = 1 + 0.1*1 = 1.1; v = 1.1; p = 1 - 0.55 = 0.45
        // step2: g = 1 + 0.045 = 1.045; v = 0.55 + 1.045 = 1.595;
        //        p = 0.45 - 0.7975 = -0.3475
        let mut p = param(1.0);
        let mut state = SgdState::new();
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.5,
            nesterov: true,
            weight_decay: 0.1,
        };
        p.grad.data_mut()[0] = 1.0;
        state.step(core::iter::once(&mut p), &cfg);
        assert!((p.value.data()[0] - 0.45).abs() < 1e-12);
        p.grad.data_mut()[0] = 1.0;
        state.step(core::iter::once(&mut p), &cfg);
        assert!((p.value.data()[0] - (-0.3475)).abs() < 1e-12);
    }
}
