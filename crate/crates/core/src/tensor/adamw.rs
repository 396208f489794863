//! AdamW: Adam with decoupled weight decay.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn zeros_like(params: &[(String, Tensor<T>)]) -> Self {
        AdamWState {
            m: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update over all parameters.
    ///
    /// Decoupled decay: `p <- p - lr*m_hat/(sqrt(v_hat)+eps) - lr*wd*p`.
    /// A non-finite gradient aborts with the offending parameter's name.
    pub fn step<T: Scalar>(
        &self,
        lr: f64,
        params: &mut [(String, Tensor<T>)],
        grads: &[Vec<T>],
        state: &mut AdamWState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::invalid(format!(
                "adamw: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        state.step += 1;
        let t = state.step;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t as i32));
        for ((name, p), (g, (m, v))) in params
            .iter_mut()
            .zip(grads.iter().zip(state.m.iter_mut().zip(state.v.iter_mut())))
        {
            if g.len() != p.numel() {
                return Err(Error::shape(format!(
                    "adamw: gradient length {} for {name} with {} elements",
                    g.len(),
                    p.numel()
                )));
            }
            for (i, ((pv, &gv), (mv, vv))) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .enumerate()
            {
                if !gv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name}[{i}] is {gv}"
                    )));
                }
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps) - lr_t * wd * *pv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![("p".to_string(), Tensor::scalar(v))]
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut params = one_param(1.25);
        let mut state = AdamWState::zeros_like(&params);
        opt.step(0.1, &mut params, &[vec![0.0]], &mut state).unwrap();
        assert_eq!(params[0].1.data()[0], 1.25);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut params = one_param(1.0);
        let mut state = AdamWState::zeros_like(&params);
        opt.step(0.1, &mut params, &[vec![1.0]], &mut state).unwrap();
        // by hand: m=0.1, v=0.001, m_hat=1, v_hat=1 -> p = 1 - 0.1/(1+1e-8)
        let want = 1.0 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((params[0].1.data()[0] - want).abs() < 1e-12);
        assert!(params[0].1.data()[0] < 1.0, "step must decrease p");
    }

    #[test]
    fn decay_only_path_scales_by_one_minus_lr_wd() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut params = one_param(2.0);
        let mut state = AdamWState::zeros_like(&params);
        opt.step(0.1, &mut params, &[vec![0.0]], &mut state).unwrap();
        let want = 2.0 * (1.0 - 0.1 * 0.1);
        assert!((params[0].1.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let opt = AdamW::default();
        let mut params = one_param(1.0);
        let mut state = AdamWState::zeros_like(&params);
        let err = opt
            .step(0.1, &mut params, &[vec![f64::NAN]], &mut state)
            .unwrap_err();
        assert!(err.to_string().contains("p[0]"), "{err}");
    }
}
