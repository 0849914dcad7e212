//! AdamW with decoupled weight decay (Loshchilov & Hutter).
//!
//! For every parameter that received a gradient:
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamWState<T> {
    /// Fresh state for parameters with the given shapes.
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update. `grads[i] == None` leaves parameter `i` (and its moments) untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adamw: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::contract(format!(
                    "adamw: param {i} has shape {:?}, state {:?}",
                    p.shape(),
                    self.m[i].shape()
                )));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() && g.len() != p.len() {
                    return Err(Error::contract(format!(
                        "adamw: grad {i} has shape {:?}, param {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = T::from_f64_lossy(c.lr);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let eps = T::from_f64_lossy(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pj = *pj * decay;
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj = *pj - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p0: f64, cfg: AdamWConfig) -> (Tensor<f64>, AdamWState<f64>) {
        (Tensor::scalar(p0), AdamWState::new(cfg, &[&[1, 1]]))
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut p, mut st) = single(1.5, cfg);
        let g = Tensor::scalar(0.0);
        st.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn positive_grad_descends() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut p, mut st) = single(1.0, cfg);
        st.step(&mut [&mut p], &[Some(&Tensor::scalar(1.0))]).unwrap();
        assert!(p.data()[0] < 1.0);
    }

    #[test]
    fn quadratic_strictly_decreases() {
        // f(p) = (p - 3)², from p = 0 with lr = 0.1: ten steps, each lowers f.
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut p, mut st) = single(0.0, cfg);
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let mut prev = f(p.data()[0]);
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * (p.data()[0] - 3.0));
            st.step(&mut [&mut p], &[Some(&g)]).unwrap();
            let now = f(p.data()[0]);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction the first Adam step has magnitude lr (g ≠ 0).
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let (mut p, mut st) = single(2.0, cfg);
        st.step(&mut [&mut p], &[Some(&Tensor::scalar(0.5))]).unwrap();
        let expect = 2.0 * (1.0 - 0.01 * 0.1) - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut st = AdamWState::<f64>::new(AdamWConfig::default(), &[&[2, 2]]);
        let mut p = Tensor::zeros(&[3, 1]);
        let err = st.step(&mut [&mut p], &[None]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn missing_grad_leaves_param_and_moments() {
        let mut st = AdamWState::<f64>::new(AdamWConfig::default(), &[&[1, 1], &[1, 1]]);
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        st.step(&mut [&mut a, &mut b], &[Some(&g), None]).unwrap();
        assert_eq!(b.data()[0], 1.0);
        assert!(a.data()[0] < 1.0);
    }
}
