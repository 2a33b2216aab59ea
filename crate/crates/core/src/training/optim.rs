//! Global-norm gradient clipping and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipInfo {
    /// Global ℓ2 norm before clipping.
    pub norm: f64,
    /// Factor applied to every gradient; 1 when the norm is within bounds.
    pub scale: f64,
}

/// ℓ2 norm over every stored gradient of trainable tensors.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, _, t)| t.requires_grad)
        .filter_map(|(_, _, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<ClipInfo> {
    if !(max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(store);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    Ok(ClipInfo { norm, scale })
}

/// Adam moments for every tensor in a store.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = store
            .iter()
            .map(|(_, _, t)| if t.requires_grad { t.len() } else { 0 })
            .collect();
        OptimState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update. Tensors that are frozen or received
    /// no gradient this step are left untouched, moments included.
    pub fn adam_step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step = self
            .step
            .checked_add(1)
            .ok_or(Error::NonFinite("adam step counter"))?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (k, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn store_with_grad(values: &[f64], grad: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap().with_grad(true));
        s.accumulate_grad(id, grad, 1.0);
        s
    }

    #[test]
    fn clip_examples() {
        let mut s = store_with_grad(&[0.0, 0.0], &[24.0, 32.0]);
        let info = clip_gradients(&mut s, 20.0).unwrap();
        assert_eq!(info.norm, 40.0);
        assert_eq!(info.scale, 0.5);
        assert!((global_grad_norm(&s) - 20.0).abs() < 1e-9);

        let mut s = store_with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        let info = clip_gradients(&mut s, 20.0).unwrap();
        assert_eq!(info.scale, 1.0);
        assert_eq!(s.get(crate::tensor::ParamId(0)).grad.as_deref(), Some(&[3.0, 4.0][..]));

        let mut s = store_with_grad(&[0.0], &[f64::NAN]);
        assert!(matches!(clip_gradients(&mut s, 20.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn frozen_tensors_are_ignored() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::filled(&[1], 1.0).with_grad(true));
        let b = s.add("b", Tensor::filled(&[1], 1.0).with_grad(false));
        s.accumulate_grad(a, &[1.0], 1.0);
        s.accumulate_grad(b, &[100.0], 1.0);
        assert_eq!(global_grad_norm(&s), 1.0);
        let mut opt = OptimState::new(&s, AdamConfig::default());
        opt.adam_step(&mut s).unwrap();
        assert_eq!(s.get(b).data(), &[1.0]);
        assert_ne!(s.get(a).data(), &[1.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with_grad(&[1.0, -2.0, 0.5], &[0.3, -7.0, 1e-3]);
        let mut opt = OptimState::new(&s, AdamConfig::default());
        opt.adam_step(&mut s).unwrap();
        let d = s.get(crate::tensor::ParamId(0)).data().to_vec();
        let expected = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (x, e) in d.iter().zip(expected) {
            assert!((x - e).abs() < 1e-7, "{x} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with_grad(&[1.0, 2.0], &[0.0, 0.0]);
        let mut opt = OptimState::new(&s, AdamConfig::default());
        opt.adam_step(&mut s).unwrap();
        assert_eq!(s.get(crate::tensor::ParamId(0)).data(), &[1.0, 2.0]);
    }

    #[test]
    fn minimizes_a_square() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(&[1], 1.0).with_grad(true));
        let mut opt = OptimState::new(&s, AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut w_ref = 1.0f64;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            s.zero_grad();
            let w = s.get(id).data()[0];
            s.accumulate_grad(id, &[2.0 * w], 1.0);
            opt.adam_step(&mut s).unwrap();
            // Scalar reference implementation.
            let g = 2.0 * w_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w_ref -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        let w = s.get(id).data()[0];
        assert!(w.abs() < 1.0);
        assert!((w - w_ref).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clipping_bounds_norm_and_is_idempotent(
            g in proptest::collection::vec(-50.0f64..50.0, 1..20),
        ) {
            let mut s = store_with_grad(&vec![0.0; g.len()], &g);
            let before = global_grad_norm(&s);
            clip_gradients(&mut s, 20.0).unwrap();
            let once = s.get(crate::tensor::ParamId(0)).grad.clone().unwrap();
            prop_assert!((global_grad_norm(&s) - before.min(20.0)).abs() < 1e-9);
            clip_gradients(&mut s, 20.0).unwrap();
            let twice = s.get(crate::tensor::ParamId(0)).grad.clone().unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
