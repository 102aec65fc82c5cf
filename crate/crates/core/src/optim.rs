//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one bias-corrected Adam update to every tensor in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} grads for {} params",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.same_shape(&store.tensors()[i]) || !g.same_shape(&self.m[i]) {
                return Err(Error::Shape(format!(
                    "adam: grad {:?} vs param {:?}",
                    g.shape(),
                    store.tensors()[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[Vec<f64>]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, v) in vals.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::vector(v.clone()).unwrap());
        }
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = store(&[vec![0.5, -0.25], vec![3.0]]);
        let before = s.clone();
        let mut st = AdamState::new(&s, AdamConfig::default());
        let g: Vec<Tensor> = s.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for _ in 0..5 {
            st.step(&mut s, &g).unwrap();
        }
        assert_eq!(s, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // mhat = g, vhat = g², so the first update is lr * g / (|g| + eps)
        for &g in &[0.37, -2.5, 1e-3] {
            let mut s = store(&[vec![1.0]]);
            let mut st = AdamState::new(&s, AdamConfig::default());
            st.step(&mut s, &[Tensor::vector(vec![g]).unwrap()]).unwrap();
            let delta = 1.0 - s.tensors()[0].data()[0];
            let expected = 1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
            assert!((delta.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn groups_are_independent() {
        let vals = [vec![0.1, 0.2], vec![-0.3]];
        let grads = [vec![0.5, -1.0], vec![2.0]];
        let mut joint = store(&vals);
        let mut st = AdamState::new(&joint, AdamConfig::default());
        let gj: Vec<Tensor> = grads.iter().map(|g| Tensor::vector(g.clone()).unwrap()).collect();
        for _ in 0..3 {
            st.step(&mut joint, &gj).unwrap();
        }
        for i in 0..2 {
            let mut single = store(&vals[i..=i]);
            let mut s1 = AdamState::new(&single, AdamConfig::default());
            for _ in 0..3 {
                s1.step(&mut single, &gj[i..=i]).unwrap();
            }
            assert_eq!(single.tensors()[0], joint.tensors()[i]);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store(&[vec![0.0, 0.0]]);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = st.step(&mut s, &[Tensor::vector(vec![1.0]).unwrap()]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Tensor::vector(vec![3.0]).unwrap(),
            Tensor::vector(vec![4.0]).unwrap(),
        ];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let n2 = clip_global_norm(&mut g, 5.0);
        assert!((n2 - 1.0).abs() < 1e-12);
    }
}
