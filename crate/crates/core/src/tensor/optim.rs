use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients so their global L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// First and second moment estimates, one array per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub state: AdamState<S>,
}

/// Scale all gradients in `store` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let total: f64 = store
        .tensors_mut()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::of(max_norm / norm);
        for t in store.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: AdamState { step: 0, m: Vec::new(), v: Vec::new() } }
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> f64 {
        let lr = self.config.lr;
        self.step_with_lr(store, lr)
    }

    /// One bias-corrected Adam update using the gradients held in `store`;
    /// parameters without a gradient are treated as having a zero one.
    /// Returns the gradient norm before clipping.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<S>, lr: f64) -> f64 {
        let norm = match self.config.clip_norm {
            Some(max) => clip_grad_norm(store, max),
            None => clip_grad_norm(store, f64::INFINITY),
        };
        let st = &mut self.state;
        let tensors = store.tensors_mut();
        if st.m.len() != tensors.len() {
            st.m.resize(tensors.len(), Vec::new());
            st.v.resize(tensors.len(), Vec::new());
        }
        st.step += 1;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        let (lr, eps) = (S::of(lr), S::of(cfg.eps));
        for (i, t) in tensors.iter_mut().enumerate() {
            let n = t.numel();
            if st.m[i].len() != n {
                st.m[i] = vec![S::zero(); n];
                st.v[i] = vec![S::zero(); n];
            }
            let grad = t.grad.take();
            let (m, v) = (&mut st.m[i], &mut st.v[i]);
            for j in 0..n {
                let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                t.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = grad;
        }
        norm
    }
}
