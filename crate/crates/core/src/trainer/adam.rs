use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// One bias-corrected Adam update; returns fresh parameter leaves.
pub fn adam_step(params: &[Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    params
        .iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .map(|((p, g), (m, v))| {
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(Error::Contract("adam_step: buffer length differs from parameter".into()));
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            Tensor::parameter(data, p.shape())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor {
        Tensor::parameter(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = vec![param(&[1.0, -2.0])];
        let mut s = AdamState::new(&p);
        let out = adam_step(&p, &[vec![0.0, 0.0]], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(out[0].data(), p[0].data());
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_formula() {
        let cfg = AdamConfig::default();
        let g = [0.3, -2e-3, 5.0];
        let p = vec![param(&[0.0, 0.0, 0.0])];
        let mut s = AdamState::new(&p);
        let out = adam_step(&p, &[g.to_vec()], &mut s, &cfg).unwrap();
        for (x, gi) in out[0].data().iter().zip(g) {
            // m_hat = g, v_hat = g^2 after bias correction
            let expect = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((x - expect).abs() < 1e-15, "{x} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_drifts_at_most_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![param(&[0.0])];
        let mut s = AdamState::new(&p);
        let mut prev = 0.0;
        for _ in 0..200 {
            p = adam_step(&p, &[vec![0.7]], &mut s, &cfg).unwrap();
            let x = p[0].data()[0];
            assert!(x < prev && prev - x <= cfg.lr * (1.0 + 1e-9));
            prev = x;
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
