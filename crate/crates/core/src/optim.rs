//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update:
/// `θ ← θ − lr·λ·θ − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adamw_step", &[params.len()], &[grads.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        let i = id.index();
        let p = params.get_mut(id).data_mut();
        let g = &grads[i];
        if g.len() != p.len() {
            return Err(Error::dim("adamw_step", &[p.len()], &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * cfg.weight_decay * p[j];
            p[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}

pub fn zero_grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

/// Shape of the learning rate after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `peak · sqrt(warmup / step)` once warmup ends.
    Noam,
}

/// Linear warmup to `peak` over `warmup` steps, constant afterwards.
pub fn warmup_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 {
        peak
    } else {
        peak * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Learning rate for the 0-based `step`.
pub fn scheduled_lr(schedule: LrSchedule, peak: f64, warmup: u64, step: u64) -> f64 {
    let n = step + 1;
    match schedule {
        LrSchedule::Noam if warmup > 0 && n > warmup => peak * (warmup as f64 / n as f64).sqrt(),
        _ => warmup_lr(peak, warmup, step),
    }
}

pub fn grads_as_tensors(store: &ParamStore, grads: &[Vec<f64>]) -> Vec<Tensor> {
    store
        .iter()
        .zip(grads)
        .map(|((_, t), g)| Tensor::new(t.shape().to_vec(), g.clone()).expect("grad shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_step_is_pure_decay() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut state = AdamWState::new(&store);
        let grads = zero_grads(&store);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        adamw_step(&mut store, &grads, &mut state, 1e-3, &cfg).unwrap();
        let factor = 1.0 - 1e-5;
        for (got, orig) in store.get(w).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - orig * factor).abs() < 1e-15, "{got} vs {}", orig * factor);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0, 0.0]));
        let mut state = AdamWState::new(&store);
        let grads = vec![vec![3.0, -0.2]];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut store, &grads, &mut state, 0.1, &cfg).unwrap();
        let d = store.get(w).data();
        assert!((d[0] + 0.1).abs() < 1e-6);
        assert!((d[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![0.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        assert!((warmup_lr(1e-3, 10, 0) - 1e-4).abs() < 1e-18);
        assert_eq!(warmup_lr(1e-3, 10, 50), 1e-3);
        assert_eq!(warmup_lr(1e-3, 0, 0), 1e-3);
    }

    #[test]
    fn noam_matches_warmup_then_decays() {
        for step in 0..10 {
            assert_eq!(scheduled_lr(LrSchedule::Noam, 1e-3, 10, step), warmup_lr(1e-3, 10, step));
        }
        assert!((scheduled_lr(LrSchedule::Noam, 1e-3, 10, 39) - 5e-4).abs() < 1e-18);
        assert_eq!(scheduled_lr(LrSchedule::Constant, 1e-3, 10, 39), 1e-3);
        assert_eq!(scheduled_lr(LrSchedule::Noam, 1e-3, 0, 39), 1e-3);
    }
}
