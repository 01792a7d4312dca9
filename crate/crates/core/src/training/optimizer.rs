use std::hash::Hasher;

use fnv::FnvHasher;

use super::TrainConfig;
use crate::error::{BlendError, Result};
use crate::models::ParamStore;
use crate::numerics::{Gradients, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Hash of the moment buffers (not the counter).
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        for t in self.m.iter().chain(&self.v) {
            for &x in t.data() {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}

/// Learning rate after `step` updates: linear warmup, then constant.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_iters == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (step as f64 / cfg.warmup_iters as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradient; parameters and moments untouched.
    Rejected,
}

/// One Adam update with decoupled weight decay. Missing gradients count as
/// zero. The counter advances even when the step is rejected.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if state.m.len() != params.len() {
        return Err(BlendError::Shape(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    if !grads.all_finite() {
        log::warn!("non-finite gradient at step {}; update skipped", state.step);
        return Ok(StepOutcome::Rejected);
    }
    let t = state.step as i32;
    let lr = learning_rate(cfg, state.step);
    let decay = 1.0 - lr * cfg.weight_decay;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let mut p = params.tensor(i).clone();
        let g = grads.get(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if g.is_some_and(|g| g.shape() != p.shape()) {
            return Err(BlendError::Shape(format!("gradient shape mismatch for {}", params.names()[i])));
        }
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            let mk = BETA1 * m.data()[k] + (1.0 - BETA1) * gk;
            let vk = BETA2 * v.data()[k] + (1.0 - BETA2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let w = p.data()[k] * decay;
            p.data_mut()[k] = w - lr * (mk / c1) / ((vk / c2).sqrt() + EPS);
        }
        params.set(i, p)?;
    }
    Ok(StepOutcome::Applied)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use approx::assert_abs_diff_eq;

    fn store(rng: &mut SeededRng) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("a", Tensor::from_rows(2, 3, (0..6).map(|_| rng.normal()).collect())).unwrap();
        p.push("b", Tensor::from_rows(1, 2, (0..2).map(|_| rng.normal()).collect())).unwrap();
        p
    }

    fn grads_like(p: &ParamStore, rng: &mut SeededRng) -> Gradients {
        let mut g = Gradients::new(p.len());
        for i in 0..p.len() {
            let t = p.tensor(i);
            g.by_param[i] = Some(Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.normal()).collect()).unwrap());
        }
        g
    }

    fn cfg(warmup: usize, wd: f64) -> TrainConfig {
        TrainConfig {
            warmup_iters: warmup,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut rng = SeededRng::new(0);
        let mut p = store(&mut rng);
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let g = Gradients::new(p.len());
        adam_step(&mut p, &g, &mut s, &cfg(0, 0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut rng = SeededRng::new(1);
        let mut p = store(&mut rng);
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let g = grads_like(&p, &mut rng);
        let c = cfg(10, 0.0);
        adam_step(&mut p, &g, &mut s, &c).unwrap();
        let lr = 1e-3 / 10.0;
        for i in 0..p.len() {
            for k in 0..p.tensor(i).len() {
                let gk = g.get(i).unwrap().data()[k];
                let want = before.tensor(i).data()[k] - lr * gk / (gk.abs() + EPS);
                // parameters are stored at f32 precision
                assert_abs_diff_eq!(p.tensor(i).data()[k], want, epsilon = 1e-6);
            }
        }
    }

    /// Independently written update rule run alongside for ten steps.
    #[test]
    fn matches_reference_rule() {
        let mut rng = SeededRng::new(2);
        let mut p = store(&mut rng);
        let mut s = OptimizerState::new(&p);
        let c = cfg(4, 0.05);
        let mut w: Vec<Vec<f64>> = p.tensors().iter().map(|t| t.data().to_vec()).collect();
        let mut m1: Vec<Vec<f64>> = w.iter().map(|x| vec![0.0; x.len()]).collect();
        let mut m2 = m1.clone();
        for step in 1..=10u32 {
            let g = grads_like(&p, &mut rng);
            adam_step(&mut p, &g, &mut s, &c).unwrap();
            let lr = 1e-3 * (step as f64 / 4.0).min(1.0);
            for i in 0..w.len() {
                for k in 0..w[i].len() {
                    let gk = g.get(i).unwrap().data()[k];
                    w[i][k] *= 1.0 - lr * 0.05;
                    m1[i][k] = 0.9 * m1[i][k] + 0.1 * gk;
                    m2[i][k] = 0.999 * m2[i][k] + 0.001 * gk * gk;
                    let mh = m1[i][k] / (1.0 - 0.9f64.powi(step as i32));
                    let vh = m2[i][k] / (1.0 - 0.999f64.powi(step as i32));
                    w[i][k] -= lr * mh / (vh.sqrt() + 1e-8);
                    // The store keeps f32 values; mirror that rounding.
                    w[i][k] = w[i][k] as f32 as f64;
                }
            }
            for i in 0..w.len() {
                for (a, b) in p.tensor(i).data().iter().zip(&w[i]) {
                    assert!((a - b).abs() < 1e-10, "step {step}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_touching_state() {
        let mut rng = SeededRng::new(3);
        let mut p = store(&mut rng);
        let mut s = OptimizerState::new(&p);
        let g = grads_like(&p, &mut rng);
        adam_step(&mut p, &g, &mut s, &cfg(0, 0.0)).unwrap();
        let (pb, hb) = (p.clone(), s.fingerprint());
        let mut bad = grads_like(&p, &mut rng);
        bad.by_param[0].as_mut().unwrap().data_mut()[2] = f64::NAN;
        assert_eq!(adam_step(&mut p, &bad, &mut s, &cfg(0, 0.0)).unwrap(), StepOutcome::Rejected);
        assert_eq!(p, pb);
        assert_eq!(s.fingerprint(), hb);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut rng = SeededRng::new(4);
        let p = store(&mut rng);
        let mut g = grads_like(&p, &mut rng);
        g.scale(1000.0);
        let before = clip_global_norm(&mut g, 200.0);
        assert!(before > 200.0);
        assert_abs_diff_eq!(g.global_norm(), 200.0, epsilon = 1e-9);
    }

    #[test]
    fn warmup_is_linear() {
        let c = cfg(100, 0.0);
        assert_abs_diff_eq!(learning_rate(&c, 25), 2.5e-4, epsilon = 1e-18);
        assert_eq!(learning_rate(&c, 500), 1e-3);
    }
}
