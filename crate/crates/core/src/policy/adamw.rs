//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyParams, Tensors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    m: Tensors,
    v: Tensors,
    step: u64,
}

impl OptState {
    pub fn new(cfg: &PolicyConfig) -> OptState {
        OptState {
            m: Tensors::zeros(cfg),
            v: Tensors::zeros(cfg),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay Adam update. Non-finite gradients reject the
/// update; params are checked finite afterwards.
pub fn adamw_step(
    params: &mut PolicyParams,
    grads: &Tensors,
    state: &mut OptState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric(
            "non-finite gradient: update rejected".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .t
        .fields_mut()
        .into_iter()
        .zip(grads.fields())
        .zip(state.m.fields_mut().into_iter().zip(state.v.fields_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    if !params.t.is_finite() {
        return Err(Error::Numeric("non-finite params after update".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyParams {
        PolicyParams::init(
            PolicyConfig {
                vocab_size: 6,
                dim: 4,
                max_len: 8,
            },
            3,
        )
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut p = tiny();
        let before = p.clone();
        let zeros = p.grads_zero();
        let mut state = OptState::new(&p.cfg);
        adamw_step(&mut p, &zeros, &mut state, &AdamWConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_has_closed_form() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.grads_zero();
        for (_, v) in g.fields_mut() {
            for x in v.iter_mut() {
                *x = 0.37;
            }
        }
        let cfg = AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        };
        let mut state = OptState::new(&p.cfg);
        adamw_step(&mut p, &g, &mut state, &cfg).unwrap();
        // t=1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        let expected = -cfg.lr * 0.37 / (0.37 + cfg.eps);
        for ((_, after), (_, prior)) in p.t.fields().into_iter().zip(before.t.fields()) {
            for (a, b) in after.iter().zip(prior) {
                assert!(((a - b) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_decay_shrinks_params_with_zero_grad() {
        let mut p = tiny();
        let before = p.clone();
        let zeros = p.grads_zero();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        };
        let mut state = OptState::new(&p.cfg);
        adamw_step(&mut p, &zeros, &mut state, &cfg).unwrap();
        let factor = 1.0 - cfg.lr * cfg.weight_decay;
        for ((_, after), (_, prior)) in p.t.fields().into_iter().zip(before.t.fields()) {
            for (a, b) in after.iter().zip(prior) {
                assert!((a - b * factor).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.grads_zero();
        g.w1[0] = f64::NAN;
        let mut state = OptState::new(&p.cfg);
        let err = adamw_step(&mut p, &g, &mut state, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 0);
    }
}
