//! Adam with bias correction.

use super::config::TrainHyper;
use super::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamSet,
    pub second_moment: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &ParamSet) -> Self {
        Self {
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            step: 0,
        }
    }
}

/// One update:
///
/// ```text
/// m = b1 m + (1 - b1) g
/// v = b2 v + (1 - b2) g^2
/// p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, hyper: &TrainHyper) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2, lr, eps) = (hyper.beta1, hyper.beta2, hyper.learning_rate, hyper.epsilon);
    let p_all = params.tensors_mut();
    let g_all = grads.tensors();
    let m_all = state.first_moment.tensors_mut();
    let v_all = state.second_moment.tensors_mut();
    for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
