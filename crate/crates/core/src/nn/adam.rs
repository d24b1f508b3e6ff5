use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates and step counter, one `m`/`v` pair per parameter in store
/// order (empty for non-trainable entries).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// One bias-corrected Adam update of a single parameter slice. `step` is the
/// 1-based index of this update.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
) {
    assert!(step >= 1, "adam step counter starts at 1");
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let bc1 = one - T::lit(cfg.beta1.powi(step as i32));
    let bc2 = one - T::lit(cfg.beta2.powi(step as i32));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    for i in 0..params.len() {
        let g = if cfg.weight_decay != 0.0 {
            grads[i] + wd * params[i]
        } else {
            grads[i]
        };
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over every trainable parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |trainable: bool, n: usize| if trainable { vec![T::zero(); n] } else { Vec::new() };
        let m = store
            .iter()
            .map(|(_, p)| zeros(p.trainable, p.tensor.numel()))
            .collect::<Vec<_>>();
        Self {
            config,
            state: AdamState {
                step: 0,
                v: m.clone(),
                m,
            },
        }
    }

    /// Applies one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.state.step += 1;
        let step = self.state.step;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_deref().expect("trainable parameter without gradient");
            adam_step(
                p.tensor.data_mut(),
                grad,
                &mut self.state.m[i],
                &mut self.state.v[i],
                step,
                &self.config,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        for &g in &[3.0f64, -0.02, 1e-3] {
            let mut p = [0.5];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let delta = p[0] - 0.5;
            assert!((delta + cfg.lr * g.signum()).abs() < cfg.lr * 1e-4, "g={g} delta={delta}");
        }
    }

    #[test]
    fn first_step_tolerance_for_unit_scale_gradients() {
        let cfg = AdamConfig::default();
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_step(&mut p, &[0.7], &mut m, &mut v, 1, &cfg);
        assert!((p[0] + cfg.lr).abs() < cfg.lr * 1e-6);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let cfg = AdamConfig::default();
        let mut p = [1.25f32, -3.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, t, &cfg);
        }
        assert_eq!(p, [1.25, -3.0]);
    }

    #[test]
    fn three_steps_on_square_decrease_objective() {
        // f(theta) = theta^2, gradient 2 theta
        let cfg = AdamConfig::default();
        let mut theta = [1.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut last = theta[0] * theta[0];
        for t in 1..=3 {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut m, &mut v, t, &cfg);
            let f = theta[0] * theta[0];
            assert!(f < last);
            last = f;
        }
        // the recurrence gives theta = 1 - 3 * lr while the gradient sign is stable
        assert!((theta[0] - 0.997).abs() < 1e-6);
    }
}
