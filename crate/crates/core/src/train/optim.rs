use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;

/// Clamps every gradient entry into `[-c, c]`.
pub fn clip_gradients<'a>(grads: impl IntoIterator<Item = &'a mut Matrix>, c: f64) {
    for g in grads {
        for x in g.data_mut() {
            *x = x.clamp(-c, c);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let m: Vec<Matrix> = params
            .into_iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<'a, 'b>(
    params: impl IntoIterator<Item = &'a mut Matrix>,
    grads: impl IntoIterator<Item = &'b Matrix>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let mut g = Matrix::row_vector(&[7.0, -12.0, 3.0, -5.0]);
        clip_gradients([&mut g], 5.0);
        assert_eq!(g.data(), &[5.0, -5.0, 3.0, -5.0]);
        let mut inside = Matrix::row_vector(&[0.1, -4.9]);
        let before = inside.clone();
        clip_gradients([&mut inside], 5.0);
        assert_eq!(inside, before);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        adam_step(
            [&mut p],
            [&Matrix::zeros(1, 2)],
            &mut st,
            &AdamConfig::default(),
        );
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::row_vector(&[0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig::default();
        adam_step([&mut p], [&Matrix::row_vector(&[3.0, -0.5])], &mut st, &cfg);
        assert!((p.data()[0] + cfg.lr).abs() < 1e-9);
        assert!((p.data()[1] - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2
        let mut p = Matrix::row_vector(&[0.0, 0.0]);
        let mut st = AdamState::new([&p]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let f = |p: &Matrix| (p.data()[0] - 1.0).powi(2) + 10.0 * (p.data()[1] + 2.0).powi(2);
        for _ in 0..500 {
            let d = p.data();
            let g = Matrix::row_vector(&[2.0 * (d[0] - 1.0), 20.0 * (d[1] + 2.0)]);
            adam_step([&mut p], [&g], &mut st, &cfg);
        }
        assert!(f(&p) < 1e-6, "{}", f(&p));
    }
}
