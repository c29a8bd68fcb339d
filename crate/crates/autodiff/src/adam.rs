//! Adam with bias-corrected moments.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tape::Matrix;

thread_local! {
    static STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of optimizer steps applied on the current thread.
///
/// Evaluation code that must not adapt any parameters snapshots this value
/// before and after running.
pub fn optimizer_steps() -> u64 {
    STEPS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    pub steps: u64,
    /// Parameter tensors whose update was skipped for a non-finite gradient.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
            skipped: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub skipped: usize,
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> StepReport {
    assert_eq!(
        grads.len(),
        params.len(),
        "one gradient per parameter tensor"
    );
    assert_eq!(
        state.m.len(),
        params.len(),
        "optimizer state built for another set"
    );
    state.steps += 1;
    STEPS.with(|s| s.set(s.get() + 1));
    let t = state.steps as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut report = StepReport::default();
    for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
        if !g.iter().all(|x| x.is_finite()) {
            report.skipped += 1;
            state.skipped += 1;
            continue;
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    report
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Matrix::from_elem((1, 1), value));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(
                &mut p,
                &[Matrix::zeros((1, 1))],
                &mut st,
                &AdamConfig::default(),
            );
        }
        assert_eq!(p.values()[0][[0, 0]], 0.3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction => delta = -lr / (1 + eps).
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &[Matrix::ones((1, 1))], &mut st, &cfg);
        let delta = p.values()[0][[0, 0]];
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn constant_gradient_step_tends_to_lr_times_sign() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let g = Matrix::from_elem((1, 1), -0.37);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            adam_step(&mut p, std::slice::from_ref(&g), &mut st, &cfg);
            let now = p.values()[0][[0, 0]];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - cfg.lr).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn non_finite_gradient_is_skipped_and_counted() {
        let mut p = ParamSet::new();
        p.add("a", Matrix::zeros((1, 2)));
        p.add("b", Matrix::zeros((1, 1)));
        let mut st = AdamState::new(&p);
        let grads = [
            Matrix::from_shape_vec((1, 2), vec![1.0, f64::NAN]).unwrap(),
            Matrix::ones((1, 1)),
        ];
        let before = optimizer_steps();
        let report = adam_step(&mut p, &grads, &mut st, &AdamConfig::default());
        assert_eq!(report.skipped, 1);
        assert_eq!(st.skipped, 1);
        assert_eq!(optimizer_steps(), before + 1);
        assert_eq!(p.values()[0], Matrix::zeros((1, 2)));
        assert!(p.values()[1][[0, 0]] < 0.0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![
            Matrix::from_elem((1, 1), 3.0),
            Matrix::from_elem((1, 1), 4.0),
        ];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        let after: f64 = g.iter().map(|m| m[[0, 0]].powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
