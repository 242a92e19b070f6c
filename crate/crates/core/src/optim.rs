//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment estimates and the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update of every listed parameter at learning rate `lr`.
    ///
    /// Every listed parameter must have a gradient of matching shape.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, p) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {name} of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let g = &grads[&name];
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: vec![0.0; p.numel()],
                second: vec![0.0; p.numel()],
            });
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *w -= lr * weight_decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Gradients that backward produced for the named tape leaves.
pub fn collect_grads<'a>(tape: &Tape, vars: impl IntoIterator<Item = (String, &'a Var)>) -> Gradients {
    vars.into_iter()
        .filter_map(|(name, v)| tape.grad(*v).map(|g| (name, g.clone())))
        .collect()
}

/// Clips `grads` to `clip_norm` and applies one AdamW update to `params`.
/// Returns the gradient norm before clipping.
pub fn clipped_step(
    opt: &mut OptimizerState,
    params: Vec<(String, &mut Tensor)>,
    mut grads: Gradients,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let norm = clip_global_norm(&mut grads, clip_norm);
    opt.step(params, &grads, lr)?;
    Ok(norm)
}

/// Linear warmup over the first `warmup_steps`, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Self {
            peak_lr,
            warmup_steps: crate::ceil_count(total_steps as f64 * warmup_fraction),
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.peak_lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f64>) -> (String, Tensor) {
        let n = v.len();
        (name.to_string(), Tensor::new(vec![n], v).unwrap())
    }

    #[test]
    fn zero_grads_without_decay_leave_parameters() {
        let (name, mut p) = one("w", vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let grads: Gradients = [one("w", vec![0.0; 3])].into_iter().collect();
        let mut st = OptimizerState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        st.step(vec![(name, &mut p)], &grads, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grads_with_decay_shrink_multiplicatively() {
        let (name, mut p) = one("w", vec![1.0, -2.0, 3.5]);
        let grads: Gradients = [one("w", vec![0.0; 3])].into_iter().collect();
        let mut st = OptimizerState::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        st.step(vec![(name, &mut p)], &grads, 0.1).unwrap();
        for (a, b) in p.data().iter().zip([1.0, -2.0, 3.5]) {
            assert_eq!(*a, b - 0.1 * 0.5 * b);
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let (name, mut p) = one("w", vec![0.3, 0.7]);
        let before = p.clone();
        let grads: Gradients = [one("w", vec![5.0, -1.0])].into_iter().collect();
        let mut st = OptimizerState::new(AdamWConfig::default());
        st.step(vec![(name, &mut p)], &grads, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (name, mut p) = one("w", vec![0.3]);
        let mut st = OptimizerState::new(AdamWConfig::default());
        let err = st.step(vec![(name, &mut p)], &Gradients::new(), 0.1);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g: Gradients = [one("a", vec![3.0]), one("b", vec![4.0])].into_iter().collect();
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g["a"].item() - 0.6).abs() < 1e-15);
        assert!((g["b"].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_then_holds() {
        let s = WarmupSchedule::new(1.0, 100, 0.05);
        assert_eq!(s.warmup_steps, 5);
        assert_eq!(s.lr(0), 0.2);
        assert_eq!(s.lr(4), 1.0);
        assert_eq!(s.lr(50), 1.0);
    }
}
