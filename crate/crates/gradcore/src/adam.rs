use std::collections::BTreeMap;

use crate::element::Real;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
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

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<E: Real> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Real> AdamMoments<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        AdamMoments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One bias-corrected Adam update. `step_index` counts from 1.
///
/// Pure: returns the new parameters and moments. Non-finite gradients are
/// reported as an error and nothing is updated.
pub fn adam_step<E: Real>(
    params: &Tensor<E>,
    grads: &Tensor<E>,
    state: &AdamMoments<E>,
    cfg: &AdamConfig,
    step_index: u64,
) -> Result<(Tensor<E>, AdamMoments<E>)> {
    if params.shape() != grads.shape() {
        return Err(TensorError::shape("adam_step", params.shape(), grads.shape()));
    }
    if state.m.shape() != params.shape() || state.v.shape() != params.shape() {
        return Err(TensorError::shape("adam_step", params.shape(), state.m.shape()));
    }
    if !(cfg.lr > 0.0) || step_index == 0 {
        return Err(TensorError::Contract(format!(
            "adam needs lr > 0 and step_index ≥ 1 (lr={}, step={step_index})",
            cfg.lr
        )));
    }
    if !grads.is_finite() {
        return Err(TensorError::NonFinite { op: "adam_step" });
    }
    let f = E::from_f64_lossy;
    let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
    let bc1 = f(1.0 - cfg.beta1.powf(step_index as f64));
    let bc2 = f(1.0 - cfg.beta2.powf(step_index as f64));
    let (lr, eps) = (f(cfg.lr), f(cfg.eps));
    let n = params.len();
    let mut p = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        let g = grads.data()[i];
        let mi = b1 * state.m.data()[i] + (E::one() - b1) * g;
        let vi = b2 * state.v.data()[i] + (E::one() - b2) * g * g;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        p.push(params.data()[i] - lr * mhat / (vhat.sqrt() + eps));
        m.push(mi);
        v.push(vi);
    }
    let shape = params.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), p)?,
        AdamMoments {
            m: Tensor::new(shape.clone(), m)?,
            v: Tensor::new(shape, v)?,
        },
    ))
}

/// Adam over a named set of parameters sharing one step counter.
#[derive(Debug, Clone)]
pub struct Adam<E: Real> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, AdamMoments<E>>,
}

impl<E: Real> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every `(name, param, grad)` triple. Either all parameters
    /// are updated or, on a non-finite gradient, none are.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<Vec<Tensor<E>>>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor<E>, &'a Tensor<E>)>,
    {
        let step = self.step + 1;
        let mut out = Vec::new();
        let mut new_moments = Vec::new();
        for (name, param, grad) in updates {
            let state = self
                .moments
                .get(name)
                .cloned()
                .unwrap_or_else(|| AdamMoments::zeros(param.shape()));
            let (p, m) = adam_step(param, grad, &state, &self.cfg, step)?;
            out.push(p);
            new_moments.push((name.to_string(), m));
        }
        self.moments.extend(new_moments);
        self.step = step;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let p = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let state = AdamMoments {
            m: Tensor::full(&[2], 0.5),
            v: Tensor::full(&[2], 0.25),
        };
        let (_, new) = adam_step(&p, &Tensor::zeros(&[2]), &state, &AdamConfig::with_lr(0.05), 3).unwrap();
        assert!(new.m.data().iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert!(new.v.data().iter().all(|&v| (v - 0.25 * 0.999).abs() < 1e-15));
        let fresh = AdamMoments::zeros(&[2]);
        let (q, _) = adam_step(&p, &Tensor::zeros(&[2]), &fresh, &AdamConfig::with_lr(0.05), 1).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::full(&[3], -7.0);
        let (q, _) = adam_step(&p, &g, &AdamMoments::zeros(&[3]), &AdamConfig::with_lr(0.05), 1).unwrap();
        for v in q.data() {
            assert!((v - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_grad_is_signaled() {
        let p = Tensor::<f32>::zeros(&[1]);
        let g = Tensor::from_parts_unchecked(vec![1], vec![f32::NAN]).unwrap();
        let err = adam_step(&p, &g, &AdamMoments::zeros(&[1]), &AdamConfig::default(), 1).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn quadratic_rollout_converges() {
        // minimize ‖x − 1‖² from 0; the oracle is the start distance.
        let target = Tensor::<f64>::ones(&[4]);
        let mut x = Tensor::zeros(&[4]);
        let mut state = AdamMoments::zeros(&[4]);
        let cfg = AdamConfig::with_lr(0.05);
        let start = 2.0f64; // ‖0 − 1‖ over four coordinates
        for step in 1..=100 {
            let g = x.zip_map(&target, "grad", |a, b| 2.0 * (a - b)).unwrap();
            let (nx, ns) = adam_step(&x, &g, &state, &cfg, step).unwrap();
            x = nx;
            state = ns;
        }
        let dist = x
            .data()
            .iter()
            .map(|v| (v - 1.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist * 10.0 <= start, "distance {dist}");
    }

    #[test]
    fn optimizer_rejects_bad_gradients_without_advancing() {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let p = Tensor::zeros(&[1]);
        let bad = Tensor::from_parts_unchecked(vec![1], vec![f64::INFINITY]).unwrap();
        assert!(adam.step([("w", &p, &bad)]).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
