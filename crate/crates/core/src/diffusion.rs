//! Deterministic DDIM scheduling: inversion and the reverse step.

use gradcore::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::denoiser::{AttentionHook, DenoiserModel};
use crate::error::{Error, Result};

pub const TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Cumulative `ᾱ` of the linear-β training schedule.
pub fn train_alphas_bar(train_steps: usize) -> Vec<f64> {
    let mut acc = 1.0;
    (0..train_steps)
        .map(|i| {
            let frac = if train_steps > 1 { i as f64 / (train_steps - 1) as f64 } else { 0.0 };
            acc *= 1.0 - (BETA_START + (BETA_END - BETA_START) * frac);
            acc
        })
        .collect()
}

/// Inference schedule over `t = 0..=T`.
///
/// Step `t ≥ 1` maps to training index `⌊t·train_steps/T⌋ − 1`, so `t = T`
/// is the noisiest training step. `t = 0` is the clean signal (`ᾱ = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    train_steps: usize,
    index: Vec<usize>,
    alphas_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(steps: usize) -> Result<Self> {
        Self::with_train_steps(steps, TRAIN_STEPS)
    }

    pub fn with_train_steps(steps: usize, train_steps: usize) -> Result<Self> {
        if steps == 0 || steps > train_steps {
            return Err(Error::config(format!("T must lie in 1..={train_steps}, got {steps}")));
        }
        let table = train_alphas_bar(train_steps);
        let index: Vec<usize> = (1..=steps).map(|t| t * train_steps / steps - 1).collect();
        let alphas_bar = std::iter::once(1.0).chain(index.iter().map(|&i| table[i])).collect();
        Ok(Schedule {
            steps,
            train_steps,
            index,
            alphas_bar,
        })
    }

    /// Arbitrary `ᾱ_0..ᾱ_T`; used to exercise degenerate schedules.
    pub fn from_alphas_bar(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.len() < 2 || alphas_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::config("ᾱ must have at least two entries in (0, 1]"));
        }
        let steps = alphas_bar.len() - 1;
        Ok(Schedule {
            steps,
            train_steps: steps,
            index: (0..steps).collect(),
            alphas_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    /// Training-schedule timestep fed to the model at inference step `t`.
    pub fn train_index(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            self.index[t - 1]
        }
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::config(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// `z_{t−1}` from `z_t` and a noise estimate (η = 0).
    pub fn step<E: Real>(&self, z_t: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        self.check(t)?;
        let (a_t, a_prev) = (self.alphas_bar[t], self.alphas_bar[t - 1]);
        Ok(transition(z_t, eps, a_t, a_prev)?)
    }

    /// `z_t` from `z_{t−1}`; the exact algebraic inverse of [`Self::step`]
    /// for the same `eps`.
    pub fn invert_step<E: Real>(&self, z_prev: &Tensor<E>, t: usize, eps: &Tensor<E>) -> Result<Tensor<E>> {
        self.check(t)?;
        let (a_t, a_prev) = (self.alphas_bar[t], self.alphas_bar[t - 1]);
        Ok(transition(z_prev, eps, a_prev, a_t)?)
    }
}

/// Moves a latent from noise level `a_from` to `a_to` along `eps`.
fn transition<E: Real>(z: &Tensor<E>, eps: &Tensor<E>, a_from: f64, a_to: f64) -> gradcore::Result<Tensor<E>> {
    let (sf, nf) = (a_from.sqrt(), (1.0 - a_from).sqrt());
    let (st, nt) = (a_to.sqrt(), (1.0 - a_to).sqrt());
    z.zip_map(eps, "ddim", |z, e| {
        let (z, e) = (z.to_f64_lossy(), e.to_f64_lossy());
        let x0 = (z - nf * e) / sf;
        E::from_f64_lossy(st * x0 + nt * e)
    })
}

/// One reverse step with the model's (or an overriding) noise estimate.
pub fn ddim_step<E: Real>(
    model: &DenoiserModel,
    schedule: &Schedule,
    z_t: &Tensor<E>,
    t: usize,
    eps_override: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    schedule.check(t)?;
    let eps = match eps_override {
        Some(e) => e.clone(),
        None => model.predict_eps(z_t, schedule.train_index(t))?,
    };
    schedule.step(z_t, t, &eps)
}

/// `z_{t−1}` using a forward pass with an attention hook.
pub fn ddim_step_hooked<E: Real>(
    model: &DenoiserModel,
    schedule: &Schedule,
    z_t: &Tensor<E>,
    t: usize,
    hook: &mut dyn AttentionHook<E>,
) -> Result<Tensor<E>> {
    schedule.check(t)?;
    let eps = model.predict_eps_with(z_t, schedule.train_index(t), Some(hook))?;
    schedule.step(z_t, t, &eps)
}

/// Latents `z_0..z_T` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Tensor<f32>>,
    pub schedule: Schedule,
    pub source: String,
}

impl Trajectory {
    pub fn z(&self, t: usize) -> &Tensor<f32> {
        &self.latents[t]
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({ "schedule": self.schedule, "source": self.source });
        let mut c = Container::new("TRAJ", meta);
        for (t, z) in self.latents.iter().enumerate() {
            c.push(format!("z{t}"), z.clone());
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_tag("TRAJ")?;
        let schedule: Schedule = serde_json::from_value(c.meta["schedule"].clone())
            .map_err(|e| Error::Format(format!("trajectory schedule: {e}")))?;
        let source = c.meta["source"].as_str().unwrap_or_default().to_string();
        if c.tensors.len() != schedule.steps() + 1 {
            return Err(Error::Format("trajectory length does not match its schedule".into()));
        }
        let mut latents = Vec::with_capacity(c.tensors.len());
        for (t, (name, z)) in c.tensors.into_iter().enumerate() {
            if name != format!("z{t}") {
                return Err(Error::Format(format!("unexpected trajectory entry `{name}`")));
            }
            latents.push(z);
        }
        Ok(Trajectory {
            latents,
            schedule,
            source,
        })
    }
}

/// Deterministic inversion `z_0 → z_T`.
///
/// The step `t−1 → t` evaluates the model on `z_{t−1}` at step `t`'s
/// training index.
pub fn ddim_invert(model: &DenoiserModel, schedule: &Schedule, z0: &Tensor<f32>, source: &str) -> Result<Trajectory> {
    model.ensure_trained()?;
    if !z0.is_finite() {
        return Err(Error::NonFiniteLatent { t: 0 });
    }
    let mut latents = Vec::with_capacity(schedule.steps() + 1);
    latents.push(z0.clone());
    for t in 1..=schedule.steps() {
        let prev = &latents[t - 1];
        let eps = model
            .predict_eps(prev, schedule.train_index(t))
            .map_err(|_| Error::NonFiniteLatent { t })?;
        let next = schedule.invert_step(prev, t, &eps).map_err(|_| Error::NonFiniteLatent { t })?;
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        schedule: schedule.clone(),
        source: source.to_string(),
    })
}

/// Reverse process from `z_T` down to `z_0`.
pub fn ddim_sample(model: &DenoiserModel, schedule: &Schedule, z_t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut z = z_t.clone();
    for t in (1..=schedule.steps()).rev() {
        z = ddim_step(model, schedule, &z, t, None).map_err(|_| Error::NonFiniteLatent { t })?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(200).unwrap();
        assert_eq!(s.index_map().len(), 200);
        assert!(s.index_map().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.train_index(1), 4);
        assert_eq!(s.train_index(200), 999);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((1..=200).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        assert!(s.alpha_bar(200) < 1e-3);
        assert!(Schedule::new(0).is_err());
        assert!(Schedule::new(1001).is_err());
    }

    #[test]
    fn zero_eps_scales_latent() {
        let s = Schedule::new(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::<f64>::randn(&[3, 4, 4], &mut rng);
        let out = s.step(&z, 20, &Tensor::zeros(&[3, 4, 4])).unwrap();
        let k = (s.alpha_bar(19) / s.alpha_bar(20)).sqrt();
        for (o, z) in out.data().iter().zip(z.data()) {
            assert!((o - k * z).abs() < 1e-12);
        }
        assert!(s.step(&z, 0, &z).is_err());
        assert!(s.step(&z, 51, &z).is_err());
    }

    #[test]
    fn flat_schedule_is_identity() {
        let s = Schedule::from_alphas_bar(vec![0.5, 0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let e = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let out = s.step(&z, 2, &e).unwrap();
        for (o, z) in out.data().iter().zip(z.data()) {
            assert!((o - z).abs() < 1e-12);
        }
    }

    #[test]
    fn step_inverts_invert_step() {
        let s = Schedule::new(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in [1, 37, 120, 200] {
            let z = Tensor::<f64>::randn(&[3, 4, 4], &mut rng);
            let e = Tensor::<f64>::randn(&[3, 4, 4], &mut rng);
            let back = s.step(&s.invert_step(&z, t, &e).unwrap(), t, &e).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-10, "t={t}");
            }
        }
    }

    #[test]
    fn inversion_requires_trained_model() {
        let model = DenoiserModel::new(crate::denoiser::DenoiserConfig::tiny(4)).unwrap();
        let z = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(
            ddim_invert(&model, &Schedule::new(4).unwrap(), &z, "x"),
            Err(Error::Untrained)
        ));
    }
}
