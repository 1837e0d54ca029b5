use std::collections::BTreeMap;
use std::time::Instant;

use gradcore::Tensor;

use super::{decode, TransferConfig, TransferContext, TransferMethod, TransferResult};
use crate::denoiser::AttentionHook;
use crate::diffusion::{ddim_step_hooked, Schedule};
use crate::error::{Error, Result};
use crate::features::{adain, attention, blend_queries, Stream};
use crate::image::Image;

/// Training-free attention injection with query blending and an AdaIN
/// initialization of the noise latent.
pub struct StyleId;

struct Injection {
    gamma: f64,
    tau: f64,
    /// Per block: content queries, style keys and style values.
    feats: BTreeMap<usize, (Tensor<f32>, Tensor<f32>, Tensor<f32>)>,
}

impl AttentionHook<f32> for Injection {
    fn replace(&mut self, block: usize, q: &Tensor<f32>, _k: &Tensor<f32>, _v: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        let Some((qc, ks, vs)) = self.feats.get(&block) else {
            return Ok(None);
        };
        let blended = blend_queries(qc, q, self.gamma)?;
        Ok(Some(attention(&blended, ks, vs, self.tau)?))
    }
}

impl TransferMethod for StyleId {
    fn name(&self) -> &'static str {
        "styleid"
    }

    fn validate(&self, config: &TransferConfig, n_styles: usize) -> Result<()> {
        if n_styles != 1 {
            return Err(Error::config(format!("styleid takes exactly one style image, got {n_styles}")));
        }
        if !(0.0..=1.0).contains(&config.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", config.gamma)));
        }
        if !(config.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", config.tau)));
        }
        Ok(())
    }

    fn run(&self, ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult> {
        let start = Instant::now();
        let model = ctx.model;
        let schedule = Schedule::new(config.steps)?;
        let (ctraj, straj) = ctx.invert_all(&schedule, content, styles)?;
        let straj = &straj[0];
        let steps = schedule.steps();
        let mut z = adain(ctraj.z(steps), straj.z(steps))?;
        for t in (1..=steps).rev() {
            let idx = schedule.train_index(t);
            let ctaps = model.extract_taps(ctraj.z(t), idx, &config.blocks, t, Stream::Content)?;
            let staps = model.extract_taps(straj.z(t), idx, &config.blocks, t, Stream::Style(0))?;
            let feats = ctaps
                .into_iter()
                .zip(staps)
                .map(|(c, s)| (c.block, (c.q, s.k, s.v)))
                .collect();
            let mut hook = Injection {
                gamma: config.gamma,
                tau: config.tau,
                feats,
            };
            z = ddim_step_hooked(model, &schedule, &z, t, &mut hook)?;
            if !z.is_finite() {
                return Err(Error::NonFiniteLatent { t: t - 1 });
            }
        }
        Ok(TransferResult {
            image: decode(&z)?,
            losses: Vec::new(),
            transcript: Vec::new(),
            config: config.clone(),
            n_styles: 1,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    }
}
