//! Per-timestep latent optimization shared by attention distillation and
//! value shuffling.

use std::time::Instant;

use gradcore::{Adam, AdamConfig, Tape};

use super::{decode, encode, TimestepLoss, TranscriptEntry, TransferConfig, TransferContext, TransferMethod, TransferResult};
use crate::denoiser::ForwardOptions;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::features::{AttentionTap, Stream};
use crate::image::Image;
use crate::losses::{ad_targets, hsr_targets, weighted_loss, BlockFeatures, BlockTargets, DrawRecord, Resample};

/// Attention temperature inside the matching losses.
const LOSS_TAU: f64 = 1.0;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Objective {
    Distill,
    Hybrid,
}

/// Distillation: `arg min L_AD` per timestep, starting from the clean
/// content latent.
pub struct AttentionDistillation;

/// Value shuffling with hybrid regularization: `arg min L_HSR`.
pub struct ValueShuffle;

fn validate_shared(config: &TransferConfig) -> Result<()> {
    if !(config.lr > 0.0) {
        return Err(Error::config(format!("lr must be positive, got {}", config.lr)));
    }
    config.hsr().validate()
}

impl TransferMethod for AttentionDistillation {
    fn name(&self) -> &'static str {
        "ad"
    }

    fn validate(&self, config: &TransferConfig, n_styles: usize) -> Result<()> {
        if n_styles != 1 {
            return Err(Error::config(format!("ad takes exactly one style image, got {n_styles}")));
        }
        validate_shared(config)
    }

    fn run(&self, ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult> {
        optimize(ctx, content, styles, config, Objective::Distill)
    }
}

impl TransferMethod for ValueShuffle {
    fn name(&self) -> &'static str {
        "vshuffle"
    }

    fn validate(&self, config: &TransferConfig, n_styles: usize) -> Result<()> {
        if n_styles == 0 {
            return Err(Error::config("vshuffle needs at least one style image"));
        }
        validate_shared(config)?;
        config.shuffle().validate()
    }

    fn run(&self, ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult> {
        optimize(ctx, content, styles, config, Objective::Hybrid)
    }
}

fn optimize(
    ctx: &TransferContext<'_>,
    content: &Image,
    styles: &[Image],
    config: &TransferConfig,
    objective: Objective,
) -> Result<TransferResult> {
    let start = Instant::now();
    let model = ctx.model;
    let schedule = Schedule::new(config.steps)?;
    let steps = schedule.steps();
    let (ctraj, strajs) = ctx.invert_all(&schedule, content, styles)?;
    let (hsr, spec) = (config.hsr(), config.shuffle());
    let blocks = &config.blocks;

    let mut z = encode(content);
    let mut adam = Adam::<f32>::new(AdamConfig::with_lr(config.lr));
    let mut records = Vec::with_capacity(steps);
    let mut transcript = Vec::new();

    for t in (1..=steps).rev() {
        let idx = schedule.train_index(t);
        let ctaps = model.extract_taps(ctraj.z(t), idx, blocks, t, Stream::Content)?;
        let staps = strajs
            .iter()
            .enumerate()
            .map(|(i, tr)| model.extract_taps(tr.z(t), idx, blocks, t, Stream::Style(i)))
            .collect::<Result<Vec<_>>>()?;
        // Regroup as per-block style lists.
        let per_block: Vec<Vec<AttentionTap<f32>>> = (0..blocks.len())
            .map(|b| staps.iter().map(|s| s[b].clone()).collect())
            .collect();
        let feats: Vec<BlockFeatures<'_, f32>> = ctaps
            .iter()
            .zip(&per_block)
            .map(|(c, s)| BlockFeatures { content: c, styles: s })
            .collect();

        let mut build = |inner: usize| -> Result<Vec<BlockTargets<f32>>> {
            match objective {
                Objective::Distill => ad_targets(&feats, LOSS_TAU),
                Objective::Hybrid => {
                    let draws = spec.draw_indices(t, inner, config.inner_steps);
                    let mut drawn: Vec<DrawRecord> = Vec::new();
                    let targets = hsr_targets(t, steps, &hsr, &spec, &draws, &feats, LOSS_TAU, &mut drawn)?;
                    transcript.extend(drawn.into_iter().map(|draw| TranscriptEntry { t, inner, draw }));
                    Ok(targets)
                }
            }
        };

        let resample_inner = objective == Objective::Hybrid && spec.resample == Resample::PerInnerStep;
        let mut targets = if config.inner_steps > 0 { Some(build(0)?) } else { None };
        let mut losses = Vec::with_capacity(config.inner_steps);
        for inner in 0..config.inner_steps {
            if resample_inner && inner > 0 {
                targets = Some(build(inner)?);
            }
            let tape = Tape::<f32>::new();
            let bound = model.bind(&tape, false);
            let zv = tape.leaf(z.clone(), true);
            let out = bound.forward(zv, idx, &ForwardOptions::taps_only(blocks), None)?;
            let loss = weighted_loss(&out.taps, targets.as_deref().expect("built"), Some(hsr.beta), LOSS_TAU)?;
            let value = loss.value().item()? as f64;
            let diverged = || Error::OptimizerDiverged { t, inner };
            if !value.is_finite() {
                return Err(diverged());
            }
            let grad = tape.backward(loss).map_err(|_| diverged())?.wrt(zv);
            z = adam
                .step([("z", &z, &grad)])
                .map_err(|_| diverged())?
                .pop()
                .expect("one parameter");
            losses.push(value);
        }
        records.push(TimestepLoss {
            t,
            in_window: objective == Objective::Hybrid && hsr.in_window(t, steps),
            losses,
        });
    }

    Ok(TransferResult {
        image: decode(&z)?,
        losses: records,
        transcript,
        config: config.clone(),
        n_styles: styles.len(),
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
