//! The value-shuffle operator and the attention-matching loss family.
//!
//! Every loss is evaluated by one weighted-target routine: per block,
//! `Σ_i w_i · l1(Attn(Q_cs, K_cs, V_cs), target_i) + β · l1(Q_cs, Q_c)`,
//! averaged over blocks. Plain distillation uses the single unshuffled
//! target with weight 1, the shuffled loss uses `m` shuffled targets with
//! weight `1/m`, and the hybrid loss mixes both. Identical targets are
//! merged and zero weights dropped, which makes the convex-combination
//! endpoints reduce to the plain losses bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use gradcore::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::TapVars;
use crate::error::{Error, Result};
use crate::features::{attention, attention_var, concat_sequence, AttentionTap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleAxis {
    H,
    S,
    D,
}

impl ShuffleAxis {
    pub const ALL: [ShuffleAxis; 3] = [ShuffleAxis::H, ShuffleAxis::S, ShuffleAxis::D];

    /// Position of the axis in an `[h, s, d]` tensor.
    fn dim(self) -> usize {
        match self {
            ShuffleAxis::H => 0,
            ShuffleAxis::S => 1,
            ShuffleAxis::D => 2,
        }
    }
}

impl fmt::Display for ShuffleAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShuffleAxis::H => "h",
            ShuffleAxis::S => "s",
            ShuffleAxis::D => "d",
        })
    }
}

impl FromStr for ShuffleAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(ShuffleAxis::H),
            "s" => Ok(ShuffleAxis::S),
            "d" => Ok(ShuffleAxis::D),
            _ => Err(Error::config(format!("unknown shuffle axis `{s}` (expected h, s or d)"))),
        }
    }
}

/// When fresh permutations are drawn during per-timestep optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    PerTimestep,
    PerInnerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationSource {
    Random,
    /// Every draw is the identity; for degeneracy checks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleSpec {
    pub axis: ShuffleAxis,
    pub m: usize,
    pub seed: u64,
    pub resample: Resample,
    pub source: PermutationSource,
}

impl Default for ShuffleSpec {
    fn default() -> Self {
        ShuffleSpec {
            axis: ShuffleAxis::S,
            m: 1,
            seed: 0,
            resample: Resample::PerTimestep,
            source: PermutationSource::Random,
        }
    }
}

impl ShuffleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        Ok(())
    }

    /// Counter values of the `m` draws used at timestep `t`, inner step
    /// `inner` out of `inner_steps`.
    pub fn draw_indices(&self, t: usize, inner: usize, inner_steps: usize) -> Vec<u64> {
        let base = match self.resample {
            Resample::PerTimestep => t as u64,
            Resample::PerInnerStep => (t * inner_steps.max(1) + inner) as u64,
        };
        (0..self.m as u64).map(|j| base * self.m as u64 + j).collect()
    }

    fn rng(&self, draw_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(draw_index);
        rng
    }

    fn permutation(&self, extent: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..extent).collect();
        if self.source == PermutationSource::Random {
            p.shuffle(rng);
        }
        p
    }
}

/// Permutes one `[h, s, d]` tensor along `axis`: `out[.., i, ..] = x[.., perm[i], ..]`.
pub fn permute_axis<E: Real>(x: &Tensor<E>, axis: ShuffleAxis, perm: &[usize]) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 3 || perm.len() != s[axis.dim()] {
        return Err(Error::config(format!(
            "permutation of length {} does not fit axis {axis} of {s:?}",
            perm.len()
        )));
    }
    let (h, n, d) = (s[0], s[1], s[2]);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for hi in 0..h {
        for si in 0..n {
            for di in 0..d {
                let (a, b, c) = match axis {
                    ShuffleAxis::H => (perm[hi], si, di),
                    ShuffleAxis::S => (hi, perm[si], di),
                    ShuffleAxis::D => (hi, si, perm[di]),
                };
                out.push(src[(a * n + b) * d + c]);
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

/// Shuffles `V` of shape `[n, h, s, d]`, one independent permutation per
/// style image (shared across the other two axes). Returns the shuffled
/// tensor and the permutation used for each image.
pub fn shuffle_values<E: Real>(v: &Tensor<E>, spec: &ShuffleSpec, draw_index: u64) -> Result<(Tensor<E>, Vec<Vec<usize>>)> {
    if v.ndim() != 4 {
        return Err(Error::config(format!("expected [n, h, s, d], got {:?}", v.shape())));
    }
    let (n, rest) = (v.shape()[0], &v.shape()[1..]);
    let per = v.len() / n;
    let mut rng = spec.rng(draw_index);
    let mut data = Vec::with_capacity(v.len());
    let mut perms = Vec::with_capacity(n);
    for i in 0..n {
        let img = Tensor::new(rest.to_vec(), v.data()[i * per..(i + 1) * per].to_vec())?;
        let perm = spec.permutation(rest[spec.axis.dim()], &mut rng);
        data.extend(permute_axis(&img, spec.axis, &perm)?.into_data());
        perms.push(perm);
    }
    Ok((Tensor::new(v.shape().to_vec(), data)?, perms))
}

/// Mixed-weight window settings of the hybrid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsrSpec {
    pub alpha: f64,
    pub beta: f64,
    pub t1_frac: f64,
    pub t2_frac: f64,
}

impl Default for HsrSpec {
    fn default() -> Self {
        HsrSpec {
            alpha: 0.4,
            beta: 0.24,
            t1_frac: 0.2,
            t2_frac: 0.9,
        }
    }
}

impl HsrSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(0.0 <= self.t1_frac && self.t1_frac <= self.t2_frac && self.t2_frac <= 1.0) {
            return Err(Error::config(format!(
                "window fractions must satisfy 0 ≤ t1 ≤ t2 ≤ 1, got [{}, {}]",
                self.t1_frac, self.t2_frac
            )));
        }
        Ok(())
    }

    /// Inclusive window `[t1, t2]` in timesteps for a schedule of `steps`.
    pub fn window(&self, steps: usize) -> (usize, usize) {
        let at = |f: f64| (f * steps as f64).round() as usize;
        (at(self.t1_frac), at(self.t2_frac))
    }

    pub fn in_window(&self, t: usize, steps: usize) -> bool {
        let (a, b) = self.window(steps);
        a <= t && t <= b
    }
}

/// Content and style taps of one block at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct BlockFeatures<'a, E: Real> {
    pub content: &'a AttentionTap<E>,
    pub styles: &'a [AttentionTap<E>],
}

impl<E: Real> BlockFeatures<'_, E> {
    fn block(&self) -> usize {
        self.content.block
    }

    fn check(&self) -> Result<()> {
        if self.styles.is_empty() {
            return Err(Error::config("at least one style image is required"));
        }
        if self.styles.iter().any(|s| s.block != self.content.block) {
            return Err(Error::config("taps are not aligned on one block"));
        }
        Ok(())
    }

    fn style_kv(&self) -> Result<(Tensor<E>, Vec<&Tensor<E>>)> {
        let ks: Vec<_> = self.styles.iter().map(|t| &t.k).collect();
        let vs: Vec<_> = self.styles.iter().map(|t| &t.v).collect();
        Ok((concat_sequence(&ks)?, vs))
    }

    /// `Attn(Q_c, K_s, V_s)` with styles concatenated along the sequence.
    fn plain_target(&self, tau: f64) -> Result<Tensor<E>> {
        let (k, vs) = self.style_kv()?;
        attention(&self.content.q, &k, &concat_sequence(&vs)?, tau)
    }

    /// Target with every style's values permuted by its own permutation.
    pub fn permuted_target(&self, axis: ShuffleAxis, perms: &[Vec<usize>], tau: f64) -> Result<Tensor<E>> {
        let (k, vs) = self.style_kv()?;
        if perms.len() != vs.len() {
            return Err(Error::config("one permutation per style image is required"));
        }
        let shuffled = vs
            .iter()
            .zip(perms)
            .map(|(v, p)| permute_axis(v, axis, p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = shuffled.iter().collect();
        attention(&self.content.q, &k, &concat_sequence(&refs)?, tau)
    }
}

/// Permutations drawn for one block in one draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrawRecord {
    pub draw_index: u64,
    pub block: usize,
    pub axis: ShuffleAxis,
    pub perms: Vec<Vec<usize>>,
}

/// Per-block targets with convex weights.
#[derive(Debug, Clone)]
pub struct BlockTargets<E: Real> {
    pub block: usize,
    pub q_content: Tensor<E>,
    pub targets: Vec<(Tensor<E>, f64)>,
}

impl<E: Real> BlockTargets<E> {
    /// Merges bitwise-identical targets and drops zero weights; a lone
    /// remaining target gets weight exactly 1.
    fn normalized(mut self) -> Self {
        let mut merged: Vec<(Tensor<E>, f64)> = Vec::new();
        for (t, w) in self.targets.drain(..) {
            if w == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(m, _)| m.bitwise_eq(&t)) {
                Some(slot) => slot.1 += w,
                None => merged.push((t, w)),
            }
        }
        if merged.len() == 1 {
            merged[0].1 = 1.0;
        }
        self.targets = merged;
        self
    }
}

/// Targets of plain distillation for every block.
pub fn ad_targets<E: Real>(feats: &[BlockFeatures<'_, E>], tau: f64) -> Result<Vec<BlockTargets<E>>> {
    feats
        .iter()
        .map(|f| {
            f.check()?;
            Ok(BlockTargets {
                block: f.block(),
                q_content: f.content.q.clone(),
                targets: vec![(f.plain_target(tau)?, 1.0)],
            })
        })
        .collect()
}

/// Shuffled targets for the given draws, each weighted `scale / m`.
fn shuffled_parts<E: Real>(
    feats: &[BlockFeatures<'_, E>],
    spec: &ShuffleSpec,
    draws: &[u64],
    tau: f64,
    scale: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Vec<Vec<(Tensor<E>, f64)>>> {
    spec.validate()?;
    if draws.is_empty() {
        return Err(Error::config("no shuffle draws supplied"));
    }
    let w = scale / draws.len() as f64;
    let mut per_block = vec![Vec::with_capacity(draws.len()); feats.len()];
    for &d in draws {
        let mut rng = spec.rng(d);
        for (slot, f) in per_block.iter_mut().zip(feats) {
            f.check()?;
            let perms: Vec<Vec<usize>> = f
                .styles
                .iter()
                .map(|s| spec.permutation(s.v.shape()[spec.axis.dim()], &mut rng))
                .collect();
            slot.push((f.permuted_target(spec.axis, &perms, tau)?, w));
            transcript.push(DrawRecord {
                draw_index: d,
                block: f.block(),
                axis: spec.axis,
                perms,
            });
        }
    }
    Ok(per_block)
}

pub fn shuffled_targets<E: Real>(
    feats: &[BlockFeatures<'_, E>],
    spec: &ShuffleSpec,
    draws: &[u64],
    tau: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Vec<BlockTargets<E>>> {
    let parts = shuffled_parts(feats, spec, draws, tau, 1.0, transcript)?;
    Ok(feats
        .iter()
        .zip(parts)
        .map(|(f, targets)| {
            BlockTargets {
                block: f.block(),
                q_content: f.content.q.clone(),
                targets,
            }
            .normalized()
        })
        .collect())
}

/// Targets of the hybrid loss at timestep `t` of a `steps`-long schedule.
#[allow(clippy::too_many_arguments)]
pub fn hsr_targets<E: Real>(
    t: usize,
    steps: usize,
    hsr: &HsrSpec,
    spec: &ShuffleSpec,
    draws: &[u64],
    feats: &[BlockFeatures<'_, E>],
    tau: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Vec<BlockTargets<E>>> {
    hsr.validate()?;
    let plain = ad_targets(feats, tau)?;
    if !hsr.in_window(t, steps) || hsr.alpha == 0.0 {
        return Ok(plain);
    }
    let parts = shuffled_parts(feats, spec, draws, tau, hsr.alpha, transcript)?;
    Ok(plain
        .into_iter()
        .zip(parts)
        .map(|(mut b, shuffled)| {
            b.targets[0].1 = 1.0 - hsr.alpha;
            b.targets.extend(shuffled);
            b.normalized()
        })
        .collect())
}

/// Weighted attention-matching loss of the output stream, averaged over
/// blocks. `beta = None` omits the content term.
pub fn weighted_loss<'t, E: Real>(
    out: &BTreeMap<usize, TapVars<'t, E>>,
    targets: &[BlockTargets<E>],
    beta: Option<f64>,
    tau: f64,
) -> Result<Var<'t, E>> {
    let mut total: Option<Var<'t, E>> = None;
    for bt in targets {
        let tv = out
            .get(&bt.block)
            .ok_or_else(|| Error::config(format!("output stream lacks block {}", bt.block)))?;
        let tape = tv.q.tape();
        let attn = attention_var(tv.q, tv.k, tv.v, tau)?;
        let mut style: Option<Var<'t, E>> = None;
        for (target, w) in &bt.targets {
            let mut term = attn.l1_mean(tape.constant(target.clone()))?;
            if *w != 1.0 {
                term = term.scale(E::from_f64_lossy(*w))?;
            }
            style = Some(match style {
                Some(s) => s.add(term)?,
                None => term,
            });
        }
        let mut block_loss = style.ok_or_else(|| Error::config("block without targets"))?;
        if let Some(beta) = beta {
            let content = loss_content(tv.q, &bt.q_content)?;
            block_loss = block_loss.add(content.scale(E::from_f64_lossy(beta))?)?;
        }
        total = Some(match total {
            Some(t) => t.add(block_loss)?,
            None => block_loss,
        });
    }
    let total = total.ok_or_else(|| Error::config("no blocks configured"))?;
    if targets.len() > 1 {
        Ok(total.scale(E::from_f64_lossy(1.0 / targets.len() as f64))?)
    } else {
        Ok(total)
    }
}

/// `L_c = l1_mean(Q_cs, Q_c)`.
pub fn loss_content<'t, E: Real>(q_cs: Var<'t, E>, q_c: &Tensor<E>) -> Result<Var<'t, E>> {
    Ok(q_cs.l1_mean(q_cs.tape().constant(q_c.clone()))?)
}

/// `L_AD = L_s + β·L_c` for a single style image.
pub fn loss_ad<'t, E: Real>(
    out: &BTreeMap<usize, TapVars<'t, E>>,
    feats: &[BlockFeatures<'_, E>],
    beta: f64,
    tau: f64,
) -> Result<Var<'t, E>> {
    if let Some(f) = feats.iter().find(|f| f.styles.len() != 1) {
        return Err(Error::config(format!(
            "attention distillation takes exactly one style image, got {}",
            f.styles.len()
        )));
    }
    weighted_loss(out, &ad_targets(feats, tau)?, Some(beta), tau)
}

/// `L_S`: mean over the shuffle draws of the style discrepancy.
pub fn loss_style_shuffled<'t, E: Real>(
    out: &BTreeMap<usize, TapVars<'t, E>>,
    feats: &[BlockFeatures<'_, E>],
    spec: &ShuffleSpec,
    draws: &[u64],
    tau: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Var<'t, E>> {
    weighted_loss(out, &shuffled_targets(feats, spec, draws, tau, transcript)?, None, tau)
}

/// Largest sequence length [`loss_style_expected`] will enumerate.
pub const MAX_ENUMERATED_EXTENT: usize = 6;

/// All permutations of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Exact expectation of `L_S` over uniform permutations, by enumerating
/// every joint assignment of one permutation per style image.
pub fn loss_style_expected<'t, E: Real>(
    out: &BTreeMap<usize, TapVars<'t, E>>,
    feats: &[BlockFeatures<'_, E>],
    axis: ShuffleAxis,
    tau: f64,
) -> Result<Var<'t, E>> {
    let mut targets = Vec::with_capacity(feats.len());
    for f in feats {
        f.check()?;
        let extent = f.styles[0].v.shape()[axis.dim()];
        if extent > MAX_ENUMERATED_EXTENT {
            return Err(Error::config(format!("refusing to enumerate {extent}! permutations")));
        }
        let perms = all_permutations(extent);
        let n = f.styles.len();
        let total = perms.len().pow(n as u32);
        let w = 1.0 / total as f64;
        let mut slot = Vec::with_capacity(total);
        for combo in 0..total {
            let mut rest = combo;
            let chosen: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let p = perms[rest % perms.len()].clone();
                    rest /= perms.len();
                    p
                })
                .collect();
            slot.push((f.permuted_target(axis, &chosen, tau)?, w));
        }
        targets.push(
            BlockTargets {
                block: f.block(),
                q_content: f.content.q.clone(),
                targets: slot,
            }
            .normalized(),
        );
    }
    weighted_loss(out, &targets, None, tau)
}

/// `L_VS = L_S + β·L_c`.
pub fn loss_vshuffle<'t, E: Real>(
    out: &BTreeMap<usize, TapVars<'t, E>>,
    feats: &[BlockFeatures<'_, E>],
    spec: &ShuffleSpec,
    draws: &[u64],
    beta: f64,
    tau: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Var<'t, E>> {
    weighted_loss(out, &shuffled_targets(feats, spec, draws, tau, transcript)?, Some(beta), tau)
}

/// `α·L_VS + (1−α)·L_AD` inside the window, `L_AD` outside.
#[allow(clippy::too_many_arguments)]
pub fn loss_hsr<'t, E: Real>(
    t: usize,
    steps: usize,
    hsr: &HsrSpec,
    spec: &ShuffleSpec,
    draws: &[u64],
    out: &BTreeMap<usize, TapVars<'t, E>>,
    feats: &[BlockFeatures<'_, E>],
    tau: f64,
    transcript: &mut Vec<DrawRecord>,
) -> Result<Var<'t, E>> {
    let targets = hsr_targets(t, steps, hsr, spec, draws, feats, tau, transcript)?;
    weighted_loss(out, &targets, Some(hsr.beta), tau)
}

/// Places the output stream's taps on a tape as constants (or gradient
/// leaves), for evaluating losses on recorded features.
pub fn tap_vars<'t, E: Real>(tape: &'t Tape<E>, taps: &[AttentionTap<E>], requires_grad: bool) -> BTreeMap<usize, TapVars<'t, E>> {
    taps.iter()
        .map(|t| {
            (
                t.block,
                TapVars {
                    q: tape.leaf(t.q.clone(), requires_grad),
                    k: tape.leaf(t.k.clone(), requires_grad),
                    v: tape.leaf(t.v.clone(), requires_grad),
                },
            )
        })
        .collect()
}
