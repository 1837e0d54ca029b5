//! Self-checks run by `vshuffle verify`: gradient and invariant oracles that
//! need no trained model.

use std::collections::BTreeMap;
use std::time::Instant;

use gradcore::{finite_diff_grad, relative_linf, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::denoiser::{DenoiserConfig, DenoiserModel, ForwardOptions};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::features::{attention, AttentionTap, Stream};
use crate::losses::{
    all_permutations, loss_ad, loss_hsr, loss_style_expected, loss_vshuffle, shuffle_values, tap_vars, BlockFeatures, HsrSpec,
    ShuffleAxis, ShuffleSpec,
};

/// Matching-loss temperature used throughout the checks.
const TAU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub shuffle_draws: usize,
    pub equivariance_cases: usize,
    pub gradient_seeds: u64,
    pub affinity_seeds: u64,
    pub max_enumerated_s: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            shuffle_draws: 1000,
            equivariance_cases: 500,
            gradient_seeds: 50,
            affinity_seeds: 20,
            max_enumerated_s: 4,
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckOutcome> {
    vec![
        shuffle_exactness(cfg.shuffle_draws),
        attention_equivariance(cfg.equivariance_cases),
        gradient_oracle(cfg.gradient_seeds),
        alpha_affinity(cfg.affinity_seeds),
        shuffle_expectation(cfg.max_enumerated_s),
    ]
}

/// Axis-`s` shuffles of random `[n, h, s, d]` values up to `(3, 4, 16, 8)`
/// keep every head's row multiset and column order statistics bitwise and
/// move row `perm[j]` to `j`.
pub fn shuffle_exactness(draws: usize) -> CheckOutcome {
    timed("shuffle exactness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for draw in 0..draws {
            let dims = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=8)];
            let [_, h, s, d] = dims;
            // Half the draws use a tiny value set so that ties occur.
            let coarse = draw % 2 == 0;
            let v = Tensor::<f32>::from_fn(&dims, |_| {
                if coarse {
                    rng.gen_range(0..3) as f32
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            let spec = ShuffleSpec {
                seed: draw as u64,
                ..ShuffleSpec::default()
            };
            let (out, perms) = shuffle_values(&v, &spec, draw as u64)?;
            let at = |t: &Tensor<f32>, i: usize, hh: usize, j: usize, k: usize| t.data()[((i * h + hh) * s + j) * d + k].to_bits();
            for (i, perm) in perms.iter().enumerate() {
                let mut seen = vec![false; s];
                for &p in perm {
                    if p >= s || std::mem::replace(&mut seen[p], true) {
                        return Ok((false, format!("draw {draw}: {perm:?} is not a bijection")));
                    }
                }
                for hh in 0..h {
                    let rows = |t: &Tensor<f32>| {
                        let mut r: Vec<Vec<u32>> = (0..s).map(|j| (0..d).map(|k| at(t, i, hh, j, k)).collect()).collect();
                        r.sort();
                        r
                    };
                    if rows(&v) != rows(&out) {
                        return Ok((false, format!("draw {draw}: row multiset changed")));
                    }
                    for k in 0..d {
                        let col = |t: &Tensor<f32>| {
                            let mut c: Vec<f32> = (0..s).map(|j| f32::from_bits(at(t, i, hh, j, k))).collect();
                            c.sort_by(f32::total_cmp);
                            c.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                        };
                        if col(&v) != col(&out) {
                            return Ok((false, format!("draw {draw}: order statistics changed")));
                        }
                    }
                    for j in 0..s {
                        for k in 0..d {
                            if at(&out, i, hh, j, k) != at(&v, i, hh, perm[j], k) {
                                return Ok((false, format!("draw {draw}: row {j} is not input row {}", perm[j])));
                            }
                        }
                    }
                }
            }
        }
        Ok((true, format!("{draws} draws")))
    })
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (h, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[h, s, d], |i| {
        let (hh, j, k) = (i / (s * d), (i / d) % s, i % d);
        t.data()[(hh * s + perm[j]) * d + k]
    })
}

/// Joint K/V permutations leave attention unchanged within 1e-6; permuting
/// V alone changes it in at least 99% of non-degenerate cases.
pub fn attention_equivariance(cases: usize) -> CheckOutcome {
    timed("attention equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa77);
        let (mut worst, mut changed, mut eligible) = (0f64, 0usize, 0usize);
        for _ in 0..cases {
            let (h, sq, s, d) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(2..=16), rng.gen_range(1..=8));
            let q = Tensor::<f32>::randn(&[h, sq, d], &mut rng);
            let k = Tensor::<f32>::randn(&[h, s, d], &mut rng);
            let v = Tensor::<f32>::randn(&[h, s, d], &mut rng);
            let mut perm: Vec<usize> = (0..s).collect();
            while perm.iter().enumerate().all(|(i, &p)| i == p) {
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            }
            let base = attention(&q, &k, &v, TAU)?;
            let joint = attention(&q, &permute_rows(&k, &perm), &permute_rows(&v, &perm), TAU)?;
            let diff = |a: &Tensor<f32>, b: &Tensor<f32>| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs() as f64)
                    .fold(0.0, f64::max)
            };
            worst = worst.max(diff(&base, &joint));
            let v_only = attention(&q, &k, &permute_rows(&v, &perm), TAU)?;
            eligible += 1;
            if diff(&base, &v_only) > 1e-6 {
                changed += 1;
            }
        }
        let passed = worst <= 1e-6 && changed * 100 >= eligible * 99;
        Ok((passed, format!("joint max |Δ| = {worst:.2e}; V-only changed {changed}/{eligible}")))
    })
}

struct MicroProblem {
    model: DenoiserModel,
    blocks: Vec<usize>,
    train_t: usize,
    t: usize,
    steps: usize,
    z: Tensor<f64>,
    content: Vec<AttentionTap<f64>>,
    /// Per block, per style image.
    styles: Vec<Vec<AttentionTap<f64>>>,
}

impl MicroProblem {
    fn new(seed: u64, n: usize) -> Result<Self> {
        let model = DenoiserModel::new(DenoiserConfig {
            init_seed: seed,
            ..DenoiserConfig::tiny(4)
        })?;
        let schedule = Schedule::new(10)?;
        let (t, blocks) = (5, vec![10, 13, 15]);
        let train_t = schedule.train_index(t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = model.config().latent_shape();
        let mut latent = || Tensor::<f64>::randn(&shape, &mut rng);
        let (z, zc) = (latent(), latent());
        let zs: Vec<Tensor<f64>> = (0..n).map(|_| latent()).collect();
        let content = model.extract_taps(&zc, train_t, &blocks, t, Stream::Content)?;
        let per_style = zs
            .iter()
            .enumerate()
            .map(|(i, z)| model.extract_taps(z, train_t, &blocks, t, Stream::Style(i)))
            .collect::<Result<Vec<_>>>()?;
        let styles = (0..blocks.len())
            .map(|b| per_style.iter().map(|s| s[b].clone()).collect())
            .collect();
        Ok(MicroProblem {
            model,
            blocks,
            train_t,
            t,
            steps: schedule.steps(),
            z,
            content,
            styles,
        })
    }

    fn feats(&self) -> Vec<BlockFeatures<'_, f64>> {
        self.content
            .iter()
            .zip(&self.styles)
            .map(|(c, s)| BlockFeatures { content: c, styles: s })
            .collect()
    }

    /// Backward and central-difference gradients of `loss` w.r.t. the
    /// output latent.
    fn gradients<L>(&self, loss: L) -> Result<(Tensor<f64>, Tensor<f64>)>
    where
        L: for<'t> Fn(&BTreeMap<usize, crate::denoiser::TapVars<'t, f64>>, &[BlockFeatures<'_, f64>]) -> Result<gradcore::Var<'t, f64>>,
    {
        let feats = self.feats();
        let eval = |z: &Tensor<f64>, grad: bool| -> Result<(f64, Option<Tensor<f64>>)> {
            let tape = Tape::new();
            let bound = self.model.bind(&tape, false);
            let zv = tape.leaf(z.clone(), grad);
            let out = bound.forward(zv, self.train_t, &ForwardOptions::taps_only(&self.blocks), None)?;
            let l = loss(&out.taps, &feats)?;
            let value = l.value().item()?;
            let g = if grad { Some(tape.backward(l)?.wrt(zv)) } else { None };
            Ok((value, g))
        };
        let analytic = eval(&self.z, true)?.1.expect("requested");
        let numeric = finite_diff_grad(
            |z| eval(z, false).map(|(v, _)| v).map_err(|e| gradcore::TensorError::Contract(e.to_string())),
            &self.z,
            1e-6,
        )?;
        Ok((analytic, numeric))
    }
}

/// Backward passes of the three matching losses against central
/// differences through a 4×4 model in 64-bit.
pub fn gradient_oracle(seeds: u64) -> CheckOutcome {
    timed("gradient oracle", || {
        let mut worst: f64 = 0.0;
        let hsr = HsrSpec {
            alpha: 0.4,
            ..HsrSpec::default()
        };
        for seed in 0..seeds {
            let spec = ShuffleSpec {
                m: 2,
                seed,
                ..ShuffleSpec::default()
            };
            let single = MicroProblem::new(seed, 1)?;
            let multi = MicroProblem::new(seed, 2)?;
            if !hsr.in_window(multi.t, multi.steps) {
                return Err(Error::config("check timestep fell outside the window"));
            }
            let draws = spec.draw_indices(multi.t, 0, 1);
            let checks = [
                ("loss_ad", single.gradients(|out, f| loss_ad(out, f, hsr.beta, TAU))?),
                (
                    "loss_vshuffle",
                    multi.gradients(|out, f| loss_vshuffle(out, f, &spec, &draws, hsr.beta, TAU, &mut Vec::new()))?,
                ),
                (
                    "loss_hsr",
                    multi.gradients(|out, f| loss_hsr(multi.t, multi.steps, &hsr, &spec, &draws, out, f, TAU, &mut Vec::new()))?,
                ),
            ];
            for (name, (analytic, numeric)) in checks {
                if numeric.max_abs() == 0.0 {
                    return Ok((false, format!("seed {seed}: {name} has a vanishing gradient")));
                }
                let err = relative_linf(&analytic, &numeric, 1e-12);
                worst = worst.max(err);
                if err > 1e-3 {
                    return Ok((false, format!("seed {seed}: {name} relative L∞ {err:.2e}")));
                }
            }
        }
        Ok((true, format!("{seeds} seeds, worst relative L∞ {worst:.2e}")))
    })
}

fn rand_taps(rng: &mut ChaCha8Rng, stream: Stream, blocks: &[usize], h: usize, s: usize, d: usize) -> Vec<AttentionTap<f64>> {
    blocks
        .iter()
        .map(|&block| AttentionTap {
            block,
            timestep: 1,
            stream,
            q: Tensor::randn(&[h, s, d], rng),
            k: Tensor::randn(&[h, s, d], rng),
            v: Tensor::randn(&[h, s, d], rng),
        })
        .collect()
}

/// Inside the window the hybrid loss at `α` equals `(1−α)·L(0) + α·L(1)`
/// within 1e-9.
pub fn alpha_affinity(seeds: u64) -> CheckOutcome {
    timed("alpha affinity", || {
        let blocks = [10, 12, 15];
        let (steps, t) = (20, 10);
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + seed as usize % 3;
            let out = rand_taps(&mut rng, Stream::Output, &blocks, 2, 9, 4);
            let content = rand_taps(&mut rng, Stream::Content, &blocks, 2, 9, 4);
            let per_style: Vec<_> = (0..n).map(|i| rand_taps(&mut rng, Stream::Style(i), &blocks, 2, 9, 4)).collect();
            let styles: Vec<Vec<_>> = (0..blocks.len())
                .map(|b| per_style.iter().map(|s| s[b].clone()).collect())
                .collect();
            let feats: Vec<_> = content
                .iter()
                .zip(&styles)
                .map(|(c, s)| BlockFeatures { content: c, styles: s })
                .collect();
            let spec = ShuffleSpec {
                m: 1 + seed as usize % 2,
                seed,
                ..ShuffleSpec::default()
            };
            let draws = spec.draw_indices(t, 0, 1);
            let at = |alpha: f64| -> Result<f64> {
                let tape = Tape::new();
                let vars = tap_vars(&tape, &out, false);
                let hsr = HsrSpec {
                    alpha,
                    ..HsrSpec::default()
                };
                let l = loss_hsr(t, steps, &hsr, &spec, &draws, &vars, &feats, TAU, &mut Vec::new())?;
                Ok(l.value().item()?)
            };
            let (l0, l1) = (at(0.0)?, at(1.0)?);
            for alpha in [0.25, 0.5, 0.75] {
                let err = (at(alpha)? - ((1.0 - alpha) * l0 + alpha * l1)).abs();
                worst = worst.max(err);
                if err > 1e-9 {
                    return Ok((false, format!("seed {seed}, α = {alpha}: off the line by {err:.2e}")));
                }
            }
        }
        Ok((true, format!("{seeds} seeds, worst deviation {worst:.2e}")))
    })
}

/// Plain-loop `softmax(τ·q·kᵀ/√d)·v` for one head.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], sq: usize, s: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; sq * d];
    for i in 0..sq {
        let scores: Vec<f64> = (0..s)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() * TAU / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..s {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    out
}

/// Mean of the shuffled style loss over every permutation matches a
/// plain-loop enumeration within 1e-9.
pub fn shuffle_expectation(max_s: usize) -> CheckOutcome {
    timed("shuffle expectation", || {
        let mut cases = 0;
        let mut worst: f64 = 0.0;
        for s in 1..=max_s {
            for n in 1..=2usize {
                let (h, d) = (2, 3);
                let mut rng = ChaCha8Rng::seed_from_u64((s * 10 + n) as u64);
                let blocks = [11];
                let out = rand_taps(&mut rng, Stream::Output, &blocks, h, s, d);
                let content = rand_taps(&mut rng, Stream::Content, &blocks, h, s, d);
                let styles: Vec<_> = (0..n)
                    .map(|i| rand_taps(&mut rng, Stream::Style(i), &blocks, h, s, d).remove(0))
                    .collect();
                let feats = [BlockFeatures {
                    content: &content[0],
                    styles: &styles,
                }];
                let tape = Tape::new();
                let vars = tap_vars(&tape, &out, false);
                let got = loss_style_expected(&vars, &feats, ShuffleAxis::S, TAU)?.value().item()?;

                // Enumerate every joint permutation with plain loops.
                let o = &out[0];
                let native: Vec<f64> = (0..h)
                    .flat_map(|hh| {
                        let sl = |t: &Tensor<f64>| t.data()[hh * s * d..(hh + 1) * s * d].to_vec();
                        naive_attention(&sl(&o.q), &sl(&o.k), &sl(&o.v), s, s, d)
                    })
                    .collect();
                let perms = all_permutations(s);
                let total = perms.len().pow(n as u32);
                let mut sum = 0.0;
                for combo in 0..total {
                    let mut rest = combo;
                    let chosen: Vec<&Vec<usize>> = (0..n)
                        .map(|_| {
                            let p = &perms[rest % perms.len()];
                            rest /= perms.len();
                            p
                        })
                        .collect();
                    let mut l1 = 0.0;
                    for hh in 0..h {
                        let (mut k, mut v) = (Vec::new(), Vec::new());
                        for (st, p) in styles.iter().zip(&chosen) {
                            for j in 0..s {
                                k.extend_from_slice(&st.k.data()[(hh * s + j) * d..(hh * s + j + 1) * d]);
                                v.extend_from_slice(&st.v.data()[(hh * s + p[j]) * d..(hh * s + p[j] + 1) * d]);
                            }
                        }
                        let q = &content[0].q.data()[hh * s * d..(hh + 1) * s * d];
                        let target = naive_attention(q, &k, &v, s, n * s, d);
                        l1 += target
                            .iter()
                            .zip(&native[hh * s * d..(hh + 1) * s * d])
                            .map(|(a, b)| (a - b).abs())
                            .sum::<f64>();
                    }
                    sum += l1 / (h * s * d) as f64;
                }
                let err = (got - sum / total as f64).abs();
                worst = worst.max(err);
                cases += 1;
                if err > 1e-9 {
                    return Ok((false, format!("s = {s}, n = {n}: off by {err:.2e}")));
                }
            }
        }
        Ok((true, format!("{cases} cases up to s = {max_s}, worst {worst:.2e}")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suite_passes() {
        let cfg = SuiteConfig {
            shuffle_draws: 50,
            equivariance_cases: 50,
            gradient_seeds: 2,
            affinity_seeds: 3,
            max_enumerated_s: 3,
        };
        for c in run_suite(&cfg) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
