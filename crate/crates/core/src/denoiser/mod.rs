//! Micro attention-UNet noise predictor.
//!
//! Layout for the default 32×32 configuration (every stage is `base_width`
//! channels wide):
//!
//! ```text
//! conv_in → res@32 ─────────────────────────────────────────┐ skip0
//!   ↓ down  res@16 + attn 0..2 ──────────────────────┐ skip1 │
//!   ↓ down  res@8  + attn 3..5 ───────────┐ skip2    │       │
//!           mid: res, attn 6..N-7, res    │          │       │
//!           cat → res@8  + attn N-6..N-4 ─┘          │       │
//!   ↑ up    cat → res@16 + attn N-3..N-1 ────────────┘       │
//!   ↑ up    cat → res@32 → norm → conv_out ──────────────────┘
//! ```
//!
//! Attention blocks are numbered in forward order, so the last six sit on
//! the decoder side.

mod textures;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use gradcore::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::features::{attention_var, AttentionTap, Stream};

pub use textures::{make_texture_dataset, mean_hue, rgb_hue, TextureDomain, TextureKind};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub num_attention_blocks: usize,
    pub attention_heads: usize,
    pub head_dim: usize,
    pub timestep_embedding_dim: usize,
    pub norm_groups: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            channels: 3,
            base_width: 32,
            num_attention_blocks: 16,
            attention_heads: 4,
            head_dim: 8,
            timestep_embedding_dim: 32,
            norm_groups: 8,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// A 4×4 model small enough for exhaustive finite-difference checks.
    pub fn tiny(image_size: usize) -> Self {
        DenoiserConfig {
            image_size,
            base_width: 8,
            attention_heads: 2,
            head_dim: 4,
            timestep_embedding_dim: 8,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_attention_blocks < 16 {
            return fail(format!("need at least 16 attention blocks, got {}", self.num_attention_blocks));
        }
        if self.attention_heads * self.head_dim != self.base_width {
            return fail(format!(
                "heads×head_dim = {}×{} must equal base_width {}",
                self.attention_heads, self.head_dim, self.base_width
            ));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 4", self.image_size));
        }
        if self.norm_groups == 0 || self.base_width % self.norm_groups != 0 {
            return fail(format!("{} groups do not divide width {}", self.norm_groups, self.base_width));
        }
        if self.channels == 0 || self.timestep_embedding_dim < 2 || self.timestep_embedding_dim % 2 != 0 {
            return fail("channels and an even embedding width are required".into());
        }
        Ok(())
    }

    /// Spatial side of the feature map each attention block sees.
    pub fn block_resolution(&self, block: usize) -> Result<usize> {
        let n = self.num_attention_blocks;
        let s = self.image_size;
        match block {
            b if b < 3 => Ok(s / 2),
            b if b + 3 < n => Ok(s / 4),
            b if b < n => Ok(s / 2),
            _ => Err(Error::BlockIndex { block, count: n }),
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Replaces a block's attention output. Called once per attention block
/// with that block's own `(Q, K, V)` in head layout.
pub trait AttentionHook<E: Real> {
    fn replace(&mut self, block: usize, q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<Option<Tensor<E>>>;
}

/// Injects precomputed outputs by block index.
#[derive(Debug, Clone, Default)]
pub struct FixedInjection<E: Real>(pub BTreeMap<usize, Tensor<E>>);

impl<E: Real> AttentionHook<E> for FixedInjection<E> {
    fn replace(&mut self, block: usize, _q: &Tensor<E>, _k: &Tensor<E>, _v: &Tensor<E>) -> Result<Option<Tensor<E>>> {
        Ok(self.0.get(&block).cloned())
    }
}

/// Differentiable `(Q, K, V)` of one block, each `[h, s, d]`.
#[derive(Debug, Clone, Copy)]
pub struct TapVars<'t, E: Real> {
    pub q: Var<'t, E>,
    pub k: Var<'t, E>,
    pub v: Var<'t, E>,
}

impl<E: Real> TapVars<'_, E> {
    pub fn to_tap(&self, block: usize, timestep: usize, stream: Stream) -> AttentionTap<E> {
        AttentionTap {
            block,
            timestep,
            stream,
            q: self.q.value().as_ref().clone(),
            k: self.k.value().as_ref().clone(),
            v: self.v.value().as_ref().clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Blocks whose `(Q, K, V)` are returned.
    pub capture: Vec<usize>,
    /// Stop right after the last captured block; no noise prediction.
    pub taps_only: bool,
}

impl ForwardOptions {
    pub fn capture(blocks: &[usize]) -> Self {
        ForwardOptions {
            capture: blocks.to_vec(),
            taps_only: false,
        }
    }

    pub fn taps_only(blocks: &[usize]) -> Self {
        ForwardOptions {
            capture: blocks.to_vec(),
            taps_only: true,
        }
    }
}

pub struct ForwardOutput<'t, E: Real> {
    /// `None` for taps-only passes.
    pub eps: Option<Var<'t, E>>,
    pub taps: BTreeMap<usize, TapVars<'t, E>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: BTreeMap<String, Tensor<f32>>,
    trained_steps: u64,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    params: BTreeMap<String, Tensor<f32>>,
}

impl Init<'_> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let scale = 1.0 / (fan_in as f32).sqrt();
        let w = Tensor::<f32>::randn(shape, self.rng).map(|v| v * scale).expect("finite init");
        self.params.insert(name, w);
    }

    fn zeros(&mut self, name: String, n: usize) {
        self.params.insert(name, Tensor::zeros(&[n]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
        self.zeros(format!("{name}.beta"), c);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.weight(format!("{name}.w"), &[cout, cin, k, k], cin * k * k);
        self.zeros(format!("{name}.b"), cout);
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.weight(format!("{name}.w"), &[cin, cout], cin);
        self.zeros(format!("{name}.b"), cout);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize) {
        self.norm(&format!("{name}.n1"), cin);
        self.conv(&format!("{name}.c1"), cin, cout, 3);
        self.linear(&format!("{name}.t"), cout, cout);
        self.norm(&format!("{name}.n2"), cout);
        self.conv(&format!("{name}.c2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }

    fn attention(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.n"), c);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), c, c);
        }
    }
}

impl DenoiserModel {
    /// Freshly initialized weights, deterministic in `config.init_seed`.
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init {
            rng: &mut rng,
            params: BTreeMap::new(),
        };
        let c = config.base_width;
        let n = config.num_attention_blocks;
        init.linear("temb.l1", config.timestep_embedding_dim, c);
        init.linear("temb.l2", c, c);
        init.conv("conv_in", config.channels, c, 3);
        init.resblock("enc0", c, c);
        init.conv("down1", c, c, 3);
        init.resblock("enc1", c, c);
        init.conv("down2", c, c, 3);
        init.resblock("enc2", c, c);
        init.resblock("mid0", c, c);
        init.resblock("mid1", c, c);
        init.resblock("dec2", 2 * c, c);
        init.conv("up1", c, c, 3);
        init.resblock("dec1", 2 * c, c);
        init.conv("up0", c, c, 3);
        init.resblock("dec0", 2 * c, c);
        init.norm("out_norm", c);
        init.conv("conv_out", c, config.channels, 3);
        for b in 0..n {
            init.attention(&format!("attn{b:02}"), c);
        }
        let params = init.params;
        Ok(DenoiserModel {
            config,
            params,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn ensure_trained(&self) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::Untrained);
        }
        Ok(())
    }

    pub(crate) fn set_params(&mut self, params: BTreeMap<String, Tensor<f32>>, extra_steps: u64) {
        self.params = params;
        self.trained_steps += extra_steps;
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t, E: Real>(&self, tape: &'t Tape<E>, requires_grad: bool) -> Bound<'_, 't, E> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), tape.leaf(v.cast(), requires_grad)))
            .collect();
        Bound {
            model: self,
            tape,
            vars,
        }
    }

    /// Noise prediction for a constant input.
    pub fn predict_eps<E: Real>(&self, z: &Tensor<E>, train_t: usize) -> Result<Tensor<E>> {
        self.predict_eps_with(z, train_t, None)
    }

    pub fn predict_eps_with<E: Real>(
        &self,
        z: &Tensor<E>,
        train_t: usize,
        hook: Option<&mut dyn AttentionHook<E>>,
    ) -> Result<Tensor<E>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tape.constant(z.clone()), train_t, &ForwardOptions::default(), hook)?;
        Ok(out.eps.expect("full pass").value().as_ref().clone())
    }

    /// `(Q, K, V)` of the requested blocks for a constant input.
    pub fn extract_taps<E: Real>(
        &self,
        z: &Tensor<E>,
        train_t: usize,
        blocks: &[usize],
        timestep: usize,
        stream: Stream,
    ) -> Result<Vec<AttentionTap<E>>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tape.constant(z.clone()), train_t, &ForwardOptions::taps_only(blocks), None)?;
        Ok(blocks
            .iter()
            .map(|b| out.taps[b].to_tap(*b, timestep, stream))
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "trained_steps": self.trained_steps,
        });
        let mut c = Container::new("MODEL", meta);
        for (name, t) in &self.params {
            c.push(name.clone(), t.clone());
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_tag("MODEL")?;
        let config: DenoiserConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let trained_steps = c.meta["trained_steps"]
            .as_u64()
            .ok_or_else(|| Error::Format("model lacks trained_steps".into()))?;
        let mut model = DenoiserModel::new(config)?;
        let loaded: BTreeMap<String, Tensor<f32>> = c.tensors.into_iter().collect();
        if loaded.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                loaded.len(),
                model.params.len()
            )));
        }
        for (name, t) in &model.params {
            match loaded.get(name) {
                Some(l) if l.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("checkpoint tensor `{name}` missing or misshapen"))),
            }
        }
        model.params = loaded;
        model.trained_steps = trained_steps;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// Model parameters placed on one tape.
pub struct Bound<'m, 't, E: Real> {
    model: &'m DenoiserModel,
    tape: &'t Tape<E>,
    vars: BTreeMap<&'m str, Var<'t, E>>,
}

/// Early exit once every requested tap is recorded.
struct Done;

struct Pass<'a, 'h, 't, E: Real> {
    opts: &'a ForwardOptions,
    hook: Option<&'h mut dyn AttentionHook<E>>,
    taps: BTreeMap<usize, TapVars<'t, E>>,
    last: Option<usize>,
}

type Step<T> = std::result::Result<T, Flow>;

enum Flow {
    Stop(Done),
    Fail(Error),
}

impl<T: Into<Error>> From<T> for Flow {
    fn from(e: T) -> Self {
        Flow::Fail(e.into())
    }
}

impl<'m, 't, E: Real> Bound<'m, 't, E> {
    pub fn vars(&self) -> &BTreeMap<&'m str, Var<'t, E>> {
        &self.vars
    }

    fn p(&self, name: &str) -> Var<'t, E> {
        self.vars[name]
    }

    fn linear(&self, x: Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        Ok(x.matmul(self.p(&format!("{name}.w")))?
            .add_row_bias(self.p(&format!("{name}.b")))?)
    }

    fn conv(&self, x: Var<'t, E>, name: &str, stride: usize) -> Result<Var<'t, E>> {
        let w = self.p(&format!("{name}.w"));
        let pad = w.shape()[2] / 2;
        Ok(x.conv2d(w, stride, pad)?.add_channel_bias(self.p(&format!("{name}.b")))?)
    }

    fn norm(&self, x: Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let groups = self.model.config.norm_groups;
        Ok(x.group_norm(
            groups,
            self.p(&format!("{name}.gamma")),
            self.p(&format!("{name}.beta")),
        )?)
    }

    fn resblock(&self, x: Var<'t, E>, temb: Var<'t, E>, name: &str) -> Result<Var<'t, E>> {
        let h = self.norm(x, &format!("{name}.n1"))?.silu()?;
        let h = self.conv(h, &format!("{name}.c1"), 1)?;
        let cout = h.shape()[0];
        let tb = self.linear(temb, &format!("{name}.t"))?.reshape(&[cout])?;
        let h = h.add_channel_bias(tb)?;
        let h = self.norm(h, &format!("{name}.n2"))?.silu()?;
        let h = self.conv(h, &format!("{name}.c2"), 1)?;
        let skip_name = format!("{name}.skip.w");
        let skip = if self.vars.contains_key(skip_name.as_str()) {
            self.conv(x, &format!("{name}.skip"), 1)?
        } else {
            x
        };
        Ok(skip.add(h)?)
    }

    fn timestep_embedding(&self, train_t: usize) -> Result<Var<'t, E>> {
        let dim = self.model.config.timestep_embedding_dim;
        let half = dim / 2;
        let mut e = vec![0f64; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            e[i] = (train_t as f64 * freq).sin();
            e[half + i] = (train_t as f64 * freq).cos();
        }
        let x = self.tape.constant(Tensor::from_f64(&[1, dim], &e)?);
        let h = self.linear(x, "temb.l1")?.silu()?;
        Ok(self.linear(h, "temb.l2")?.silu()?)
    }

    fn attention_block(&self, x: Var<'t, E>, block: usize, pass: &mut Pass<'_, '_, 't, E>) -> Step<Var<'t, E>> {
        let cfg = &self.model.config;
        let (h, d) = (cfg.attention_heads, cfg.head_dim);
        let shape = x.shape();
        let (c, hh, ww) = (shape[0], shape[1], shape[2]);
        let s = hh * ww;
        let name = format!("attn{block:02}");
        let tokens = self.norm(x, &format!("{name}.n"))?.reshape(&[c, s])?.permute(&[1, 0])?;
        let heads = |p: &str| -> Result<Var<'t, E>> {
            Ok(self
                .linear(tokens, &format!("{name}.{p}"))?
                .reshape(&[s, h, d])?
                .permute(&[1, 0, 2])?)
        };
        let (q, k, v) = (heads("q")?, heads("k")?, heads("v")?);
        if pass.opts.capture.contains(&block) {
            pass.taps.insert(block, TapVars { q, k, v });
        }
        if pass.opts.taps_only && pass.last == Some(block) {
            return Err(Flow::Stop(Done));
        }
        let injected = match pass.hook.as_deref_mut() {
            Some(hook) => hook.replace(block, &q.value(), &k.value(), &v.value())?,
            None => None,
        };
        let attn = match injected {
            Some(f) => {
                if f.shape() != [h, s, d] {
                    return Err(Flow::Fail(Error::Config(format!(
                        "injected attention for block {block} has shape {:?}, expected {:?}",
                        f.shape(),
                        [h, s, d]
                    ))));
                }
                self.tape.constant(f)
            }
            None => attention_var(q, k, v, 1.0)?,
        };
        let merged = attn.permute(&[1, 0, 2])?.reshape(&[s, c])?;
        let out = self
            .linear(merged, &format!("{name}.o"))?
            .permute(&[1, 0])?
            .reshape(&[c, hh, ww])?;
        Ok(x.add(out)?)
    }

    /// Runs the network on `z` (`[channels, size, size]`) at training-schedule
    /// timestep `train_t`.
    pub fn forward(
        &self,
        z: Var<'t, E>,
        train_t: usize,
        opts: &ForwardOptions,
        hook: Option<&mut dyn AttentionHook<E>>,
    ) -> Result<ForwardOutput<'t, E>> {
        let cfg = &self.model.config;
        let n = cfg.num_attention_blocks;
        if let Some(&bad) = opts.capture.iter().find(|&&b| b >= n) {
            return Err(Error::BlockIndex { block: bad, count: n });
        }
        let expected = cfg.latent_shape();
        if z.shape() != expected {
            return Err(Error::Config(format!("latent shape {:?}, model expects {expected:?}", z.shape())));
        }
        let mut pass = Pass {
            opts,
            hook,
            taps: BTreeMap::new(),
            last: opts.capture.iter().copied().max(),
        };
        match self.run(z, train_t, &mut pass) {
            Ok(eps) => Ok(ForwardOutput {
                eps: Some(eps),
                taps: pass.taps,
            }),
            Err(Flow::Stop(Done)) => Ok(ForwardOutput {
                eps: None,
                taps: pass.taps,
            }),
            Err(Flow::Fail(e)) => Err(e),
        }
    }

    fn run(&self, z: Var<'t, E>, train_t: usize, pass: &mut Pass<'_, '_, 't, E>) -> Step<Var<'t, E>> {
        let n = self.model.config.num_attention_blocks;
        let temb = self.timestep_embedding(train_t)?;
        let mut block = 0;
        let mut attend = |x: Var<'t, E>, count: usize, pass: &mut Pass<'_, '_, 't, E>| -> Step<Var<'t, E>> {
            let mut x = x;
            for _ in 0..count {
                x = self.attention_block(x, block, pass)?;
                block += 1;
            }
            Ok(x)
        };

        let x = self.conv(z, "conv_in", 1)?;
        let skip0 = self.resblock(x, temb, "enc0")?;
        let x = self.conv(skip0, "down1", 2)?;
        let x = self.resblock(x, temb, "enc1")?;
        let skip1 = attend(x, 3, pass)?;
        let x = self.conv(skip1, "down2", 2)?;
        let x = self.resblock(x, temb, "enc2")?;
        let skip2 = attend(x, 3, pass)?;

        let x = self.resblock(skip2, temb, "mid0")?;
        let x = attend(x, n - 12, pass)?;
        let x = self.resblock(x, temb, "mid1")?;

        let x = self.resblock(Var::concat0(&[x, skip2])?, temb, "dec2")?;
        let x = attend(x, 3, pass)?;
        let x = self.conv(x.upsample2x()?, "up1", 1)?;
        let x = self.resblock(Var::concat0(&[x, skip1])?, temb, "dec1")?;
        let x = attend(x, 3, pass)?;
        let x = self.conv(x.upsample2x()?, "up0", 1)?;
        let x = self.resblock(Var::concat0(&[x, skip0])?, temb, "dec0")?;
        let x = self.norm(x, "out_norm")?.silu()?;
        Ok(self.conv(x, "conv_out", 1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::attention;

    fn tiny() -> DenoiserModel {
        DenoiserModel::new(DenoiserConfig::tiny(8)).unwrap()
    }

    fn input(model: &DenoiserModel, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&model.config().latent_shape(), &mut rng)
    }

    #[test]
    fn config_validation() {
        DenoiserConfig::default().validate().unwrap();
        let bad = DenoiserConfig {
            num_attention_blocks: 12,
            ..DenoiserConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            head_dim: 4,
            ..DenoiserConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn block_resolutions_follow_unet_layout() {
        let cfg = DenoiserConfig::default();
        let res: Vec<usize> = (0..16).map(|b| cfg.block_resolution(b).unwrap()).collect();
        assert_eq!(res, [16, 16, 16, 8, 8, 8, 8, 8, 8, 8, 8, 8, 8, 16, 16, 16]);
        assert!(cfg.block_resolution(16).is_err());
    }

    #[test]
    fn window_blocks_yield_six_taps_with_token_count() {
        let model = tiny();
        let blocks: Vec<usize> = (10..=15).collect();
        let taps = model
            .extract_taps(&input(&model, 1), 10, &blocks, 1, Stream::Content)
            .unwrap();
        assert_eq!(taps.len(), 6);
        for tap in &taps {
            let r = model.config().block_resolution(tap.block).unwrap();
            assert_eq!(tap.dims(), (2, r * r, 4));
        }
        let err = model.extract_taps(&input(&model, 1), 10, &[16], 1, Stream::Content);
        assert!(matches!(err, Err(Error::BlockIndex { block: 16, .. })));
    }

    #[test]
    fn capture_does_not_interfere_and_is_deterministic() {
        let model = tiny();
        let z = input(&model, 2);
        let plain = model.predict_eps(&z, 500).unwrap();
        let tape = Tape::new();
        let out = model
            .bind(&tape, false)
            .forward(tape.constant(z.clone()), 500, &ForwardOptions::capture(&[0, 7, 15]), None)
            .unwrap();
        assert!(out.eps.unwrap().value().bitwise_eq(&plain));
        assert_eq!(out.taps.len(), 3);
        assert!(model.predict_eps(&z, 500).unwrap().bitwise_eq(&plain));
    }

    #[test]
    fn taps_only_matches_full_pass_taps() {
        let model = tiny();
        let z = input(&model, 3);
        let full = {
            let tape = Tape::new();
            let out = model
                .bind(&tape, false)
                .forward(tape.constant(z.clone()), 7, &ForwardOptions::capture(&[12]), None)
                .unwrap();
            out.taps[&12].to_tap(12, 0, Stream::Output)
        };
        let short = model.extract_taps(&z, 7, &[12], 0, Stream::Output).unwrap();
        assert_eq!(short[0], full);
    }

    struct SelfInject;
    impl AttentionHook<f64> for SelfInject {
        fn replace(&mut self, _b: usize, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Result<Option<Tensor<f64>>> {
            Ok(Some(attention(q, k, v, 1.0)?))
        }
    }

    #[test]
    fn self_injection_reproduces_plain_forward() {
        let model = tiny();
        let z: Tensor<f64> = input(&model, 4).cast();
        let plain = model.predict_eps(&z, 300).unwrap();
        let injected = model.predict_eps_with(&z, 300, Some(&mut SelfInject)).unwrap();
        assert!(plain.zip_map(&injected, "diff", |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn zero_and_foreign_injection() {
        let model = tiny();
        let z = input(&model, 5);
        let other = input(&model, 6);
        let plain = model.predict_eps(&z, 100).unwrap();
        let foreign = model.extract_taps(&other, 100, &[14], 0, Stream::Style(0)).unwrap();
        let f = attention(&foreign[0].q, &foreign[0].k, &foreign[0].v, 1.0).unwrap();
        let mut hook = FixedInjection(BTreeMap::from([(14, f)]));
        let swapped = model.predict_eps_with(&z, 100, Some(&mut hook)).unwrap();
        assert!(plain.zip_map(&swapped, "diff", |a, b| a - b).unwrap().max_abs() > 1e-6);

        let mut zero = FixedInjection(BTreeMap::from([(14, Tensor::zeros(&foreign[0].v.shape().to_vec()))]));
        let zeroed = model.predict_eps_with(&z, 100, Some(&mut zero)).unwrap();
        assert!(plain.zip_map(&zeroed, "diff", |a, b| a - b).unwrap().max_abs() > 1e-6);

        let mut bad = FixedInjection(BTreeMap::from([(14, Tensor::zeros(&[1, 1, 1]))]));
        assert!(model.predict_eps_with(&z, 100, Some(&mut bad)).is_err());
    }

    #[test]
    fn zero_injection_equals_block_without_attention() {
        // With f = 0 the block output is x + o.b; setting the value and
        // output projections to zero gives the same block.
        let model = tiny();
        let z = input(&model, 8);
        let v = model.extract_taps(&z, 50, &[11], 0, Stream::Content).unwrap()[0].v.clone();
        let mut zero = FixedInjection(BTreeMap::from([(11, Tensor::zeros(v.shape()))]));
        let injected = model.predict_eps_with(&z, 50, Some(&mut zero)).unwrap();
        let mut ablated = model.clone();
        let w = ablated.params["attn11.v.w"].clone();
        ablated.params.insert("attn11.v.w".into(), Tensor::zeros(w.shape()));
        ablated.params.insert("attn11.v.b".into(), Tensor::zeros(&[w.shape()[1]]));
        let plain = ablated.predict_eps(&z, 50).unwrap();
        assert!(plain.zip_map(&injected, "diff", |a, b| a - b).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn tap_queries_depend_on_input() {
        let model = DenoiserModel::new(DenoiserConfig::tiny(4)).unwrap();
        let z: Tensor<f64> = input(&model, 9).cast();
        let f = |x: &Tensor<f64>| -> gradcore::Result<f64> {
            let tap = model.extract_taps(x, 20, &[13], 0, Stream::Output).unwrap();
            Ok(tap[0].q.data()[0])
        };
        let g = gradcore::finite_diff_grad(f, &z, 1e-5).unwrap();
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = tiny();
        let bytes = model.to_container().to_bytes();
        let back = DenoiserModel::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_container().to_bytes(), bytes);
    }

    #[test]
    fn untrained_model_is_flagged() {
        assert!(matches!(tiny().ensure_trained(), Err(Error::Untrained)));
    }
}
