//! End-to-end stylization pipelines behind a name-keyed registry.

mod optimize;
mod styleid;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::diffusion::{ddim_invert, Schedule, Trajectory};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{DrawRecord, HsrSpec, PermutationSource, Resample, ShuffleAxis, ShuffleSpec};

pub use optimize::{AttentionDistillation, ValueShuffle};
pub use styleid::StyleId;

/// Every scalar of a transfer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub method: String,
    /// Inference steps `T`.
    pub steps: usize,
    pub t1: f64,
    pub t2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub m: usize,
    pub inner_steps: usize,
    pub lr: f64,
    pub blocks: Vec<usize>,
    pub seed: u64,
    pub shuffle_axis: ShuffleAxis,
    pub resample: Resample,
    pub permutations: PermutationSource,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            method: "vshuffle".into(),
            steps: 200,
            t1: 0.2,
            t2: 0.9,
            alpha: 0.4,
            beta: 0.24,
            gamma: 0.75,
            tau: 1.5,
            m: 1,
            inner_steps: 10,
            lr: 0.05,
            blocks: (10..=15).collect(),
            seed: 0,
            shuffle_axis: ShuffleAxis::S,
            resample: Resample::PerTimestep,
            permutations: PermutationSource::Random,
        }
    }
}

impl TransferConfig {
    pub fn for_method(method: &str) -> Self {
        TransferConfig {
            method: method.to_string(),
            ..Self::default()
        }
    }

    pub fn hsr(&self) -> HsrSpec {
        HsrSpec {
            alpha: self.alpha,
            beta: self.beta,
            t1_frac: self.t1,
            t2_frac: self.t2,
        }
    }

    pub fn shuffle(&self) -> ShuffleSpec {
        ShuffleSpec {
            axis: self.shuffle_axis,
            m: self.m,
            seed: self.seed,
            resample: self.resample,
            source: self.permutations,
        }
    }

    /// Checks shared by every method.
    pub fn validate_common(&self, model: &DenoiserModel) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.blocks.is_empty() {
            return Err(Error::config("at least one attention block is required"));
        }
        let count = model.config().num_attention_blocks;
        if let Some(&block) = self.blocks.iter().find(|&&b| b >= count) {
            return Err(Error::BlockIndex { block, count });
        }
        Ok(())
    }
}

/// Losses recorded at one timestep, one per inner optimizer step (taken
/// before the update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepLoss {
    pub t: usize,
    pub in_window: bool,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub t: usize,
    pub inner: usize,
    #[serde(flatten)]
    pub draw: DrawRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub image: Image,
    pub losses: Vec<TimestepLoss>,
    pub transcript: Vec<TranscriptEntry>,
    pub config: TransferConfig,
    pub n_styles: usize,
    pub elapsed_secs: f64,
}

/// Structured sidecar written next to every stylized image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TransferConfig,
    pub n_styles: usize,
    pub inputs: BTreeMap<String, String>,
    pub output_fingerprint: String,
    pub losses: Vec<TimestepLoss>,
    pub transcript: Vec<TranscriptEntry>,
    /// Wall-clock seconds; the only field allowed to differ between reruns.
    pub elapsed_secs: f64,
}

impl TransferResult {
    pub fn run_record(&self, inputs: BTreeMap<String, String>) -> RunRecord {
        RunRecord {
            config: self.config.clone(),
            n_styles: self.n_styles,
            inputs,
            output_fingerprint: format!("{:016x}", self.image.quantized().fingerprint()),
            losses: self.losses.clone(),
            transcript: self.transcript.clone(),
            elapsed_secs: self.elapsed_secs,
        }
    }

    /// Bitwise comparison of everything but timing.
    pub fn same_outcome(&self, other: &TransferResult) -> bool {
        self.config == other.config && self.transcript == other.transcript && self.same_image_and_losses(other)
    }

    /// Output pixels and every recorded loss value, bit for bit.
    pub fn same_image_and_losses(&self, other: &TransferResult) -> bool {
        self.image.tensor().bitwise_eq(other.image.tensor())
            && self.losses.len() == other.losses.len()
            && self
                .losses
                .iter()
                .zip(&other.losses)
                .all(|(a, b)| a.t == b.t && bits(&a.losses) == bits(&b.losses))
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Pixel-space encoder: images already live in `[-1, 1]`.
pub fn encode(img: &Image) -> Tensor<f32> {
    img.tensor().clone()
}

/// Pixel-space decoder with clamping to the valid range.
pub fn decode(z: &Tensor<f32>) -> Result<Image> {
    Ok(Image::from_tensor(z.clone())?.clamped())
}

/// Shared inversion trajectories keyed by image content and `T`.
#[derive(Debug, Default)]
pub struct TrajectoryCache {
    map: Mutex<HashMap<(u64, usize), Arc<Trajectory>>>,
}

impl TrajectoryCache {
    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_invert(&self, model: &DenoiserModel, schedule: &Schedule, img: &Image, label: &str) -> Result<Arc<Trajectory>> {
        let key = (img.fingerprint(), schedule.steps());
        if let Some(t) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(t.clone());
        }
        let traj = Arc::new(ddim_invert(model, schedule, &encode(img), label)?);
        self.map.lock().expect("cache lock").entry(key).or_insert(traj.clone());
        Ok(traj)
    }
}

/// A trained model plus caches shared by transfer jobs.
pub struct TransferContext<'m> {
    pub model: &'m DenoiserModel,
    pub trajectories: TrajectoryCache,
}

impl<'m> TransferContext<'m> {
    pub fn new(model: &'m DenoiserModel) -> Self {
        TransferContext {
            model,
            trajectories: TrajectoryCache::default(),
        }
    }

    pub(crate) fn invert_all(&self, schedule: &Schedule, content: &Image, styles: &[Image]) -> Result<(Arc<Trajectory>, Vec<Arc<Trajectory>>)> {
        self.model.ensure_trained()?;
        let shape = self.model.config().latent_shape();
        for img in std::iter::once(content).chain(styles) {
            if img.tensor().shape() != shape {
                return Err(Error::Image(format!(
                    "image {:?} does not match model input {shape:?}",
                    img.tensor().shape()
                )));
            }
        }
        let c = self.trajectories.get_or_invert(self.model, schedule, content, "content")?;
        let s = styles
            .iter()
            .enumerate()
            .map(|(i, im)| self.trajectories.get_or_invert(self.model, schedule, im, &format!("style{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok((c, s))
    }
}

/// One stylization algorithm.
pub trait TransferMethod: Send + Sync {
    fn name(&self) -> &'static str;

    /// Method-specific validation, including the allowed style count.
    fn validate(&self, config: &TransferConfig, n_styles: usize) -> Result<()>;

    fn run(&self, ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult>;
}

pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn TransferMethod>>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = MethodRegistry::empty();
        r.register(Box::new(StyleId));
        r.register(Box::new(AttentionDistillation));
        r.register(Box::new(ValueShuffle));
        r
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            methods: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, method: Box<dyn TransferMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn TransferMethod> {
        self.methods
            .get(name)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    /// Validates and runs the method named in `config`.
    pub fn run(&self, ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult> {
        let method = self.get(&config.method)?;
        config.validate_common(ctx.model)?;
        method.validate(config, styles.len())?;
        method.run(ctx, content, styles, config)
    }
}

fn with_method(config: &TransferConfig, name: &str) -> TransferConfig {
    TransferConfig {
        method: name.to_string(),
        ..config.clone()
    }
}

pub fn run_styleid(ctx: &TransferContext<'_>, content: &Image, style: &Image, config: &TransferConfig) -> Result<TransferResult> {
    MethodRegistry::default().run(ctx, content, std::slice::from_ref(style), &with_method(config, "styleid"))
}

pub fn run_ad(ctx: &TransferContext<'_>, content: &Image, style: &Image, config: &TransferConfig) -> Result<TransferResult> {
    MethodRegistry::default().run(ctx, content, std::slice::from_ref(style), &with_method(config, "ad"))
}

pub fn run_vshuffle(ctx: &TransferContext<'_>, content: &Image, styles: &[Image], config: &TransferConfig) -> Result<TransferResult> {
    MethodRegistry::default().run(ctx, content, styles, &with_method(config, "vshuffle"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        let r = MethodRegistry::default();
        assert_eq!(r.names(), ["ad", "styleid", "vshuffle"]);
        assert!(matches!(r.get("lora"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = TransferConfig::default();
        assert_eq!((c.alpha, c.beta, c.steps, c.lr), (0.4, 0.24, 200, 0.05));
        assert_eq!((c.t1, c.t2), (0.2, 0.9));
        assert_eq!(c.blocks, (10..=15).collect::<Vec<_>>());
        assert_eq!((c.gamma, c.tau), (0.75, 1.5));
    }

    #[test]
    fn style_count_rules() {
        let r = MethodRegistry::default();
        let c = TransferConfig::default();
        assert!(r.get("ad").unwrap().validate(&c, 2).is_err());
        assert!(r.get("styleid").unwrap().validate(&c, 2).is_err());
        assert!(r.get("vshuffle").unwrap().validate(&c, 3).is_ok());
        assert!(r.get("vshuffle").unwrap().validate(&c, 0).is_err());
    }

    #[test]
    fn config_serde_round_trip() {
        let c = TransferConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TransferConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TransferConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
