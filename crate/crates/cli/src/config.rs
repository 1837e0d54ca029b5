//! The run-definition file: one TOML document with a table per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vshuffle::denoiser::{make_texture_dataset, DenoiserConfig, TrainConfig};
use vshuffle::image::Image;
use vshuffle::transfer::TransferConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainSection,
    pub stylize: StylizeSection,
    pub sweep: SweepSection,
    pub pca: PcaSection,
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub model: DenoiserConfig,
    pub optimizer: TrainConfig,
    /// Texture domains making up the training set.
    pub domains: Vec<String>,
    pub images_per_domain: usize,
    /// Domain `i` is generated with seed `data_seed + i`.
    pub data_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            model: DenoiserConfig::default(),
            optimizer: TrainConfig::default(),
            domains: ["shapes", "stripes", "checker", "blobs", "noise-palette"].map(String::from).to_vec(),
            images_per_domain: 6,
            data_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizeSection {
    pub checkpoint: Option<PathBuf>,
    pub content: Option<String>,
    pub styles: Vec<String>,
    pub transfer: TransferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub content: String,
    /// At least as many images as the largest `n` in the grid.
    pub styles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub checkpoint: Option<PathBuf>,
    pub parallelism: usize,
    /// Settings shared by every cell before the grid axes are applied.
    pub base: TransferConfig,
    pub methods: Vec<String>,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pairs: Vec<PairSpec>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            checkpoint: None,
            parallelism: 1,
            base: TransferConfig::default(),
            methods: vec!["vshuffle".into()],
            betas: vec![0.24],
            alphas: vec![0.4],
            ns: vec![1],
            ms: vec![1],
            seeds: vec![0],
            pairs: vec![PairSpec {
                content: "gen:shapes:20".into(),
                styles: (0..3).map(|i| format!("gen:stripes:300:{i}")).collect(),
            }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaSection {
    pub checkpoint: Option<PathBuf>,
    pub styles: Vec<String>,
    /// Inference steps of the inversion.
    pub steps: usize,
    /// Inference timestep whose features are analysed.
    pub timestep: usize,
    pub block: usize,
    pub components: usize,
    pub seed: u64,
}

impl Default for PcaSection {
    fn default() -> Self {
        PcaSection {
            checkpoint: None,
            styles: (0..2).map(|i| format!("gen:stripes:300:{i}")).collect(),
            steps: 50,
            timestep: 25,
            block: 12,
            components: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub checkpoint: Option<PathBuf>,
    pub content: String,
    pub style: String,
    pub transfer: TransferConfig,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            checkpoint: None,
            content: "gen:shapes:20".into(),
            style: "gen:stripes:300".into(),
            transfer: TransferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config types serialize to TOML")
}

/// Loads `gen:<domain>:<seed>[:<index>]` or a PNG path.
pub fn load_image(source: &str, size: usize) -> Result<Image, CliError> {
    if let Some(spec) = source.strip_prefix("gen:") {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || CliError::Usage(format!("bad image source `{source}` (expected gen:<domain>:<seed>[:<index>])"));
        let (domain, seed, index) = match parts.as_slice() {
            [d, s] => (*d, s.parse::<u64>().map_err(|_| bad())?, 0),
            [d, s, i] => (*d, s.parse::<u64>().map_err(|_| bad())?, i.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        let domain = domain.parse().map_err(CliError::from)?;
        let mut imgs = make_texture_dataset(domain, index + 1, size, seed)?;
        return Ok(imgs.swap_remove(index));
    }
    let path = Path::new(source);
    if !path.is_file() {
        return Err(CliError::Usage(format!("input image {source} does not exist")));
    }
    let img = Image::load_png(path).map_err(|e| CliError::Usage(e.to_string()))?;
    if img.width() != size || img.height() != size {
        return Err(CliError::Usage(format!(
            "{source} is {}x{}, the model expects {size}x{size}",
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

/// `10-15` or `10,12,14`.
pub fn parse_blocks(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("bad block list `{s}`");
    if let Some((a, b)) = s.split_once('-') {
        let (a, b) = (a.trim().parse::<usize>().map_err(|_| bad())?, b.trim().parse::<usize>().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}
