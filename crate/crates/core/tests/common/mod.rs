//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use vshuffle::denoiser::{make_texture_dataset, train, DenoiserConfig, DenoiserModel, TrainConfig};
use vshuffle::image::Image;

pub const CONTENT_DOMAIN: &str = "shapes";
pub const STYLE_DOMAINS: [&str; 4] = ["stripes", "checker", "blobs", "noise-palette"];

/// Mixed texture set the 32×32 model is trained on.
pub fn training_set(size: usize) -> Vec<Image> {
    let mut out = Vec::new();
    for (i, domain) in std::iter::once(CONTENT_DOMAIN).chain(STYLE_DOMAINS).enumerate() {
        for seed in 0..2u64 {
            out.extend(make_texture_dataset(domain.parse().unwrap(), 3, size, 1000 + 10 * i as u64 + seed).unwrap());
        }
    }
    out
}

fn cached(name: &str, build: impl FnOnce() -> DenoiserModel) -> DenoiserModel {
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if let Ok(m) = DenoiserModel::load(&path) {
        return m;
    }
    let m = build();
    let tmp = path.with_extension("partial");
    m.save(&tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    m
}

/// The default 32×32 denoiser after 2000 training steps.
pub fn trained_model() -> &'static DenoiserModel {
    static MODEL: OnceLock<DenoiserModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        cached("micro32-mixed-2000-v1.vshf", || {
            let model = DenoiserModel::new(DenoiserConfig::default()).unwrap();
            let (m, report) = train(&model, &training_set(32), &TrainConfig::default()).unwrap();
            assert!(report.final_smoothed < report.initial_smoothed);
            m
        })
    })
}

/// A tiny 8×8 model with a few training steps, for exactness checks.
pub fn tiny_model() -> &'static DenoiserModel {
    static MODEL: OnceLock<DenoiserModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let model = DenoiserModel::new(DenoiserConfig::tiny(8)).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            ..TrainConfig::default()
        };
        train(&model, &training_set(8), &cfg).unwrap().0
    })
}

pub fn content_image(size: usize, seed: u64) -> Image {
    make_texture_dataset(CONTENT_DOMAIN.parse().unwrap(), 1, size, seed).unwrap().remove(0)
}

/// `n` images sharing one style domain and palette.
pub fn style_images(domain: &str, n: usize, size: usize, seed: u64) -> Vec<Image> {
    make_texture_dataset(domain.parse().unwrap(), n, size, seed).unwrap()
}
