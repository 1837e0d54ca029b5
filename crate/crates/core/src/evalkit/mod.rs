//! Proxy metrics, feature PCA, the shuffle-axis ablation and sweeps.

mod ablation;
mod pca;
mod sweep;

use gradcore::{l1_mean, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::features::{AttentionTap, Stream};
use crate::image::Image;

pub use ablation::{run_axis_ablation, AxisAblation};
pub use pca::{morans_i, pca, pca_value_features, shuffle_style_values, Pca, PcaProjection};
pub use sweep::{pareto_flags, pareto_oracle, run_sweep, to_csv, SweepCell, SweepFailure, SweepOutcome, SweepRow, CSV_HEADER};

pub const HIST_BINS: usize = 32;

/// Where the feature-space metrics look.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub blocks: Vec<usize>,
    /// Training-schedule timestep at which clean images are encoded.
    pub train_t: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            blocks: (10..=15).collect(),
            train_t: 0,
        }
    }
}

/// Style and content distances of one output. Lower is closer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub style_gram: f64,
    pub style_hist: f64,
    pub content_edge: f64,
    pub content_query: f64,
}

/// `FᵀF / s` of a `[h, s, d]` tensor viewed as `s` tokens of width `h·d`.
pub fn gram(v: &Tensor<f32>) -> Tensor<f64> {
    let (h, s, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let w = h * d;
    let x = v.data();
    let mut g = vec![0f64; w * w];
    let mut row = vec![0f64; w];
    for j in 0..s {
        for hi in 0..h {
            for di in 0..d {
                row[hi * d + di] = x[(hi * s + j) * d + di] as f64;
            }
        }
        for a in 0..w {
            for b in 0..w {
                g[a * w + b] += row[a] * row[b];
            }
        }
    }
    g.iter_mut().for_each(|x| *x /= s as f64);
    Tensor::new(vec![w, w], g).expect("finite gram")
}

/// Normalized per-channel histograms, `[3][HIST_BINS]`.
pub fn color_histogram(img: &Image) -> Vec<Vec<f64>> {
    let plane = img.width() * img.height();
    img.tensor()
        .data()
        .chunks(plane)
        .map(|ch| {
            let mut h = vec![0f64; HIST_BINS];
            for &v in ch {
                let b = (((v as f64 + 1.0) / 2.0 * HIST_BINS as f64).floor() as isize).clamp(0, HIST_BINS as isize - 1);
                h[b as usize] += 1.0;
            }
            h.iter_mut().for_each(|x| *x /= plane as f64);
            h
        })
        .collect()
}

/// Mean over channels of the L1 distance between normalized histograms.
pub fn histogram_distance(a: &Image, b: &Image) -> f64 {
    let (ha, hb) = (color_histogram(a), color_histogram(b));
    ha.iter()
        .zip(&hb)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum::<f64>()
        / ha.len() as f64
}

/// Sobel gradient magnitude of the luma channel, replicate padding.
pub fn sobel_magnitude(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let gray: Vec<f64> = (0..w * h)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            0.299 * img.pixel(0, y, x) as f64 + 0.587 * img.pixel(1, y, x) as f64 + 0.114 * img.pixel(2, y, x) as f64
        })
        .collect();
    let at = |y: isize, x: isize| gray[(y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize];
    (0..w * h)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            (gx * gx + gy * gy).sqrt()
        })
        .collect()
}

/// Normalized cross-correlation. Constant maps correlate 1 with an equal
/// map and 0 otherwise.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// `1 − NCC` of Sobel edge maps, in `[0, 2]`.
pub fn edge_distance(a: &Image, b: &Image) -> f64 {
    1.0 - ncc(&sobel_magnitude(a), &sobel_magnitude(b))
}

fn features(model: &DenoiserModel, img: &Image, spec: &MetricSpec) -> Result<Vec<AttentionTap<f32>>> {
    model.extract_taps(img.tensor(), spec.train_t, &spec.blocks, 0, Stream::Output)
}

pub fn compute_metrics(model: &DenoiserModel, output: &Image, content: &Image, styles: &[Image]) -> Result<MetricReport> {
    compute_metrics_with(model, output, content, styles, &MetricSpec::default())
}

pub fn compute_metrics_with(
    model: &DenoiserModel,
    output: &Image,
    content: &Image,
    styles: &[Image],
    spec: &MetricSpec,
) -> Result<MetricReport> {
    if styles.is_empty() {
        return Err(Error::config("metrics need at least one style image"));
    }
    let shape = output.tensor().shape();
    if std::iter::once(content).chain(styles).any(|im| im.tensor().shape() != shape) {
        return Err(Error::Image("metric inputs differ in size".into()));
    }
    let out_f = features(model, output, spec)?;
    let con_f = features(model, content, spec)?;
    let nb = spec.blocks.len() as f64;

    let mut style_gram = 0.0;
    for s in styles {
        let sf = features(model, s, spec)?;
        for (o, t) in out_f.iter().zip(&sf) {
            style_gram += l1_mean(&gram(&o.v), &gram(&t.v))?;
        }
    }
    style_gram /= nb * styles.len() as f64;

    let style_hist = styles.iter().map(|s| histogram_distance(output, s)).sum::<f64>() / styles.len() as f64;

    let mut content_query = 0.0;
    for (o, c) in out_f.iter().zip(&con_f) {
        content_query += l1_mean(&o.q, &c.q)? as f64;
    }
    content_query /= nb;

    Ok(MetricReport {
        style_gram,
        style_hist,
        content_edge: edge_distance(output, content),
        content_query,
    })
}
