use crate::error::Result;
use crate::image::{Image, RgbRaster};
use crate::losses::ShuffleAxis;
use crate::transfer::{MethodRegistry, TransferConfig, TransferContext, TransferResult};

use super::{compute_metrics, MetricReport};

/// One full-strength shuffle run per axis.
#[derive(Debug, Clone)]
pub struct AxisAblation {
    pub runs: Vec<(ShuffleAxis, TransferResult, MetricReport)>,
    /// Content, style, then the `h`, `s` and `d` outputs.
    pub grid: RgbRaster,
}

impl AxisAblation {
    pub fn metrics(&self, axis: ShuffleAxis) -> Option<&MetricReport> {
        self.runs.iter().find(|(a, ..)| *a == axis).map(|(_, _, m)| m)
    }
}

/// Shuffle along each axis in turn with `α = 1` over the whole trajectory.
pub fn run_axis_ablation(ctx: &TransferContext<'_>, content: &Image, style: &Image, base: &TransferConfig) -> Result<AxisAblation> {
    let registry = MethodRegistry::default();
    let styles = std::slice::from_ref(style);
    let mut runs = Vec::with_capacity(3);
    for axis in ShuffleAxis::ALL {
        let config = TransferConfig {
            method: "vshuffle".into(),
            alpha: 1.0,
            t1: 0.0,
            t2: 1.0,
            shuffle_axis: axis,
            ..base.clone()
        };
        let result = registry.run(ctx, content, styles, &config)?;
        let metrics = compute_metrics(ctx.model, &result.image, content, styles)?;
        runs.push((axis, result, metrics));
    }
    let tiles: Vec<RgbRaster> = [content, style]
        .into_iter()
        .chain(runs.iter().map(|(_, r, _)| &r.image))
        .map(RgbRaster::from_image)
        .collect();
    Ok(AxisAblation {
        runs,
        grid: RgbRaster::hstack(&tiles, 2),
    })
}
