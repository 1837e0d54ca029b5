use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::features::{AttentionTap, FeatureCache, Stream};
use crate::image::RgbRaster;
use crate::losses::{shuffle_values, ShuffleSpec};

/// Principal axes of a row-sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit vectors; the largest-magnitude loading of each is positive.
    /// Axes beyond the numerical rank are all zeros.
    pub components: Vec<Vec<f64>>,
    /// Every eigenvalue of the covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Explained-variance ratio of each of the `k` components.
    pub ratios: Vec<f64>,
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

/// PCA of `rows` (samples × features) on the population covariance.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if n == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::config("pca needs a non-empty rectangular sample matrix"));
    }
    if k == 0 || k > w {
        return Err(Error::config(format!("cannot take {k} components of {w} features")));
    }
    let mean: Vec<f64> = (0..w).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, w, |i, j| rows[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let trace: f64 = eigenvalues.iter().sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);
    let components = order[..k]
        .iter()
        .zip(&eigenvalues)
        .map(|(&i, &lambda)| {
            if lambda <= floor {
                return vec![0.0; w];
            }
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = c
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if v.abs() > c[best].abs() { j } else { best });
            if c[lead] < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    let ratios = eigenvalues[..k]
        .iter()
        .map(|l| if trace > 0.0 { l / trace } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        ratios,
    })
}

/// Moran's I of a `side × side` grid under rook adjacency. Constant grids
/// give 0.
pub fn morans_i(values: &[f64], side: usize) -> f64 {
    let n = values.len();
    assert_eq!(n, side * side, "grid is not square");
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 || side < 2 {
        return 0.0;
    }
    let (mut num, mut weight) = (0.0, 0.0);
    for y in 0..side {
        for x in 0..side {
            let a = values[y * side + x] - mean;
            if x + 1 < side {
                num += 2.0 * a * (values[y * side + x + 1] - mean);
                weight += 2.0;
            }
            if y + 1 < side {
                num += 2.0 * a * (values[(y + 1) * side + x] - mean);
                weight += 2.0;
            }
        }
    }
    (n as f64 / weight) * num / denom
}

/// Style value tokens of one `(t, block)` projected onto their top
/// components and painted as RGB tiles, one per style image.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub pca: Pca,
    /// `[n·s][k]` token scores, image-major.
    pub scores: Vec<Vec<f64>>,
    pub n_images: usize,
    pub side: usize,
    /// Mean Moran's I over images and components.
    pub autocorrelation: f64,
    pub raster: RgbRaster,
}

fn token_rows(tap: &AttentionTap<f32>) -> Vec<Vec<f64>> {
    let (h, s, d) = tap.dims();
    let v = tap.v.data();
    (0..s)
        .map(|j| {
            (0..h)
                .flat_map(|hi| (0..d).map(move |di| v[(hi * s + j) * d + di] as f64))
                .collect()
        })
        .collect()
}

pub fn pca_value_features(cache: &FeatureCache<f32>, t: usize, block: usize, k: usize) -> Result<PcaProjection> {
    let taps = cache
        .style_taps(t, block)
        .ok_or_else(|| Error::config(format!("no style taps for t = {t}, block {block}")))?;
    if taps.is_empty() {
        return Err(Error::config("feature cache holds no style images"));
    }
    let s = taps[0].dims().1;
    let side = (s as f64).sqrt().round() as usize;
    if side * side != s {
        return Err(Error::config(format!("{s} tokens do not form a square grid")));
    }
    let rows: Vec<Vec<f64>> = taps.iter().flat_map(|tap| token_rows(tap)).collect();
    let pca = pca(&rows, k)?;
    let scores: Vec<Vec<f64>> = rows.iter().map(|r| pca.project(r)).collect();

    let mut total = 0.0;
    for img in scores.chunks(s) {
        for c in 0..k {
            let grid: Vec<f64> = img.iter().map(|r| r[c]).collect();
            total += morans_i(&grid, side);
        }
    }
    let autocorrelation = total / (taps.len() * k) as f64;

    let ranges: Vec<(f64, f64)> = (0..k)
        .map(|c| {
            scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])))
        })
        .collect();
    let tiles: Vec<RgbRaster> = scores
        .chunks(s)
        .map(|img| {
            let mut tile = RgbRaster::new(side, side);
            for (j, r) in img.iter().enumerate() {
                let mut rgb = [0u8; 3];
                for (c, px) in rgb.iter_mut().enumerate().take(k) {
                    let (lo, hi) = ranges[c];
                    if hi > lo {
                        *px = ((r[c] - lo) / (hi - lo) * 255.0).round() as u8;
                    }
                }
                tile.put(j % side, j / side, rgb);
            }
            tile
        })
        .collect();

    Ok(PcaProjection {
        pca,
        scores,
        n_images: taps.len(),
        side,
        autocorrelation,
        raster: RgbRaster::hstack(&tiles, 1),
    })
}

/// Copy of `cache` with every style tap's values shuffled as in the loss,
/// one draw per `(t, block)`.
pub fn shuffle_style_values(cache: &FeatureCache<f32>, spec: &ShuffleSpec, draw_index: u64) -> Result<FeatureCache<f32>> {
    let mut out = FeatureCache::new(cache.n_styles());
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for tap in cache.iter() {
        match tap.stream {
            Stream::Style(_) => {
                if !keys.contains(&(tap.timestep, tap.block)) {
                    keys.push((tap.timestep, tap.block));
                }
            }
            _ => out.insert(tap.clone())?,
        }
    }
    for (t, block) in keys {
        let taps = cache
            .style_taps(t, block)
            .ok_or_else(|| Error::config(format!("incomplete style taps at t = {t}, block {block}")))?;
        let (h, s, d) = taps[0].dims();
        let mut data = Vec::with_capacity(taps.len() * h * s * d);
        for tap in &taps {
            data.extend_from_slice(tap.v.data());
        }
        let stacked = gradcore::Tensor::new(vec![taps.len(), h, s, d], data)?;
        let (shuffled, _) = shuffle_values(&stacked, spec, draw_index)?;
        for (i, tap) in taps.iter().enumerate() {
            let per = h * s * d;
            let v = gradcore::Tensor::new(vec![h, s, d], shuffled.data()[i * per..(i + 1) * per].to_vec())?;
            out.insert(AttentionTap { v, ..(*tap).clone() })?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gradcore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rows(n: usize, w: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn recovers_a_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 0.01 * ((i * 7) % 5) as f64]).collect();
        let p = pca(&rows, 1).unwrap();
        assert!((p.components[0][0] - 1.0).abs() < 1e-4);
        assert!(p.ratios[0] > 0.99);
    }

    #[test]
    fn rank_deficient_components_are_zero() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let p = pca(&rows, 3).unwrap();
        assert!(p.components[1].iter().chain(&p.components[2]).all(|&v| v == 0.0));
        assert!((p.ratios[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sign_and_order_are_stable_under_row_reordering() {
        let rows = rand_rows(40, 6, 3);
        let mut rev = rows.clone();
        rev.reverse();
        let (a, b) = (pca(&rows, 3).unwrap(), pca(&rev, 3).unwrap());
        for (x, y) in a.components.iter().zip(&b.components) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn morans_i_extremes() {
        let smooth: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        assert!(morans_i(&smooth, 4) > 0.5);
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        assert!((morans_i(&checker, 4) + 1.0).abs() < 1e-12);
        assert_eq!(morans_i(&[3.0; 9], 3), 0.0);
    }

    #[test]
    fn shuffling_destroys_spatial_structure() {
        let (h, s, d) = (1, 64, 2);
        let v = Tensor::<f32>::from_fn(&[h, s, d], |i| {
            let j = i / d;
            if i % d == 0 {
                (j % 8) as f32
            } else {
                (j / 8) as f32
            }
        });
        let mut cache = FeatureCache::new(1);
        cache
            .insert(AttentionTap {
                block: 0,
                timestep: 1,
                stream: Stream::Style(0),
                q: v.clone(),
                k: v.clone(),
                v,
            })
            .unwrap();
        let before = pca_value_features(&cache, 1, 0, 2).unwrap();
        let shuffled = shuffle_style_values(&cache, &ShuffleSpec::default(), 0).unwrap();
        let after = pca_value_features(&shuffled, 1, 0, 2).unwrap();
        assert!(before.autocorrelation > 0.8);
        assert!(after.autocorrelation.abs() < 0.3);
        for (x, y) in before.pca.eigenvalues.iter().zip(&after.pca.eigenvalues) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(before.raster.width, 8);
    }
}
