//! Procedural texture domains used as training data and as content/style
//! images.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureKind {
    Stripes,
    Checker,
    NoisePalette,
    Blobs,
    /// One constant color per image.
    Flat,
    /// Rectangles and disks on a plain background; used as content.
    Shapes,
}

impl TextureKind {
    pub const ALL: [TextureKind; 6] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::NoisePalette,
        TextureKind::Blobs,
        TextureKind::Flat,
        TextureKind::Shapes,
    ];

    fn palette_size(self) -> usize {
        match self {
            TextureKind::Stripes | TextureKind::Checker => 2,
            TextureKind::Blobs => 3,
            TextureKind::NoisePalette | TextureKind::Shapes => 4,
            TextureKind::Flat => 8,
        }
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::NoisePalette => "noise-palette",
            TextureKind::Blobs => "blobs",
            TextureKind::Flat => "flat",
            TextureKind::Shapes => "shapes",
        })
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::UnknownTexture(s.to_string()))
    }
}

const NAMED_HUES: [(&str, f64); 8] = [
    ("red", 0.0),
    ("orange", 30.0),
    ("yellow", 60.0),
    ("green", 120.0),
    ("cyan", 180.0),
    ("blue", 220.0),
    ("purple", 275.0),
    ("magenta", 310.0),
];

/// A style domain: texture kind plus an optional fixed palette hue.
///
/// Parsed from names such as `"stripes"` or `"blue-blobs"`. Without a hue
/// the palette hue is drawn from the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureDomain {
    pub kind: TextureKind,
    pub hue: Option<f64>,
}

impl FromStr for TextureDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(kind) = s.parse() {
            return Ok(TextureDomain { kind, hue: None });
        }
        let (color, rest) = s.split_once('-').ok_or_else(|| Error::UnknownTexture(s.to_string()))?;
        let hue = NAMED_HUES
            .iter()
            .find(|(n, _)| *n == color)
            .map(|(_, h)| *h)
            .ok_or_else(|| Error::UnknownTexture(s.to_string()))?;
        Ok(TextureDomain {
            kind: rest.parse()?,
            hue: Some(hue),
        })
    }
}

impl fmt::Display for TextureDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hue.and_then(|h| NAMED_HUES.iter().find(|(_, nh)| *nh == h)) {
            Some((name, _)) => write!(f, "{name}-{}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Hue in degrees of an 8-bit color, `None` for grays.
pub fn rgb_hue(rgb: [u8; 3]) -> Option<f64> {
    let [r, g, b] = rgb.map(|u| u as f64 / 255.0);
    let max = r.max(g).max(b);
    let delta = max - r.min(g).min(b);
    if delta == 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    Some(60.0 * h)
}

/// Circular mean hue of an image's chromatic pixels.
pub fn mean_hue(img: &Image) -> Option<f64> {
    let (mut sx, mut sy) = (0.0, 0.0);
    for px in img.to_rgb8().chunks(3) {
        if let Some(h) = rgb_hue([px[0], px[1], px[2]]) {
            sx += (h * PI / 180.0).cos();
            sy += (h * PI / 180.0).sin();
        }
    }
    (sx != 0.0 || sy != 0.0).then(|| sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

fn palette(domain: TextureDomain, rng: &mut ChaCha8Rng) -> Vec<[u8; 3]> {
    let base = domain.hue.unwrap_or_else(|| rng.gen_range(0.0..360.0));
    let k = domain.kind.palette_size();
    (0..k)
        .map(|i| {
            let hue = match domain.kind {
                TextureKind::Flat if domain.hue.is_none() => base + 360.0 * i as f64 / k as f64,
                _ => base + rng.gen_range(-10.0..10.0),
            };
            let sat = rng.gen_range(0.45..0.9);
            let val = 0.3 + 0.65 * (i % 4) as f64 / 3.0 + rng.gen_range(-0.05..0.05);
            hsv_to_rgb(hue, sat, val.clamp(0.2, 1.0))
        })
        .collect()
}

fn render(kind: TextureKind, size: usize, pal: &[[u8; 3]], index: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut idx = vec![0usize; size * size];
    let sz = size as f64;
    match kind {
        TextureKind::Stripes => {
            let theta = rng.gen_range(0.0..PI);
            let period = rng.gen_range(0.15..0.35) * sz;
            let phase = rng.gen_range(0.0..period);
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * theta.cos() + y as f64 * theta.sin() + phase;
                    idx[y * size + x] = ((u / (period / 2.0)).floor() as i64).rem_euclid(2) as usize;
                }
            }
        }
        TextureKind::Checker => {
            let cell = (rng.gen_range(0.1..0.25) * sz).max(1.0) as usize;
            let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            for y in 0..size {
                for x in 0..size {
                    idx[y * size + x] = ((x + ox) / cell + (y + oy) / cell) % 2;
                }
            }
        }
        TextureKind::NoisePalette => {
            let g = (size / 4).max(1);
            let cells: Vec<usize> = (0..g * g).map(|_| rng.gen_range(0..pal.len())).collect();
            for y in 0..size {
                for x in 0..size {
                    idx[y * size + x] = cells[(y * g / size) * g + x * g / size];
                }
            }
        }
        TextureKind::Blobs => {
            for _ in 0..rng.gen_range(3..7) {
                let (cx, cy) = (rng.gen_range(0.0..sz), rng.gen_range(0.0..sz));
                let r = rng.gen_range(0.1..0.25) * sz;
                let color = rng.gen_range(1..pal.len());
                paint(&mut idx, size, color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
            }
        }
        TextureKind::Flat => idx.fill(index % pal.len()),
        TextureKind::Shapes => {
            for s in 0..rng.gen_range(2..5) {
                let color = 1 + s % (pal.len() - 1);
                let (cx, cy) = (rng.gen_range(0.2..0.8) * sz, rng.gen_range(0.2..0.8) * sz);
                let (a, b) = (rng.gen_range(0.1..0.3) * sz, rng.gen_range(0.1..0.3) * sz);
                if rng.gen_bool(0.5) {
                    paint(&mut idx, size, color, |x, y| (x - cx).abs() <= a && (y - cy).abs() <= b);
                } else {
                    paint(&mut idx, size, color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= a * a);
                }
            }
        }
    }
    idx.iter().flat_map(|&i| pal[i]).collect()
}

fn paint(idx: &mut [usize], size: usize, color: usize, inside: impl Fn(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                idx[y * size + x] = color;
            }
        }
    }
}

/// `count` images of one domain. The palette depends only on `seed`, so all
/// images of one call share color statistics; layouts vary per image.
pub fn make_texture_dataset(domain: TextureDomain, count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(Error::config("texture dataset needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = palette(domain, &mut rng);
    (0..count)
        .map(|i| {
            let mut layout = ChaCha8Rng::seed_from_u64(seed);
            layout.set_stream(1 + i as u64);
            let bytes = render(domain.kind, size, &pal, i, &mut layout);
            Image::from_rgb8(size, size, &bytes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn names_parse() {
        assert_eq!(
            "blue-blobs".parse::<TextureDomain>().unwrap(),
            TextureDomain {
                kind: TextureKind::Blobs,
                hue: Some(220.0)
            }
        );
        assert_eq!("noise-palette".parse::<TextureDomain>().unwrap().kind, TextureKind::NoisePalette);
        assert!(matches!("plaid".parse::<TextureDomain>(), Err(Error::UnknownTexture(_))));
        assert!("blue-plaid".parse::<TextureDomain>().is_err());
        assert_eq!("blue-blobs".parse::<TextureDomain>().unwrap().to_string(), "blue-blobs");
    }

    #[test]
    fn stripes_use_exactly_two_palette_colors() {
        let imgs = make_texture_dataset("stripes".parse().unwrap(), 4, 32, 3).unwrap();
        let colors: BTreeSet<Vec<u8>> = imgs
            .iter()
            .flat_map(|im| im.to_rgb8().chunks(3).map(<[u8]>::to_vec).collect::<Vec<_>>())
            .collect();
        assert_eq!(colors.len(), 2);
    }

    #[test]
    fn same_seed_same_images() {
        for kind in TextureKind::ALL {
            let d = TextureDomain { kind, hue: None };
            assert_eq!(make_texture_dataset(d, 3, 16, 9).unwrap(), make_texture_dataset(d, 3, 16, 9).unwrap());
        }
        assert!(make_texture_dataset("checker".parse().unwrap(), 0, 16, 0).is_err());
    }

    #[test]
    fn blue_blobs_stay_near_palette_hue() {
        for seed in 0..5 {
            for img in make_texture_dataset("blue-blobs".parse().unwrap(), 6, 32, seed).unwrap() {
                let h = mean_hue(&img).unwrap();
                let diff = ((h - 220.0 + 180.0).rem_euclid(360.0) - 180.0).abs();
                assert!(diff <= 15.0, "hue {h}");
            }
        }
    }

    #[test]
    fn flat_images_are_constant() {
        let imgs = make_texture_dataset("flat".parse().unwrap(), 8, 8, 0).unwrap();
        let firsts: BTreeSet<Vec<u8>> = imgs.iter().map(|im| im.to_rgb8()[..3].to_vec()).collect();
        assert_eq!(firsts.len(), 8);
        for im in imgs {
            let b = im.to_rgb8();
            assert!(b.chunks(3).all(|p| p == &b[..3]));
        }
    }

    #[test]
    fn hue_round_trip() {
        let h = rgb_hue(hsv_to_rgb(220.0, 0.8, 0.8)).unwrap();
        assert!((h - 220.0).abs() < 1.0);
        assert_eq!(rgb_hue([9, 9, 9]), None);
    }
}
