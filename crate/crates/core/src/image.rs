//! RGB images in the normalized `[-1, 1]` pixel space the denoiser works in.

use std::path::Path;

use gradcore::Tensor;

use crate::error::{Error, Result};

/// A 3-channel image stored channel-first as `[3, H, W]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor<f32>,
}

/// Map an 8-bit channel value onto `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_u8`] with clamping and rounding.
pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Image {
    pub fn from_tensor(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.ndim() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::Image(format!("expected [3, H, W], got {:?}", pixels.shape())));
        }
        Ok(Image { pixels })
    }

    /// Interleaved RGB bytes, row-major.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{width}x{height} RGB needs {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let plane = width * height;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in bytes.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = normalize_u8(px[c]);
            }
        }
        Self::from_tensor(Tensor::new(vec![3, height, width], data)?)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width() * self.height();
        let d = self.pixels.data();
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| denormalize(d[c * plane + i])))
            .collect()
    }

    /// Snap every channel onto the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let q = self
            .pixels
            .map(|v| normalize_u8(denormalize(v)))
            .expect("quantized values are finite");
        Image { pixels: q }
    }

    /// Clamp to the valid range.
    pub fn clamped(&self) -> Self {
        Image {
            pixels: self.pixels.map(|v| v.clamp(-1.0, 1.0)).expect("clamped values are finite"),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.pixels
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_rgb8_png(path, self.width(), self.height(), &self.to_rgb8())
    }

    /// Stable 64-bit fingerprint of the pixel bits, used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over shape and value bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &d in self.pixels.shape() {
            eat(d as u64);
        }
        for v in self.pixels.data() {
            eat(v.to_bits() as u64);
        }
        h
    }
}

pub fn write_rgb8_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    image::save_buffer(path, bytes, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Plain 8-bit RGB raster used for visualizations.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize) -> Self {
        RgbRaster {
            width,
            height,
            bytes: vec![0; width * height * 3],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        RgbRaster {
            width: img.width(),
            height: img.height(),
            bytes: img.to_rgb8(),
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.bytes[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.bytes[o], self.bytes[o + 1], self.bytes[o + 2]]
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn upscaled(&self, factor: usize) -> Self {
        let mut out = RgbRaster::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.put(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    /// Tiles laid left to right, top aligned, separated by `gap` pixels.
    pub fn hstack(tiles: &[RgbRaster], gap: usize) -> Self {
        let height = tiles.iter().map(|t| t.height).max().unwrap_or(0);
        let width = tiles.iter().map(|t| t.width).sum::<usize>() + gap * tiles.len().saturating_sub(1);
        let mut out = RgbRaster::new(width.max(1), height.max(1));
        out.bytes.fill(255);
        let mut x0 = 0;
        for t in tiles {
            for y in 0..t.height {
                for x in 0..t.width {
                    out.put(x0 + x, y, t.get(x, y));
                }
            }
            x0 += t.width + gap;
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_rgb8_png(path, self.width, self.height, &self.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = Image::from_rgb8(3, 2, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
        assert_eq!(img.quantized(), img);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(denormalize(5.0), 255);
        assert_eq!(denormalize(-5.0), 0);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let bytes: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 11 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 4, &bytes).unwrap();
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);
    }
}
