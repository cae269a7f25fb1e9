//! In-memory RGB images with f64 channels, bilinear crop-resize, PNG io.
//!
//! Channel values live in [0, 1]. Crops are resized aspect-preserving into a
//! square canvas with black padding, which keeps the mean color of a crop
//! pointing in the same direction after normalization.

use crate::error::{Error, Result};
use crate::geometry::{BBox, ImageSize};
use std::path::Path;

/// Row-major interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl Image {
    /// Solid-color image.
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Result<Self> {
        let size = ImageSize::new(width, height)?;
        let n = (size.width * size.height) as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Ok(Self { width, height, data })
    }

    pub fn size(&self) -> ImageSize {
        ImageSize {
            width: self.width,
            height: self.height,
        }
    }

    /// Raw interleaved RGB samples, row-major.
    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        3 * (y as usize * self.width as usize + x as usize)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous image coordinates. Pixel centers sit at
    /// `(i + 0.5, j + 0.5)`; coordinates outside the grid clamp to the edge.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let u = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as u32;
        let y0 = v.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;

        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Crop `region` and resize into a `side x side` square. The crop keeps
    /// its aspect ratio; the short axis is centered and padded with black.
    /// The region must lie fully inside the image.
    pub fn crop_resize(&self, region: &BBox, side: u32) -> Result<Image> {
        if side == 0 {
            return Err(Error::field("side", "must be >= 1"));
        }
        if !region.inside(self.size()) {
            return Err(Error::OutsideImage(
                region.x1,
                region.y1,
                region.x2,
                region.y2,
                self.width,
                self.height,
            ));
        }
        let scale = side as f64 / region.width().max(region.height());
        let content_w = region.width() * scale;
        let content_h = region.height() * scale;
        let pad_x = (side as f64 - content_w) / 2.0;
        let pad_y = (side as f64 - content_h) / 2.0;

        let mut out = Image::filled(side, side, [0.0; 3])?;
        for oy in 0..side {
            for ox in 0..side {
                let px = ox as f64 + 0.5;
                let py = oy as f64 + 0.5;
                if px < pad_x || px > pad_x + content_w || py < pad_y || py > pad_y + content_h {
                    continue; // stays black
                }
                let sx = region.x1 + (px - pad_x) / scale;
                let sy = region.y1 + (py - pad_y) / scale;
                out.set(ox, oy, self.sample(sx, sy));
            }
        }
        Ok(out)
    }

    /// Mean color over all pixels.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.width * self.height) as f64;
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            acc[0] += px[0];
            acc[1] += px[1];
            acc[2] += px[2];
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    /// Mean color restricted to a box (by pixel centers inside it).
    pub fn mean_rgb_in(&self, region: &BBox) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let cx = x as f64 + 0.5;
                let cy = y as f64 + 0.5;
                if cx >= region.x1 && cx < region.x2 && cy >= region.y1 && cy < region.y2 {
                    let p = self.get(x, y);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                    n += 1.0;
                }
            }
        }
        if n == 0.0 {
            return [0.0; 3];
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path)
            .map_err(|e| Error::field("png", format!("{path:?}: {e}")))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::field("png", format!("{path:?}: {e}")))?
            .to_rgb8();
        let (width, height) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Image { width, height, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> Image {
        // 2x2: white at (0,0) and (1,1), black elsewhere.
        let mut img = Image::filled(2, 2, [0.0; 3]).unwrap();
        img.set(0, 0, [1.0; 3]);
        img.set(1, 1, [1.0; 3]);
        img
    }

    #[test]
    fn sample_at_centers_is_exact() {
        let img = checkerboard();
        assert_eq!(img.sample(0.5, 0.5), [1.0; 3]);
        assert_eq!(img.sample(1.5, 0.5), [0.0; 3]);
        assert_eq!(img.sample(1.5, 1.5), [1.0; 3]);
    }

    #[test]
    fn sample_midpoints_hand_computed() {
        let img = checkerboard();
        // Midway between the two top pixels: 0.5 * (1 + 0).
        assert_eq!(img.sample(1.0, 0.5), [0.5; 3]);
        // Image center mixes all four pixels equally: (1+0+0+1)/4.
        assert_eq!(img.sample(1.0, 1.0), [0.5; 3]);
        // Quarter point: fx = 0.25, fy = 0 -> 0.75*1 + 0.25*0.
        assert_eq!(img.sample(0.75, 0.5), [0.75; 3]);
    }

    #[test]
    fn sample_clamps_at_border() {
        let img = checkerboard();
        assert_eq!(img.sample(-5.0, -5.0), img.get(0, 0));
        assert_eq!(img.sample(100.0, 100.0), img.get(1, 1));
    }

    #[test]
    fn identity_crop_is_bit_exact() {
        let mut img = Image::filled(8, 8, [0.0; 3]).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                img.set(x, y, [x as f64 / 7.0, y as f64 / 7.0, 0.25]);
            }
        }
        let full = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let out = img.crop_resize(&full, 8).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn upscale_of_uniform_region_is_uniform() {
        let img = Image::filled(10, 10, [0.2, 0.4, 0.6]).unwrap();
        let region = BBox::new(2.0, 2.0, 6.0, 6.0).unwrap();
        let out = img.crop_resize(&region, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let p = out.get(x, y);
                for c in 0..3 {
                    assert!((p[c] - [0.2, 0.4, 0.6][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wide_crop_pads_top_and_bottom() {
        let img = Image::filled(20, 20, [1.0; 3]).unwrap();
        // 2:1 crop into a 8x8 canvas: content is 8 wide x 4 tall, centered,
        // so rows 0-1 and 6-7 stay black.
        let region = BBox::new(0.0, 0.0, 16.0, 8.0).unwrap();
        let out = img.crop_resize(&region, 8).unwrap();
        for x in 0..8 {
            assert_eq!(out.get(x, 0), [0.0; 3]);
            assert_eq!(out.get(x, 7), [0.0; 3]);
            assert_eq!(out.get(x, 3), [1.0; 3]);
        }
        // Padding dilutes the mean by the content fraction (1/2) but keeps
        // its direction.
        let m = out.mean_rgb();
        for c in 0..3 {
            assert!((m[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_requires_region_inside() {
        let img = Image::filled(10, 10, [0.0; 3]).unwrap();
        let outside = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        assert!(matches!(
            img.crop_resize(&outside, 4),
            Err(Error::OutsideImage(..))
        ));
    }

    #[test]
    fn mean_rgb_in_counts_pixel_centers() {
        let mut img = Image::filled(4, 4, [0.0; 3]).unwrap();
        img.set(1, 1, [1.0, 0.0, 0.0]);
        img.set(2, 1, [1.0, 0.0, 0.0]);
        // Box covering exactly the middle 2x2 block of pixel centers.
        let region = BBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        let m = img.mean_rgb_in(&region);
        assert!((m[0] - 0.5).abs() < 1e-12);
        assert_eq!(m[1], 0.0);
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut img = Image::filled(5, 3, [0.0; 3]).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [x as f64 / 4.0, y as f64 / 2.0, 0.5]);
            }
        }
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for y in 0..3 {
            for x in 0..5 {
                for c in 0..3 {
                    // u8 quantization error at most 1/510 per channel.
                    assert!((back.get(x, y)[c] - img.get(x, y)[c]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
        }
    }
}
