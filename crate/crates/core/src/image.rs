//! Single-channel images and the geometric transforms shared by training
//! augmentation and test-time views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grayscale image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

/// An image with its grade label and identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub label: usize,
    pub id: String,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Input(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    /// Bilinear sample at fractional `(y, x)`; outside pixels read as 0.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        let px = |r: i64, c: i64| -> f64 {
            if r < 0 || c < 0 || r >= self.height as i64 || c >= self.width as i64 {
                0.0
            } else {
                f64::from(self.get(r as usize, c as usize))
            }
        };
        let top = px(y0, x0) * (1.0 - fx) + if fx > 0.0 { px(y0, x0 + 1) * fx } else { 0.0 };
        if fy == 0.0 {
            return top;
        }
        let bottom = px(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { px(y0 + 1, x0 + 1) * fx } else { 0.0 };
        top * (1.0 - fy) + bottom * fy
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            out.pixels[r * self.width..(r + 1) * self.width].reverse();
        }
        out
    }

    /// Rotation by `degrees` about the image centre with bilinear
    /// interpolation and zero padding. Positive angles turn the content
    /// counter-clockwise as displayed.
    pub fn rotate(&self, degrees: f64) -> Image {
        if degrees == 0.0 {
            return self.clone();
        }
        let (s, c) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let mut out = Image::filled(self.height, self.width, 0.0);
        for r in 0..self.height {
            for col in 0..self.width {
                let dy = r as f64 - cy;
                let dx = col as f64 - cx;
                let sx = cx + c * dx - s * dy;
                let sy = cy + s * dx + c * dy;
                out.set(r, col, self.sample_bilinear(sy, sx).clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    /// Crops the window `top, left, crop_h, crop_w` (fractional pixels)
    /// and resamples it bilinearly back to the full image size.
    pub fn resized_crop(&self, top: f64, left: f64, crop_h: f64, crop_w: f64) -> Image {
        if top == 0.0 && left == 0.0 && crop_h == self.height as f64 && crop_w == self.width as f64 {
            return self.clone();
        }
        let sy = crop_h / self.height as f64;
        let sx = crop_w / self.width as f64;
        let mut out = Image::filled(self.height, self.width, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let y = top + (r as f64 + 0.5) * sy - 0.5;
                let x = left + (c as f64 + 0.5) * sx - 0.5;
                let y = y.clamp(0.0, self.height as f64 - 1.0);
                let x = x.clamp(0.0, self.width as f64 - 1.0);
                out.set(r, c, self.sample_bilinear(y, x).clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    /// True when the image equals its own horizontal mirror.
    pub fn is_mirror_symmetric(&self) -> bool {
        *self == self.hflip()
    }

    /// Binary 8-bit PGM (P5), pixels quantized by rounding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// Reads binary PGM with maxval ≤ 255; comments are allowed in the header.
    pub fn from_pgm(bytes: &[u8]) -> Result<Image> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5 magic, got `{}`", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let data = bytes.get(pos + 1..).unwrap_or_default();
        if data.len() != width * height {
            return Err(Error::Format(format!(
                "PGM raster has {} bytes, expected {}",
                data.len(),
                width * height
            )));
        }
        let scale = maxval as f32;
        Image::new(height, width, data.iter().map(|&b| f32::from(b) / scale).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        let px = (0..20).map(|i| i as f32 / 19.0).collect();
        Image::new(4, 5, px).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let img = ramp();
        let back = Image::from_pgm(&img.to_pgm()).unwrap();
        assert_eq!((back.height(), back.width()), (4, 5));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
        let quantized = back.clone();
        assert_eq!(Image::from_pgm(&quantized.to_pgm()).unwrap(), quantized);
        let commented = b"P5\n# note\n2 1\n255\n\x00\xff";
        assert_eq!(Image::from_pgm(commented).unwrap().pixels(), &[0.0, 1.0]);
        assert!(matches!(Image::from_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(Image::from_pgm(b"P5\n2 2\n255\n\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn pixel_count_is_checked() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp();
        assert_eq!(img.hflip().hflip(), img);
        assert_ne!(img.hflip(), img);
    }

    #[test]
    fn zero_rotation_and_full_crop_are_identity() {
        let img = ramp();
        assert_eq!(img.rotate(0.0), img);
        assert_eq!(img.resized_crop(0.0, 0.0, 4.0, 5.0), img);
    }

    #[test]
    fn bilinear_at_integer_coordinates_is_exact() {
        let img = ramp();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(img.sample_bilinear(r as f64, c as f64) as f32, img.get(r, c));
            }
        }
        assert_eq!(img.sample_bilinear(-3.0, 0.0), 0.0);
    }

    #[test]
    fn rotation_keeps_range_and_mirrors() {
        let img = ramp();
        let rot = img.rotate(10.0);
        assert!(rot.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // mirror(rotate(+a)) == rotate(-a)(mirror)
        let lhs = img.rotate(10.0).hflip();
        let rhs = img.hflip().rotate(-10.0);
        for (a, b) in lhs.pixels().iter().zip(rhs.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_moves_corner() {
        let mut img = Image::filled(3, 3, 0.0);
        img.set(0, 2, 1.0);
        let rot = img.rotate(90.0);
        // counter-clockwise: top-right goes to top-left
        assert!((rot.get(0, 0) - 1.0).abs() < 1e-6);
    }
}
