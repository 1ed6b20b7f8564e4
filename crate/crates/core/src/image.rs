//! Raster primitives: float grids, binary masks and 8-bit RGB images, with
//! bilinear resampling and PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Row-major 2-D float grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure(data.len() == height * width, || {
            format!("grid data length {} != {height}x{width}", data.len())
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        ensure(rows.iter().all(|r| r.len() == width), || {
            "ragged rows".to_string()
        })?;
        Self::new(height, width, rows.concat())
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Index of the first maximal cell in row-major order.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Bilinear resampling with half-pixel centers (the `align_corners = false` convention).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Grid> {
        ensure(!self.is_empty(), || "cannot resample an empty grid".into())?;
        ensure(height > 0 && width > 0, || {
            format!("zero-area resample target {height}x{width}")
        })?;
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let ys = axis_taps(self.height, height);
        let xs = axis_taps(self.width, width);
        let mut out = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Grid::new(height, width, out)
    }
}

fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Binary mask at image resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure(bits.len() == height * width, || {
            format!("mask length {} != {height}x{width}", bits.len())
        })?;
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let bits = rows.iter().flat_map(|r| r.iter().map(|v| *v != 0)).collect();
        Self::new(height, width, bits)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.bits[y * self.width + x] {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
        writer.write_image_data(&packed).map_err(|e| png_err(path, e))?;
        writer.finish().map_err(|e| png_err(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (info, buf) = decode_png(path)?;
        let (w, h) = (info.width as usize, info.height as usize);
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
            return Err(Error::format(
                path.display().to_string(),
                "mask must be a 1-bit grayscale PNG",
            ));
        }
        let stride = info.line_size;
        let bits = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| buf[y * stride + x / 8] & (0x80 >> (x % 8)) != 0)
            .collect();
        Mask::new(h, w, bits)
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        ensure(data.len() == height * width * 3, || {
            format!("image data length {} != {height}x{width}x3", data.len())
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar float channels in `[0, 1]`, layout `[c][y][x]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    fn channel(&self, c: usize) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(3).map(|v| *v as f32).collect(),
        }
    }

    /// Resize so the shorter side equals `side`, then center-crop to `side x side`.
    pub fn resize_shorter_center_crop(&self, side: usize) -> Result<RgbImage> {
        ensure(side > 0, || "zero target side".into())?;
        if self.height == side && self.width == side {
            return Ok(self.clone());
        }
        let short = self.height.min(self.width) as f64;
        let h = ((self.height as f64 * side as f64 / short).round() as usize).max(side);
        let w = ((self.width as f64 * side as f64 / short).round() as usize).max(side);
        let planes: Vec<Grid> = (0..3)
            .map(|c| self.channel(c).resize_bilinear(h, w))
            .collect::<Result<_>>()?;
        let (oy, ox) = ((h - side) / 2, (w - side) / 2);
        let mut out = RgbImage::filled(side, side, [0, 0, 0]);
        for y in 0..side {
            for x in 0..side {
                let px = [0, 1, 2].map(|c| planes[c].get(y + oy, x + ox).round().clamp(0.0, 255.0) as u8);
                out.set_pixel(y, x, px);
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
        writer.write_image_data(&self.data).map_err(|e| png_err(path, e))?;
        writer.finish().map_err(|e| png_err(path, e))
    }

    /// Loads 8-bit RGB, RGBA or grayscale PNGs as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (info, buf) = decode_png(path)?;
        let (w, h) = (info.width as usize, info.height as usize);
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path.display().to_string(), "expected an 8-bit PNG"));
        }
        let data = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).take(w * h).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|v| [*v, *v, *v]).collect(),
            other => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("unsupported PNG color type {other:?}"),
                ))
            }
        };
        RgbImage::new(h, w, data)
    }
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_decode_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_decode_err(path, e))?;
    Ok((info, buf))
}

fn png_err(path: &Path, e: png::EncodingError) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

fn png_decode_err(path: &Path, e: png::DecodingError) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_two_by_two_to_one() {
        let g = Grid::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let r = g.resize_bilinear(1, 1).unwrap();
        assert!((r.data[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn bilinear_constant_is_preserved() {
        let g = Grid::filled(224, 224, 1.0);
        let r = g.resize_bilinear(7, 7).unwrap();
        assert!(r.data.iter().all(|v| (*v - 1.0).abs() < 1e-6));
        let up = Grid::filled(3, 5, 2.5).resize_bilinear(17, 11).unwrap();
        assert!(up.data.iter().all(|v| (*v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn zero_area_target_rejected() {
        let g = Grid::filled(2, 2, 1.0);
        assert!(g.resize_bilinear(0, 3).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Mask::from_rows(&[&[1, 0, 1, 1, 0, 0, 0, 0, 1, 1], &[0, 1, 0, 0, 0, 0, 0, 1, 0, 0]]).unwrap();
        let p = dir.path().join("m.png");
        mask.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), mask);

        let img = RgbImage::new(2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        let p = dir.path().join("i.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
    }

    #[test]
    fn shorter_side_crop_shape() {
        let img = RgbImage::filled(40, 64, [10, 20, 30]);
        let out = img.resize_shorter_center_crop(32).unwrap();
        assert_eq!((out.height, out.width), (32, 32));
        assert_eq!(out.pixel(5, 5), [10, 20, 30]);
    }
}
