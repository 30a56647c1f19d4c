use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Linear RGB image with `f32` channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let o = 3 * (row * self.width + col);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let o = 3 * (row * self.width + col);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads an 8-bit PNG, compositing any alpha onto `background`.
    pub fn read_png(path: &Path, background: [f64; 3]) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgba8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for px in img.pixels() {
            let a = px[3] as f64 / 255.0;
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                data.push((v * a + background[c] * (1.0 - a)) as f32);
            }
        }
        Self::from_data(w as usize, h as usize, data)
    }

    /// Raw dump: little-endian `u32` width and height, then row-major `f32` RGB.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes
                .get(i..i + 4)
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| Error::invalid("truncated raw image"))
        };
        let w = u32::from_le_bytes(word(0)?) as usize;
        let h = u32::from_le_bytes(word(4)?) as usize;
        let n = w * h * 3;
        if bytes.len() != 8 + 4 * n {
            return Err(Error::invalid(format!(
                "raw image of {w}x{h} needs {} bytes, got {}",
                8 + 4 * n,
                bytes.len()
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_data(w, h, data)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact() {
        let img = Image::from_data(2, 1, vec![0.1, 0.2, 0.3, 1.0 / 3.0, 0.0, 1.0]).unwrap();
        assert_eq!(Image::from_raw_bytes(&img.to_raw_bytes()).unwrap(), img);
        assert!(Image::from_raw_bytes(&img.to_raw_bytes()[..20]).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_data(
            2,
            2,
            vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6, 1.5, -0.1, 0.25, 0.9, 0.8, 0.7],
        )
        .unwrap();
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path, [1.0; 3]).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
