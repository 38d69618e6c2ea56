//! Grayscale floating-point images and 8-bit PNG I/O.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        crate::error::check_len("image pixels", width * height, data.len())?;
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_gray_png(path.as_ref(), self.width, self.height, &self.to_u8())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
        let channels = info.color_type.samples();
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..info.buffer_size()]
            .chunks(channels)
            .map(|px| {
                let gray = if channels >= 3 {
                    (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0
                } else {
                    px[0] as f64
                };
                gray / 255.0
            })
            .collect();
        Image::from_vec(w, h, data)
    }
}

pub(crate) fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

/// Tiles equally sized images into a grid, row-major.
pub fn contact_sheet(images: &[Image], columns: usize) -> Image {
    if images.is_empty() || columns == 0 {
        return Image::new(0, 0);
    }
    let (w, h) = images[0].shape();
    let rows = images.len().div_ceil(columns);
    let mut sheet = Image::new(w * columns, h * rows);
    for (k, img) in images.iter().enumerate() {
        let (ox, oy) = ((k % columns) * w, (k / columns) * h);
        for y in 0..h.min(img.height()) {
            for x in 0..w.min(img.width()) {
                sheet.set(ox + x, oy + y, img.get(x, y));
            }
        }
    }
    sheet
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_vec(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let path = dir.path().join("a.png");
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert_eq!(back.shape(), (3, 2));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn sheet_layout() {
        let imgs: Vec<_> = (0..3).map(|k| Image::filled(2, 2, k as f64 / 4.0)).collect();
        let sheet = contact_sheet(&imgs, 2);
        assert_eq!(sheet.shape(), (4, 4));
        assert_eq!(sheet.get(3, 0), 0.25);
        assert_eq!(sheet.get(1, 3), 0.5);
        assert_eq!(sheet.get(3, 3), 0.0);
    }
}
