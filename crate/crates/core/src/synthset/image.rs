use std::path::Path;

use super::CameraPose;
use crate::error::{Error, IoContext, Result};

/// Row-major `height x width x 3` RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Channel-first copy (`3 x H x W`).
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, chw: &[f32]) -> Self {
        let n = width * height;
        assert_eq!(chw.len(), 3 * n, "channel-first buffer size");
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[i * 3 + c] = chw[c * n + i];
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Copy of the `size x size` block whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Image {
        let mut out = Image::black(width, height);
        for r in 0..height {
            let src = ((row + r) * self.width + col) * 3;
            out.data[r * width * 3..(r + 1) * width * 3]
                .copy_from_slice(&self.data[src..src + width * 3]);
        }
        out
    }

    pub fn paste(&mut self, src: &Image, row: usize, col: usize) {
        for r in 0..src.height {
            let dst = ((row + r) * self.width + col) * 3;
            self.data[dst..dst + src.width * 3]
                .copy_from_slice(&src.data[r * src.width * 3..(r + 1) * src.width * 3]);
        }
    }

    pub fn mirrored_horizontally(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Round-half-up 8-bit quantization of every channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).at(path)
    }

    /// Decodes 8-bit RGB, RGBA or grayscale PNG data.
    pub fn from_png_bytes(data: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(data));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| Error::Png("image too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match (info.color_type, info.bit_depth) {
            (png::ColorType::Rgb, png::BitDepth::Eight) => bytes.to_vec(),
            (png::ColorType::Rgba, png::BitDepth::Eight) => {
                bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            }
            (png::ColorType::Grayscale, png::BitDepth::Eight) => {
                bytes.iter().flat_map(|&g| [g, g, g]).collect()
            }
            (ct, bd) => return Err(Error::Png(format!("unsupported PNG format {ct:?}/{bd:?}"))),
        };
        Ok(Image::from_rgb8(w, h, &rgb))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).at(path)?;
        Self::from_png_bytes(&data).map_err(|e| match e {
            Error::Png(m) => Error::Png(format!("{m} in {}", path.display())),
            e => e,
        })
    }
}

fn quantize(v: f32) -> u8 {
    let scaled = f64::from(v.clamp(0.0, 1.0)) * 255.0;
    (scaled + 0.5).floor() as u8
}

/// A rendered view together with the camera that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub pixels: Image,
    pub pose: CameraPose,
}
