//! Planar RGB images with values in `[0, 1]`.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for (c, &v) in rgb.iter().enumerate() {
            img.channel_mut(c).iter_mut().for_each(|p| *p = v);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(invalid(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Interleaved 8-bit RGB, row-major.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width * height {
            return Err(invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        let mut img = Self::new(width, height);
        let plane = width * height;
        for (i, px) in bytes.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                img.data[c * plane + i] = v as f32 / 255.0;
            }
        }
        Ok(img)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.width * self.height;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..self.height {
                let row = y * self.width;
                for x in 0..self.width {
                    dst[row + x] = src[row + self.width - 1 - x];
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(invalid(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Image::new(width, height);
        for c in 0..3 {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for y in 0..height {
                let s = (y0 + y) * self.width + x0;
                dst[y * width..(y + 1) * width].copy_from_slice(&src[s..s + width]);
            }
        }
        Ok(out)
    }

    /// Resamples with a triangle (bilinear) filter. When shrinking, the
    /// filter support widens with the scale so every source pixel
    /// contributes; when enlarging this is plain bilinear interpolation with
    /// pixel centres at `i + 0.5`.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let tx = filter_taps(self.width, width);
        let ty = filter_taps(self.height, height);
        let mut tmp = vec![0f32; self.height * width];
        let mut out = Image::new(width, height);
        for c in 0..3 {
            let src = self.channel(c);
            for y in 0..self.height {
                let row = &src[y * self.width..(y + 1) * self.width];
                for (x, taps) in tx.iter().enumerate() {
                    tmp[y * width + x] = taps.iter().map(|&(i, w)| row[i] * w).sum();
                }
            }
            let dst = out.channel_mut(c);
            for (y, taps) in ty.iter().enumerate() {
                for x in 0..width {
                    dst[y * width + x] = taps.iter().map(|&(i, w)| tmp[i * width + x] * w).sum();
                }
            }
        }
        out
    }
}

fn filter_taps(input: usize, output: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = input as f64 / output as f64;
    let support = scale.max(1.0);
    (0..output)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(input);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|i| (i, (1.0 - ((i as f64 + 0.5 - center) / support).abs()).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            if taps.is_empty() {
                taps.push((((center.floor()) as usize).min(input - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(i, w)| (i, (w / total) as f32)).collect()
        })
        .collect()
}
