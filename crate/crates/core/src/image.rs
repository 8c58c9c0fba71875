//! Float image buffers and the PPM / plain-text grid formats used for all
//! on-disk captures and previews.

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// Interleaved RGB, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> ImageRgb {
        ImageRgb { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> ImageRgb {
        let mut img = ImageRgb::new(width, height);
        for p in 0..width * height {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel channel mean as a gray buffer.
    pub fn to_gray(&self) -> GrayImage {
        let mut g = GrayImage::new(self.width, self.height);
        for p in 0..self.width * self.height {
            g.data[p] =
                (self.data[p * 3] + self.data[p * 3 + 1] + self.data[p * 3 + 2]) / 3.0;
        }
        g
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamped at the border.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> [f32; 3] {
        let (w, h) = (self.width, self.height);
        let fx = (x - 0.5).clamp(0.0, (w - 1) as f32);
        let fy = (y - 0.5).clamp(0.0, (h - 1) as f32);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let tx = fx - x0 as f32;
        let ty = fy - y0 as f32;
        let mut out = [0.0f32; 3];
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * tx;
            let bot = c[ch] + (d[ch] - c[ch]) * tx;
            out[ch] = top + (bot - top) * ty;
        }
        out
    }

    /// Resize with bilinear filtering (area mapping of pixel centers).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageRgb {
        let mut out = ImageRgb::new(width, height);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            for x in 0..width {
                let px = (x as f32 + 0.5) * sx;
                let py = (y as f32 + 0.5) * sy;
                out.set(x, y, self.sample_bilinear(px, py));
            }
        }
        out
    }

    /// Integer-factor box downsample; dimensions must divide evenly so the
    /// global mean is preserved exactly.
    pub fn downsample_box(&self, factor: usize) -> Result<ImageRgb> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Dimension(format!(
                "box downsample factor {} does not divide {}x{}",
                factor, self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = ImageRgb::new(w, h);
        let inv = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for ch in 0..3 {
                            acc[ch] += p[ch];
                        }
                    }
                }
                out.set(x, y, [acc[0] * inv, acc[1] * inv, acc[2] * inv]);
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image shapes must match");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / self.data.len() as f64
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<ImageRgb> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 && pos < buf.len() {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        if fields.len() < 4 || fields[0] != "P6" {
            return Err(Error::Format("not a P6 ppm".into()));
        }
        let width: usize =
            fields[1].parse().map_err(|_| Error::Format("bad ppm width".into()))?;
        let height: usize =
            fields[2].parse().map_err(|_| Error::Format("bad ppm height".into()))?;
        if fields[3] != "255" {
            return Err(Error::Format("expected maxval 255".into()));
        }
        pos += 1;
        let need = width * height * 3;
        if buf.len() < pos + need {
            return Err(Error::Format("truncated ppm payload".into()));
        }
        let mut img = ImageRgb::new(width, height);
        for (i, b) in buf[pos..pos + need].iter().enumerate() {
            img.data[i] = *b as f32 / 255.0;
        }
        Ok(img)
    }
}

/// Single-channel float grid; doubles as depth map, uncertainty map, and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> GrayImage {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped (replicate-padding) access for window filters.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Plain-text grid: first line "width height", then one row per line.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.width, self.height)?;
        for y in 0..self.height {
            let row: Vec<String> =
                (0..self.width).map(|x| format!("{}", self.get(x, y))).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(mut r: R) -> Result<GrayImage> {
        let mut s = String::new();
        r.read_to_string(&mut s)?;
        let mut lines = s.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty grid file".into()))?;
        let mut parts = header.split_whitespace();
        let width: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("bad grid header".into()))?;
        let height: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("bad grid header".into()))?;
        let mut img = GrayImage::new(width, height);
        for y in 0..height {
            let line = lines.next().ok_or_else(|| Error::Format("grid truncated".into()))?;
            for (x, tok) in line.split_whitespace().enumerate() {
                if x >= width {
                    return Err(Error::Format("grid row too long".into()));
                }
                img.set(x, y, tok.parse().map_err(|_| Error::Format("bad grid value".into()))?);
            }
        }
        Ok(img)
    }
}
