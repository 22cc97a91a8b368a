use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel frame with intensities in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Frame {
        assert_eq!(data.len(), width * height, "frame buffer size");
        Frame { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Frame {
        Frame::new(width, height, vec![0.0; width * height])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Border-clamped read.
    #[inline]
    pub fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    /// Bilinear sample with border clamping.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable Gaussian blur with clamped borders.
    pub fn blur(&self, sigma: f64) -> Frame {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> =
            (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let mut tmp = Frame::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                tmp.data[y * self.width + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * self.clamped(x as isize + i as isize - radius, y as isize))
                    .sum();
            }
        }
        let mut out = Frame::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp.clamped(x as isize, y as isize + i as isize - radius))
                    .sum();
            }
        }
        out
    }

    /// Blur then keep every other pixel.
    pub fn downsample(&self) -> Frame {
        let blurred = self.blur(1.0);
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = Frame::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = blurred.at(2 * x, 2 * y);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Frame> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(format!("reading {}", path.display()), io),
                other => Error::Image(other),
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f64::from).collect();
        Ok(Frame::new(w as usize, h as usize, data))
    }

    /// Writes an 8-bit grayscale PNG (values rounded and clamped).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions");
        img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(format!("writing {}", path.display()), io),
            other => Error::Image(other),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_grid_points_exactly() {
        let f = Frame::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(f.sample(2.0, 1.0), 5.0);
        assert_eq!(f.sample(0.5, 0.5), 2.0);
        assert_eq!(f.sample(-4.0, 9.0), 3.0);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let f = Frame::new(5, 4, vec![7.0; 20]);
        for v in f.blur(1.5).data {
            assert!((v - 7.0).abs() < 1e-12);
        }
        assert_eq!(f.downsample().width, 3);
    }
}
