//! Dense CHW image buffer with the handful of pixel ops the augmentation
//! pipeline needs.

use alloc::vec;
use alloc::vec::Vec;

/// One image, channel-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageBuf {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample with clamp-to-edge, coordinates in pixel space.
    fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let (x0, y0) = (x as usize, y as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Crop the box (top, left, h, w) and bilinearly resize to out×out.
    pub fn crop_resize(&self, top: usize, left: usize, h: usize, w: usize, out: usize) -> ImageBuf {
        let mut dst = ImageBuf::zeros(self.channels, out, out);
        for c in 0..self.channels {
            for oy in 0..out {
                // map output pixel centers into the crop box
                let sy = top as f64 + (oy as f64 + 0.5) * h as f64 / out as f64 - 0.5;
                for ox in 0..out {
                    let sx = left as f64 + (ox as f64 + 0.5) * w as f64 / out as f64 - 0.5;
                    dst.set(c, oy, ox, self.sample(c, sy, sx));
                }
            }
        }
        dst
    }

    pub fn flip_horizontal(&self) -> ImageBuf {
        let mut dst = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    dst.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        dst
    }
}

/// Pack a batch of same-sized images into an N×C×H×W tensor payload.
pub fn batch_to_tensor(images: &[&ImageBuf]) -> (Vec<usize>, Vec<f64>) {
    assert!(!images.is_empty());
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!((img.channels, img.height, img.width), (c, h, w));
        data.extend_from_slice(&img.data);
    }
    (vec![images.len(), c, h, w], data)
}
