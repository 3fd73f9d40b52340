//! Square crops around a box: the template at twice the box context and
//! the search region at four times, resampled to the network input size.

use mst_core::BoxXYWH;

use crate::image::Image;

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;

/// A square window of `side` frame pixels resampled to `out × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Centred on `b`, side `factor·sqrt(w·h)`.
    pub fn around(b: &BoxXYWH, factor: f64, out: usize) -> Self {
        let side = factor * (b.w * b.h).max(1.0).sqrt();
        let (cx, cy) = b.center();
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
            out,
        }
    }

    /// Crop pixels per frame pixel.
    pub fn zoom(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Frame pixels to crop pixels.
    pub fn to_crop(&self, b: &BoxXYWH) -> BoxXYWH {
        b.translate(-self.x0, -self.y0).scale(self.zoom())
    }

    /// Crop pixels to frame pixels.
    pub fn to_frame(&self, b: &BoxXYWH) -> BoxXYWH {
        b.scale(1.0 / self.zoom()).translate(self.x0, self.y0)
    }

    /// Frame pixels to crop-normalised `[0, 1]` coordinates.
    pub fn normalize(&self, b: &BoxXYWH) -> BoxXYWH {
        b.translate(-self.x0, -self.y0).scale(1.0 / self.side)
    }

    /// Bilinear resample; samples outside the frame take its mean colour.
    pub fn sample(&self, img: &Image) -> Image {
        let fill = img.mean_pixel();
        let mut out = Image::new(self.out, self.out);
        let step = self.side / self.out as f64;
        let tap = |x: i64, y: i64, c: usize| -> f64 {
            if x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
                fill[c]
            } else {
                img.data[(y as usize * img.width + x as usize) * 3 + c] as f64
            }
        };
        for oy in 0..self.out {
            // pixel centres sit at integer + 0.5
            let sy = self.y0 + (oy as f64 + 0.5) * step - 0.5;
            let (y0, fy) = (sy.floor() as i64, sy - sy.floor());
            for ox in 0..self.out {
                let sx = self.x0 + (ox as f64 + 0.5) * step - 0.5;
                let (x0, fx) = (sx.floor() as i64, sx - sx.floor());
                let px = [0, 1, 2].map(|c| {
                    let top = tap(x0, y0, c) * (1.0 - fx) + tap(x0 + 1, y0, c) * fx;
                    let bottom = tap(x0, y0 + 1, c) * (1.0 - fx) + tap(x0 + 1, y0 + 1, c) * fx;
                    (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
                });
                out.set(ox, oy, px);
            }
        }
        out
    }
}

/// Boxes are clamped into the frame before cropping.
fn clamp(frame: &Image, b: &BoxXYWH) -> BoxXYWH {
    b.clamp_to(frame.width as f64, frame.height as f64, 1.0)
}

/// Template crop around the target.
pub fn template_crop(frame: &Image, target: &BoxXYWH, out: usize) -> Image {
    CropWindow::around(&clamp(frame, target), TEMPLATE_FACTOR, out).sample(frame)
}

/// Search crop around `prev` plus `gt` normalised to that crop.
pub fn crop_pair(frame: &Image, prev: &BoxXYWH, gt: &BoxXYWH, out: usize) -> (Image, CropWindow, BoxXYWH) {
    let w = CropWindow::around(&clamp(frame, prev), SEARCH_FACTOR, out);
    (w.sample(frame), w, w.normalize(&clamp(frame, gt)))
}
