use serde::{Deserialize, Serialize};

use super::geometry::GoldBox;
use super::tiling::TileOrigin;
use crate::error::{Error, Result};

/// Row-major grayscale image with intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=255.0).contains(*p)) {
            return Err(Error::Validation(format!(
                "pixel value {p} outside [0, 255]"
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value.clamp(0.0, 255.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 255.0);
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// has its center at `(i, j)`. Coordinates are clamped to the grid.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Resample the continuous region `[left, right) x [top, bottom)` onto an
    /// `out_w x out_h` grid using half-pixel centers.
    pub fn resample_region(
        &self,
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
        out_w: usize,
        out_h: usize,
    ) -> GrayImage {
        let sx = (right - left) / out_w as f64;
        let sy = (bottom - top) / out_h as f64;
        let mut pixels = Vec::with_capacity(out_w * out_h);
        for j in 0..out_h {
            let y = top + (j as f64 + 0.5) * sy - 0.5;
            for i in 0..out_w {
                let x = left + (i as f64 + 0.5) * sx - 0.5;
                pixels.push(self.sample(x, y));
            }
        }
        GrayImage {
            width: out_w,
            height: out_h,
            pixels,
        }
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> GrayImage {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.resample_region(
            0.0,
            0.0,
            self.width as f64,
            self.height as f64,
            out_w,
            out_h,
        )
    }

    /// Integer sub-image `[x0, x1) x [y0, y1)`.
    pub fn sub_image(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> GrayImage {
        let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x1]);
        }
        GrayImage {
            width: x1 - x0,
            height: y1 - y0,
            pixels,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }
}

/// Binary region of interest; `true` marks retained pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: keep.len(),
            });
        }
        Ok(Mask {
            width,
            height,
            keep,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        if x < 0.0 || y < 0.0 {
            return false;
        }
        let (xi, yi) = (x as usize, y as usize);
        xi < self.width && yi < self.height && self.keep[yi * self.width + xi]
    }
}

/// An image with its gold annotations and optional region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image: GrayImage,
    pub gold: Vec<GoldBox>,
    pub mask: Option<Mask>,
    /// Set on tiles produced by [`super::slice_image`].
    pub origin: Option<TileOrigin>,
}

impl ImageRecord {
    pub fn new(image: GrayImage, gold: Vec<GoldBox>) -> Result<Self> {
        let (w, h) = (image.width() as f64, image.height() as f64);
        let gold = gold
            .into_iter()
            .map(|g| {
                g.bbox.validate()?;
                Ok(GoldBox {
                    class_id: g.class_id,
                    bbox: g.bbox.clamp_to(w, h),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageRecord {
            image,
            gold,
            mask: None,
            origin: None,
        })
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        if mask.width != self.image.width() || mask.height != self.image.height() {
            return Err(Error::Validation(format!(
                "mask {}x{} does not match image {}x{}",
                mask.width,
                mask.height,
                self.image.width(),
                self.image.height()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Blank out pixels outside the mask with `fill` and drop gold boxes
    /// whose centers fall outside it.
    pub fn apply_mask(&mut self, fill: f64) {
        let Some(mask) = &self.mask else { return };
        for (p, keep) in self.image.pixels.iter_mut().zip(&mask.keep) {
            if !keep {
                *p = fill.clamp(0.0, 255.0);
            }
        }
        self.gold.retain(|g| {
            let (cx, cy) = g.bbox.center();
            mask.contains(cx, cy)
        });
    }

    pub fn gold_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for g in &self.gold {
            if g.class_id < num_classes {
                counts[g.class_id] += 1;
            }
        }
        counts
    }
}
