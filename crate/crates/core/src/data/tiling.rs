use serde::{Deserialize, Serialize};

use super::geometry::{BoundingBox, GoldBox};
use super::image::{GrayImage, ImageRecord, Mask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceConfig {
    pub rows: usize,
    pub cols: usize,
    pub target_width: usize,
    pub target_height: usize,
    /// Gold boxes whose clipped area is below this fraction of their original
    /// area are dropped from a tile.
    pub min_keep_fraction: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            rows: 3,
            cols: 3,
            target_width: 640,
            target_height: 640,
            min_keep_fraction: 0.25,
        }
    }
}

/// Where a tile came from in its full image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileOrigin {
    pub row: usize,
    pub col: usize,
    /// Source pixel rectangle `[x0, x1) x [y0, y1)`.
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub source_width: usize,
    pub source_height: usize,
}

impl TileOrigin {
    pub fn scale(&self, target_w: usize, target_h: usize) -> (f64, f64) {
        (
            target_w as f64 / (self.x1 - self.x0) as f64,
            target_h as f64 / (self.y1 - self.y0) as f64,
        )
    }
}

fn tile_bounds(extent: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * extent / parts, (i + 1) * extent / parts)
}

/// Split an image into a `rows x cols` grid of non-overlapping tiles, each
/// rescaled bilinearly to the target size.
pub fn slice_image(record: &ImageRecord, config: &SliceConfig) -> Result<Vec<ImageRecord>> {
    let (w, h) = (record.image.width(), record.image.height());
    if w < config.cols || h < config.rows || config.rows == 0 || config.cols == 0 {
        return Err(Error::Validation(format!(
            "image {w}x{h} too small for a {}x{} grid",
            config.rows, config.cols
        )));
    }
    let mut tiles = Vec::with_capacity(config.rows * config.cols);
    for row in 0..config.rows {
        let (y0, y1) = tile_bounds(h, config.rows, row);
        for col in 0..config.cols {
            let (x0, x1) = tile_bounds(w, config.cols, col);
            let origin = TileOrigin {
                row,
                col,
                x0,
                y0,
                x1,
                y1,
                source_width: w,
                source_height: h,
            };
            let (sx, sy) = origin.scale(config.target_width, config.target_height);
            let image = record
                .image
                .sub_image(x0, y0, x1, y1)
                .resize(config.target_width, config.target_height);

            let rect = BoundingBox {
                left: x0 as f64,
                top: y0 as f64,
                right: x1 as f64,
                bottom: y1 as f64,
            };
            let gold = record
                .gold
                .iter()
                .filter_map(|g| clip_gold(g, &rect, config.min_keep_fraction))
                .map(|g| GoldBox {
                    class_id: g.class_id,
                    bbox: BoundingBox {
                        left: (g.bbox.left - x0 as f64) * sx,
                        top: (g.bbox.top - y0 as f64) * sy,
                        right: (g.bbox.right - x0 as f64) * sx,
                        bottom: (g.bbox.bottom - y0 as f64) * sy,
                    },
                })
                .collect();

            let mask = record.mask.as_ref().map(|m| {
                let (tw, th) = (config.target_width, config.target_height);
                let keep = (0..tw * th)
                    .map(|idx| {
                        let x = x0 as f64 + ((idx % tw) as f64 + 0.5) / sx;
                        let y = y0 as f64 + ((idx / tw) as f64 + 0.5) / sy;
                        m.contains(x, y)
                    })
                    .collect();
                Mask {
                    width: tw,
                    height: th,
                    keep,
                }
            });
            tiles.push(ImageRecord {
                image,
                gold,
                mask,
                origin: Some(origin),
            });
        }
    }
    Ok(tiles)
}

fn clip_gold(g: &GoldBox, rect: &BoundingBox, min_keep: f64) -> Option<GoldBox> {
    let area = g.bbox.area();
    if area <= 0.0 {
        // zero-area boxes go to the tile holding their corner (half-open)
        let inside = g.bbox.left >= rect.left
            && g.bbox.left < rect.right
            && g.bbox.top >= rect.top
            && g.bbox.top < rect.bottom;
        return inside.then_some(*g);
    }
    let clipped = g.bbox.intersection(rect)?;
    (clipped.area() >= min_keep * area).then_some(GoldBox {
        class_id: g.class_id,
        bbox: clipped,
    })
}

/// Crop the region under `bbox` (clamped to the image) and resize it
/// bilinearly to `out_width x out_height`.
pub fn crop_patch(
    image: &GrayImage,
    bbox: &BoundingBox,
    out_width: usize,
    out_height: usize,
) -> Result<GrayImage> {
    let c = bbox.clamp_to(image.width() as f64, image.height() as f64);
    if c.width() <= 0.0 || c.height() <= 0.0 {
        return Err(Error::DegenerateBox(format!(
            "{bbox:?} has zero area inside a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(image.resample_region(c.left, c.top, c.right, c.bottom, out_width, out_height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gb(c: usize, l: f64, t: f64, r: f64, b: f64) -> GoldBox {
        GoldBox {
            class_id: c,
            bbox: BoundingBox::new(l, t, r, b).unwrap(),
        }
    }

    #[test]
    fn large_image_tiles_to_target() {
        let rec = ImageRecord::new(GrayImage::filled(1920, 2148, 90.0), vec![]).unwrap();
        let tiles = slice_image(&rec, &SliceConfig::default()).unwrap();
        assert_eq!(tiles.len(), 9);
        for t in &tiles {
            let o = t.origin.unwrap();
            assert_eq!(o.x1 - o.x0, 640);
            assert_eq!(o.y1 - o.y0, 716);
            assert_eq!((t.image.width(), t.image.height()), (640, 640));
            assert!(t.image.pixels().iter().all(|&p| p == 90.0));
        }
    }

    #[test]
    fn tiles_partition_pixels() {
        let (w, h) = (47, 31);
        let rec = ImageRecord::new(GrayImage::filled(w, h, 1.0), vec![]).unwrap();
        let tiles = slice_image(&rec, &SliceConfig::default()).unwrap();
        let mut hits = vec![0u8; w * h];
        for t in &tiles {
            let o = t.origin.unwrap();
            for y in o.y0..o.y1 {
                for x in o.x0..o.x1 {
                    hits[y * w + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&c| c == 1));
    }

    #[test]
    fn interior_box_counts_recompose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (300usize, 300usize);
        let mut gold = Vec::new();
        // place boxes strictly inside tiles (10 px margin from seams)
        for _ in 0..60 {
            let tr = rng.random_range(0..3usize);
            let tc = rng.random_range(0..3usize);
            let x = rng.random_range(10.0..80.0) + tc as f64 * 100.0;
            let y = rng.random_range(10.0..80.0) + tr as f64 * 100.0;
            gold.push(gb(rng.random_range(0..2), x, y, x + 10.0, y + 10.0));
        }
        let rec = ImageRecord::new(GrayImage::filled(w, h, 0.0), gold.clone()).unwrap();
        let tiles = slice_image(&rec, &SliceConfig::default()).unwrap();
        let total: usize = tiles.iter().map(|t| t.gold.len()).sum();
        assert_eq!(total, gold.len());
        let per_class: Vec<usize> = (0..2)
            .map(|c| {
                tiles
                    .iter()
                    .map(|t| t.gold.iter().filter(|g| g.class_id == c).count())
                    .sum()
            })
            .collect();
        assert_eq!(per_class, rec.gold_counts(2));
    }

    #[test]
    fn seam_boxes_follow_drop_fraction() {
        let rec = ImageRecord::new(
            GrayImage::filled(300, 300, 0.0),
            vec![gb(0, 90.0, 10.0, 110.0, 20.0), gb(1, 95.0, 40.0, 135.0, 50.0)],
        )
        .unwrap();
        let tiles = slice_image(&rec, &SliceConfig::default()).unwrap();
        // first box is split 50/50 and kept twice, second (5/40 left) once
        assert_eq!(tiles[0].gold.len(), 1);
        assert_eq!(tiles[1].gold.len(), 2);
        let g = tiles[0].gold[0].bbox;
        assert!((g.right - 640.0).abs() < 1e-9);
        assert!((g.left - 90.0 * 6.4).abs() < 1e-9);
    }

    #[test]
    fn crop_patch_cases() {
        let img = GrayImage::filled(50, 40, 77.0);
        let bb = BoundingBox::new(3.2, 4.7, 20.1, 33.3).unwrap();
        let p = crop_patch(&img, &bb, 224, 224).unwrap();
        assert_eq!((p.width(), p.height()), (224, 224));
        assert!(p.pixels().iter().all(|&v| (v - 77.0).abs() < 1e-9));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px: Vec<f64> = (0..300 * 300).map(|_| rng.random_range(0..256) as f64).collect();
        let img = GrayImage::new(300, 300, px).unwrap();
        let bb = BoundingBox::new(10.0, 20.0, 234.0, 244.0).unwrap();
        let p = crop_patch(&img, &bb, 224, 224).unwrap();
        assert_eq!(p, img.sub_image(10, 20, 234, 244));

        let outside = BoundingBox::new(400.0, 400.0, 420.0, 420.0).unwrap();
        assert!(matches!(
            crop_patch(&img, &outside, 8, 8),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn checkerboard_upscale_corners() {
        // bilinear oracle: half-pixel centers place output corners outside the
        // first source pixel center, so clamping returns the source corner
        let img = GrayImage::new(2, 2, vec![0.0, 255.0, 255.0, 0.0]).unwrap();
        let bb = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let p = crop_patch(&img, &bb, 224, 224).unwrap();
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(223, 0), 255.0);
        assert_eq!(p.get(0, 223), 255.0);
        assert_eq!(p.get(223, 223), 0.0);
        // interior sample at output pixel 112 maps to source x = 0.5 + 0.5/224*... ;
        // direct evaluation of the bilinear formula
        let x = (112.0 + 0.5) * (2.0 / 224.0) - 0.5;
        let expect = 255.0 * x; // row 0: lerp(0, 255, x)
        assert!((p.get(112, 0) - expect).abs() < 1e-9);
    }
}
