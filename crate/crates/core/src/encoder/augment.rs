use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;

/// Box jitter used to simulate imperfect predicted boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Center shift, as a fraction of the box extent along each axis.
    pub max_shift_frac: f64,
    /// Independent width/height scale range.
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift_frac: 0.15,
            scale_range: (0.85, 1.15),
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Shift the center and rescale width/height independently; the result is
/// clamped to `bounds` (image width, height) when given.
pub fn augment_box(
    bbox: &BoundingBox,
    rng: &mut impl Rng,
    config: &AugmentConfig,
    bounds: Option<(f64, f64)>,
) -> BoundingBox {
    let (cx, cy) = bbox.center();
    let (w, h) = (bbox.width(), bbox.height());
    let f = config.max_shift_frac;
    let dx = uniform(rng, -f, f) * w;
    let dy = uniform(rng, -f, f) * h;
    let (s0, s1) = config.scale_range;
    let nw = w * uniform(rng, s0, s1);
    let nh = h * uniform(rng, s0, s1);
    let out = BoundingBox {
        left: cx + dx - nw / 2.0,
        top: cy + dy - nh / 2.0,
        right: cx + dx + nw / 2.0,
        bottom: cy + dy + nh / 2.0,
    };
    match bounds {
        Some((bw, bh)) => out.clamp_to(bw, bh),
        None => out,
    }
}
