//! Explicit (hand-crafted) box features and per-image discriminative
//! vectors.
//!
//! For a class pair `(i, k)` and a feature `f`, the discriminative value is
//! the difference of the per-class averages `A_f(i) - A_f(k)` over the boxes
//! of one image. Explicit vectors are ordered `[intensity, size]`.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, GrayImage};
use crate::error::{Error, Result};

/// Number of explicit features, ordered `[intensity, size]`.
pub const EXPLICIT_DIM: usize = 2;

/// Central finite-difference step (px) for the intensity gradient.
pub const INTENSITY_FD_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminativeVector {
    pub pair: (usize, usize),
    pub values: Vec<f64>,
}

pub fn size_feature(bbox: &BoundingBox) -> f64 {
    bbox.width() * bbox.height()
}

/// `d size / d [left, top, right, bottom]`.
pub fn size_feature_grad(bbox: &BoundingBox) -> [f64; 4] {
    let (w, h) = (bbox.width(), bbox.height());
    [-h, -w, h, w]
}

/// Integer pixel range `[ceil(lo), floor(hi)]` clamped to `[0, n)`.
fn pixel_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = lo.ceil().max(0.0);
    let b = hi.floor().min(n as f64 - 1.0);
    (a <= b).then_some((a as usize, b as usize))
}

/// Mean intensity over the integer pixels covered by the box (inclusive
/// bounds, fractional edges truncated inward).
pub fn intensity_feature(image: &GrayImage, bbox: &BoundingBox) -> Result<f64> {
    let degenerate = || {
        Error::DegenerateBox(format!(
            "{bbox:?} covers no whole pixel of a {}x{} image",
            image.width(),
            image.height()
        ))
    };
    let (x0, x1) = pixel_range(bbox.left, bbox.right, image.width()).ok_or_else(degenerate)?;
    let (y0, y1) = pixel_range(bbox.top, bbox.bottom, image.height()).ok_or_else(degenerate)?;
    let mut sum = 0.0;
    for y in y0..=y1 {
        sum += image.pixels()[y * image.width() + x0..=y * image.width() + x1]
            .iter()
            .sum::<f64>();
    }
    Ok(sum / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64)
}

/// Central finite differences of [`intensity_feature`] with respect to each
/// box coordinate. A side that becomes degenerate falls back to a one-sided
/// difference; if both do, that coordinate gets zero.
pub fn intensity_feature_grad(image: &GrayImage, bbox: &BoundingBox, step: f64) -> [f64; 4] {
    let mut grad = [0.0; 4];
    let base = bbox.coords();
    let center = intensity_feature(image, bbox).ok();
    for (j, g) in grad.iter_mut().enumerate() {
        let eval = |delta: f64| {
            let mut c = base;
            c[j] += delta;
            let b = BoundingBox::from_coords(c);
            if b.left > b.right || b.top > b.bottom {
                return None;
            }
            intensity_feature(image, &b).ok()
        };
        *g = match (eval(step), eval(-step), center) {
            (Some(p), Some(m), _) => (p - m) / (2.0 * step),
            (Some(p), None, Some(c)) => (p - c) / step,
            (None, Some(m), Some(c)) => (c - m) / step,
            _ => 0.0,
        };
    }
    grad
}

/// `[intensity, size]` of one box.
pub fn explicit_box_features(image: &GrayImage, bbox: &BoundingBox) -> Result<[f64; 2]> {
    Ok([intensity_feature(image, bbox)?, size_feature(bbox)])
}

/// Arithmetic mean; `None` for an empty class.
pub fn class_average(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn discriminative_diff(avg_i: f64, avg_k: f64) -> f64 {
    avg_i - avg_k
}

fn class_boxes(boxes_by_class: &[Vec<BoundingBox>], class: usize) -> Result<&[BoundingBox]> {
    match boxes_by_class.get(class) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::MissingClass(class)),
    }
}

/// Explicit discriminative vector `[D_intensity(i,k), D_size(i,k)]` for one
/// image.
pub fn explicit_vector(
    image: &GrayImage,
    boxes_by_class: &[Vec<BoundingBox>],
    pair: (usize, usize),
) -> Result<DiscriminativeVector> {
    let averages = |class: usize| -> Result<[f64; 2]> {
        let boxes = class_boxes(boxes_by_class, class)?;
        let mut intensity = Vec::with_capacity(boxes.len());
        let mut size = Vec::with_capacity(boxes.len());
        for b in boxes {
            let [fi, fs] = explicit_box_features(image, b)?;
            intensity.push(fi);
            size.push(fs);
        }
        Ok([
            class_average(&intensity).unwrap(),
            class_average(&size).unwrap(),
        ])
    };
    let a = averages(pair.0)?;
    let b = averages(pair.1)?;
    Ok(DiscriminativeVector {
        pair,
        values: vec![
            discriminative_diff(a[0], b[0]),
            discriminative_diff(a[1], b[1]),
        ],
    })
}

/// Per-box Jacobian of an explicit vector: `rows[0]` is the intensity
/// component, `rows[1]` the size component, each over
/// `[left, top, right, bottom]`.
pub type BoxJacobian = [[f64; 4]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitVectorGrad {
    pub pair: (usize, usize),
    /// Jacobians for the boxes of `pair.0`, in input order.
    pub first: Vec<BoxJacobian>,
    /// Jacobians for the boxes of `pair.1`, in input order.
    pub second: Vec<BoxJacobian>,
}

/// Gradient of [`explicit_vector`] with respect to every box coordinate of
/// both classes. The size part is analytic; the intensity part uses central
/// differences with [`INTENSITY_FD_STEP`].
pub fn explicit_vector_grad(
    image: &GrayImage,
    boxes_by_class: &[Vec<BoundingBox>],
    pair: (usize, usize),
) -> Result<ExplicitVectorGrad> {
    // validates presence and non-degeneracy
    explicit_vector(image, boxes_by_class, pair)?;
    let side = |class: usize, sign: f64| -> Result<Vec<BoxJacobian>> {
        let boxes = class_boxes(boxes_by_class, class)?;
        let scale = sign / boxes.len() as f64;
        Ok(boxes
            .iter()
            .map(|b| {
                let gi = intensity_feature_grad(image, b, INTENSITY_FD_STEP);
                let gs = size_feature_grad(b);
                [gi.map(|v| v * scale), gs.map(|v| v * scale)]
            })
            .collect())
    };
    Ok(ExplicitVectorGrad {
        pair,
        first: side(pair.0, 1.0)?,
        second: side(pair.1, -1.0)?,
    })
}
