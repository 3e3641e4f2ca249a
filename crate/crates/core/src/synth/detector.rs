use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{iou, BoundingBox, Detection, GrayImage, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Length of the per-cell feature vector.
pub const CELL_FEATURE_DIM: usize = 21;
/// Pixels darker than this (as a fraction of full scale) count as
/// foreground in the block statistics.
pub const FOREGROUND_DARKNESS: f64 = 0.2;
pub const DETECTOR_FORMAT_VERSION: u32 = 1;
const LOG_SIZE_LIMIT: f64 = 10.0;

/// Linear per-cell scorer of a `grid x grid` detector.
///
/// Each cell predicts an objectness logit, `num_classes` class logits and
/// four box terms `(tx, ty, tw, th)`: the box center is
/// `((col + tx) * cw, (row + ty) * ch)` and its size `(cw e^tw, ch e^th)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDetectorParams {
    pub format_version: u32,
    pub grid: usize,
    pub num_classes: usize,
    /// Row-major `outputs x CELL_FEATURE_DIM`.
    pub weights: Vec<f64>,
}

impl GridDetectorParams {
    pub fn zeros(grid: usize, num_classes: usize) -> Self {
        GridDetectorParams {
            format_version: DETECTOR_FORMAT_VERSION,
            grid,
            num_classes,
            weights: vec![0.0; (5 + num_classes) * CELL_FEATURE_DIM],
        }
    }

    /// Small Gaussian weights; the objectness bias starts negative so an
    /// untrained detector reports few boxes.
    pub fn init(grid: usize, num_classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(grid, num_classes);
        let mut rng = rng_from(seed, &[0xde7]);
        let dist = Normal::new(0.0, 0.01).expect("valid std");
        for w in p.weights.iter_mut() {
            *w = dist.sample(&mut rng);
        }
        p.weights[0] = -2.0;
        p
    }

    pub fn outputs(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DETECTOR_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported detector format version {}",
                self.format_version
            )));
        }
        if self.grid == 0 || self.num_classes == 0 {
            return Err(Error::Validation("grid and num_classes must be positive".into()));
        }
        if self.weights.len() != self.outputs() * CELL_FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: self.outputs() * CELL_FEATURE_DIM,
                actual: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("detector weights must be finite".into()));
        }
        Ok(())
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * CELL_FEATURE_DIM..(o + 1) * CELL_FEATURE_DIM]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: GridDetectorParams = serde_json::from_str(&text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Fixed per-cell feature vectors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub grid: usize,
    pub width: usize,
    pub height: usize,
    pub rows: Vec<[f64; CELL_FEATURE_DIM]>,
}

impl CellFeatures {
    pub fn cell_size(&self) -> (f64, f64) {
        (self.width as f64 / self.grid as f64, self.height as f64 / self.grid as f64)
    }
}

fn span(i: usize, parts: usize, len: usize) -> (usize, usize) {
    (i * len / parts, (i + 1) * len / parts)
}

#[derive(Default)]
struct BlockStats {
    n: f64,
    sum: f64,
    sum_sq: f64,
    min: f64,
    max: f64,
    fg: f64,
    fg_dark: f64,
    fg_x: f64,
    fg_y: f64,
    fg_xx: f64,
    fg_yy: f64,
}

fn block_stats(darkness: &[f64], width: usize, xs: (usize, usize), ys: (usize, usize)) -> BlockStats {
    let mut s = BlockStats {
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        ..Default::default()
    };
    for y in ys.0..ys.1 {
        for x in xs.0..xs.1 {
            let d = darkness[y * width + x];
            s.n += 1.0;
            s.sum += d;
            s.sum_sq += d * d;
            s.min = s.min.min(d);
            s.max = s.max.max(d);
            if d > FOREGROUND_DARKNESS {
                let (fx, fy) = (x as f64, y as f64);
                s.fg += 1.0;
                s.fg_dark += d;
                s.fg_x += fx;
                s.fg_y += fy;
                s.fg_xx += fx * fx;
                s.fg_yy += fy * fy;
            }
        }
    }
    if s.n == 0.0 {
        s.min = 0.0;
        s.max = 0.0;
    }
    s
}

impl BlockStats {
    fn moments(&self) -> [f64; 4] {
        if self.n == 0.0 {
            return [0.0; 4];
        }
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        [mean, var.sqrt(), self.min, self.max]
    }
}

/// Block statistics of every grid cell, computed on darkness
/// `1 - value / 255`: moments of the cell and of its 3x3-cell context,
/// foreground fractions, the context's foreground centroid and spread
/// relative to the cell, mean foreground darkness, cell coordinates and a
/// bias term.
pub fn cell_features(image: &GrayImage, grid: usize) -> CellFeatures {
    let (w, h) = (image.width(), image.height());
    let darkness: Vec<f64> = image.pixels().iter().map(|v| 1.0 - v / 255.0).collect();
    let (cw, ch) = (w as f64 / grid as f64, h as f64 / grid as f64);
    let mut rows = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let xs = span(col, grid, w);
            let ys = span(row, grid, h);
            let cx = (span(col.saturating_sub(1), grid, w).0, span((col + 1).min(grid - 1), grid, w).1);
            let cy = (span(row.saturating_sub(1), grid, h).0, span((row + 1).min(grid - 1), grid, h).1);
            let cell = block_stats(&darkness, w, xs, ys);
            let ctx = block_stats(&darkness, w, cx, cy);
            let mut f = [0.0; CELL_FEATURE_DIM];
            f[0] = 1.0;
            f[1..5].copy_from_slice(&cell.moments());
            f[5..9].copy_from_slice(&ctx.moments());
            f[9] = if cell.n > 0.0 { cell.fg / cell.n } else { 0.0 };
            f[10] = if ctx.n > 0.0 { ctx.fg / ctx.n } else { 0.0 };
            let (mut dx, mut dy, mut sx, mut sy, mut dark) = (0.0, 0.0, 0.0, 0.0, 0.0);
            if ctx.fg > 0.0 {
                let mx = ctx.fg_x / ctx.fg;
                let my = ctx.fg_y / ctx.fg;
                dx = (mx - (col as f64 + 0.5) * cw) / cw;
                dy = (my - (row as f64 + 0.5) * ch) / ch;
                sx = (ctx.fg_xx / ctx.fg - mx * mx).max(0.0).sqrt() / cw;
                sy = (ctx.fg_yy / ctx.fg - my * my).max(0.0).sqrt() / ch;
                dark = ctx.fg_dark / ctx.fg;
            }
            f[11] = dx;
            f[12] = dy;
            f[13] = dx * dx;
            f[14] = dy * dy;
            f[15] = sx.max(0.1).ln();
            f[16] = sy.max(0.1).ln();
            f[17] = dark;
            f[18] = (1.0 + ctx.fg).ln() / 5.0;
            f[19] = (col as f64 + 0.5) / grid as f64;
            f[20] = (row as f64 + 0.5) / grid as f64;
            rows.push(f);
        }
    }
    CellFeatures {
        grid,
        width: w,
        height: h,
        rows,
    }
}

/// Raw outputs of every cell.
pub fn forward(params: &GridDetectorParams, features: &CellFeatures) -> Vec<Vec<f64>> {
    features
        .rows
        .iter()
        .map(|f| {
            (0..params.outputs())
                .map(|o| params.row(o).iter().zip(f).map(|(w, x)| w * x).sum())
                .collect()
        })
        .collect()
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Regression targets of a box assigned to the cell holding its center.
pub fn encode_box(bbox: &BoundingBox, grid: usize, width: usize, height: usize) -> (usize, [f64; 4]) {
    let (cw, ch) = (width as f64 / grid as f64, height as f64 / grid as f64);
    let (cx, cy) = bbox.center();
    let col = ((cx / cw).floor().max(0.0) as usize).min(grid - 1);
    let row = ((cy / ch).floor().max(0.0) as usize).min(grid - 1);
    let t = [
        cx / cw - col as f64,
        cy / ch - row as f64,
        (bbox.width().max(1e-3) / cw).ln(),
        (bbox.height().max(1e-3) / ch).ln(),
    ];
    (row * grid + col, t)
}

/// Unclamped box of cell `cell` from its regression terms.
pub fn decode_box(cell: usize, t: &[f64], grid: usize, width: usize, height: usize) -> BoundingBox {
    let (cw, ch) = (width as f64 / grid as f64, height as f64 / grid as f64);
    let (row, col) = (cell / grid, cell % grid);
    let cx = (col as f64 + t[0]) * cw;
    let cy = (row as f64 + t[1]) * ch;
    let w = cw * t[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
    let h = ch * t[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
    BoundingBox {
        left: cx - w / 2.0,
        top: cy - h / 2.0,
        right: cx + w / 2.0,
        bottom: cy + h / 2.0,
    }
}

/// Decoded prediction of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub cell: usize,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    /// `objectness * max class probability`.
    pub confidence: f64,
    /// Box before clamping to the image.
    pub raw_box: BoundingBox,
    pub bbox: BoundingBox,
}

pub fn cell_predictions(params: &GridDetectorParams, features: &CellFeatures, outputs: &[Vec<f64>]) -> Vec<CellPrediction> {
    let c = params.num_classes;
    outputs
        .iter()
        .enumerate()
        .map(|(cell, o)| {
            let objectness = sigmoid(o[0]);
            let class_probs = softmax(&o[1..1 + c]);
            let (class_id, pmax) = class_probs
                .iter()
                .cloned()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best });
            let raw_box = decode_box(cell, &o[1 + c..5 + c], features.grid, features.width, features.height);
            CellPrediction {
                cell,
                objectness,
                class_id,
                confidence: objectness * pmax,
                bbox: raw_box.clamp_to(features.width as f64, features.height as f64),
                raw_box,
                class_probs,
            }
        })
        .collect()
}

/// Greedy per-class suppression. Returns indices into `boxes`, ordered by
/// descending confidence (ties keep input order).
pub fn nms_indices(boxes: &[(BoundingBox, usize, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].2.total_cmp(&boxes[a].2));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let (bi, ci, _) = &boxes[i];
        let suppressed = kept.iter().any(|&k| boxes[k].1 == *ci && iou(&boxes[k].0, bi) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let keys: Vec<_> = detections.iter().map(|d| (d.bbox, d.class_id, d.confidence)).collect();
    nms_indices(&keys, iou_threshold).into_iter().map(|i| detections[i]).collect()
}

/// Cells at or above `conf_threshold` (and with positive confidence), after
/// suppression. Returned as indices into `preds`.
pub fn select_predictions(preds: &[CellPrediction], conf_threshold: f64, nms_iou: f64) -> Vec<usize> {
    let candidates: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].confidence > 0.0 && preds[i].confidence >= conf_threshold)
        .collect();
    let keys: Vec<_> = candidates
        .iter()
        .map(|&i| (preds[i].bbox, preds[i].class_id, preds[i].confidence))
        .collect();
    nms_indices(&keys, nms_iou).into_iter().map(|k| candidates[k]).collect()
}

pub fn detect_with_features(params: &GridDetectorParams, features: &CellFeatures, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let outputs = forward(params, features);
    let preds = cell_predictions(params, features, &outputs);
    select_predictions(&preds, conf_threshold, nms_iou)
        .into_iter()
        .map(|i| Detection {
            bbox: preds[i].bbox,
            class_id: preds[i].class_id,
            confidence: preds[i].confidence,
        })
        .collect()
}

pub fn detect(params: &GridDetectorParams, image: &GrayImage, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    detect_with_features(params, &cell_features(image, params.grid), conf_threshold, nms_iou)
}

/// Training target of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    pub t: [f64; 4],
}

/// Assign each gold box to the cell holding its center; when several land in
/// one cell the largest box wins.
pub fn assign_targets(record: &ImageRecord, grid: usize) -> Vec<Option<CellTarget>> {
    let (w, h) = (record.image.width(), record.image.height());
    let mut targets: Vec<Option<(f64, CellTarget)>> = vec![None; grid * grid];
    for g in &record.gold {
        let (cell, t) = encode_box(&g.bbox, grid, w, h);
        let area = g.bbox.area();
        if targets[cell].is_none_or(|(a, _)| area > a) {
            targets[cell] = Some((area, CellTarget { class_id: g.class_id, t }));
        }
    }
    targets.into_iter().map(|t| t.map(|(_, t)| t)).collect()
}

/// Detection loss terms of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLoss {
    pub objectness: f64,
    pub classification: f64,
    pub localization: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.objectness + self.classification + self.localization
    }
}

/// Loss and `d loss / d outputs` per cell.
///
/// Objectness is binary cross-entropy averaged over cells; classification
/// cross-entropy and squared box error are averaged over assigned cells.
pub fn detection_loss_outputs(
    params: &GridDetectorParams,
    outputs: &[Vec<f64>],
    targets: &[Option<CellTarget>],
) -> (DetectionLoss, Vec<Vec<f64>>) {
    let c = params.num_classes;
    let n_cells = outputs.len() as f64;
    let n_pos = targets.iter().flatten().count().max(1) as f64;
    let mut loss = DetectionLoss::default();
    let mut grads = vec![vec![0.0; params.outputs()]; outputs.len()];
    for ((o, t), g) in outputs.iter().zip(targets).zip(grads.iter_mut()) {
        let y = if t.is_some() { 1.0 } else { 0.0 };
        loss.objectness += (softplus(o[0]) - y * o[0]) / n_cells;
        g[0] = (sigmoid(o[0]) - y) / n_cells;
        let Some(t) = t else { continue };
        let p = softmax(&o[1..1 + c]);
        loss.classification -= p[t.class_id].max(f64::MIN_POSITIVE).ln() / n_pos;
        for k in 0..c {
            g[1 + k] = (p[k] - if k == t.class_id { 1.0 } else { 0.0 }) / n_pos;
        }
        for k in 0..4 {
            let e = o[1 + c + k] - t.t[k];
            loss.localization += e * e / n_pos;
            g[1 + c + k] = 2.0 * e / n_pos;
        }
    }
    (loss, grads)
}

/// Accumulate `scale * sum_cells d_out (x) features` into `grad`.
pub fn accumulate_weight_grad(features: &CellFeatures, d_outputs: &[Vec<f64>], scale: f64, grad: &mut [f64]) {
    for (f, d) in features.rows.iter().zip(d_outputs) {
        for (o, &dv) in d.iter().enumerate() {
            if dv == 0.0 {
                continue;
            }
            let row = &mut grad[o * CELL_FEATURE_DIM..(o + 1) * CELL_FEATURE_DIM];
            for (r, x) in row.iter_mut().zip(f) {
                *r += scale * dv * x;
            }
        }
    }
}

/// Detection loss of one record and its gradient with respect to the
/// weights.
pub fn detection_loss(params: &GridDetectorParams, record: &ImageRecord) -> (DetectionLoss, Vec<f64>) {
    let features = cell_features(&record.image, params.grid);
    let targets = assign_targets(record, params.grid);
    let outputs = forward(params, &features);
    let (loss, d_out) = detection_loss_outputs(params, &outputs, &targets);
    let mut grad = vec![0.0; params.weights.len()];
    accumulate_weight_grad(&features, &d_out, 1.0, &mut grad);
    (loss, grad)
}

/// Random weights for gradient checks and tests.
pub fn random_params(grid: usize, num_classes: usize, scale: f64, rng: &mut impl Rng) -> GridDetectorParams {
    let mut p = GridDetectorParams::zeros(grid, num_classes);
    for w in p.weights.iter_mut() {
        *w = rng.random_range(-scale..scale);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{render_scene, SceneSpec};

    #[test]
    fn saturated_objectness_gives_no_detections() {
        let rec = render_scene(&SceneSpec::default()).unwrap();
        let mut p = GridDetectorParams::zeros(16, 2);
        p.weights[0] = -1e300;
        assert!(detect(&p, &rec.image, 0.0, 0.5).is_empty());
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = BoundingBox::new(1.0, 1.0, 9.0, 9.0).unwrap();
        let dets = vec![Detection::new(b, 0, 0.9).unwrap(), Detection::new(b, 0, 0.8).unwrap()];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        let other = vec![Detection::new(b, 0, 0.9).unwrap(), Detection::new(b, 1, 0.8).unwrap()];
        assert_eq!(nms(other, 0.5).len(), 2);
    }

    #[test]
    fn encode_decode_round_trip() {
        let rec = render_scene(&SceneSpec::default()).unwrap();
        for g in &rec.gold {
            let (cell, t) = encode_box(&g.bbox, 16, 128, 128);
            let b = decode_box(cell, &t, 16, 128, 128);
            for (x, y) in b.coords().iter().zip(g.bbox.coords()) {
                assert!((x - y).abs() <= 0.5);
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn detections_stay_in_bounds() {
        let rec = render_scene(&SceneSpec::default()).unwrap();
        let mut rng = rng_from(5, &[]);
        for _ in 0..10 {
            let p = random_params(16, 2, 3.0, &mut rng);
            for d in detect(&p, &rec.image, 0.0, 0.5) {
                assert!(d.bbox.left >= 0.0 && d.bbox.top >= 0.0);
                assert!(d.bbox.right <= 128.0 && d.bbox.bottom <= 128.0);
                assert!((0.0..=1.0).contains(&d.confidence));
            }
        }
    }

    #[test]
    fn empty_image_only_has_background_objectness() {
        let mut spec = SceneSpec::default();
        for c in &mut spec.classes {
            c.count_mean = 0.0;
        }
        let rec = render_scene(&spec).unwrap();
        let p = GridDetectorParams::init(16, 2, 0);
        let (loss, _) = detection_loss(&p, &rec);
        assert!(loss.objectness > 0.0);
        assert_eq!(loss.classification, 0.0);
        assert_eq!(loss.localization, 0.0);
    }

    #[test]
    fn perfect_outputs_have_zero_localization() {
        let rec = render_scene(&SceneSpec::default()).unwrap();
        let p = GridDetectorParams::zeros(16, 2);
        let targets = assign_targets(&rec, 16);
        let outputs: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| match t {
                Some(t) => {
                    let mut o = vec![40.0, 0.0, 0.0, t.t[0], t.t[1], t.t[2], t.t[3]];
                    o[1 + t.class_id] = 40.0;
                    o
                }
                None => vec![-40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            })
            .collect();
        let (loss, _) = detection_loss_outputs(&p, &outputs, &targets);
        assert_eq!(loss.localization, 0.0);
        assert!(loss.classification < 1e-15);
        assert!(loss.objectness < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = SceneSpec::default();
        let mut rng = rng_from(6, &[]);
        for s in 0..3 {
            let rec = render_scene(&spec.with_seed(s)).unwrap();
            let p = random_params(16, 2, 0.5, &mut rng);
            let (_, grad) = detection_loss(&p, &rec);
            let h = 1e-6;
            for _ in 0..20 {
                let i = rng.random_range(0..p.weights.len());
                let mut a = p.clone();
                let mut b = p.clone();
                a.weights[i] += h;
                b.weights[i] -= h;
                let fd = (detection_loss(&a, &rec).0.total() - detection_loss(&b, &rec).0.total()) / (2.0 * h);
                let err = (fd - grad[i]).abs() / grad[i].abs().max(1e-4);
                assert!(err < 1e-5, "weight {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn features_are_finite() {
        let rec = render_scene(&SceneSpec::default()).unwrap();
        let f = cell_features(&rec.image, 16);
        assert_eq!(f.rows.len(), 256);
        assert!(f.rows.iter().all(|r| r.iter().all(|v| v.is_finite())));
    }
}
