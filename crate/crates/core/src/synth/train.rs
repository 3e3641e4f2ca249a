use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::detector::{
    accumulate_weight_grad, assign_targets, cell_features, cell_predictions, detection_loss_outputs,
    forward, select_predictions, CellFeatures, CellPrediction, CellTarget, GridDetectorParams,
};
use crate::data::{GrayImage, ImageRecord};
use crate::encoder::ImplicitExtractor;
use crate::error::{Error, Result};
use crate::features::explicit_box_features;
use crate::regularizer::{
    explicit_coord_grad, feature_table_grad, pair_samples, pairwise_loss, pairwise_loss_grad,
    total_loss, BoxGrad, ImageFeatures, LossReport, RegularizerConfig, WeightedBox,
};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub grid: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Confidence threshold of reported detections.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Confidence threshold of the boxes fed to the regularizer.
    pub regularizer_threshold: f64,
    /// Also pass the explicit-feature gradient into the box regressors.
    /// Off by default: only the class-weight path reaches the detector.
    pub regularize_box_coords: bool,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            grid: 16,
            epochs: 60,
            batch_size: 8,
            learning_rate: 0.1,
            momentum: 0.9,
            conf_threshold: 0.3,
            nms_iou: 0.5,
            regularizer_threshold: 0.3,
            regularize_box_coords: false,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("grid, epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation("learning_rate must be > 0 and momentum in [0, 1)".into()));
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou", self.nms_iou),
            ("regularizer_threshold", self.regularizer_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Posterior regularization attached to detector training.
#[derive(Debug, Clone, Copy)]
pub struct Regularization<'a> {
    pub config: &'a RegularizerConfig,
    /// Frozen extractor; required when the implicit weight is positive.
    pub extractor: Option<&'a ImplicitExtractor>,
}

#[derive(Debug, Clone)]
pub struct DetectorTraining {
    pub params: GridDetectorParams,
    /// One report per epoch, averaged over its batches.
    pub trace: Vec<LossReport>,
    /// Batches whose regularizer had no evaluable pair.
    pub empty_regularizer_batches: usize,
}

/// Gradient of a box's class weights `w_c = objectness * p_c` pulled back
/// to the objectness logit and the class logits.
pub fn class_weight_logit_grad(objectness: f64, probs: &[f64], d_weights: &[f64]) -> (f64, Vec<f64>) {
    let gp: f64 = d_weights.iter().zip(probs).map(|(g, p)| g * p).sum();
    let d_obj = gp * objectness * (1.0 - objectness);
    let d_cls = probs
        .iter()
        .zip(d_weights)
        .map(|(p, g)| objectness * p * (g - gp))
        .collect();
    (d_obj, d_cls)
}

/// Pull `d loss / d [left, top, right, bottom]` of a decoded box back to
/// `(tx, ty, tw, th)`. Coordinates clamped to the image get no gradient.
fn box_term_grad(pred: &CellPrediction, features: &CellFeatures, d_coords: [f64; 4]) -> [f64; 4] {
    let (cw, ch) = features.cell_size();
    let raw = pred.raw_box.coords();
    let clamped = pred.bbox.coords();
    let live = |j: usize| if raw[j] == clamped[j] { d_coords[j] } else { 0.0 };
    let (w, h) = (pred.raw_box.width(), pred.raw_box.height());
    [
        cw * (live(0) + live(2)),
        ch * (live(1) + live(3)),
        w / 2.0 * (live(2) - live(0)),
        h / 2.0 * (live(3) - live(1)),
    ]
}

struct PredictedSet {
    features: ImageFeatures,
    /// Cell of each box in `features.boxes`.
    cells: Vec<usize>,
}

fn predicted_set(
    image: &GrayImage,
    preds: &[CellPrediction],
    selected: &[usize],
    num_classes: usize,
    feature: impl Fn(&GrayImage, &crate::data::BoundingBox) -> Result<Vec<f64>>,
) -> PredictedSet {
    let mut present = vec![false; num_classes];
    let mut boxes = Vec::new();
    let mut cells = Vec::new();
    for &i in selected {
        let p = &preds[i];
        let Ok(f) = feature(image, &p.bbox) else { continue };
        present[p.class_id] = true;
        boxes.push(WeightedBox {
            features: f,
            class_weights: p.class_probs.iter().map(|q| q * p.objectness).collect(),
        });
        cells.push(i);
    }
    PredictedSet {
        features: ImageFeatures { boxes, present },
        cells,
    }
}

/// Gold feature tables of one scene; fixed for the whole run.
struct GoldFeatures {
    explicit: ImageFeatures,
    implicit: Option<ImageFeatures>,
}

fn gold_features(record: &ImageRecord, num_classes: usize, extractor: Option<&ImplicitExtractor>) -> GoldFeatures {
    let implicit = extractor.map(|ex| {
        let feats = record
            .gold
            .iter()
            .filter_map(|g| ex.features(&record.image, &g.bbox).ok().map(|f| (g.class_id, f)))
            .collect();
        ImageFeatures::from_labeled(feats, num_classes)
    });
    GoldFeatures {
        explicit: crate::regularizer::explicit_gold_features(record, num_classes),
        implicit,
    }
}

struct RegularizerStep {
    l_exp: f64,
    l_imp: f64,
    skipped: usize,
    empty: bool,
}

#[allow(clippy::too_many_arguments)]
fn regularizer_step(
    reg: &Regularization<'_>,
    cfg: &RegularizerConfig,
    params: &GridDetectorParams,
    records: &[&ImageRecord],
    gold_sets: &[&GoldFeatures],
    features: &[&CellFeatures],
    outputs: &[Vec<Vec<f64>>],
    d_out: &mut [Vec<Vec<f64>>],
    config: &DetectorConfig,
) -> Result<RegularizerStep> {
    let c = params.num_classes;
    let preds: Vec<Vec<CellPrediction>> = features
        .iter()
        .zip(outputs)
        .map(|(f, o)| cell_predictions(params, f, o))
        .collect();
    let selected: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| select_predictions(p, config.regularizer_threshold, config.nms_iou))
        .collect();

    let apply = |d_out: &mut [Vec<Vec<f64>>], sets: &[PredictedSet], grads: &[Vec<BoxGrad>], scale: f64, coords: bool| {
        for (m, (set, g)) in sets.iter().zip(grads).enumerate() {
            for (&cell, bg) in set.cells.iter().zip(g) {
                let p = &preds[m][cell];
                let (d_obj, d_cls) = class_weight_logit_grad(p.objectness, &p.class_probs, &bg.class_weights);
                let d = &mut d_out[m][cell];
                d[0] += scale * d_obj;
                for k in 0..c {
                    d[1 + k] += scale * d_cls[k];
                }
                if coords {
                    let dc = explicit_coord_grad(&records[m].image, &p.bbox, &bg.features);
                    let dt = box_term_grad(p, features[m], dc);
                    for k in 0..4 {
                        d[1 + c + k] += scale * dt[k];
                    }
                }
            }
        }
    };

    let mut step = RegularizerStep {
        l_exp: 0.0,
        l_imp: 0.0,
        skipped: 0,
        empty: true,
    };

    if cfg.explicit_weight > 0.0 {
        let explicit = |img: &GrayImage, b: &crate::data::BoundingBox| explicit_box_features(img, b).map(|f| f.to_vec());
        let gold: Vec<ImageFeatures> = gold_sets.iter().map(|g| g.explicit.clone()).collect();
        let sets: Vec<PredictedSet> = (0..records.len())
            .map(|m| predicted_set(&records[m].image, &preds[m], &selected[m], c, explicit))
            .collect();
        let pred: Vec<ImageFeatures> = sets.iter().map(|s| s.features.clone()).collect();
        let samples = pair_samples(&gold, &pred, c);
        let loss = pairwise_loss(&samples, cfg.k_explicit, cfg)?;
        let vg = pairwise_loss_grad(&samples, &loss, cfg)?;
        let bg = feature_table_grad(&pred, &samples, &vg);
        apply(d_out, &sets, &bg, cfg.lambda_reg * cfg.explicit_weight, config.regularize_box_coords);
        step.l_exp = loss.value;
        step.skipped += loss.skipped_pairs;
        step.empty &= loss.all_skipped();
    }

    if cfg.implicit_weight > 0.0 {
        let ex = reg.extractor.ok_or_else(|| {
            Error::Validation("implicit regularization needs a pretrained extractor".into())
        })?;
        let implicit = |img: &GrayImage, b: &crate::data::BoundingBox| ex.features(img, b);
        let gold: Vec<ImageFeatures> = gold_sets
            .iter()
            .map(|g| g.implicit.clone().unwrap_or_default())
            .collect();
        let sets: Vec<PredictedSet> = (0..records.len())
            .map(|m| predicted_set(&records[m].image, &preds[m], &selected[m], c, implicit))
            .collect();
        let pred: Vec<ImageFeatures> = sets.iter().map(|s| s.features.clone()).collect();
        let samples = pair_samples(&gold, &pred, c);
        let loss = pairwise_loss(&samples, cfg.k_implicit, cfg)?;
        let vg = pairwise_loss_grad(&samples, &loss, cfg)?;
        let bg = feature_table_grad(&pred, &samples, &vg);
        apply(d_out, &sets, &bg, cfg.lambda_reg * cfg.implicit_weight, false);
        step.l_imp = loss.value;
        step.skipped += loss.skipped_pairs;
        step.empty &= loss.all_skipped();
    }
    Ok(step)
}

/// Minibatch SGD with momentum on `L_det + lambda * (w_e L_exp + w_i L_imp)`.
///
/// Mixtures are refit on every minibatch and treated as constants. With
/// `lambda_reg = 0` (or no regularization) the regularizer is never
/// evaluated, so the result is identical to plain detector training.
pub fn train_detector(
    scenes: &[ImageRecord],
    num_classes: usize,
    config: &DetectorConfig,
    regularization: Option<Regularization<'_>>,
) -> Result<DetectorTraining> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Validation("training needs at least one scene".into()));
    }
    if let Some(g) = scenes.iter().flat_map(|r| &r.gold).find(|g| g.class_id >= num_classes) {
        return Err(Error::Validation(format!("gold class {} out of range", g.class_id)));
    }
    let active = match regularization {
        Some(r) if r.config.lambda_reg > 0.0 => {
            r.config.validate()?;
            if r.config.implicit_weight > 0.0 && r.extractor.is_none() {
                return Err(Error::Validation("implicit regularization needs a pretrained extractor".into()));
            }
            Some(r)
        }
        _ => None,
    };

    let features: Vec<CellFeatures> = scenes.iter().map(|r| cell_features(&r.image, config.grid)).collect();
    let targets: Vec<Vec<Option<CellTarget>>> = scenes.iter().map(|r| assign_targets(r, config.grid)).collect();
    let gold_sets: Vec<GoldFeatures> = match active {
        Some(r) => scenes
            .iter()
            .map(|s| gold_features(s, num_classes, r.extractor.filter(|_| r.config.implicit_weight > 0.0)))
            .collect(),
        None => Vec::new(),
    };
    let mut params = GridDetectorParams::init(config.grid, num_classes, config.seed);
    let mut velocity = vec![0.0; params.weights.len()];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut empty_batches = 0;
    let mut step_index = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng_from(config.seed, &[1, epoch as u64]));
        let mut sums = [0.0; 4];
        let mut skipped = 0;
        let mut batches = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let outputs: Vec<Vec<Vec<f64>>> = batch.iter().map(|&i| forward(&params, &features[i])).collect();
            let mut l_det = 0.0;
            let mut d_out = Vec::with_capacity(batch.len());
            for (o, &i) in outputs.iter().zip(batch) {
                let (loss, mut d) = detection_loss_outputs(&params, o, &targets[i]);
                l_det += scale * loss.total();
                for row in d.iter_mut() {
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                d_out.push(d);
            }
            let (mut l_exp, mut l_imp, mut step_skipped) = (0.0, 0.0, 0);
            let mut report_cfg = RegularizerConfig {
                lambda_reg: 0.0,
                ..RegularizerConfig::default()
            };
            if let Some(reg) = active {
                let cfg = RegularizerConfig {
                    seed: derive_seed(reg.config.seed, &[step_index]),
                    ..reg.config.clone()
                };
                let records: Vec<&ImageRecord> = batch.iter().map(|&i| &scenes[i]).collect();
                let golds: Vec<&GoldFeatures> = batch.iter().map(|&i| &gold_sets[i]).collect();
                let feats: Vec<&CellFeatures> = batch.iter().map(|&i| &features[i]).collect();
                let step = regularizer_step(&reg, &cfg, &params, &records, &golds, &feats, &outputs, &mut d_out, config)?;
                l_exp = step.l_exp;
                l_imp = step.l_imp;
                step_skipped = step.skipped;
                empty_batches += step.empty as usize;
                report_cfg = cfg;
            }
            let report = total_loss(l_det, l_exp, l_imp, &report_cfg);
            let mut grad = vec![0.0; params.weights.len()];
            for (d, &i) in d_out.iter().zip(batch) {
                accumulate_weight_grad(&features[i], d, 1.0, &mut grad);
            }
            if !report.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}, batch {b}: non-finite loss or gradient (L_det {l_det}, L_exp {l_exp}, L_imp {l_imp})"
                )));
            }
            for ((w, v), g) in params.weights.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *w += *v;
            }
            sums[0] += report.l_det;
            sums[1] += report.l_exp;
            sums[2] += report.l_imp;
            sums[3] += report.l_total;
            skipped += step_skipped;
            batches += 1;
            step_index += 1;
        }
        let n = batches as f64;
        trace.push(LossReport {
            step: epoch,
            l_det: sums[0] / n,
            l_exp: sums[1] / n,
            l_imp: sums[2] / n,
            l_total: sums[3] / n,
            skipped_pairs: skipped,
        });
    }
    Ok(DetectorTraining {
        params,
        trace,
        empty_regularizer_batches: empty_batches,
    })
}
