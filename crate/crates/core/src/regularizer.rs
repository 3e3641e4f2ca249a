//! Posterior-regularization losses over discriminative vectors.
//!
//! For every class pair `(i, k)`, one GMM `P` is fit on the gold vectors of
//! a minibatch and one GMM `Q` on the predicted vectors; the pair loss is a
//! Monte-Carlo KL estimate between them, and pair losses are averaged. The
//! total training loss is `L_det + lambda * (w_exp * L_exp + w_imp * L_imp)`.
//!
//! Mixture parameters are constants for differentiation: gradients flow only
//! through `log Q(x_p)` evaluations and the feature-extraction chain. With
//! `McMode::Standard` the estimate draws from `P` and does not depend on the
//! predicted vectors once `Q` is fixed, so its gradient is zero.
//!
//! Per-box class weights generalize the hard class membership of the
//! averages: `A(c) = sum_j w_jc f_j / sum_j w_jc`. Hard labels are one-hot
//! weights; the grid detector supplies `objectness * P(class)` so the loss
//! also reaches its scores.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Detection, GoldBox, GrayImage, ImageRecord};
use crate::density::{em_fit, kl_mc_paired, kl_mc_standard, EmConfig, Gmm};
use crate::encoder::ImplicitExtractor;
use crate::error::{Error, Result};
use crate::features::{explicit_box_features, intensity_feature_grad, size_feature_grad, INTENSITY_FD_STEP};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McMode {
    /// Per-image sum `sum_im [log P(x_g) - log Q(x_p)]`.
    Paired,
    /// `(1/n) sum [log P(x) - log Q(x)]` with `x ~ P`.
    Standard,
}

impl std::str::FromStr for McMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(McMode::Paired),
            "standard" => Ok(McMode::Standard),
            other => Err(Error::Validation(format!("unknown mc mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingClassPolicy {
    /// Pairs without enough vectors are left out of the average.
    SkipPair,
    /// Such pairs contribute zero but still count in the denominator.
    ZeroContribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub lambda_reg: f64,
    pub explicit_weight: f64,
    pub implicit_weight: f64,
    pub k_explicit: usize,
    pub k_implicit: usize,
    pub mc_mode: McMode,
    pub mc_samples: usize,
    pub missing_class: MissingClassPolicy,
    /// Always divide by `C(n, 2)`, even when pairs are skipped.
    pub strict_pair_denominator: bool,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_reg: 0.01,
            explicit_weight: 1.0,
            implicit_weight: 1.0,
            k_explicit: 1,
            k_implicit: 1,
            mc_mode: McMode::Paired,
            mc_samples: 100_000,
            missing_class: MissingClassPolicy::SkipPair,
            strict_pair_denominator: false,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !(self.explicit_weight >= 0.0) || !(self.implicit_weight >= 0.0) {
            return Err(Error::Validation(
                "lambda_reg and loss weights must be >= 0".into(),
            ));
        }
        if self.k_explicit == 0 || self.k_implicit == 0 {
            return Err(Error::Validation("mixture sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One step of the training loss decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_det: f64,
    pub l_exp: f64,
    pub l_imp: f64,
    pub l_total: f64,
    pub skipped_pairs: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_det,L_exp,L_imp,L_total,skipped_pairs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_det, self.l_exp, self.l_imp, self.l_total, self.skipped_pairs
        )
    }
}

/// `L_total = L_det + lambda * (w_exp * L_exp + w_imp * L_imp)`.
pub fn total_loss(l_det: f64, l_exp: f64, l_imp: f64, config: &RegularizerConfig) -> LossReport {
    LossReport {
        step: 0,
        l_det,
        l_exp,
        l_imp,
        l_total: l_det
            + config.lambda_reg * (config.explicit_weight * l_exp + config.implicit_weight * l_imp),
        skipped_pairs: 0,
    }
}

/// All pairs `(i, k)` with `i < k`.
pub fn class_pairs(num_classes: usize) -> Vec<(usize, usize)> {
    (0..num_classes)
        .flat_map(|i| (i + 1..num_classes).map(move |k| (i, k)))
        .collect()
}

/// A box's feature vector with per-class membership weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBox {
    pub features: Vec<f64>,
    pub class_weights: Vec<f64>,
}

/// Feature table for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageFeatures {
    pub boxes: Vec<WeightedBox>,
    /// Whether each class is present (has at least one labeled box).
    pub present: Vec<bool>,
}

impl ImageFeatures {
    /// One-hot weights from hard labels.
    pub fn from_labeled(features: Vec<(usize, Vec<f64>)>, num_classes: usize) -> Self {
        let mut present = vec![false; num_classes];
        let boxes = features
            .into_iter()
            .map(|(c, f)| {
                present[c] = true;
                let mut w = vec![0.0; num_classes];
                w[c] = 1.0;
                WeightedBox {
                    features: f,
                    class_weights: w,
                }
            })
            .collect();
        ImageFeatures { boxes, present }
    }

    /// Weighted per-class average and the total weight.
    fn class_average(&self, class: usize) -> Option<(Vec<f64>, f64)> {
        if !self.present.get(class).copied().unwrap_or(false) {
            return None;
        }
        let d = self.boxes.first()?.features.len();
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        for b in &self.boxes {
            let w = b.class_weights[class];
            if w == 0.0 {
                continue;
            }
            total += w;
            for (a, f) in acc.iter_mut().zip(&b.features) {
                *a += w * f;
            }
        }
        (total > 0.0).then(|| (acc.into_iter().map(|a| a / total).collect(), total))
    }

    /// Discriminative vector `A(i) - A(k)`, or `None` when either class is
    /// missing.
    pub fn discriminative(&self, pair: (usize, usize)) -> Option<Vec<f64>> {
        let (a, _) = self.class_average(pair.0)?;
        let (b, _) = self.class_average(pair.1)?;
        Some(a.iter().zip(&b).map(|(x, y)| x - y).collect())
    }
}

/// Per-image vectors of one class pair, gold and predicted side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSamples {
    pub pair: (usize, usize),
    pub gold: Vec<Option<Vec<f64>>>,
    pub pred: Vec<Option<Vec<f64>>>,
}

pub fn pair_samples(
    gold: &[ImageFeatures],
    pred: &[ImageFeatures],
    num_classes: usize,
) -> Vec<PairSamples> {
    class_pairs(num_classes)
        .into_iter()
        .map(|pair| PairSamples {
            pair,
            gold: gold.iter().map(|f| f.discriminative(pair)).collect(),
            pred: pred.iter().map(|f| f.discriminative(pair)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PairTerm {
    pub pair: (usize, usize),
    /// `None` when the pair was skipped.
    pub kl: Option<f64>,
    pub std_error: Option<f64>,
    pub fits: Option<(Gmm, Gmm)>,
}

#[derive(Debug, Clone)]
pub struct PairwiseLoss {
    pub value: f64,
    pub terms: Vec<PairTerm>,
    pub skipped_pairs: usize,
    /// Denominator used for the average (0 when every pair was skipped).
    pub denominator: usize,
}

impl PairwiseLoss {
    /// True when no pair could be evaluated; the loss is then zero.
    pub fn all_skipped(&self) -> bool {
        self.terms.iter().all(|t| t.kl.is_none())
    }
}

fn available(v: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
    v.iter().flatten().cloned().collect()
}

fn paired_indices(s: &PairSamples) -> Vec<usize> {
    (0..s.gold.len().min(s.pred.len()))
        .filter(|&m| s.gold[m].is_some() && s.pred[m].is_some())
        .collect()
}

fn pair_seed(config: &RegularizerConfig, pair: (usize, usize)) -> u64 {
    derive_seed(config.seed, &[pair.0 as u64, pair.1 as u64])
}

fn evaluate_term(s: &PairSamples, p: &Gmm, q: &Gmm, config: &RegularizerConfig) -> Result<(f64, Option<f64>)> {
    match config.mc_mode {
        McMode::Paired => {
            let idx = paired_indices(s);
            let g: Vec<Vec<f64>> = idx.iter().map(|&m| s.gold[m].clone().unwrap()).collect();
            let x: Vec<Vec<f64>> = idx.iter().map(|&m| s.pred[m].clone().unwrap()).collect();
            Ok((kl_mc_paired(p, q, &g, &x)?, None))
        }
        McMode::Standard => {
            let est = kl_mc_standard(p, q, config.mc_samples, derive_seed(pair_seed(config, s.pair), &[1]))?;
            Ok((est.value, Some(est.std_error)))
        }
    }
}

fn denominator(evaluated: usize, skipped: usize, total_pairs: usize, config: &RegularizerConfig) -> usize {
    if config.strict_pair_denominator {
        total_pairs
    } else {
        match config.missing_class {
            MissingClassPolicy::SkipPair => evaluated,
            MissingClassPolicy::ZeroContribution => evaluated + skipped,
        }
    }
}

/// Fit `P` and `Q` per pair and average the KL terms. A pair is skipped when
/// either side has fewer than `k` vectors (or, in paired mode, no image has
/// both).
pub fn pairwise_loss(samples: &[PairSamples], k: usize, config: &RegularizerConfig) -> Result<PairwiseLoss> {
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let gold = available(&s.gold);
        let pred = available(&s.pred);
        let enough = gold.len() >= k.max(1)
            && pred.len() >= k.max(1)
            && (config.mc_mode == McMode::Standard || !paired_indices(s).is_empty());
        if !enough {
            terms.push(PairTerm {
                pair: s.pair,
                kl: None,
                std_error: None,
                fits: None,
            });
            continue;
        }
        let seed = pair_seed(config, s.pair);
        let p = em_fit(&gold, k, seed, &config.em)?.gmm;
        let q = em_fit(&pred, k, seed, &config.em)?.gmm;
        let (kl, se) = evaluate_term(s, &p, &q, config)?;
        terms.push(PairTerm {
            pair: s.pair,
            kl: Some(kl),
            std_error: se,
            fits: Some((p, q)),
        });
    }
    Ok(summarize(terms, samples.len(), config))
}

fn summarize(terms: Vec<PairTerm>, total_pairs: usize, config: &RegularizerConfig) -> PairwiseLoss {
    let evaluated = terms.iter().filter(|t| t.kl.is_some()).count();
    let skipped = terms.len() - evaluated;
    let denom = denominator(evaluated, skipped, total_pairs, config);
    let sum: f64 = terms.iter().filter_map(|t| t.kl).sum();
    PairwiseLoss {
        value: if denom > 0 { sum / denom as f64 } else { 0.0 },
        terms,
        skipped_pairs: skipped,
        denominator: denom,
    }
}

/// Re-evaluate a loss with mixtures held fixed (no refit). Pairs that were
/// skipped in `reference` stay skipped.
pub fn pairwise_loss_fixed(samples: &[PairSamples], reference: &PairwiseLoss, config: &RegularizerConfig) -> Result<f64> {
    let mut terms = Vec::with_capacity(samples.len());
    for (s, t) in samples.iter().zip(&reference.terms) {
        let kl = match &t.fits {
            Some((p, q)) => Some(evaluate_term(s, p, q, config)?.0),
            None => None,
        };
        terms.push(PairTerm {
            pair: s.pair,
            kl,
            std_error: None,
            fits: None,
        });
    }
    Ok(summarize(terms, samples.len(), config).value)
}

/// Gradient of a pairwise loss with respect to each predicted vector
/// (`[pair][image]`), mixtures held fixed.
pub fn pairwise_loss_grad(samples: &[PairSamples], loss: &PairwiseLoss, config: &RegularizerConfig) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    let mut out = Vec::with_capacity(samples.len());
    for (s, t) in samples.iter().zip(&loss.terms) {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; s.pred.len()];
        if let (Some((_, q)), McMode::Paired) = (&t.fits, config.mc_mode) {
            let scale = 1.0 / loss.denominator.max(1) as f64;
            for m in paired_indices(s) {
                let score = q.grad_log_density(s.pred[m].as_ref().unwrap())?;
                grads[m] = Some(score.into_iter().map(|g| -g * scale).collect());
            }
        }
        out.push(grads);
    }
    Ok(out)
}

/// Gradient of a loss with respect to one predicted box's features and its
/// class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxGrad {
    pub features: Vec<f64>,
    pub class_weights: Vec<f64>,
}

/// Backpropagate per-vector gradients into each predicted box of each image.
pub fn feature_table_grad(pred: &[ImageFeatures], samples: &[PairSamples], vector_grads: &[Vec<Option<Vec<f64>>>]) -> Vec<Vec<BoxGrad>> {
    let mut out: Vec<Vec<BoxGrad>> = pred
        .iter()
        .map(|img| {
            img.boxes
                .iter()
                .map(|b| BoxGrad {
                    features: vec![0.0; b.features.len()],
                    class_weights: vec![0.0; b.class_weights.len()],
                })
                .collect()
        })
        .collect();
    for (s, grads) in samples.iter().zip(vector_grads) {
        let (i, k) = s.pair;
        for (m, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let img = &pred[m];
            let (Some((ai, wi)), Some((ak, wk))) = (img.class_average(i), img.class_average(k)) else {
                continue;
            };
            for (b, bg) in img.boxes.iter().zip(out[m].iter_mut()) {
                let coef = b.class_weights[i] / wi - b.class_weights[k] / wk;
                let mut dot_i = 0.0;
                let mut dot_k = 0.0;
                for (d, gd) in g.iter().enumerate() {
                    bg.features[d] += gd * coef;
                    dot_i += gd * (b.features[d] - ai[d]);
                    dot_k += gd * (b.features[d] - ak[d]);
                }
                bg.class_weights[i] += dot_i / wi;
                bg.class_weights[k] -= dot_k / wk;
            }
        }
    }
    out
}

/// Explicit `[intensity, size]` feature tables for gold boxes.
pub fn explicit_gold_features(record: &ImageRecord, num_classes: usize) -> ImageFeatures {
    labeled_features(&record.image, &record.gold, num_classes, |img, b| {
        explicit_box_features(img, b).map(|f| f.to_vec())
    })
}

fn labeled_features(
    image: &GrayImage,
    gold: &[GoldBox],
    num_classes: usize,
    f: impl Fn(&GrayImage, &BoundingBox) -> Result<Vec<f64>>,
) -> ImageFeatures {
    // boxes whose features are undefined (no whole pixel) are left out
    let feats = gold
        .iter()
        .filter(|g| g.class_id < num_classes)
        .filter_map(|g| f(image, &g.bbox).ok().map(|v| (g.class_id, v)))
        .collect();
    ImageFeatures::from_labeled(feats, num_classes)
}

fn detections_as_gold(dets: &[Detection]) -> Vec<GoldBox> {
    dets.iter()
        .map(|d| GoldBox {
            class_id: d.class_id,
            bbox: d.bbox,
        })
        .collect()
}

fn check_batch(records: &[ImageRecord], detections: &[Vec<Detection>]) -> Result<()> {
    if records.len() != detections.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            actual: detections.len(),
        });
    }
    Ok(())
}

/// Explicit `[intensity, size]` pair samples of hard-labeled detections
/// and gold boxes.
pub fn explicit_pair_samples(records: &[ImageRecord], detections: &[Vec<Detection>], num_classes: usize) -> Result<Vec<PairSamples>> {
    let f = |img: &GrayImage, b: &BoundingBox| explicit_box_features(img, b).map(|f| f.to_vec());
    feature_pair_samples(records, detections, num_classes, f)
}

/// Implicit (encoder, PCA) pair samples of hard-labeled detections and gold
/// boxes.
pub fn implicit_pair_samples(
    records: &[ImageRecord],
    detections: &[Vec<Detection>],
    extractor: &ImplicitExtractor,
    num_classes: usize,
) -> Result<Vec<PairSamples>> {
    feature_pair_samples(records, detections, num_classes, |img, b| extractor.features(img, b))
}

fn feature_pair_samples(
    records: &[ImageRecord],
    detections: &[Vec<Detection>],
    num_classes: usize,
    f: impl Fn(&GrayImage, &BoundingBox) -> Result<Vec<f64>> + Copy,
) -> Result<Vec<PairSamples>> {
    check_batch(records, detections)?;
    let gold: Vec<ImageFeatures> = records.iter().map(|r| labeled_features(&r.image, &r.gold, num_classes, f)).collect();
    let pred: Vec<ImageFeatures> = records
        .iter()
        .zip(detections)
        .map(|(r, d)| labeled_features(&r.image, &detections_as_gold(d), num_classes, f))
        .collect();
    Ok(pair_samples(&gold, &pred, num_classes))
}

/// Explicit-feature loss of hard-labeled detections against gold.
pub fn explicit_loss(records: &[ImageRecord], detections: &[Vec<Detection>], num_classes: usize, config: &RegularizerConfig) -> Result<PairwiseLoss> {
    pairwise_loss(&explicit_pair_samples(records, detections, num_classes)?, config.k_explicit, config)
}

/// Implicit-feature loss of hard-labeled detections against gold.
pub fn implicit_loss(
    records: &[ImageRecord],
    detections: &[Vec<Detection>],
    extractor: &ImplicitExtractor,
    num_classes: usize,
    config: &RegularizerConfig,
) -> Result<PairwiseLoss> {
    pairwise_loss(&implicit_pair_samples(records, detections, extractor, num_classes)?, config.k_implicit, config)
}

/// Chain `d loss / d [intensity, size]` of one box into its coordinates.
/// The size part is analytic, the intensity part uses central differences.
pub fn explicit_coord_grad(image: &GrayImage, bbox: &BoundingBox, d_features: &[f64]) -> [f64; 4] {
    let gs = size_feature_grad(bbox);
    let gi = if d_features[0] != 0.0 {
        intensity_feature_grad(image, bbox, INTENSITY_FD_STEP)
    } else {
        [0.0; 4]
    };
    std::array::from_fn(|j| d_features[0] * gi[j] + d_features[1] * gs[j])
}

/// Gradients of the explicit and implicit losses for hard-labeled
/// detections.
#[derive(Debug, Clone)]
pub struct RegularizerGrad {
    pub explicit: PairwiseLoss,
    pub implicit: Option<PairwiseLoss>,
    /// `d L_exp / d vector`, indexed `[pair][image]`.
    pub explicit_vectors: Vec<Vec<Option<Vec<f64>>>>,
    pub implicit_vectors: Vec<Vec<Option<Vec<f64>>>>,
    /// `d L_exp / d [left, top, right, bottom]` per detection, per image.
    pub explicit_coords: Vec<Vec<[f64; 4]>>,
}

/// Gradients of `L_exp` (and `L_imp` when an extractor is given) with
/// mixtures fixed. Detections whose features are undefined get zero
/// gradient.
pub fn regularizer_grad(
    records: &[ImageRecord],
    detections: &[Vec<Detection>],
    extractor: Option<&ImplicitExtractor>,
    num_classes: usize,
    config: &RegularizerConfig,
) -> Result<RegularizerGrad> {
    check_batch(records, detections)?;
    let gold: Vec<ImageFeatures> = records.iter().map(|r| explicit_gold_features(r, num_classes)).collect();
    // keep detection order: track which detections survive feature extraction
    let mut pred = Vec::with_capacity(records.len());
    let mut kept = Vec::with_capacity(records.len());
    for (r, dets) in records.iter().zip(detections) {
        let mut feats = Vec::new();
        let mut idx = Vec::new();
        for (j, d) in dets.iter().enumerate() {
            if d.class_id >= num_classes {
                continue;
            }
            if let Ok(f) = explicit_box_features(&r.image, &d.bbox) {
                feats.push((d.class_id, f.to_vec()));
                idx.push(j);
            }
        }
        pred.push(ImageFeatures::from_labeled(feats, num_classes));
        kept.push(idx);
    }
    let samples = pair_samples(&gold, &pred, num_classes);
    let explicit = pairwise_loss(&samples, config.k_explicit, config)?;
    let explicit_vectors = pairwise_loss_grad(&samples, &explicit, config)?;
    let box_grads = feature_table_grad(&pred, &samples, &explicit_vectors);
    let explicit_coords = records
        .iter()
        .zip(detections)
        .enumerate()
        .map(|(m, (r, dets))| {
            let mut coords = vec![[0.0; 4]; dets.len()];
            for (slot, &j) in kept[m].iter().enumerate() {
                coords[j] = explicit_coord_grad(&r.image, &dets[j].bbox, &box_grads[m][slot].features);
            }
            coords
        })
        .collect();

    let (implicit, implicit_vectors) = match extractor {
        Some(ex) => {
            let loss_samples = implicit_pair_samples(records, detections, ex, num_classes)?;
            let loss = pairwise_loss(&loss_samples, config.k_implicit, config)?;
            let grads = pairwise_loss_grad(&loss_samples, &loss, config)?;
            (Some(loss), grads)
        }
        None => (None, Vec::new()),
    };
    Ok(RegularizerGrad {
        explicit,
        implicit,
        explicit_vectors,
        implicit_vectors,
        explicit_coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn lone(v: &[f64]) -> Option<Vec<f64>> {
        Some(v.to_vec())
    }

    #[test]
    fn total_loss_examples() {
        let mut cfg = RegularizerConfig::default();
        let r = total_loss(1.0, 2.0, 3.0, &cfg);
        assert!((r.l_total - 1.05).abs() < 1e-12);
        cfg.lambda_reg = 0.001;
        assert!((total_loss(1.0, 2.0, 3.0, &cfg).l_total - 1.005).abs() < 1e-12);
        cfg.lambda_reg = 0.0;
        assert_eq!(total_loss(1.7, 2.0, 3.0, &cfg).l_total, 1.7);
    }

    #[test]
    fn identical_vectors_give_zero_in_paired_mode() {
        let mut rng = rng_from(1, &[]);
        let v: Vec<Option<Vec<f64>>> = (0..8).map(|_| lone(&[rng.random_range(-5.0..5.0), rng.random_range(0.0..50.0)])).collect();
        let s = vec![PairSamples { pair: (0, 1), gold: v.clone(), pred: v }];
        let loss = pairwise_loss(&s, 1, &RegularizerConfig::default()).unwrap();
        assert_eq!(loss.value, 0.0);
        assert_eq!(loss.denominator, 1);
    }

    #[test]
    fn identical_vectors_near_zero_in_standard_mode() {
        let mut rng = rng_from(2, &[]);
        let v: Vec<Option<Vec<f64>>> = (0..8).map(|_| lone(&[rng.random_range(-5.0..5.0)])).collect();
        let s = vec![PairSamples { pair: (0, 1), gold: v.clone(), pred: v }];
        let cfg = RegularizerConfig {
            mc_mode: McMode::Standard,
            mc_samples: 20_000,
            ..Default::default()
        };
        let loss = pairwise_loss(&s, 1, &cfg).unwrap();
        let se = loss.terms[0].std_error.unwrap();
        assert!(loss.value.abs() <= 3.0 * se + 1e-12);
    }

    #[test]
    fn skipped_pairs_leave_the_denominator() {
        // 3 classes; pair (1, 2) never co-occurs
        let num_classes = 3;
        let mk = |classes: &[usize], shift: f64| -> ImageFeatures {
            ImageFeatures::from_labeled(
                classes.iter().map(|&c| (c, vec![c as f64 * 10.0 + shift])).collect(),
                num_classes,
            )
        };
        let gold: Vec<ImageFeatures> = (0..6)
            .map(|m| if m % 2 == 0 { mk(&[0, 1], m as f64) } else { mk(&[0, 2], m as f64) })
            .collect();
        let pred: Vec<ImageFeatures> = (0..6)
            .map(|m| if m % 2 == 0 { mk(&[0, 1], 0.5 * m as f64) } else { mk(&[0, 2], 0.5 * m as f64) })
            .collect();
        let samples = pair_samples(&gold, &pred, num_classes);
        let cfg = RegularizerConfig::default();
        let loss = pairwise_loss(&samples, 1, &cfg).unwrap();
        assert_eq!(loss.skipped_pairs, 1);
        assert_eq!(loss.denominator, 2);
        let sum: f64 = loss.terms.iter().filter_map(|t| t.kl).sum();
        assert_eq!(loss.value, sum / 2.0);

        let strict = RegularizerConfig {
            strict_pair_denominator: true,
            ..cfg.clone()
        };
        let l = pairwise_loss(&samples, 1, &strict).unwrap();
        assert_eq!(l.denominator, 3);
        assert_eq!(l.value, sum / 3.0);
    }

    #[test]
    fn two_classes_have_one_pair() {
        assert_eq!(class_pairs(2), vec![(0, 1)]);
        assert_eq!(class_pairs(4).len(), 6);
    }

    #[test]
    fn everything_skipped_gives_zero() {
        let s = vec![PairSamples { pair: (0, 1), gold: vec![None; 3], pred: vec![None; 3] }];
        let loss = pairwise_loss(&s, 1, &RegularizerConfig::default()).unwrap();
        assert!(loss.all_skipped());
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn single_gaussian_score() {
        // -d/dx log q(x) = Sigma^-1 (x - mu) scaled by the pair average
        let gold: Vec<Option<Vec<f64>>> = vec![lone(&[0.0]), lone(&[2.0]), lone(&[4.0])];
        let pred: Vec<Option<Vec<f64>>> = vec![lone(&[1.0]), lone(&[2.0]), lone(&[6.0])];
        let s = vec![PairSamples { pair: (0, 1), gold, pred }];
        let cfg = RegularizerConfig::default();
        let loss = pairwise_loss(&s, 1, &cfg).unwrap();
        let (_, q) = loss.terms[0].fits.clone().unwrap();
        let g = pairwise_loss_grad(&s, &loss, &cfg).unwrap();
        let mu = q.means()[0][0];
        let var = q.variances()[0][0];
        for (m, x) in [1.0, 2.0, 6.0].iter().enumerate() {
            let got = g[0][m].as_ref().unwrap()[0];
            assert!((got - (x - mu) / var).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_gradient_matches_fixed_fit_differences() {
        let mut rng = rng_from(3, &[]);
        let gold: Vec<Option<Vec<f64>>> = (0..6).map(|_| lone(&[rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)])).collect();
        let pred: Vec<Option<Vec<f64>>> = (0..6).map(|_| lone(&[rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)])).collect();
        let s = vec![PairSamples { pair: (0, 1), gold, pred }];
        let cfg = RegularizerConfig { k_explicit: 2, ..Default::default() };
        let loss = pairwise_loss(&s, 2, &cfg).unwrap();
        let g = pairwise_loss_grad(&s, &loss, &cfg).unwrap();
        let h = 1e-6;
        for m in 0..6 {
            for d in 0..2 {
                let mut p = s.clone();
                let mut q = s.clone();
                p[0].pred[m].as_mut().unwrap()[d] += h;
                q[0].pred[m].as_mut().unwrap()[d] -= h;
                let fd = (pairwise_loss_fixed(&p, &loss, &cfg).unwrap() - pairwise_loss_fixed(&q, &loss, &cfg).unwrap()) / (2.0 * h);
                let an = g[0][m].as_ref().unwrap()[d];
                assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-6, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn feature_table_grad_matches_differences() {
        let mut rng = rng_from(4, &[]);
        let num_classes = 3;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> ImageFeatures {
            let boxes = (0..5)
                .map(|_| WeightedBox {
                    features: vec![rng.random_range(0.0..10.0), rng.random_range(-1.0..1.0)],
                    class_weights: (0..num_classes).map(|_| rng.random_range(0.05..1.0)).collect(),
                })
                .collect();
            ImageFeatures { boxes, present: vec![true; num_classes] }
        };
        let gold: Vec<ImageFeatures> = (0..5).map(|_| mk(&mut rng)).collect();
        let pred: Vec<ImageFeatures> = (0..5).map(|_| mk(&mut rng)).collect();
        let cfg = RegularizerConfig::default();
        let samples = pair_samples(&gold, &pred, num_classes);
        let loss = pairwise_loss(&samples, 1, &cfg).unwrap();
        let vg = pairwise_loss_grad(&samples, &loss, &cfg).unwrap();
        let bg = feature_table_grad(&pred, &samples, &vg);
        let eval = |p: &[ImageFeatures]| pairwise_loss_fixed(&pair_samples(&gold, p, num_classes), &loss, &cfg).unwrap();
        let h = 1e-6;
        for m in [0, 3] {
            for j in [0, 4] {
                for d in 0..2 {
                    let mut a = pred.clone();
                    let mut b = pred.clone();
                    a[m].boxes[j].features[d] += h;
                    b[m].boxes[j].features[d] -= h;
                    let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                    let an = bg[m][j].features[d];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
                }
                for c in 0..num_classes {
                    let mut a = pred.clone();
                    let mut b = pred.clone();
                    a[m].boxes[j].class_weights[c] += h;
                    b[m].boxes[j].class_weights[c] -= h;
                    let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                    let an = bg[m][j].class_weights[c];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }
}
