//! Contrastive pretraining of the patch encoder.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_box, AugmentConfig};
use super::network::{normalize, normalize_backward, EncoderConfig, EncoderParams, PatchPipeline};
use super::supcon::supcon_grad;
use crate::data::{BoundingBox, GrayImage, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Fraction of augmented patches reached halfway through training.
    pub max_augment_fraction: f64,
    pub augment: AugmentConfig,
    /// Equal number of patches per class in every batch.
    pub balanced: bool,
    pub crop_size: usize,
    pub encoder: EncoderConfig,
    pub pca_variance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.1,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
            batches_per_epoch: 8,
            max_augment_fraction: 0.5,
            augment: AugmentConfig::default(),
            balanced: true,
            crop_size: 224,
            encoder: EncoderConfig::default(),
            pca_variance: super::pca::PCA_VARIANCE_TARGET,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn pipeline(&self) -> PatchPipeline {
        PatchPipeline {
            crop_size: self.crop_size,
            input_size: self.encoder.input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("temperature must be > 0".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Validation(
                "batch_size >= 2, epochs >= 1 and batches_per_epoch >= 1 required".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_augment_fraction) {
            return Err(Error::Validation("max_augment_fraction outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// One gold patch: image index, box and class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample {
    pub image: usize,
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Debug, Clone)]
pub struct PatchDataset<'a> {
    pub images: Vec<&'a GrayImage>,
    pub samples: Vec<PatchSample>,
    pub num_classes: usize,
}

impl<'a> PatchDataset<'a> {
    /// All gold boxes with positive area.
    pub fn from_records(records: &'a [ImageRecord], num_classes: usize) -> Self {
        let samples = records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.gold
                    .iter()
                    .filter(|g| g.bbox.area() > 0.0 && g.class_id < num_classes)
                    .map(move |g| PatchSample {
                        image: i,
                        bbox: g.bbox,
                        class_id: g.class_id,
                    })
            })
            .collect();
        PatchDataset {
            images: records.iter().map(|r| &r.image).collect(),
            samples,
            num_classes,
        }
    }

    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.class_id].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation("contrastive training needs >= 2 classes".into()));
        }
        for (c, members) in self.by_class().iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!("class {c} has no patches")));
            }
        }
        Ok(())
    }
}

/// Fraction of augmented patches in `epoch`: linear from 0 to `max` over
/// the first half of training, then flat.
pub fn annealed_augment_fraction(epoch: usize, epochs: usize, max: f64) -> f64 {
    let half = epochs as f64 / 2.0;
    if half <= 0.0 {
        return max;
    }
    max * (epoch as f64 / half).min(1.0)
}

/// Sample `batch_size / num_classes` patches from every class, without
/// replacement when a class has enough patches and with replacement
/// otherwise.
pub fn balanced_batch(by_class: &[Vec<usize>], batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let per_class = (batch_size / by_class.len()).max(2);
    let mut out = Vec::with_capacity(per_class * by_class.len());
    for members in by_class {
        if members.len() >= per_class {
            out.extend(
                sample_indices(rng, members.len(), per_class)
                    .into_iter()
                    .map(|i| members[i]),
            );
        } else {
            out.extend((0..per_class).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    out
}

fn uniform_batch(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= batch_size {
        sample_indices(rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub params: EncoderParams,
    /// Mean batch loss (summed over anchors) per epoch.
    pub loss_trace: Vec<f64>,
    pub skipped_batches: usize,
}

/// Mini-batch SGD with momentum on the supervised contrastive loss.
/// Single-threaded and bit-reproducible for a given seed.
pub fn train_encoder(config: &TrainConfig, dataset: &PatchDataset<'_>) -> Result<EncoderTraining> {
    config.validate()?;
    dataset.validate()?;
    let pipeline = config.pipeline();
    let by_class = dataset.by_class();
    let mut params = EncoderParams::init(&config.encoder, config.seed);
    let mut velocity = params.zeros_like();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut skipped_batches = 0;

    for epoch in 0..config.epochs {
        let frac = annealed_augment_fraction(epoch, config.epochs, config.max_augment_fraction);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for b in 0..config.batches_per_epoch {
            let mut rng = rng_from(config.seed, &[epoch as u64, b as u64]);
            let idx = if config.balanced {
                balanced_batch(&by_class, config.batch_size, &mut rng)
            } else {
                uniform_batch(dataset.samples.len(), config.batch_size, &mut rng)
            };
            let mut inputs = Vec::with_capacity(idx.len());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in &idx {
                let s = &dataset.samples[i];
                let image = dataset.images[s.image];
                let mut bbox = s.bbox;
                if rng.random::<f64>() < frac {
                    let bounds = (image.width() as f64, image.height() as f64);
                    let jittered = augment_box(&bbox, &mut rng, &config.augment, Some(bounds));
                    if jittered.area() > 0.0 {
                        bbox = jittered;
                    }
                }
                inputs.push(pipeline.input(image, &bbox)?);
                labels.push(s.class_id);
            }
            let mut acts = Vec::with_capacity(inputs.len());
            let mut zs = Vec::with_capacity(inputs.len());
            let mut norms = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let a = params.forward(x);
                let (z, norm) = normalize(a.last().unwrap());
                acts.push(a);
                zs.push(z);
                norms.push(norm);
            }
            let (loss, grad_z) = match supcon_grad(&zs, &labels, config.temperature) {
                Ok(v) => v,
                Err(Error::UndefinedLoss(_)) => {
                    skipped_batches += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !loss.value.is_finite() {
                return Err(Error::Divergence(format!(
                    "encoder loss {} at epoch {epoch}",
                    loss.value
                )));
            }
            let mut grads = params.zeros_like();
            for i in 0..inputs.len() {
                let g_raw = normalize_backward(&zs[i], norms[i], &grad_z[i]);
                params.backward(&inputs[i], &acts[i], &g_raw, &mut grads);
            }
            for ((w, v), g) in params
                .values_mut()
                .zip(velocity.values_mut())
                .zip(grads.values())
            {
                *v = config.momentum * *v - config.learning_rate * g;
                *w += *v;
            }
            epoch_loss += loss.value;
            batches += 1;
        }
        trace.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            f64::NAN
        });
    }
    params.validate()?;
    Ok(EncoderTraining {
        params,
        loss_trace: trace,
        skipped_batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GoldBox, GrayImage};

    #[test]
    fn balanced_batch_has_equal_class_counts() {
        let by_class = vec![(0..50).collect::<Vec<_>>(), vec![50, 51], (52..60).collect()];
        let mut rng = rng_from(1, &[]);
        let batch = balanced_batch(&by_class, 6, &mut rng);
        assert_eq!(batch.len(), 6);
        for (c, members) in by_class.iter().enumerate() {
            let n = batch.iter().filter(|i| members.contains(i)).count();
            assert_eq!(n, 2, "class {c}");
        }
        // minority class is sampled with replacement
        let big = balanced_batch(&by_class, 30, &mut rng);
        assert_eq!(big.iter().filter(|&&i| i == 50 || i == 51).count(), 10);
    }

    #[test]
    fn annealing_schedule() {
        assert_eq!(annealed_augment_fraction(0, 10, 0.5), 0.0);
        assert_eq!(annealed_augment_fraction(5, 10, 0.5), 0.5);
        assert_eq!(annealed_augment_fraction(9, 10, 0.5), 0.5);
        assert!((annealed_augment_fraction(2, 10, 0.5) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_rejected() {
        let rec = ImageRecord::new(
            GrayImage::filled(16, 16, 0.0),
            vec![GoldBox {
                class_id: 0,
                bbox: BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap(),
            }],
        )
        .unwrap();
        let records = [rec];
        let ds = PatchDataset::from_records(&records, 2);
        assert!(matches!(
            train_encoder(&TrainConfig::default(), &ds),
            Err(Error::Validation(_))
        ));
    }
}
