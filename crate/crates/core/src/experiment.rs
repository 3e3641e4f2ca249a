//! Paired-seed comparison of baseline and regularized detector training on
//! synthetic scenes, with the ablation rows toggling explicit features,
//! implicit features and class-balanced encoder pretraining.

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::encoder::{train_encoder, EncoderConfig, ImplicitExtractor, PatchDataset, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSample};
use crate::regularizer::RegularizerConfig;
use crate::rng::derive_seed;
use crate::synth::{detect, render_dataset, train_detector, DetectorConfig, GridDetectorParams, Regularization, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub detector: DetectorConfig,
    pub regularizer: RegularizerConfig,
    pub encoder: TrainConfig,
    pub iou_threshold: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            scene: SceneSpec::default(),
            train_scenes: 40,
            test_scenes: 10,
            detector: DetectorConfig::default(),
            regularizer: RegularizerConfig::default(),
            encoder: TrainConfig {
                crop_size: 32,
                encoder: EncoderConfig {
                    hidden: vec![64, 32],
                    ..EncoderConfig::default()
                },
                ..TrainConfig::default()
            },
            iou_threshold: 0.5,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.regularizer.validate()?;
        self.encoder.validate()?;
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Validation("train_scenes and test_scenes must be positive".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Validation("iou_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Explicit,
    Implicit,
    ExplicitImplicit,
    /// Explicit and implicit with class-balanced encoder pretraining; the
    /// full method.
    ExplicitImplicitBalanced,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Explicit,
        Variant::Implicit,
        Variant::ExplicitImplicit,
        Variant::ExplicitImplicitBalanced,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Explicit => "+explicit",
            Variant::Implicit => "+implicit",
            Variant::ExplicitImplicit => "+explicit+implicit",
            Variant::ExplicitImplicitBalanced => "+explicit+implicit+balance",
        }
    }

    /// `(explicit, implicit, balanced)`.
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false),
            Variant::Explicit => (true, false, false),
            Variant::Implicit => (false, true, false),
            Variant::ExplicitImplicit => (true, true, false),
            Variant::ExplicitImplicitBalanced => (true, true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub mae: Vec<f64>,
    pub mean_mae: f64,
    pub mean_mre: Option<f64>,
}

impl RunMetrics {
    pub fn from_report(report: &EvalReport) -> Self {
        RunMetrics {
            map: report.detection.map.unwrap_or(0.0),
            precision: report.detection.precision,
            recall: report.detection.recall,
            mae: report.counting.mae.clone(),
            mean_mae: report.counting.mean_mae,
            mean_mre: report.counting.mean_mre,
        }
    }
}

/// Training and test scenes of one benchmark seed.
pub fn seed_scenes(config: &BenchmarkConfig, seed: u64) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    let train = render_dataset(&config.scene.with_seed(derive_seed(seed, &[0])), config.train_scenes, 1)?;
    let test = render_dataset(&config.scene.with_seed(derive_seed(seed, &[1])), config.test_scenes, 1)?;
    Ok((train, test))
}

/// Pretrain the encoder on gold patches and fit PCA.
pub fn fit_extractor(config: &TrainConfig, scenes: &[ImageRecord], num_classes: usize) -> Result<ImplicitExtractor> {
    let dataset = PatchDataset::from_records(scenes, num_classes);
    let trained = train_encoder(config, &dataset)?;
    ImplicitExtractor::fit(trained.params, config.pipeline(), &dataset, config.pca_variance)
}

/// Detect on every test scene and compute all metrics; each scene is its
/// own full image.
pub fn evaluate_detector(
    params: &GridDetectorParams,
    scenes: &[ImageRecord],
    detector: &DetectorConfig,
    class_names: &[String],
    iou_threshold: f64,
) -> Result<EvalReport> {
    let samples: Vec<EvalSample> = scenes
        .iter()
        .enumerate()
        .map(|(i, r)| EvalSample {
            source: format!("scene-{i}"),
            detections: detect(params, &r.image, detector.conf_threshold, detector.nms_iou),
            gold: r.gold.clone(),
        })
        .collect();
    evaluate(&samples, class_names, iou_threshold)
}

/// Metrics of every requested variant on one seed.
pub fn run_seed(config: &BenchmarkConfig, seed: u64, variants: &[Variant]) -> Result<Vec<RunMetrics>> {
    config.validate()?;
    let n = config.scene.num_classes();
    let names = config.scene.class_names();
    let (train, test) = seed_scenes(config, seed)?;
    let needs = |balanced: bool| variants.iter().any(|v| v.toggles().1 && v.toggles().2 == balanced);
    let encoder_config = |balanced: bool| TrainConfig {
        balanced,
        seed: derive_seed(seed, &[2]),
        ..config.encoder.clone()
    };
    let unbalanced = needs(false).then(|| fit_extractor(&encoder_config(false), &train, n)).transpose()?;
    let balanced = needs(true).then(|| fit_extractor(&encoder_config(true), &train, n)).transpose()?;
    let detector = DetectorConfig {
        seed: derive_seed(seed, &[3]),
        ..config.detector.clone()
    };
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let (explicit, implicit, bal) = v.toggles();
        let reg_config = RegularizerConfig {
            explicit_weight: if explicit { config.regularizer.explicit_weight } else { 0.0 },
            implicit_weight: if implicit { config.regularizer.implicit_weight } else { 0.0 },
            seed: derive_seed(seed, &[4]),
            ..config.regularizer.clone()
        };
        let extractor = if implicit {
            if bal { balanced.as_ref() } else { unbalanced.as_ref() }
        } else {
            None
        };
        let regularization = (explicit || implicit).then_some(Regularization {
            config: &reg_config,
            extractor,
        });
        let trained = train_detector(&train, n, &detector, regularization)?;
        let report = evaluate_detector(&trained.params, &test, &detector, &names, config.iou_threshold)?;
        out.push(RunMetrics::from_report(&report));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<RunMetrics>,
    pub mean_map: f64,
    pub mean_mae: f64,
    /// Seeds where mAP >= the baseline's.
    pub map_wins: usize,
    /// Seeds where mean MAE <= the baseline's.
    pub mae_wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "variant,explicit,implicit,balance,mean_map,mean_mae,map_wins,mae_wins,seeds";

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            let (e, i, b) = r.variant.toggles();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.variant.label(),
                mark(e),
                mark(i),
                mark(b),
                r.mean_map,
                r.mean_mae,
                r.map_wins,
                r.mae_wins,
                self.seeds.len()
            ));
        }
        out
    }
}

/// Run every seed (seeds are independent and spread over `threads`
/// threads; the table does not depend on the thread count) and compare each
/// variant with the baseline of the same seed. The baseline is always run.
pub fn ablation(config: &BenchmarkConfig, seeds: &[u64], variants: &[Variant], threads: usize) -> Result<AblationTable> {
    config.validate()?;
    let mut variants_run = vec![Variant::Baseline];
    variants_run.extend(variants.iter().copied().filter(|v| *v != Variant::Baseline));
    let threads = threads.max(1).min(seeds.len().max(1));
    let per_seed: Vec<Vec<RunMetrics>> = if threads == 1 {
        seeds.iter().map(|&s| run_seed(config, s, &variants_run)).collect::<Result<_>>()?
    } else {
        let chunk = seeds.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Vec<RunMetrics>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| {
                    let variants_run = &variants_run;
                    scope.spawn(move || part.iter().map(|&s| run_seed(config, s, variants_run)).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("benchmark thread panicked")).collect()
        });
        let mut all = Vec::with_capacity(seeds.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let rows = variants_run
        .iter()
        .enumerate()
        .map(|(k, &variant)| {
            let runs: Vec<RunMetrics> = per_seed.iter().map(|s| s[k].clone()).collect();
            let n = runs.len().max(1) as f64;
            AblationRow {
                variant,
                mean_map: runs.iter().map(|r| r.map).sum::<f64>() / n,
                mean_mae: runs.iter().map(|r| r.mean_mae).sum::<f64>() / n,
                map_wins: per_seed.iter().filter(|s| s[k].map >= s[0].map).count(),
                mae_wins: per_seed.iter().filter(|s| s[k].mean_mae <= s[0].mean_mae).count(),
                per_seed: runs,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
