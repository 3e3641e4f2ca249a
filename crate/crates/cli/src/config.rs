use std::path::Path;

use anyhow::{Context, Result};
use degpr_core::data::SliceConfig;
use degpr_core::density::EmConfig;
use degpr_core::encoder::TrainConfig;
use degpr_core::experiment::BenchmarkConfig;
use degpr_core::regularizer::{McMode, RegularizerConfig};
use degpr_core::synth::{DetectorConfig, SceneSpec};
use serde::{Deserialize, Serialize};

/// Every tunable of every subcommand. Loaded from JSON (unknown keys are
/// rejected), then overridden by flags. The top-level `seed` replaces the
/// nested ones so a run is reproducible from this one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub iou_threshold: f64,
    /// Scenes written by `synth`.
    pub scenes: usize,
    pub scene: SceneSpec,
    /// Tile every record before training and evaluation.
    pub slice: Option<SliceConfig>,
    pub encoder: TrainConfig,
    pub detector: DetectorConfig,
    pub regularizer: RegularizerConfig,
    pub gmm: GmmConfig,
    pub benchmark: BenchmarkSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub k: usize,
    pub em: EmConfig,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            k: 1,
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSettings {
    pub seeds: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub encoder: TrainConfig,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        BenchmarkSettings {
            seeds: 10,
            train_scenes: b.train_scenes,
            test_scenes: b.test_scenes,
            encoder: b.encoder,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            iou_threshold: 0.5,
            scenes: 50,
            scene: SceneSpec::default(),
            slice: None,
            encoder: TrainConfig::default(),
            detector: DetectorConfig::default(),
            regularizer: RegularizerConfig::default(),
            gmm: GmmConfig::default(),
            benchmark: BenchmarkSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub lambda_reg: Option<f64>,
    pub mc_mode: Option<McMode>,
    pub mc_samples: Option<usize>,
    pub iou_threshold: Option<f64>,
}

impl RunConfig {
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(degpr_core::Error::from)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = overrides.seed {
            cfg.seed = v;
        }
        if let Some(v) = overrides.threads {
            cfg.threads = v;
        }
        if let Some(v) = overrides.lambda_reg {
            cfg.regularizer.lambda_reg = v;
        }
        if let Some(v) = overrides.mc_mode {
            cfg.regularizer.mc_mode = v;
        }
        if let Some(v) = overrides.mc_samples {
            cfg.regularizer.mc_samples = v;
        }
        if let Some(v) = overrides.iou_threshold {
            cfg.iou_threshold = v;
        }
        cfg.scene.seed = cfg.seed;
        cfg.encoder.seed = cfg.seed;
        cfg.benchmark.encoder.seed = cfg.seed;
        cfg.detector.seed = cfg.seed;
        cfg.regularizer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(degpr_core::Error::Validation(msg.into()).into())
            }
        };
        check(self.threads >= 1, "threads must be >= 1")?;
        check(
            self.iou_threshold > 0.0 && self.iou_threshold < 1.0,
            "iou_threshold must be in (0, 1)",
        )?;
        check(self.gmm.k >= 1, "gmm.k must be >= 1")?;
        check(self.regularizer.mc_samples >= 2, "mc_samples must be >= 2")?;
        check(self.benchmark.seeds >= 1, "benchmark.seeds must be >= 1")?;
        self.scene.validate()?;
        self.encoder.validate()?;
        self.detector.validate()?;
        self.regularizer.validate()?;
        Ok(())
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            scene: self.scene.clone(),
            train_scenes: self.benchmark.train_scenes,
            test_scenes: self.benchmark.test_scenes,
            detector: self.detector.clone(),
            regularizer: self.regularizer.clone(),
            encoder: self.benchmark.encoder.clone(),
            iou_threshold: self.iou_threshold,
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
