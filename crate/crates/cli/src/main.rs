//! `degpr`: batch pipelines for synthetic data, encoder pretraining, GMM
//! fitting, KL estimation, detector training, evaluation, Q-ratio
//! classification and the ablation sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use degpr_core::regularizer::McMode;

use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "degpr", version, about = "Posterior-regularized cell detection pipelines")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Regularization weight; 0 disables the regularizer.
    #[arg(long, global = true)]
    lambda_reg: Option<f64>,
    #[arg(long, global = true, value_enum)]
    mc_mode: Option<McModeArg>,
    /// Monte-Carlo sample count for standard-mode KL.
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    #[arg(long, global = true)]
    iou_threshold: Option<f64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum McModeArg {
    Paired,
    Standard,
}

impl From<McModeArg> for McMode {
    fn from(m: McModeArg) -> Self {
        match m {
            McModeArg::Paired => McMode::Paired,
            McModeArg::Standard => McMode::Standard,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic scenes to PGM images, annotations and a manifest.
    Synth {
        /// Scene specification JSON (replaces the configured scene).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the patch encoder on gold boxes and fit PCA.
    EncoderTrain {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fit a diagonal GMM to the rows of a CSV file.
    GmmFit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Estimate KL(P || Q) between two serialized GMMs.
    Kl {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
        /// Gold vectors (CSV) for paired mode.
        #[arg(long)]
        gold_vectors: Option<PathBuf>,
        /// Predicted vectors (CSV) for paired mode.
        #[arg(long)]
        pred_vectors: Option<PathBuf>,
    },
    /// Train the grid detector, optionally with the regularizer.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained extractor, required when the implicit weight is
        /// positive and the regularizer is on.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Detect on a manifest and write detection and counting metrics.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Classify images from per-image counts by their Q-histology ratio.
    QRatio {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long, default_value = "iel")]
        iel_class: String,
        #[arg(long, default_value = "en")]
        en_class: String,
    },
    /// Paired-seed baseline versus regularized sweep over ablation rows.
    Ablation {
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<degpr_core::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<csv::Error>().is_some() {
            return "parse";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "invalid-input"
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let overrides = Overrides {
        seed: g.seed,
        threads: g.threads,
        lambda_reg: g.lambda_reg,
        mc_mode: g.mc_mode.map(Into::into),
        mc_samples: g.mc_samples,
        iou_threshold: g.iou_threshold,
    };
    let mut cfg = RunConfig::resolve(g.config.as_deref(), &overrides)?;
    let out = g.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| degpr_core::Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    match cli.command {
        Command::Synth { spec, count } => {
            if let Some(path) = spec {
                cfg.scene = degpr_core::synth::SceneSpec::load(&path)?;
                cfg.scene.seed = cfg.seed;
            }
            if let Some(n) = count {
                cfg.scenes = n;
            }
            cfg.write(out)?;
            commands::synth(&cfg, out)
        }
        Command::EncoderTrain { manifest } => {
            cfg.write(out)?;
            commands::encoder_train(&cfg, &manifest, out)
        }
        Command::GmmFit { input, k } => {
            if let Some(k) = k {
                cfg.gmm.k = k;
            }
            cfg.validate()?;
            cfg.write(out)?;
            commands::gmm_fit(&cfg, &input, out)
        }
        Command::Kl { p, q, gold_vectors, pred_vectors } => {
            cfg.write(out)?;
            commands::kl(&cfg, &p, &q, gold_vectors.as_deref(), pred_vectors.as_deref(), out)
        }
        Command::Train { manifest, encoder } => {
            cfg.write(out)?;
            commands::train(&cfg, &manifest, encoder.as_deref(), out)
        }
        Command::Eval { manifest, detector } => {
            if overrides.iou_threshold.is_none() {
                cfg.iou_threshold = degpr_core::data::DatasetManifest::load(&manifest)?.iou_threshold;
                cfg.validate()?;
            }
            cfg.write(out)?;
            commands::eval(&cfg, &manifest, &detector, out)
        }
        Command::QRatio { counts, iel_class, en_class } => {
            cfg.write(out)?;
            commands::q_ratio(&counts, &iel_class, &en_class, out)
        }
        Command::Ablation { seeds } => {
            if let Some(n) = seeds {
                cfg.benchmark.seeds = n;
            }
            cfg.validate()?;
            cfg.write(out)?;
            commands::ablation(&cfg, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: usage: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", error_kind(&e), one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
