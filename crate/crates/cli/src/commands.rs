use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use degpr_core::data::{
    slice_image, write_annotations, write_pgm, DatasetManifest, ImageRecord, ManifestRecord,
};
use degpr_core::density::{em_fit, kl_mc_paired, kl_mc_standard_threaded, Gmm};
use degpr_core::encoder::{train_encoder, ImplicitExtractor, PatchDataset};
use degpr_core::eval::{
    classification_metrics, classify_celiac, evaluate, q_ratio as ratio, Diagnosis, EvalSample,
};
use degpr_core::experiment::{ablation as run_ablation, Variant};
use degpr_core::regularizer::{LossReport, McMode};
use degpr_core::synth::{detect, render_dataset, train_detector, GridDetectorParams, Regularization};
use serde::Serialize;

use crate::config::RunConfig;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| degpr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| degpr_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Manifest records with their source ids, tiled when the config asks for
/// slicing. Every tile keeps the source id of its full image.
fn load_dataset(cfg: &RunConfig, manifest_path: &Path) -> Result<(DatasetManifest, Vec<ImageRecord>, Vec<String>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = manifest.load_records(&base)?;
    let sources = manifest.sources();
    let Some(slice) = &cfg.slice else {
        return Ok((manifest, records, sources));
    };
    let mut tiles = Vec::new();
    let mut tile_sources = Vec::new();
    for (record, source) in records.iter().zip(&sources) {
        for tile in slice_image(record, slice)? {
            tiles.push(tile);
            tile_sources.push(source.clone());
        }
    }
    Ok((manifest, tiles, tile_sources))
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let scenes = render_dataset(&cfg.scene, cfg.scenes, cfg.threads)?;
    create_dir(&out.join("images"))?;
    create_dir(&out.join("labels"))?;
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("scene-{i:04}");
        let image = PathBuf::from("images").join(format!("{name}.pgm"));
        let labels = PathBuf::from("labels").join(format!("{name}.txt"));
        write_pgm(out.join(&image), &scene.image)?;
        write_annotations(out.join(&labels), &scene.gold, scene.image.width(), scene.image.height())?;
        records.push(ManifestRecord {
            image,
            labels,
            source: Some(name),
        });
    }
    let manifest = DatasetManifest {
        class_names: cfg.scene.class_names(),
        iou_threshold: cfg.iou_threshold,
        records,
    };
    manifest.save(out.join("manifest.json"))?;
    let boxes: usize = scenes.iter().map(|s| s.gold.len()).sum();
    println!("scenes {} boxes {boxes}", scenes.len());
    Ok(())
}

pub fn encoder_train(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let (manifest, records, _) = load_dataset(cfg, manifest_path)?;
    let dataset = PatchDataset::from_records(&records, manifest.num_classes());
    let trained = train_encoder(&cfg.encoder, &dataset)?;
    let mut trace = String::from("epoch,loss\n");
    for (epoch, loss) in trained.loss_trace.iter().enumerate() {
        writeln!(trace, "{epoch},{loss}")?;
        println!("epoch {epoch} loss {loss:.6}");
    }
    write_file(&out.join("encoder_loss.csv"), trace)?;
    let extractor = ImplicitExtractor::fit(
        trained.params,
        cfg.encoder.pipeline(),
        &dataset,
        cfg.encoder.pca_variance,
    )?;
    extractor.save(out.join("encoder.json"))?;
    println!(
        "pca dims {} explained {:.4} skipped batches {}",
        extractor.dim(),
        extractor.pca.explained_variance(),
        trained.skipped_batches
    );
    Ok(())
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), line + 1))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| degpr_core::Error::Parse {
                    location: format!("{}:{}", path.display(), line + 1),
                    message: format!("not a number: {field:?}"),
                })
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn gmm_fit(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let samples = read_vectors(input)?;
    let fit = em_fit(&samples, cfg.gmm.k, cfg.seed, &cfg.gmm.em)?;
    fit.gmm.save(out.join("gmm.json"))?;
    let mut trace = String::from("iteration,log_likelihood\n");
    for (i, ll) in fit.log_likelihood.iter().enumerate() {
        writeln!(trace, "{i},{ll}")?;
    }
    write_file(&out.join("gmm_trace.csv"), trace)?;
    println!(
        "k {} iterations {} converged {} log_likelihood {:.6}",
        fit.gmm.k(),
        fit.iterations,
        fit.converged,
        fit.log_likelihood.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct KlOutput {
    mode: McMode,
    value: f64,
    std_error: Option<f64>,
    samples: usize,
}

pub fn kl(
    cfg: &RunConfig,
    p_path: &Path,
    q_path: &Path,
    gold_vectors: Option<&Path>,
    pred_vectors: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let p = Gmm::load(p_path)?;
    let q = Gmm::load(q_path)?;
    let result = match cfg.regularizer.mc_mode {
        McMode::Standard => {
            let est = kl_mc_standard_threaded(&p, &q, cfg.regularizer.mc_samples, cfg.seed, cfg.threads)?;
            println!("kl {} ± {}", est.value, est.std_error);
            KlOutput {
                mode: McMode::Standard,
                value: est.value,
                std_error: Some(est.std_error),
                samples: est.samples,
            }
        }
        McMode::Paired => {
            let (Some(gold), Some(pred)) = (gold_vectors, pred_vectors) else {
                bail!(degpr_core::Error::Validation(
                    "paired mode needs --gold-vectors and --pred-vectors".into()
                ));
            };
            let gold = read_vectors(gold)?;
            let pred = read_vectors(pred)?;
            let value = kl_mc_paired(&p, &q, &gold, &pred)?;
            println!("kl {value} (paired, {} images)", gold.len());
            KlOutput {
                mode: McMode::Paired,
                value,
                std_error: None,
                samples: gold.len(),
            }
        }
    };
    write_json(&out.join("kl.json"), &result)
}

pub fn train(cfg: &RunConfig, manifest_path: &Path, encoder: Option<&Path>, out: &Path) -> Result<()> {
    let (manifest, records, _) = load_dataset(cfg, manifest_path)?;
    let extractor = encoder.map(ImplicitExtractor::load).transpose()?;
    let reg = &cfg.regularizer;
    if reg.lambda_reg > 0.0 && reg.implicit_weight > 0.0 && extractor.is_none() {
        bail!(degpr_core::Error::Validation(
            "the implicit term needs --encoder (or set regularizer.implicit_weight to 0)".into()
        ));
    }
    let regularization = (reg.lambda_reg > 0.0).then_some(Regularization {
        config: reg,
        extractor: extractor.as_ref(),
    });
    let trained = train_detector(&records, manifest.num_classes(), &cfg.detector, regularization)?;
    trained.params.save(out.join("detector.json"))?;
    let mut trace = String::from(LossReport::CSV_HEADER);
    trace.push('\n');
    for report in &trained.trace {
        trace.push_str(&report.csv_row());
        trace.push('\n');
    }
    write_file(&out.join("loss.csv"), trace)?;
    if let (Some(first), Some(last)) = (trained.trace.first(), trained.trace.last()) {
        println!(
            "epochs {} L_det {:.6} -> {:.6} L_total {:.6} -> {:.6}",
            trained.trace.len(),
            first.l_det,
            last.l_det,
            first.l_total,
            last.l_total
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, manifest_path: &Path, detector: &Path, out: &Path) -> Result<()> {
    let (manifest, records, sources) = load_dataset(cfg, manifest_path)?;
    let params = GridDetectorParams::load(detector)?;
    if params.num_classes != manifest.num_classes() {
        bail!(degpr_core::Error::DimensionMismatch {
            expected: manifest.num_classes(),
            actual: params.num_classes,
        });
    }
    let samples: Vec<EvalSample> = records
        .iter()
        .zip(&sources)
        .map(|(r, source)| EvalSample {
            source: source.clone(),
            detections: detect(&params, &r.image, cfg.detector.conf_threshold, cfg.detector.nms_iou),
            gold: r.gold.clone(),
        })
        .collect();
    let report = evaluate(&samples, &manifest.class_names, cfg.iou_threshold)?;
    write_file(&out.join("metrics.csv"), report.to_csv())?;
    write_json(&out.join("metrics.json"), &report)?;

    let mut counts = String::from("image,class,predicted,gold\n");
    for image in &report.counting.images {
        for (c, name) in manifest.class_names.iter().enumerate() {
            writeln!(counts, "{},{name},{},{}", image.source, image.predicted[c], image.gold[c])?;
        }
    }
    write_file(&out.join("counts.csv"), counts)?;

    let mut dets = String::from("record,source,class,confidence,left,top,right,bottom\n");
    for (i, sample) in samples.iter().enumerate() {
        for d in &sample.detections {
            let b = &d.bbox;
            writeln!(
                dets,
                "{i},{},{},{},{},{},{},{}",
                sample.source, manifest.class_names[d.class_id], d.confidence, b.left, b.top, b.right, b.bottom
            )?;
        }
    }
    write_file(&out.join("detections.csv"), dets)?;

    let det = &report.detection;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mAP {} precision {:.4} recall {:.4} MAE {:.4} MRE {}",
        fmt(det.map),
        det.precision,
        det.recall,
        report.counting.mean_mae,
        fmt(report.counting.mean_mre)
    );
    Ok(())
}

#[derive(Default)]
struct ImageTally {
    iel: Option<(usize, usize)>,
    en: Option<(usize, usize)>,
}

pub fn q_ratio(counts: &Path, iel_class: &str, en_class: &str, out: &Path) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(counts)
        .with_context(|| format!("reading {}", counts.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            degpr_core::Error::Parse {
                location: format!("{}:1", counts.display()),
                message: format!("missing column {name:?}"),
            }
        })
    };
    let (ci, cc, cp, cg) = (column("image")?, column("class")?, column("predicted")?, column("gold")?);

    let mut order: Vec<String> = Vec::new();
    let mut tallies: Vec<ImageTally> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let number = |col: usize| {
            record[col].parse::<usize>().map_err(|_| degpr_core::Error::Parse {
                location: format!("{}:{}", counts.display(), line + 2),
                message: format!("not a count: {:?}", &record[col]),
            })
        };
        let pair = (number(cp)?, number(cg)?);
        let image = &record[ci];
        let idx = match order.iter().position(|s| s == image) {
            Some(i) => i,
            None => {
                order.push(image.to_string());
                tallies.push(ImageTally::default());
                order.len() - 1
            }
        };
        let class = &record[cc];
        if class == iel_class {
            tallies[idx].iel = Some(pair);
        } else if class == en_class {
            tallies[idx].en = Some(pair);
        }
    }
    if order.is_empty() {
        bail!(degpr_core::Error::Validation(format!("{}: no rows", counts.display())));
    }

    let mut table = String::from("image,pred_iel,pred_en,pred_ratio,pred_diagnosis,gold_iel,gold_en,gold_ratio,gold_diagnosis\n");
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    for (image, tally) in order.iter().zip(&tallies) {
        let (Some(iel), Some(en)) = (tally.iel, tally.en) else {
            bail!(degpr_core::Error::Validation(format!(
                "image {image} lacks a {iel_class:?} or {en_class:?} row"
            )));
        };
        let pr = ratio(iel.0, en.0).with_context(|| format!("image {image}, predicted counts"))?;
        let gr = ratio(iel.1, en.1).with_context(|| format!("image {image}, gold counts"))?;
        let (pd, gd) = (classify_celiac(pr), classify_celiac(gr));
        writeln!(
            table,
            "{image},{},{},{pr},{},{},{},{gr},{}",
            iel.0,
            en.0,
            pd.as_str(),
            iel.1,
            en.1,
            gd.as_str()
        )?;
        predicted.push(pd);
        gold.push(gd);
    }
    write_file(&out.join("q_ratio.csv"), table)?;

    let m = classification_metrics(&predicted, &gold)?;
    let summary = format!(
        "precision,recall,f1,accuracy,tp,fp,tn,fn\n{},{},{},{},{},{},{},{}\n",
        m.precision,
        m.recall,
        m.f1,
        m.accuracy,
        m.true_positives,
        m.false_positives,
        m.true_negatives,
        m.false_negatives
    );
    write_file(&out.join("q_classification.csv"), &summary)?;
    let celiac = gold.iter().filter(|d| **d == Diagnosis::Celiac).count();
    println!("images {} gold celiac {celiac}", order.len());
    print!("{summary}");
    Ok(())
}

pub fn ablation(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seeds: Vec<u64> = (0..cfg.benchmark.seeds as u64).map(|i| cfg.seed + i).collect();
    let table = run_ablation(&cfg.benchmark_config(), &seeds, &Variant::ALL, cfg.threads)?;
    let text = table.to_csv();
    write_file(&out.join("ablation.csv"), &text)?;
    write_json(&out.join("ablation.json"), &table)?;
    print!("{text}");
    Ok(())
}
