use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pneumoscan_core::checkpoint::{load_classifier, load_segmentation, save_checkpoint, CheckpointMeta};
use pneumoscan_core::data::{generate_synthetic, load_manifest, Dataset, Label, Split};
use pneumoscan_core::explain::{grad_cam, overlay_heatmap};
use pneumoscan_core::imaging::{self, mean_std, write_atomic, Normalization};
use pneumoscan_core::metrics::{comparison_table, Averaging, ConfusionMatrix, MetricReport, OverlapCounts};
use pneumoscan_core::pipeline::{classify, segment_infection, Predictor};
use pneumoscan_core::train::{fit, history_csv, EpochReport, TaskMetrics};
use pneumoscan_core::{bilinear_resample, transfer_encoder_weights, ClassifierModel, Error, Model, SegmentationModel};

use crate::config::{normalization_from_pairs, NormSpec, RunConfig, Task};

fn read_config(path: Option<&Path>, task: Task) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Io {
            context: format!("reading config {}", p.display()),
            source: e,
        })?,
        None => String::new(),
    };
    Ok(RunConfig::parse(&text, task)?)
}

fn echo(config: &RunConfig) {
    eprintln!("effective config:");
    for line in config.render().lines() {
        eprintln!("  {line}");
    }
}

fn load_splits(manifest: &Path, side: usize) -> Result<(Dataset, Dataset)> {
    let m = load_manifest(manifest)?;
    let train = Dataset::load(&m.split(Split::Train), side)?;
    let val = Dataset::load(&m.split(Split::Val), side)?;
    Ok((train, val))
}

/// Fixes corpus statistics from the training images.
fn resolve_normalization(config: &mut RunConfig, train: &Dataset) {
    if config.normalization == NormSpec::Corpus {
        let (mean, std) = mean_std(
            train
                .samples
                .iter()
                .flat_map(|s| s.image.pixels().iter().map(|&v| v as f64)),
        );
        config.normalization = NormSpec::Fixed { mean, std: std.max(1e-8) };
    }
}

fn history_path(out: &Path, history: Option<&Path>) -> PathBuf {
    history.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("history.csv"))
}

fn log_epoch(r: &EpochReport, epochs: usize) {
    let (a, b, c, d) = match (r.train, r.val) {
        (TaskMetrics::Segmentation { dice, iou }, TaskMetrics::Segmentation { dice: vd, iou: vi }) => {
            ("dice", dice, vd, ("iou", iou, vi))
        }
        (TaskMetrics::Classification { accuracy, f1 }, TaskMetrics::Classification { accuracy: va, f1: vf }) => {
            ("acc", accuracy, va, ("f1", f1, vf))
        }
        _ => unreachable!("train and val metrics come from the same model"),
    };
    eprintln!(
        "epoch {}/{epochs}: loss {:.4}/{:.4} {a} {b:.4}/{c:.4} {} {:.4}/{:.4} trainable {}",
        r.epoch + 1,
        r.train_loss,
        r.val_loss,
        d.0,
        d.1,
        d.2,
        r.trainable_param_count
    );
}

fn finish_training<M: Model<f32>>(
    model: &M,
    config: &RunConfig,
    history: &[EpochReport],
    out: &Path,
    history_out: Option<&Path>,
) -> Result<()> {
    let meta = CheckpointMeta {
        input_side: config.input_side,
        epoch: history.len(),
        seed: config.seed,
        config: config.pairs(),
    };
    save_checkpoint(model, &meta, out)?;
    let hpath = history_path(out, history_out);
    write_atomic(&hpath, history_csv(history).as_bytes())?;
    println!("checkpoint: {}", out.display());
    println!("history: {}", hpath.display());
    Ok(())
}

pub fn train_seg(manifest: &Path, config: Option<&Path>, out: &Path, history: Option<&Path>) -> Result<()> {
    let mut config = read_config(config, Task::Segmentation)?;
    let (train, val) = load_splits(manifest, config.input_side)?;
    let (train, val) = (train.with_infection_masks(), val.with_infection_masks());
    resolve_normalization(&mut config, &train);
    echo(&config);
    let tc = config.train_config()?;
    let mut model = SegmentationModel::<f32>::new(&config.width, config.seed)?;
    let schedule = config.unfreeze.schedule(&model.encoder_block_names(), tc.epochs)?;
    let result = fit(&mut model, &train, &val, &tc, &schedule, |r, _| log_epoch(r, tc.epochs))?;
    finish_training(&model, &config, &result.history, out, history)
}

pub fn train_cls(
    manifest: &Path,
    config: Option<&Path>,
    encoder_from: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    let mut config = read_config(config, Task::Classification)?;
    let seg = match encoder_from {
        Some(p) => {
            let (seg, _) = load_segmentation(p)?;
            let w = *seg.width();
            for (key, ours, theirs) in [
                ("in_channels", config.width.in_channels, w.in_channels),
                ("base_channels", config.width.base_channels, w.base_channels),
            ] {
                if config.is_explicit(key) && ours != theirs {
                    return Err(Error::Config(format!(
                        "`{key} = {ours}` disagrees with the encoder checkpoint ({theirs})"
                    ))
                    .into());
                }
            }
            config.width.in_channels = w.in_channels;
            config.width.base_channels = w.base_channels;
            Some(seg)
        }
        None => {
            eprintln!("warning: no --encoder-from given; training the classifier from scratch");
            None
        }
    };
    let (train, val) = load_splits(manifest, config.input_side)?;
    resolve_normalization(&mut config, &train);
    echo(&config);
    let tc = config.train_config()?;
    let mut model = match &seg {
        Some(seg) => {
            let mut m = ClassifierModel::<f32>::new(&config.width, config.seed)?;
            transfer_encoder_weights(seg, &mut m)?;
            m
        }
        None => ClassifierModel::<f32>::new(&config.width, config.seed)?,
    };
    let schedule = config.unfreeze.schedule(&model.encoder_block_names(), tc.epochs)?;
    let result = fit(&mut model, &train, &val, &tc, &schedule, |r, _| log_epoch(r, tc.epochs))?;
    finish_training(&model, &config, &result.history, out, history)
}

pub enum PredictInput {
    Single { image: PathBuf, lung: Option<PathBuf> },
    Manifest(PathBuf),
}

impl PredictInput {
    pub fn new(image: Option<PathBuf>, lung: Option<PathBuf>, manifest: Option<PathBuf>) -> Self {
        match (image, manifest) {
            (Some(image), _) => PredictInput::Single { image, lung },
            (None, Some(m)) => PredictInput::Manifest(m),
            (None, None) => unreachable!("clap requires --image or --manifest"),
        }
    }
}

pub fn predict(input: PredictInput, cls: &Path, seg: &Path, out: &Path, threshold: f32) -> Result<()> {
    let (classifier, cmeta) = load_classifier(cls)?;
    let (segmenter, smeta) = load_segmentation(seg)?;
    fs::create_dir_all(out).map_err(|e| Error::Io {
        context: format!("creating {}", out.display()),
        source: e,
    })?;
    let mut predictor = Predictor::new(&classifier, &segmenter, cmeta.input_side);
    predictor.normalization = normalization_from_pairs(&cmeta.config)?;
    predictor.seg_side = smeta.input_side;
    predictor.seg_normalization = normalization_from_pairs(&smeta.config)?;
    predictor.threshold = threshold;

    let items: Vec<(PathBuf, Option<PathBuf>)> = match input {
        PredictInput::Single { image, lung } => vec![(image, lung)],
        PredictInput::Manifest(m) => load_manifest(&m)?
            .records
            .into_iter()
            .map(|r| (r.image_path, r.lung_mask_path))
            .collect(),
    };
    let mut first_error = None;
    let mut failed = 0;
    for (image, lung) in &items {
        match predictor.predict(image, lung.as_deref(), out) {
            Ok(record) => println!("{}", record.to_json()),
            Err(e) => {
                eprintln!("error: {}: {e}", image.display());
                failed += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        None => Ok(()),
        Some(e) => Err(anyhow::Error::new(e).context(format!("{failed} of {} predictions failed", items.len()))),
    }
}

fn split_report(
    classifier: &ClassifierModel<f32>,
    segmenter: Option<(&SegmentationModel<f32>, usize, Normalization)>,
    data: &Dataset,
    side: usize,
    normalization: Normalization,
    averaging: Averaging,
) -> Result<MetricReport> {
    let labels = data.labels()?;
    let mut cm = ConfusionMatrix::new(Label::ALL.len());
    for (s, &label) in data.samples.iter().zip(&labels) {
        let r = classify(classifier, &s.image, side, normalization)?;
        cm.add(label, r.label.index())?;
    }
    let mut report = MetricReport::from_confusion(&cm, averaging)?;
    if let Some((seg, seg_side, seg_norm)) = segmenter {
        let mut overlap = OverlapCounts::default();
        for s in &data.samples {
            if let Some(truth) = &s.infection {
                let pred = segment_infection(seg, &s.image, seg_side, seg_norm, 0.5)?;
                overlap.merge(OverlapCounts::from_masks(&pred, truth)?);
            }
        }
        report = report.with_overlap(overlap);
    }
    Ok(report)
}

pub fn eval(manifest: &Path, cls: &Path, seg: Option<&Path>, report: &Path, averaging: Option<&str>) -> Result<()> {
    let (classifier, cmeta) = load_classifier(cls)?;
    let normalization = normalization_from_pairs(&cmeta.config)?;
    let averaging = match averaging {
        Some(a) => Averaging::parse(a).ok_or_else(|| Error::Config(format!("unknown averaging `{a}`")))?,
        None => cmeta
            .config
            .iter()
            .find(|(k, _)| k == "averaging")
            .and_then(|(_, v)| Averaging::parse(v))
            .unwrap_or_default(),
    };
    let segmenter = match seg {
        Some(p) => {
            let (m, meta) = load_segmentation(p)?;
            Some((m, meta.input_side, normalization_from_pairs(&meta.config)?))
        }
        None => None,
    };
    let (train, val) = load_splits(manifest, cmeta.input_side)?;
    if train.is_empty() || val.is_empty() {
        bail!(Error::Manifest("eval needs records in both the train and val splits".into()));
    }
    let seg_ref = segmenter.as_ref().map(|(m, s, n)| (m, *s, *n));
    let tr = split_report(&classifier, seg_ref, &train, cmeta.input_side, normalization, averaging)?;
    let va = split_report(&classifier, seg_ref, &val, cmeta.input_side, normalization, averaging)?;
    let params = classifier.param_count().total;

    print!("{}", comparison_table("Proposed", &tr, &va, params));
    println!("param_count = {params}");
    if let (Some(d), Some(i)) = (va.dice, va.iou) {
        println!("segmentation (val): dice {d:.4} iou {i:.4}");
    }
    let mut csv = format!("{},param_count\n", MetricReport::csv_header(Label::ALL.len()));
    for (name, r) in [("train", &tr), ("val", &va), ("difference", &tr.difference(&va))] {
        csv.push_str(&format!("{},{params}\n", r.csv_row(name)));
    }
    write_atomic(report, csv.as_bytes()).context("writing the report")?;
    println!("report: {}", report.display());
    Ok(())
}

pub fn gradcam(image: &Path, cls: &Path, class: &str, layer: &str, out: &Path) -> Result<()> {
    let (classifier, meta) = load_classifier(cls)?;
    let normalization = normalization_from_pairs(&meta.config)?;
    let original = imaging::load_image(image)?;
    let class_idx = match class {
        "auto" => classify(&classifier, &original, meta.input_side, normalization)?.label.index(),
        c => match c.parse::<usize>() {
            Ok(i) if i < Label::ALL.len() => i,
            _ => bail!(Error::Config(format!("--class must be auto, 0, 1 or 2, got `{c}`"))),
        },
    };
    let resized = imaging::resize(&original, meta.input_side)?;
    let input = imaging::normalize_with(&resized, normalization).tensor;
    let mut heat = grad_cam(&classifier, &input, class_idx, layer)?;
    if (heat.width, heat.height) != (original.width(), original.height()) {
        heat.values = bilinear_resample(&heat.values, heat.width, heat.height, original.width(), original.height())
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        heat.width = original.width();
        heat.height = original.height();
    }
    if heat.all_zero {
        eprintln!("warning: Grad-CAM heatmap is all zero (no positive evidence for class {class_idx})");
    }
    imaging::save_rgb_png(&overlay_heatmap(&original, &heat)?, out)?;
    println!(
        "class {class_idx} ({}) layer {layer}: {}",
        Label::from_index(class_idx).expect("checked").as_str(),
        out.display()
    );
    Ok(())
}

pub fn synth(n: usize, side: usize, seed: u64, out: &Path) -> Result<()> {
    let set = generate_synthetic(n, side, seed, out)?;
    println!("manifest: {}", set.manifest_path.display());
    println!("records: {}", set.manifest.records.len());
    Ok(())
}
