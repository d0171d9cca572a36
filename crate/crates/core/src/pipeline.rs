//! Prediction workflow: classify, segment non-Normal images, quantify and render.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::imaging::{self, to_u8, GrayImage, MaskImage, Normalization};
use crate::kernels::bilinear_resample;
use crate::nn::{ClassifierModel, Mode, Model, ParamGrads, SegmentationModel, NUM_CLASSES};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub label: Label,
    pub probabilities: [f64; NUM_CLASSES],
}

impl ClassResult {
    /// Softmax over logits; ties resolve to the lowest class index.
    pub fn from_logits(logits: &[f64]) -> Result<ClassResult> {
        if logits.len() != NUM_CLASSES {
            return Err(Error::dim(format!("expected {NUM_CLASSES} logits, got {}", logits.len())));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite logits {logits:?}")));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let mut probabilities = [0.0; NUM_CLASSES];
        for (p, e) in probabilities.iter_mut().zip(&exps) {
            *p = e / sum;
        }
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(ClassResult {
            label: Label::from_index(best).expect("index below NUM_CLASSES"),
            probabilities,
        })
    }
}

fn model_input(image: &GrayImage, side: usize, normalization: Normalization) -> Result<Tensor<f32>> {
    let resized;
    let img = if (image.width(), image.height()) == (side, side) {
        image
    } else {
        resized = imaging::resize(image, side)?;
        &resized
    };
    Ok(imaging::normalize_with(img, normalization).tensor)
}

/// Classifies one image after resizing to `side` and normalizing.
pub fn classify(
    model: &ClassifierModel<f32>,
    image: &GrayImage,
    side: usize,
    normalization: Normalization,
) -> Result<ClassResult> {
    let x = model_input(image, side, normalization)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = model.forward(&mut tape, xv, Mode::Eval, ParamGrads::None)?;
    let logits: Vec<f64> = tape.value(fwd.output).data().iter().map(|&v| v as f64).collect();
    ClassResult::from_logits(&logits)
}

/// Infection probability map at the image's own resolution.
pub fn infection_probabilities(
    model: &SegmentationModel<f32>,
    image: &GrayImage,
    side: usize,
    normalization: Normalization,
) -> Result<Vec<f32>> {
    let x = model_input(image, side, normalization)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let fwd = model.forward(&mut tape, xv, Mode::Eval, ParamGrads::None)?;
    let probs = tape.value(fwd.output).data();
    Ok(bilinear_resample(probs, side, side, image.width(), image.height()))
}

/// Thresholds the probability map with `p >= threshold`.
pub fn segment_infection(
    model: &SegmentationModel<f32>,
    image: &GrayImage,
    side: usize,
    normalization: Normalization,
    threshold: f32,
) -> Result<MaskImage> {
    let probs = infection_probabilities(model, image, side, normalization)?;
    MaskImage::from_threshold(image.width(), image.height(), &probs, threshold)
}

/// `100 |infection ∩ lung| / |lung|`.
pub fn infection_percentage(infection: &MaskImage, lung: &MaskImage) -> Result<f64> {
    infection.same_dims(lung)?;
    let lung_px = lung.count();
    if lung_px == 0 {
        return Err(Error::UndefinedMetric("infection percentage with an empty lung mask".into()));
    }
    let inside = infection
        .pixels()
        .iter()
        .zip(lung.pixels())
        .filter(|(&i, &l)| i == 1 && l == 1)
        .count();
    Ok(100.0 * inside as f64 / lung_px as f64)
}

/// Grayscale base, infection inside the lung blended 50% with red, lung contour in green on top.
pub fn render_overlay(image: &GrayImage, lung: &MaskImage, infection: &MaskImage) -> Result<RgbImage> {
    lung.same_dims(infection)?;
    if (image.width(), image.height()) != (lung.width(), lung.height()) {
        return Err(Error::dim(format!(
            "image {}x{} does not match masks {}x{}",
            image.width(),
            image.height(),
            lung.width(),
            lung.height()
        )));
    }
    let mut out = image.to_rgb();
    let contour = lung.boundary();
    for (i, px) in out.pixels_mut().enumerate() {
        if contour.pixels()[i] == 1 {
            px.0 = [0, 255, 0];
        } else if lung.pixels()[i] == 1 && infection.pixels()[i] == 1 {
            let g = image.pixels()[i].clamp(0.0, 1.0);
            let tint = to_u8(0.5 * g + 0.5);
            let base = to_u8(0.5 * g);
            px.0 = [tint, base, base];
        }
    }
    Ok(out)
}

/// One JSON-lines prediction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub input: String,
    pub label: String,
    pub probs: [f64; NUM_CLASSES],
    pub infection_pct: Option<f64>,
    pub mask: Option<String>,
    pub overlay: Option<String>,
    pub ms_classify: f64,
    pub ms_segment: Option<f64>,
}

impl PredictionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Same record with timings zeroed, for byte comparisons.
    pub fn without_timing(&self) -> PredictionRecord {
        PredictionRecord {
            ms_classify: 0.0,
            ms_segment: self.ms_segment.map(|_| 0.0),
            ..self.clone()
        }
    }
}

/// Read-only models plus preprocessing settings; counts segmentation calls.
#[derive(Debug)]
pub struct Predictor<'a> {
    pub classifier: &'a ClassifierModel<f32>,
    pub segmenter: &'a SegmentationModel<f32>,
    /// Input side and normalization of the classifier.
    pub side: usize,
    pub normalization: Normalization,
    /// Input side and normalization of the segmentation model.
    pub seg_side: usize,
    pub seg_normalization: Normalization,
    pub threshold: f32,
    seg_calls: AtomicUsize,
}

impl<'a> Predictor<'a> {
    pub fn new(
        classifier: &'a ClassifierModel<f32>,
        segmenter: &'a SegmentationModel<f32>,
        side: usize,
    ) -> Predictor<'a> {
        Predictor {
            classifier,
            segmenter,
            side,
            normalization: Normalization::PerImage,
            seg_side: side,
            seg_normalization: Normalization::PerImage,
            threshold: DEFAULT_THRESHOLD,
            seg_calls: AtomicUsize::new(0),
        }
    }

    pub fn segmentation_calls(&self) -> usize {
        self.seg_calls.load(Ordering::SeqCst)
    }

    pub fn classify(&self, image: &GrayImage) -> Result<ClassResult> {
        classify(self.classifier, image, self.side, self.normalization)
    }

    pub fn segment(&self, image: &GrayImage) -> Result<MaskImage> {
        self.seg_calls.fetch_add(1, Ordering::SeqCst);
        segment_infection(self.segmenter, image, self.seg_side, self.seg_normalization, self.threshold)
    }

    /// Full workflow on decoded inputs. Normal images stop after classification.
    pub fn predict_image(
        &self,
        input: &Path,
        image: &GrayImage,
        lung: Option<&MaskImage>,
        out_dir: &Path,
    ) -> Result<PredictionRecord> {
        let t0 = Instant::now();
        let class = self.classify(image)?;
        let ms_classify = t0.elapsed().as_secs_f64() * 1e3;
        let mut record = PredictionRecord {
            input: input.display().to_string(),
            label: class.label.as_str().to_string(),
            probs: class.probabilities,
            infection_pct: None,
            mask: None,
            overlay: None,
            ms_classify,
            ms_segment: None,
        };
        if class.label == Label::Normal {
            return Ok(record);
        }
        let lung = lung.ok_or_else(|| Error::MissingLungMask(input.to_path_buf()))?;
        if (lung.width(), lung.height()) != (image.width(), image.height()) {
            return Err(Error::dim(format!(
                "lung mask {}x{} does not match image {}x{}",
                lung.width(),
                lung.height(),
                image.width(),
                image.height()
            )));
        }
        let t1 = Instant::now();
        let infection = self.segment(image)?.intersect(lung)?;
        let pct = infection_percentage(&infection, lung)?;
        let overlay = render_overlay(image, lung, &infection)?;
        let (mask_path, overlay_path) = output_paths(input, out_dir);
        imaging::save_mask_png(&infection, &mask_path)?;
        imaging::save_rgb_png(&overlay, &overlay_path)?;
        record.ms_segment = Some(t1.elapsed().as_secs_f64() * 1e3);
        record.infection_pct = Some(pct);
        record.mask = Some(mask_path.display().to_string());
        record.overlay = Some(overlay_path.display().to_string());
        Ok(record)
    }

    /// Loads the image (and lung mask, if given) and runs [`Predictor::predict_image`].
    pub fn predict(&self, image_path: &Path, lung_path: Option<&Path>, out_dir: &Path) -> Result<PredictionRecord> {
        let image = imaging::load_image(image_path)?;
        let lung = lung_path.map(imaging::load_mask).transpose()?;
        self.predict_image(image_path, &image, lung.as_ref(), out_dir)
    }

    /// Order-preserving batch; each item succeeds or fails on its own.
    pub fn predict_batch(
        &self,
        items: &[(PathBuf, Option<PathBuf>)],
        out_dir: &Path,
    ) -> Vec<Result<PredictionRecord>> {
        items
            .iter()
            .map(|(img, lung)| self.predict(img, lung.as_deref(), out_dir))
            .collect()
    }
}

/// `<stem>_mask.png` and `<stem>_overlay.png` inside `out_dir`.
pub fn output_paths(input: &Path, out_dir: &Path) -> (PathBuf, PathBuf) {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    (
        out_dir.join(format!("{stem}_mask.png")),
        out_dir.join(format!("{stem}_overlay.png")),
    )
}
