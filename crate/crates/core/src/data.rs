//! Dataset manifests, in-memory datasets and the synthetic chest X-ray generator.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{self, GrayImage, MaskImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Covid19,
    NonCovid,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Normal, Label::Covid19, Label::NonCovid];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Covid19 => "COVID-19",
            Label::NonCovid => "Non-COVID",
        }
    }

    /// Case-insensitive; `-`, `_` and spaces are ignored (`covid-19`, `Non_COVID`, ...).
    pub fn parse(token: &str) -> Option<Label> {
        let t: String = token
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        match t.as_str() {
            "normal" => Some(Label::Normal),
            "covid19" | "covid" => Some(Label::Covid19),
            "noncovid" | "noncovid19" => Some(Label::NonCovid),
            _ => None,
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Covid19 => "covid",
            Label::NonCovid => "noncovid",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(token: &str) -> Option<Split> {
        match token.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub label: Option<Label>,
    pub lung_mask_path: Option<PathBuf>,
    pub infection_mask_path: Option<PathBuf>,
    /// Records without a tag count as training records.
    pub split: Option<Split>,
}

impl ManifestRecord {
    pub fn split_or_train(&self) -> Split {
        self.split.unwrap_or(Split::Train)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_COLUMNS: [&str; 4] = ["image_path", "label", "lung_mask_path", "infection_mask_path"];

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split_or_train() == split).collect()
    }

    /// Writes the manifest with paths relative to the manifest's directory where possible.
    pub fn to_csv(&self, base: &Path) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let err = |e: csv::Error| Error::Manifest(e.to_string());
        let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
        header.push("split");
        w.write_record(&header).map_err(err)?;
        let rel = |p: &Path| -> String {
            p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
        };
        for r in &self.records {
            w.write_record([
                rel(&r.image_path),
                r.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
                r.lung_mask_path.as_deref().map(rel).unwrap_or_default(),
                r.infection_mask_path.as_deref().map(rel).unwrap_or_default(),
                r.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses a manifest CSV. Relative paths resolve against the manifest's directory and
/// every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Manifest(format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 4];
    for (i, name) in MANIFEST_COLUMNS.iter().enumerate() {
        idx[i] = col(name).ok_or_else(|| {
            Error::Manifest(format!(
                "missing header column `{name}` (expected {})",
                MANIFEST_COLUMNS.join(",")
            ))
        })?;
    }
    let split_col = col("split");

    let mut records = Vec::new();
    let mut missing = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Manifest(format!("row {row_no}: {e}")))?;
        let field = |c: usize| row.get(c).filter(|s| !s.is_empty());
        let resolve = |s: &str| {
            let p = Path::new(s);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let image_path = field(idx[0])
            .map(resolve)
            .ok_or_else(|| Error::Manifest(format!("row {row_no}: empty image_path")))?;
        let label = match field(idx[1]) {
            None => None,
            Some(t) => Some(
                Label::parse(t).ok_or_else(|| Error::Manifest(format!("row {row_no}: unknown label `{t}`")))?,
            ),
        };
        let split = match split_col.and_then(field) {
            None => None,
            Some(t) => Some(
                Split::parse(t).ok_or_else(|| Error::Manifest(format!("row {row_no}: unknown split `{t}`")))?,
            ),
        };
        let rec = ManifestRecord {
            image_path,
            label,
            lung_mask_path: field(idx[2]).map(resolve),
            infection_mask_path: field(idx[3]).map(resolve),
            split,
        };
        for p in [Some(&rec.image_path), rec.lung_mask_path.as_ref(), rec.infection_mask_path.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                missing.push(format!("row {row_no}: {}", p.display()));
            }
        }
        records.push(rec);
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(format!("missing files: {}", missing.join("; "))));
    }
    Ok(DatasetManifest { records })
}

/// A decoded record resized to the model's input side.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub image: GrayImage,
    pub label: Option<Label>,
    pub lung: Option<MaskImage>,
    pub infection: Option<MaskImage>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub side: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(records: &[&ManifestRecord], side: usize) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            let mut image = imaging::load_image(&r.image_path)?;
            if (image.width(), image.height()) != (side, side) {
                image = imaging::resize(&image, side)?;
            }
            let mask = |p: &Option<PathBuf>| -> Result<Option<MaskImage>> {
                match p {
                    None => Ok(None),
                    Some(p) => {
                        let m = imaging::load_mask(p)?;
                        Ok(Some(if (m.width(), m.height()) != (side, side) {
                            imaging::resize_mask(&m, side)?
                        } else {
                            m
                        }))
                    }
                }
            };
            samples.push(Sample {
                path: r.image_path.clone(),
                image,
                label: r.label,
                lung: mask(&r.lung_mask_path)?,
                infection: mask(&r.infection_mask_path)?,
            });
        }
        Ok(Dataset { side, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples with an infection mask (the segmentation training set).
    pub fn with_infection_masks(&self) -> Dataset {
        Dataset {
            side: self.side,
            samples: self.samples.iter().filter(|s| s.infection.is_some()).cloned().collect(),
        }
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| {
                s.label
                    .map(Label::index)
                    .ok_or_else(|| Error::Manifest(format!("unlabeled record {}", s.path.display())))
            })
            .collect()
    }
}

pub const SYNTH_MIN_SIDE: usize = 32;
const BACKGROUND: f64 = 0.1;
const NOISE_STD: f64 = 0.02;
const LUNG_LEVEL: f64 = 0.45;
const LESION_GAIN: f64 = 0.35;

/// One generated image with its masks.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub label: Label,
    pub image: GrayImage,
    pub lung: MaskImage,
    pub infection: MaskImage,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.a, (y - self.cy) / self.b);
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    cx: f64,
    cy: f64,
    r: f64,
}

fn lungs(side: usize) -> [Ellipse; 2] {
    let s = side as f64;
    [0.32, 0.68].map(|fx| Ellipse {
        cx: fx * s,
        cy: 0.5 * s,
        a: 0.13 * s,
        b: 0.30 * s,
    })
}

fn disc_inside_fraction(d: &Disc, lung: &Ellipse) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    let r = d.r.ceil() as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (d.cx.round() + dx as f64, d.cy.round() + dy as f64);
            if (x - d.cx).hypot(y - d.cy) <= d.r {
                total += 1;
                inside += lung.contains(x, y) as usize;
            }
        }
    }
    inside as f64 / total.max(1) as f64
}

fn covid_lesions(side: usize, lungs: &[Ellipse; 2], rng: &mut ChaCha8Rng) -> Vec<Disc> {
    let s = side as f64;
    let count = rng.random_range(3..=6);
    let mut discs: Vec<Disc> = Vec::with_capacity(count);
    let mut attempts = 0;
    while discs.len() < count && attempts < 10_000 {
        attempts += 1;
        // the first two blobs go to different lungs
        let li = if discs.len() < 2 { discs.len() } else { rng.random_range(0..2) };
        let lung = &lungs[li];
        let r = rng.random_range(0.055..=0.065) * s;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = rng.random_range(0.5..=0.85);
        let d = Disc {
            cx: lung.cx + rho * lung.a * theta.cos(),
            cy: lung.cy + rho * lung.b * theta.sin(),
            r,
        };
        if disc_inside_fraction(&d, lung) < 0.7 {
            continue;
        }
        if discs.iter().any(|o| (o.cx - d.cx).hypot(o.cy - d.cy) <= o.r + d.r + 1.0) {
            continue;
        }
        discs.push(d);
    }
    discs
}

fn focal_lesion(side: usize, lungs: &[Ellipse; 2], rng: &mut ChaCha8Rng) -> Vec<Disc> {
    let s = side as f64;
    let lung = &lungs[rng.random_range(0..2)];
    let j = 0.02 * s;
    vec![Disc {
        cx: lung.cx + rng.random_range(-j..=j),
        cy: lung.cy + rng.random_range(-j..=j),
        r: rng.random_range(0.065..=0.075) * s,
    }]
}

/// Renders one synthetic radiograph of class `label`.
pub fn synthesize_sample(label: Label, side: usize, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let lungs = lungs(side);
    let lesions = match label {
        Label::Normal => Vec::new(),
        Label::Covid19 => covid_lesions(side, &lungs, rng),
        Label::NonCovid => focal_lesion(side, &lungs, rng),
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut pixels = Vec::with_capacity(side * side);
    let mut lung = MaskImage::empty(side, side);
    let mut infection = MaskImage::empty(side, side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let in_lung = lungs.iter().any(|l| l.contains(fx, fy));
            let lesion = in_lung && lesions.iter().any(|d| (fx - d.cx).hypot(fy - d.cy) <= d.r);
            let mut v = if in_lung { LUNG_LEVEL } else { BACKGROUND };
            if lesion {
                v += LESION_GAIN;
            }
            v += noise.sample(rng);
            pixels.push(v as f32);
            lung.set(x, y, in_lung);
            infection.set(x, y, lesion);
        }
    }
    SyntheticSample {
        label,
        image: GrayImage::new(side, side, pixels).expect("side x side pixels"),
        lung,
        infection,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// Mean infection-mask pixel count per class, in [`Label::ALL`] order.
    pub mean_lesion_pixels: [f64; 3],
}

/// Per-class train/val/test counts: `round(0.7 n)`, `round(0.15 n)`, remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Writes `3 * n_per_class` images with lung masks, infection masks for the two
/// infected classes and `manifest.csv` into `out_dir`.
pub fn generate_synthetic(n_per_class: usize, side: usize, seed: u64, out_dir: &Path) -> Result<SyntheticSet> {
    if side < SYNTH_MIN_SIDE {
        return Err(Error::Config(format!(
            "synthetic side must be >= {SYNTH_MIN_SIDE}, got {side}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    for sub in ["images", "lungs", "infections"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(3 * n_per_class);
    let mut lesion_sums = [0.0f64; 3];
    for label in Label::ALL {
        let (n_train, n_val, _) = split_counts(n_per_class);
        let mut order: Vec<usize> = (0..n_per_class).collect();
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Test; n_per_class];
        for (k, &i) in order.iter().enumerate() {
            splits[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (i, &split) in splits.iter().enumerate() {
            let s = synthesize_sample(label, side, &mut rng);
            lesion_sums[label.index()] += s.infection.count() as f64;
            let stem = format!("{}_{i:04}.png", label.slug());
            let image_path = out_dir.join("images").join(&stem);
            let lung_path = out_dir.join("lungs").join(&stem);
            imaging::save_gray_png(&s.image, &image_path)?;
            imaging::save_mask_png(&s.lung, &lung_path)?;
            let infection_mask_path = if label == Label::Normal {
                None
            } else {
                let p = out_dir.join("infections").join(&stem);
                imaging::save_mask_png(&s.infection, &p)?;
                Some(p)
            };
            records.push(ManifestRecord {
                image_path,
                label: Some(label),
                lung_mask_path: Some(lung_path),
                infection_mask_path,
                split: Some(split),
            });
        }
    }
    let mean_lesion_pixels = lesion_sums.map(|s| s / n_per_class as f64);
    let [normal, covid, noncovid] = mean_lesion_pixels;
    if !(covid > noncovid && noncovid > normal && normal == 0.0) {
        return Err(Error::Config(format!(
            "synthetic lesion statistics out of order: {mean_lesion_pixels:?}"
        )));
    }
    let manifest = DatasetManifest { records };
    let manifest_path = out_dir.join("manifest.csv");
    imaging::write_atomic(&manifest_path, manifest.to_csv(out_dir)?.as_bytes())?;
    Ok(SyntheticSet {
        manifest_path,
        manifest,
        mean_lesion_pixels,
    })
}
